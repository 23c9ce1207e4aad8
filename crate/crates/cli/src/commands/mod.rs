//! Command implementations. Each command fills the metrics log and the
//! report of a [`Ctx`] and may save a model into the output directory.

mod mlc;
mod seq;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use spen_core::autodiff::Tensor;
use spen_core::data::{gen_hmm, gen_mlc, token_accuracy, write_conll, write_mlc, HmmSpec, MlcDataset, SeqDataset};
use spen_core::inference::viterbi;
use spen_core::nn::EmbeddingTable;
use spen_core::train::{FitOutcome, MetricsLog};

use crate::bundle::SeqModel;
use crate::config::{RunConfig, Task};
use crate::error::{CliError, CliResult};
use crate::model::ModelFile;
use crate::report::Report;
use crate::Command;

/// File names inside an output directory.
pub const METRICS_FILE: &str = "metrics.tsv";
pub const REPORT_FILE: &str = "report.tsv";
pub const MODEL_FILE: &str = "model.spen";
pub const PAIRWISE_FILE: &str = "pairwise.csv";

/// Epoch number used for evaluations after training finishes.
pub const FINAL_EPOCH: usize = 0;

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub out: PathBuf,
    pub log: MetricsLog,
    pub report: Report,
}

impl Ctx<'_> {
    /// Records a final metric in both the log and the report.
    pub fn metric(&mut self, split: &str, name: &str, value: f64) -> CliResult<()> {
        self.log.record(FINAL_EPOCH, split, name, value)?;
        self.report.add(split, name, value);
        Ok(())
    }

    pub fn fit(&mut self, section: &str, fit: &FitOutcome) {
        self.report.add(section, "epochs_run", fit.epochs_run);
        self.report.add(section, "best_epoch", fit.best_epoch);
        if let Some(m) = fit.best_metric {
            self.report.add(section, "best_dev_metric", m);
        }
        if let Some(l) = fit.train_loss.last() {
            self.report.add(section, "final_train_loss", l);
        }
    }

    pub fn save(&mut self, file: &ModelFile) -> CliResult<()> {
        let path = self.out.join(MODEL_FILE);
        file.write(&path)?;
        self.report.add("output", "model", path.display());
        Ok(())
    }

    fn finish(&mut self) -> CliResult<()> {
        self.log.end_epoch()?;
        Ok(())
    }
}

pub fn run(command: Command, ctx: &mut Ctx) -> CliResult<()> {
    let task = ctx.cfg.task;
    match (command, task) {
        (Command::GenSynth, Task::Seq) => gen_synth_seq(ctx)?,
        (Command::GenSynth, Task::Mlc) => gen_synth_mlc(ctx)?,
        (Command::ExportPairwise, Task::Seq) => export_pairwise(ctx)?,
        (Command::TrainCrf, Task::Seq) => seq::train_crf(ctx)?,
        (Command::TrainBlstm, Task::Seq) => seq::train_blstm(ctx)?,
        (Command::TrainTlm, Task::Seq) => seq::train_tlm(ctx)?,
        (Command::TrainSpen, Task::Seq) => seq::train_spen(ctx)?,
        (Command::Distill, Task::Seq) => seq::distill(ctx)?,
        (Command::Retune, Task::Seq) => seq::retune(ctx)?,
        (Command::Eval, Task::Seq) => seq::eval(ctx)?,
        (Command::Bench, Task::Seq) => seq::bench(ctx)?,
        (Command::TrainSpen, Task::Mlc) => mlc::train_spen(ctx)?,
        (Command::Retune, Task::Mlc) => mlc::retune(ctx)?,
        (Command::Eval, Task::Mlc) => mlc::eval(ctx)?,
        (c, Task::Mlc) => {
            return Err(CliError::Config(format!("task: {} needs task = seq", c.name())));
        }
    }
    ctx.finish()
}

/// Loads the sequence model named by `data.model`.
pub(crate) fn load_seq_model(cfg: &RunConfig) -> CliResult<SeqModel> {
    let path = cfg.require("data.model", &cfg.data.model)?;
    SeqModel::from_file(&ModelFile::read(path)?)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// One-hot embeddings for a closed vocabulary.
fn one_hot_embeddings(tokens: Vec<String>) -> CliResult<EmbeddingTable> {
    let n = tokens.len();
    let rows = (0..n)
        .map(|i| {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            r
        })
        .collect();
    Ok(EmbeddingTable::from_rows(tokens, rows)?)
}

fn format_hmm(spec: &HmmSpec) -> String {
    let row = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join("\t");
    let mut s = String::new();
    writeln!(s, "states\t{}", spec.tag_names().join("\t")).unwrap();
    writeln!(s, "symbols\t{}", spec.symbol_names().join("\t")).unwrap();
    writeln!(s, "initial\t{}", row(&spec.initial)).unwrap();
    for (i, r) in spec.transitions.iter().enumerate() {
        writeln!(s, "transition\t{i}\t{}", row(r)).unwrap();
    }
    for (i, r) in spec.emissions.iter().enumerate() {
        writeln!(s, "emission\t{i}\t{}", row(r)).unwrap();
    }
    s
}

/// Token accuracy of exact Viterbi decoding under the generating model.
fn hmm_oracle_accuracy(spec: &HmmSpec, ds: &SeqDataset) -> CliResult<f64> {
    let l = spec.num_states;
    let symbols = spec.symbol_names();
    let transitions = Tensor::from_rows(l, l, spec.transitions.iter().flatten().map(|p| p.ln()).collect());
    let mut pred = Vec::with_capacity(ds.len());
    for s in &ds.sentences {
        let mut u = Tensor::zeros(s.tokens.len(), l);
        for (t, tok) in s.tokens.iter().enumerate() {
            let k = symbols.iter().position(|w| w == tok).expect("generated token");
            for i in 0..l {
                let start = if t == 0 { spec.initial[i].ln() } else { 0.0 };
                u.set(t, i, spec.emissions[i][k].ln() + start);
            }
        }
        pred.push(viterbi(&u, &transitions)?.0);
    }
    Ok(token_accuracy(&pred, &ds.tag_ids()?)?)
}

/// Stream index of split `k`, derived from the run seed.
fn split_stream(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(4).wrapping_add(k + 1)
}

fn gen_synth_seq(ctx: &mut Ctx) -> CliResult<()> {
    let s = &ctx.cfg.synth;
    let spec = HmmSpec::sparse_random(s.states, s.symbols, s.spec_seed)?;
    let splits = [("train", s.train), ("dev", s.dev), ("test", s.test)];
    for (k, (name, n)) in splits.into_iter().enumerate() {
        if n == 0 {
            continue;
        }
        let ds = gen_hmm(&spec, n, (s.min_len, s.max_len), split_stream(ctx.cfg.seed, k as u64))?;
        let path = ctx.out.join(format!("{name}.conll"));
        write_conll(&path, &ds)?;
        ctx.report.add("output", name, path.display());
        ctx.metric(name, "sentences", ds.len() as f64)?;
        ctx.metric(name, "tokens", ds.num_tokens() as f64)?;
        ctx.metric(name, "oracle_accuracy", hmm_oracle_accuracy(&spec, &ds)?)?;
    }
    let emb = ctx.out.join("embeddings.txt");
    one_hot_embeddings(spec.symbol_names())?.write(&emb)?;
    ctx.report.add("output", "embeddings", emb.display());
    let hmm = ctx.out.join("hmm.tsv");
    write_text(&hmm, &format_hmm(&spec))?;
    ctx.report.add("output", "hmm", hmm.display());
    Ok(())
}

fn gen_synth_mlc(ctx: &mut Ctx) -> CliResult<()> {
    let s = &ctx.cfg.synth;
    let all = gen_mlc(s.labels, s.features, s.train + s.dev + s.test, ctx.cfg.seed)?;
    let mut rest = all.examples.into_iter();
    for (name, n) in [("train", s.train), ("dev", s.dev), ("test", s.test)] {
        if n == 0 {
            continue;
        }
        let ds = MlcDataset {
            num_labels: all.num_labels,
            num_features: all.num_features,
            examples: rest.by_ref().take(n).collect(),
        };
        let path = ctx.out.join(format!("{name}.mlc"));
        write_mlc(&path, &ds)?;
        ctx.report.add("output", name, path.display());
        ctx.metric(name, "examples", ds.len() as f64)?;
        let mean = ds.examples.iter().map(|e| e.labels.len()).sum::<usize>() as f64 / ds.len() as f64;
        ctx.metric(name, "mean_labels", mean)?;
    }
    Ok(())
}

/// The transition matrix of a chain energy as CSV with tag names on the
/// first row and column.
pub fn pairwise_csv(model: &SeqModel) -> CliResult<String> {
    let w = crate::bundle::transitions(model)?;
    let names = model.tags.names();
    let mut s = String::new();
    writeln!(s, ",{}", names.join(",")).unwrap();
    for (i, name) in names.iter().enumerate() {
        let row: Vec<String> = w.row(i).iter().map(f64::to_string).collect();
        writeln!(s, "{name},{}", row.join(",")).unwrap();
    }
    Ok(s)
}

fn export_pairwise(ctx: &mut Ctx) -> CliResult<()> {
    let model = load_seq_model(ctx.cfg)?;
    let path = ctx.out.join(PAIRWISE_FILE);
    write_text(&path, &pairwise_csv(&model)?)?;
    ctx.report.add("output", "pairwise", path.display());
    ctx.report.add("pairwise", "labels", model.num_labels());
    Ok(())
}

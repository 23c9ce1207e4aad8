use std::hint::black_box;
use std::time::Instant;

use spen_core::autodiff::{ParamStore, Tensor};
use spen_core::data::{auto_tag, chunk_f1, read_conll, token_accuracy, SeqDataset, SeqExample, TagSet};
use spen_core::energy::ChainEnergy;
use spen_core::inference::{InferenceNetwork, Role};
use spen_core::nn::TagLm;
use spen_core::rng_from_seed;
use spen_core::train::{
    minimax_train, network_decode, perplexity, retune as retune_psi, train_crf as fit_crf, train_tag_lm,
    train_tagger, viterbi_decode, FixedEnergyInputs, SeqRetune, SeqSpenTask, Stabilizer,
};

use super::{load_seq_model, Ctx};
use crate::bundle::{EnergyPart, LmPart, NetPart, SeqModel};
use crate::config::{Decoder, RunConfig};
use crate::error::{CliError, CliResult};
use crate::inputs::{encode_tokens, read_embeddings, read_tagged, read_tokens};
use crate::model::ModelFile;

/// A labeled split read with the model's tag set.
struct Split {
    name: &'static str,
    ds: SeqDataset,
    examples: Vec<SeqExample>,
}

fn split(cfg: &RunConfig, name: &'static str, model: &SeqModel) -> CliResult<Option<Split>> {
    let path = match name {
        "train" => &cfg.data.train,
        "dev" => &cfg.data.dev,
        _ => &cfg.data.test,
    };
    let Some(path) = path else { return Ok(None) };
    let (ds, examples) = read_tagged(path, Some(&model.tags), model.emb()?)?;
    Ok(Some(Split { name, ds, examples }))
}

fn required(cfg: &RunConfig, name: &'static str, model: &SeqModel) -> CliResult<Split> {
    split(cfg, name, model)?.ok_or_else(|| CliError::Config(format!("data.{name} must be set for this command")))
}

/// A fresh model whose tags come from the training split and whose
/// embeddings come from `data.embeddings`.
fn fresh_model(cfg: &RunConfig) -> CliResult<SeqModel> {
    let train = cfg.require("data.train", &cfg.data.train)?;
    let emb = read_embeddings(cfg.require("data.embeddings", &cfg.data.embeddings)?)?;
    let tags = read_conll(train, None)?.tags;
    Ok(SeqModel::new(tags, Some(emb), cfg.seed))
}

enum SeqDecoder<'a> {
    Viterbi(&'a ChainEnergy, &'a ParamStore),
    Net(&'a InferenceNetwork, &'a ParamStore),
}

impl SeqDecoder<'_> {
    fn decode(&self, x: &Tensor) -> CliResult<Vec<usize>> {
        Ok(match self {
            Self::Viterbi(c, s) => viterbi_decode(c, s, x)?,
            Self::Net(n, s) => network_decode(n, s, x)?,
        })
    }
}

fn viterbi_of(model: &SeqModel) -> CliResult<SeqDecoder<'_>> {
    let e = model.energy()?;
    Ok(SeqDecoder::Viterbi(&e.chain, &e.store))
}

fn pick_decoder(model: &SeqModel, choice: Decoder) -> CliResult<(&'static str, SeqDecoder<'_>)> {
    let net = || {
        model
            .decoder_net()
            .map(|(name, p)| (name, SeqDecoder::Net(&p.net, &p.store)))
    };
    match choice {
        Decoder::Viterbi => Ok(("viterbi", viterbi_of(model)?)),
        Decoder::Infnet => net().ok_or_else(|| CliError::Config("eval.decoder: model has no inference network".into())),
        Decoder::Auto => match net() {
            Some(d) => Ok(d),
            None => Ok(("viterbi", viterbi_of(model)?)),
        },
    }
}

/// Tag sets whose every tag is `O` or carries a chunk prefix.
fn chunked(tags: &TagSet) -> bool {
    tags.names().iter().all(|t| {
        t == "O" || ["B-", "I-", "E-", "S-"].iter().any(|p| t.len() > 2 && t.starts_with(p))
    })
}

/// Token accuracy (and chunk F1 for chunk tag sets) of `decoder` on a split.
fn evaluate(ctx: &mut Ctx, model: &SeqModel, decoder: &SeqDecoder, label: &str, split: &Split) -> CliResult<f64> {
    let pred = split
        .examples
        .iter()
        .map(|ex| decoder.decode(&ex.x))
        .collect::<CliResult<Vec<_>>>()?;
    let gold: Vec<Vec<usize>> = split.examples.iter().map(|ex| ex.tags.clone()).collect();
    let acc = token_accuracy(&pred, &gold)?;
    let section = format!("{}.{label}", split.name);
    ctx.metric(&section, "accuracy", acc)?;
    if chunked(&model.tags) {
        let names = |v: &[Vec<usize>]| v.iter().map(|s| model.tags.decode(s)).collect::<Vec<_>>();
        let scores = chunk_f1(&names(&pred), &names(&gold))?;
        ctx.metric(&section, "chunk_f1", scores.f1)?;
    }
    debug_assert_eq!(split.ds.len(), split.examples.len());
    Ok(acc)
}

/// Evaluates on whichever of dev and test are configured.
fn evaluate_splits(ctx: &mut Ctx, model: &SeqModel, choice: Decoder) -> CliResult<()> {
    let (label, decoder) = pick_decoder(model, choice)?;
    for name in ["dev", "test"] {
        if let Some(s) = split(ctx.cfg, name, model)? {
            evaluate(ctx, model, &decoder, label, &s)?;
        }
    }
    Ok(())
}

pub(super) fn train_crf(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let mut model = fresh_model(cfg)?;
    let train = required(cfg, "train", &model)?;
    let dev = split(cfg, "dev", &model)?.map(|s| s.examples).unwrap_or_default();
    let mut store = ParamStore::new();
    let hidden = cfg.model.energy_hidden;
    let dim = model.emb()?.dim();
    let chain = ChainEnergy::new(&mut store, dim, hidden, model.num_labels(), &mut rng_from_seed(cfg.seed))?;
    let fit = fit_crf(&chain, &mut store, &train.examples, &dev, &cfg.loop_plan(), &mut ctx.log)?;
    ctx.fit("crf", &fit);
    model.energy = Some(EnergyPart { chain, store, hidden });
    evaluate_splits(ctx, &model, Decoder::Viterbi)?;
    ctx.save(&model.to_file())
}

pub(super) fn train_blstm(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let mut model = fresh_model(cfg)?;
    let train = required(cfg, "train", &model)?;
    let dev = split(cfg, "dev", &model)?.map(|s| s.examples).unwrap_or_default();
    let dim = model.emb()?.dim();
    let mut part = NetPart::seq(Role::TestTime, dim, cfg.model.tagger_hidden, model.num_labels(), cfg.seed)?;
    let fit = train_tagger(&part.net, &mut part.store, &train.examples, &dev, &cfg.loop_plan(), &mut ctx.log)?;
    ctx.fit("tagger", &fit);
    model.tagger = Some(part);
    evaluate_splits(ctx, &model, Decoder::Infnet)?;
    ctx.save(&model.to_file())
}

/// Tag sequences for LM training: the model's predictions on unlabeled or
/// training inputs when a model is given, else the gold training tags.
fn lm_corpus(cfg: &RunConfig, base: Option<&SeqModel>, tags: &TagSet) -> CliResult<(Vec<Vec<usize>>, &'static str)> {
    let Some(model) = base else {
        let path = cfg.require("data.train", &cfg.data.train)?;
        return Ok((read_conll(path, Some(tags))?.tag_ids()?, "gold"));
    };
    let inputs = match &cfg.data.unlabeled {
        Some(p) => encode_tokens(&read_tokens(p)?, model.emb()?)?,
        None => required(cfg, "train", model)?.examples.into_iter().map(|ex| ex.x).collect(),
    };
    let (label, decoder) = pick_decoder(model, Decoder::Auto)?;
    let tagged = auto_tag(|x| decoder.decode(x).map_err(|e| spen_core::Error::Invalid(e.to_string())), &inputs)?;
    Ok((tagged, label))
}

pub(super) fn train_tlm(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let base = cfg.data.model.as_ref().map(|_| load_seq_model(cfg)).transpose()?;
    let tags = match &base {
        Some(m) => m.tags.clone(),
        None => read_conll(cfg.require("data.train", &cfg.data.train)?, None)?.tags,
    };
    let (corpus, source) = lm_corpus(cfg, base.as_ref(), &tags)?;
    ctx.report.add("tlm", "corpus", source);
    ctx.report.add("tlm", "sequences", corpus.len());
    let heldout = match &cfg.data.dev {
        Some(p) => read_conll(p, Some(&tags))?.tag_ids()?,
        None => Vec::new(),
    };
    let mut store = ParamStore::new();
    let m = &cfg.model;
    let lm = TagLm::new(&mut store, "lm", tags.len(), m.tlm_hidden, m.tlm_layers, &mut rng_from_seed(cfg.seed))?;
    let out = train_tag_lm(&lm, &mut store, &corpus, &heldout, &cfg.loop_plan(), cfg.train.dropout, &mut ctx.log)?;
    ctx.fit("tlm", &out.fit);
    ctx.metric("train", "perplexity", perplexity(&lm, &store, &corpus)?)?;
    if let Some(p) = out.heldout_perplexity {
        ctx.metric("dev", "perplexity", p)?;
    }
    let mut model = base.unwrap_or_else(|| SeqModel::new(tags, None, cfg.seed));
    model.lm = Some(LmPart { lm, store });
    model.tlm_weight = cfg.model.tlm_weight;
    ctx.save(&model.to_file())
}

/// Attaches the tag LM from `data.tlm_model` when the joint energy is on.
fn attach_lm(cfg: &RunConfig, model: &mut SeqModel) -> CliResult<()> {
    model.tlm_weight = cfg.model.tlm_weight;
    if let Some(path) = &cfg.data.tlm_model {
        let donor = SeqModel::from_file(&ModelFile::read(path)?)?;
        if donor.tags != model.tags {
            return Err(CliError::Config("data.tlm_model: tag set differs from the training data".into()));
        }
        model.lm = Some(donor.lm.ok_or_else(|| CliError::Config("data.tlm_model: file holds no tag LM".into()))?);
    }
    if model.tlm_weight != 0.0 && model.lm.is_none() {
        return Err(CliError::Config("model.tlm_weight is nonzero but no tag LM is available (set data.tlm_model)".into()));
    }
    if model.tlm_weight == 0.0 {
        model.lm = None;
    }
    Ok(())
}

pub(super) fn train_spen(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let mut model = match &cfg.data.model {
        Some(_) => load_seq_model(cfg)?,
        None => fresh_model(cfg)?,
    };
    model.seed = cfg.seed;
    attach_lm(cfg, &mut model)?;
    let train = required(cfg, "train", &model)?;
    let dev = required(cfg, "dev", &model)?;
    let l = model.num_labels();
    let dim = model.emb()?.dim();
    if model.energy.is_none() {
        let mut store = ParamStore::new();
        let hidden = cfg.model.energy_hidden;
        let chain = ChainEnergy::new(&mut store, dim, hidden, l, &mut rng_from_seed(cfg.seed))?;
        model.energy = Some(EnergyPart { chain, store, hidden });
    }
    let pretrained = model.tagger.clone().filter(|_| cfg.model.pretrained_phi);
    let mut phi = match &pretrained {
        Some(t) => t.with_role(Role::CostAugmented),
        None => NetPart::seq(Role::CostAugmented, dim, cfg.model.infnet_hidden, l, cfg.seed.wrapping_add(1))?,
    };
    ctx.report.add("spen", "phi_init", if pretrained.is_some() { "tagger" } else { "random" });
    let energy = model.sequence_energy()?;
    let mut theta = model.energy()?.store.clone();
    let plan = cfg.train_plan();
    let anchor = pretrained.as_ref().map(|t| &t.store);
    let task = SeqSpenTask::new(&energy, &phi.net, &train.examples, &dev.examples, &plan, anchor)?;
    let out = minimax_train(&task, &plan, &mut theta, &mut phi.store, &mut ctx.log)?;
    ctx.report.add("spen", "epochs_run", out.epochs_run);
    ctx.report.add("spen", "best_epoch", out.best_epoch);
    ctx.report.add("spen", "best_dev_accuracy", out.best_metric);
    model.energy.as_mut().unwrap().store = theta;
    model.psi = Some(phi.with_role(Role::TestTime));
    model.phi = Some(phi);
    evaluate_splits(ctx, &model, Decoder::Infnet)?;
    evaluate_splits(ctx, &model, Decoder::Viterbi)?;
    ctx.save(&model.to_file())
}

pub(super) fn distill(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let mut model = load_seq_model(cfg)?;
    attach_lm(cfg, &mut model)?;
    let train = required(cfg, "train", &model)?;
    let dev = required(cfg, "dev", &model)?;
    let energy = model.sequence_energy()?;
    let stabilizer = cfg.stabilizer();
    let (mut student, anchor) = match stabilizer {
        Stabilizer::AnchorL2(_) => {
            let t = model
                .tagger
                .clone()
                .ok_or_else(|| CliError::Config("distill.stabilizer: anchor needs a model with a tagger".into()))?;
            (t.with_role(Role::TestTime), Some(t.store))
        }
        _ => {
            let dim = model.emb()?.dim();
            (NetPart::seq(Role::TestTime, dim, cfg.model.infnet_hidden, model.num_labels(), cfg.seed)?, None)
        }
    };
    let theta = &model.energy()?.store;
    let out = spen_core::train::distill(
        &energy,
        theta,
        &student.net,
        &mut student.store,
        anchor.as_ref(),
        stabilizer,
        &train.examples,
        &dev.examples,
        &cfg.loop_plan(),
        &mut ctx.log,
    )?;
    ctx.fit("distill", &out.fit);
    model.psi = Some(student);
    evaluate_splits(ctx, &model, Decoder::Infnet)?;
    evaluate_splits(ctx, &model, Decoder::Viterbi)?;
    ctx.save(&model.to_file())
}

/// Inputs Ψ is retuned on: `data.unlabeled`, else the dev inputs.
fn retune_inputs(cfg: &RunConfig, model: &SeqModel) -> CliResult<(Vec<Tensor>, &'static str)> {
    if let Some(p) = &cfg.data.unlabeled {
        return Ok((encode_tokens(&read_tokens(p)?, model.emb()?)?, "unlabeled"));
    }
    match split(cfg, "dev", model)? {
        Some(s) => Ok((s.examples.into_iter().map(|ex| ex.x).collect(), "dev")),
        None => Err(CliError::Config("data.unlabeled or data.dev must be set for retune".into())),
    }
}

pub(super) fn retune(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let mut model = load_seq_model(cfg)?;
    let mut psi = match (&model.psi, &model.phi) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p.with_role(Role::TestTime),
        _ => return Err(CliError::Config("data.model: retune needs a model with an inference network".into())),
    };
    let energy = model.sequence_energy()?;
    let (inputs, source) = retune_inputs(cfg, &model)?;
    ctx.report.add("retune", "inputs", source);
    ctx.report.add("retune", "num_inputs", inputs.len());
    let cached = FixedEnergyInputs::new(&energy, &model.energy()?.store, inputs)?;
    let task = SeqRetune {
        energy: &energy,
        net: &psi.net,
        cached: &cached,
    };
    let out = retune_psi(&task, &cfg.retune_plan(), &model.energy()?.store, &mut psi.store, &mut ctx.log)?;
    ctx.metric("retune", "initial_energy", out.initial_energy)?;
    ctx.metric("retune", "final_energy", out.final_energy)?;
    ctx.report.add("retune", "reverted", out.reverted);
    ctx.report.add("retune", "epochs_run", out.epochs_run);
    model.psi = Some(psi);
    evaluate_splits(ctx, &model, Decoder::Infnet)?;
    ctx.save(&model.to_file())
}

pub(super) fn eval(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    if cfg.data.dev.is_none() && cfg.data.test.is_none() {
        return Err(CliError::Config("data.dev or data.test must be set for eval".into()));
    }
    let model = load_seq_model(cfg)?;
    let (label, _) = pick_decoder(&model, cfg.eval.decoder)?;
    ctx.report.add("eval", "decoder", label);
    evaluate_splits(ctx, &model, cfg.eval.decoder)
}

/// Seconds for one pass of `decode` over `xs`, grouped into batches.
fn time_pass(xs: &[Tensor], batch: usize, decoder: &SeqDecoder) -> CliResult<f64> {
    let start = Instant::now();
    for group in xs.chunks(batch) {
        for x in group {
            black_box(decoder.decode(black_box(x))?);
        }
    }
    Ok(start.elapsed().as_secs_f64())
}

pub(super) fn bench(ctx: &mut Ctx) -> CliResult<()> {
    let cfg = ctx.cfg;
    let model = load_seq_model(cfg)?;
    let name = if cfg.data.test.is_some() { "test" } else { "dev" };
    let data = split(cfg, name, &model)?
        .ok_or_else(|| CliError::Config("data.test or data.dev must be set for bench".into()))?;
    let viterbi = viterbi_of(&model)?;
    let (net_name, net) = pick_decoder(&model, Decoder::Infnet)?;
    let b = &cfg.bench;
    if b.batch_size == 0 || b.repeats == 0 {
        return Err(CliError::Config("bench.batch_size and bench.repeats must be positive".into()));
    }
    // Accuracies go to the metrics log; timings only to the report.
    let vit_acc = evaluate(ctx, &model, &viterbi, "viterbi", &data)?;
    let net_acc = evaluate(ctx, &model, &net, net_name, &data)?;
    let xs: Vec<Tensor> = data.examples.iter().map(|ex| ex.x.clone()).collect();
    let (mut vit, mut inf) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..b.repeats {
        vit = vit.min(time_pass(&xs, b.batch_size, &viterbi)?);
        inf = inf.min(time_pass(&xs, b.batch_size, &net)?);
    }
    let n = xs.len() as f64;
    let r = &mut ctx.report;
    r.add("bench", "split", name);
    r.add("bench", "sentences", xs.len());
    r.add("bench", "tokens", xs.iter().map(Tensor::rows).sum::<usize>());
    r.add("bench", "batch_size", b.batch_size);
    r.add("bench", "repeats", b.repeats);
    r.add(
        "bench",
        "measured_region",
        "decoding of pre-encoded inputs only; model loading, file reading and embedding lookup excluded; best of repeats",
    );
    r.add("bench", "viterbi_accuracy", vit_acc);
    r.add("bench", "infnet_accuracy", net_acc);
    r.add("bench", "viterbi_examples_per_sec", n / vit);
    r.add("bench", "infnet_examples_per_sec", n / inf);
    r.add("bench", "speedup", vit / inf);
    Ok(())
}

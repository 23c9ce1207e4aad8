//! Line-oriented run configuration.
//!
//! ```text
//! seed = 3
//! task = seq
//!
//! [data]
//! train = runs/synth/train.conll
//!
//! [train]
//! hinge = margin-rescaled
//! ```
//!
//! Keys inside a section are addressed as `section.key` by `--override`.
//! `#` starts a comment. Unknown keys and sections are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use spen_core::autodiff::OptimizerConfig;
use spen_core::train::{CostKind, HingeKind, LoopPlan, StabilizerWeights, Stabilizer, TrainPlan};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SPEN_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Seq,
    Mlc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StabilizerChoice {
    CrossEntropy,
    Entropy,
    Anchor,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Auto,
    Viterbi,
    Infnet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub unlabeled: Option<PathBuf>,
    /// Model file read by commands that start from a trained model.
    pub model: Option<PathBuf>,
    /// Tag-LM model file for the joint energy.
    pub tlm_model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub energy_hidden: usize,
    pub infnet_hidden: usize,
    pub tagger_hidden: usize,
    /// Hidden widths of the multi-label feature network.
    pub mlc_hidden: Vec<usize>,
    pub energy_interactions: usize,
    pub tlm_hidden: usize,
    pub tlm_layers: usize,
    pub tlm_weight: f64,
    /// Initialize Φ from the pretrained network when one is available.
    pub pretrained_phi: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub hinge: HingeKind,
    /// `None` picks squared L2 for multi-label and L1 for sequences.
    pub cost: Option<CostKind>,
    pub per_token_cost: bool,
    pub optimizer: OptimizerChoice,
    pub lr: f64,
    pub theta_lr: Option<f64>,
    pub phi_lr: Option<f64>,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Weight decay for baseline trainers.
    pub l2: f64,
    pub phi_l2: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
    pub anchor: f64,
    pub energy_l2: f64,
    pub dropout: f64,
    pub clip_norm: Option<f64>,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub stabilizer: StabilizerChoice,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub batch_size: usize,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub decoder: Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub states: usize,
    pub symbols: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub spec_seed: u64,
    pub labels: usize,
    pub features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub retune: RetuneConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: Task::Seq,
            output_dir: None,
            data: DataConfig {
                train: None,
                dev: None,
                test: None,
                embeddings: None,
                unlabeled: None,
                model: None,
                tlm_model: None,
            },
            model: ModelConfig {
                energy_hidden: 32,
                infnet_hidden: 8,
                tagger_hidden: 32,
                mlc_hidden: vec![150, 150],
                energy_interactions: 15,
                tlm_hidden: 50,
                tlm_layers: 1,
                tlm_weight: 0.0,
                pretrained_phi: true,
            },
            train: TrainConfig {
                hinge: HingeKind::MarginRescaled,
                cost: None,
                per_token_cost: false,
                optimizer: OptimizerChoice::Adam,
                lr: 1e-3,
                theta_lr: None,
                phi_lr: None,
                momentum: 0.9,
                batch_size: 32,
                epochs: 100,
                patience: 10,
                l2: 0.0,
                phi_l2: 0.0,
                entropy: 0.0,
                cross_entropy: 0.0,
                anchor: 0.0,
                energy_l2: 0.0,
                dropout: 0.5,
                clip_norm: None,
                pretrain_epochs: 10,
                pretrain_lr: 1e-3,
            },
            distill: DistillConfig {
                stabilizer: StabilizerChoice::CrossEntropy,
                weight: 1.0,
            },
            retune: RetuneConfig {
                epochs: 20,
                lr: 1e-5,
                batch_size: 32,
            },
            bench: BenchConfig {
                batch_size: 32,
                repeats: 3,
            },
            eval: EvalConfig { decoder: Decoder::Auto },
            synth: SynthConfig {
                states: 8,
                symbols: 50,
                train: 5000,
                dev: 1000,
                test: 1000,
                min_len: 10,
                max_len: 30,
                spec_seed: 7,
                labels: 20,
                features: 100,
            },
        }
    }
}

fn bad(key: &str, value: &str, expected: impl fmt::Display) -> CliError {
    CliError::Config(format!("{key}: cannot parse {value:?} as {expected}"))
}

fn num<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value.parse().map_err(|_| bad(key, value, std::any::type_name::<T>()))
}

fn float(key: &str, value: &str) -> CliResult<f64> {
    let v: f64 = num(key, value)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, value, "a finite number"))
    }
}

fn boolean(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, value, "a boolean")),
    }
}

fn optional<T>(value: &str, f: impl FnOnce(&str) -> CliResult<T>) -> CliResult<Option<T>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        f(value).map(Some)
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        let mut section = String::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| CliError::Config(format!("{origin}:{}: {msg}", k + 1));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(format!("unterminated section header {line:?}")))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(at(format!("unknown section [{name}]")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected `key = value`, found {line:?}")))?;
            let key = key.trim();
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            self.set(&full, value.trim()).map_err(|e| match e {
                CliError::Config(m) => at(m),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> CliResult<()> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {spec:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> CliResult<()> {
        let d = &mut self.data;
        let m = &mut self.model;
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            "seed" => self.seed = num(key, v)?,
            "task" => {
                self.task = match v {
                    "seq" => Task::Seq,
                    "mlc" => Task::Mlc,
                    _ => return Err(bad(key, v, "one of seq, mlc")),
                }
            }
            "output_dir" => self.output_dir = path(v),
            "data.train" => d.train = path(v),
            "data.dev" => d.dev = path(v),
            "data.test" => d.test = path(v),
            "data.embeddings" => d.embeddings = path(v),
            "data.unlabeled" => d.unlabeled = path(v),
            "data.model" => d.model = path(v),
            "data.tlm_model" => d.tlm_model = path(v),
            "model.energy_hidden" => m.energy_hidden = num(key, v)?,
            "model.infnet_hidden" => m.infnet_hidden = num(key, v)?,
            "model.tagger_hidden" => m.tagger_hidden = num(key, v)?,
            "model.mlc_hidden" => {
                m.mlc_hidden = v
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<CliResult<Vec<usize>>>()?
            }
            "model.energy_interactions" => m.energy_interactions = num(key, v)?,
            "model.tlm_hidden" => m.tlm_hidden = num(key, v)?,
            "model.tlm_layers" => m.tlm_layers = num(key, v)?,
            "model.tlm_weight" => m.tlm_weight = float(key, v)?,
            "model.pretrained_phi" => m.pretrained_phi = boolean(key, v)?,
            "train.hinge" => t.hinge = HingeKind::parse(v).ok_or_else(|| bad(key, v, "a hinge kind"))?,
            "train.cost" => t.cost = optional(v, |x| CostKind::parse(x).ok_or_else(|| bad(key, v, "a cost kind")))?,
            "train.per_token_cost" => t.per_token_cost = boolean(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "adam" => OptimizerChoice::Adam,
                    "sgd" => OptimizerChoice::Sgd,
                    _ => return Err(bad(key, v, "one of adam, sgd")),
                }
            }
            "train.lr" => t.lr = float(key, v)?,
            "train.theta_lr" => t.theta_lr = optional(v, |x| float(key, x))?,
            "train.phi_lr" => t.phi_lr = optional(v, |x| float(key, x))?,
            "train.momentum" => t.momentum = float(key, v)?,
            "train.batch_size" => t.batch_size = num(key, v)?,
            "train.epochs" => t.epochs = num(key, v)?,
            "train.patience" => t.patience = num(key, v)?,
            "train.l2" => t.l2 = float(key, v)?,
            "train.phi_l2" => t.phi_l2 = float(key, v)?,
            "train.entropy" => t.entropy = float(key, v)?,
            "train.cross_entropy" => t.cross_entropy = float(key, v)?,
            "train.anchor" => t.anchor = float(key, v)?,
            "train.energy_l2" => t.energy_l2 = float(key, v)?,
            "train.dropout" => t.dropout = float(key, v)?,
            "train.clip_norm" => t.clip_norm = optional(v, |x| float(key, x))?,
            "train.pretrain_epochs" => t.pretrain_epochs = num(key, v)?,
            "train.pretrain_lr" => t.pretrain_lr = float(key, v)?,
            "distill.stabilizer" => {
                self.distill.stabilizer = match v {
                    "cross-entropy" => StabilizerChoice::CrossEntropy,
                    "entropy" => StabilizerChoice::Entropy,
                    "anchor" => StabilizerChoice::Anchor,
                    "none" => StabilizerChoice::None,
                    _ => return Err(bad(key, v, "one of cross-entropy, entropy, anchor, none")),
                }
            }
            "distill.weight" => self.distill.weight = float(key, v)?,
            "retune.epochs" => self.retune.epochs = num(key, v)?,
            "retune.lr" => self.retune.lr = float(key, v)?,
            "retune.batch_size" => self.retune.batch_size = num(key, v)?,
            "bench.batch_size" => self.bench.batch_size = num(key, v)?,
            "bench.repeats" => self.bench.repeats = num(key, v)?,
            "eval.decoder" => {
                self.eval.decoder = match v {
                    "auto" => Decoder::Auto,
                    "viterbi" => Decoder::Viterbi,
                    "infnet" => Decoder::Infnet,
                    _ => return Err(bad(key, v, "one of auto, viterbi, infnet")),
                }
            }
            "synth.states" => s.states = num(key, v)?,
            "synth.symbols" => s.symbols = num(key, v)?,
            "synth.train" => s.train = num(key, v)?,
            "synth.dev" => s.dev = num(key, v)?,
            "synth.test" => s.test = num(key, v)?,
            "synth.min_len" => s.min_len = num(key, v)?,
            "synth.max_len" => s.max_len = num(key, v)?,
            "synth.spec_seed" => s.spec_seed = num(key, v)?,
            "synth.labels" => s.labels = num(key, v)?,
            "synth.features" => s.features = num(key, v)?,
            _ => return Err(CliError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Output directory: the configured one, else `$SPEN_OUTPUT_ROOT/<command>`,
    /// else `runs/<command>`.
    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join(command)
    }

    /// Every configured input path must exist.
    pub fn check_paths(&self) -> CliResult<()> {
        let d = &self.data;
        let all = [
            ("data.train", &d.train),
            ("data.dev", &d.dev),
            ("data.test", &d.test),
            ("data.embeddings", &d.embeddings),
            ("data.unlabeled", &d.unlabeled),
            ("data.model", &d.model),
            ("data.tlm_model", &d.tlm_model),
        ];
        for (key, p) in all {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// The path under `key`, or a config error naming the key.
    pub fn require<'a>(&self, key: &str, p: &'a Option<PathBuf>) -> CliResult<&'a Path> {
        p.as_deref()
            .ok_or_else(|| CliError::Config(format!("{key} must be set for this command")))
    }

    pub fn cost(&self) -> CostKind {
        self.train.cost.unwrap_or(match self.task {
            Task::Mlc => CostKind::SquaredL2,
            Task::Seq => CostKind::L1,
        })
    }

    fn optimizer(&self, lr: f64) -> OptimizerConfig {
        match self.train.optimizer {
            OptimizerChoice::Adam => OptimizerConfig::adam(lr),
            OptimizerChoice::Sgd => OptimizerConfig::sgd_momentum(lr, self.train.momentum),
        }
    }

    pub fn train_plan(&self) -> TrainPlan {
        let t = &self.train;
        TrainPlan {
            hinge: t.hinge,
            cost: self.cost(),
            per_token_cost: t.per_token_cost,
            weights: StabilizerWeights {
                l2: t.phi_l2,
                entropy: t.entropy,
                cross_entropy: t.cross_entropy,
                anchor: t.anchor,
                energy_l2: t.energy_l2,
            },
            theta_optimizer: self.optimizer(t.theta_lr.unwrap_or(t.lr)),
            phi_optimizer: self.optimizer(t.phi_lr.unwrap_or(t.lr)),
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            seed: self.seed,
        }
    }

    /// Plan for single-store trainers (baselines, distillation, tag LM).
    pub fn loop_plan(&self) -> LoopPlan {
        let t = &self.train;
        let mut p = LoopPlan::new(self.optimizer(t.lr), t.epochs, self.seed);
        p.batch_size = t.batch_size;
        p.l2 = t.l2;
        p.patience = Some(t.patience);
        p.clip_norm = t.clip_norm;
        p
    }

    pub fn pretrain_plan(&self) -> LoopPlan {
        let mut p = LoopPlan::new(OptimizerConfig::adam(self.train.pretrain_lr), self.train.pretrain_epochs, self.seed);
        p.batch_size = self.train.batch_size;
        p
    }

    pub fn retune_plan(&self) -> LoopPlan {
        let mut p = LoopPlan::new(OptimizerConfig::adam(self.retune.lr), self.retune.epochs, self.seed);
        p.batch_size = self.retune.batch_size;
        p
    }

    pub fn stabilizer(&self) -> Stabilizer {
        let w = self.distill.weight;
        match self.distill.stabilizer {
            StabilizerChoice::CrossEntropy => Stabilizer::CrossEntropy(w),
            StabilizerChoice::Entropy => Stabilizer::Entropy(w),
            StabilizerChoice::Anchor => Stabilizer::AnchorL2(w),
            StabilizerChoice::None => Stabilizer::None,
        }
    }
}

const SECTIONS: [&str; 8] = ["data", "model", "train", "distill", "retune", "bench", "eval", "synth"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let mut c = RunConfig::default();
        c.apply_text(
            "seed = 4 # run seed\ntask = mlc\n\n[train]\nhinge = contrastive\nphi_lr = 0.01\n[model]\nmlc_hidden = 20, 10\n",
            "t",
        )
        .unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.task, Task::Mlc);
        assert_eq!(c.train.hinge, HingeKind::Contrastive);
        assert_eq!(c.train.phi_lr, Some(0.01));
        assert_eq!(c.model.mlc_hidden, vec![20, 10]);
        assert_eq!(c.cost(), CostKind::SquaredL2);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let mut c = RunConfig::default();
        let e = c.apply_text("[train]\nlearning_rate = 1\n", "cfg").unwrap_err().to_string();
        assert!(e.contains("cfg:2") && e.contains("train.learning_rate"), "{e}");
        assert!(c.apply_text("[nope]\n", "cfg").is_err());
        assert!(c.apply_text("seed 3\n", "cfg").is_err());
        assert!(c.apply_override("train.epochs=x").is_err());
        assert!(c.apply_override("train.lr=NaN").is_err());
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut c = RunConfig::default();
        c.apply_text("[train]\nepochs = 5\n", "t").unwrap();
        c.apply_override("train.epochs = 7").unwrap();
        c.apply_override("train.cost=none").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.cost, None);
        assert_eq!(c.cost(), CostKind::L1);
    }

    #[test]
    fn missing_paths_name_their_key() {
        let mut c = RunConfig::default();
        c.apply_override("data.dev=/definitely/not/here").unwrap();
        let e = c.check_paths().unwrap_err().to_string();
        assert!(e.contains("data.dev"), "{e}");
    }
}

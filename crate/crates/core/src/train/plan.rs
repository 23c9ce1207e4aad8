use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;

use super::loss::{CostKind, HingeKind};
use crate::autodiff::{OptimizerConfig, Tensor};
use crate::error::{Error, Result};

/// Coefficients of the inference-network stabilizers and of the energy's
/// weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StabilizerWeights {
    /// `λ₁`: L2 on the inference network.
    pub l2: f64,
    /// `λ₂`: entropy; positive rewards high-entropy outputs, negative low.
    pub entropy: f64,
    /// `λ₃`: local cross entropy against gold labels.
    pub cross_entropy: f64,
    /// `λ₄`: squared distance to the pretrained network.
    pub anchor: f64,
    /// `λ`: L2 on the energy parameters.
    pub energy_l2: f64,
}

impl StabilizerWeights {
    pub const NONE: Self = Self {
        l2: 0.0,
        entropy: 0.0,
        cross_entropy: 0.0,
        anchor: 0.0,
        energy_l2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.l2, self.entropy, self.cross_entropy, self.anchor, self.energy_l2];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("stabilizer weights must be finite".into()));
        }
        for (name, v) in [
            ("l2", self.l2),
            ("cross_entropy", self.cross_entropy),
            ("anchor", self.anchor),
            ("energy_l2", self.energy_l2),
        ] {
            if v < 0.0 {
                return Err(Error::Invalid(format!("stabilizer weight {name} = {v} is negative")));
            }
        }
        Ok(())
    }
}

impl Default for StabilizerWeights {
    fn default() -> Self {
        Self::NONE
    }
}

/// Settings of one alternating minimax run. Every mini-batch updates one
/// player: even global batch indices update Φ, odd ones update Θ.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub hinge: HingeKind,
    pub cost: CostKind,
    /// Divide sequence costs by their length.
    pub per_token_cost: bool,
    pub weights: StabilizerWeights,
    pub theta_optimizer: OptimizerConfig,
    pub phi_optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without improvement of the dev metric before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            hinge: HingeKind::MarginRescaled,
            cost: CostKind::L1,
            per_token_cost: false,
            weights: StabilizerWeights::NONE,
            theta_optimizer: OptimizerConfig::adam(1e-3),
            phi_optimizer: OptimizerConfig::adam(1e-3),
            batch_size: 32,
            epochs: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        check_lr(self.theta_optimizer.learning_rate, "theta learning rate")?;
        check_lr(self.phi_optimizer.learning_rate, "phi learning rate")?;
        self.weights.validate()
    }
}

/// Settings for supervised and energy-minimizing training loops (local
/// pretraining, CRF, taggers, distillation, retuning, tag LM).
#[derive(Clone, Debug, PartialEq)]
pub struct LoopPlan {
    pub optimizer: OptimizerConfig,
    /// Weight decay coefficient added to the loss as `l2 * ||params||^2`.
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` trains for all epochs and keeps the last parameters.
    pub patience: Option<usize>,
    /// Rescales each batch gradient to this global L2 norm when larger.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl LoopPlan {
    pub fn new(optimizer: OptimizerConfig, epochs: usize, seed: u64) -> Self {
        Self {
            optimizer,
            l2: 0.0,
            batch_size: 32,
            epochs,
            patience: None,
            clip_norm: None,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::Invalid(format!("l2 = {} must be finite and nonnegative", self.l2)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Invalid(format!("clip_norm = {c} must be finite and positive")));
            }
        }
        check_lr(self.optimizer.learning_rate, "learning rate")
    }
}

fn check_lr(lr: f64, what: &str) -> Result<()> {
    if lr >= 0.0 && lr.is_finite() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} {lr} must be finite and nonnegative")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Stale,
    Stop,
}

/// Tracks the best value of a metric to maximize.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Strict improvements reset the patience counter.
    pub fn observe(&mut self, epoch: usize, value: f64) -> Verdict {
        match self.best {
            Some((_, b)) if value <= b || value.is_nan() => {
                self.stale += 1;
                match self.patience {
                    Some(p) if self.stale >= p => Verdict::Stop,
                    _ => Verdict::Stale,
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.stale = 0;
                Verdict::Improved
            }
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// `epoch<TAB>split<TAB>metric<TAB>value` lines, kept in memory and
/// optionally written through to a sink that is flushed once per epoch.
#[derive(Default)]
pub struct MetricsLog {
    sink: Option<Box<dyn Write>>,
    records: Vec<MetricRecord>,
}

impl std::fmt::Debug for MetricsLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MetricsLog").field("records", &self.records.len()).finish()
    }
}

impl MetricsLog {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn with_sink(sink: Box<dyn Write>) -> Self {
        Self {
            sink: Some(sink),
            records: Vec::new(),
        }
    }

    pub fn create(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::with_sink(Box::new(BufWriter::new(f))))
    }

    pub fn record(&mut self, epoch: usize, split: &str, metric: &str, value: f64) -> Result<()> {
        let rec = MetricRecord {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        };
        if let Some(s) = self.sink.as_mut() {
            writeln!(s, "{}", format_record(&rec)).map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn end_epoch(&mut self) -> Result<()> {
        if let Some(s) = self.sink.as_mut() {
            s.flush().map_err(|e| Error::io(Path::new("<metrics log>"), e))?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    /// Values of one `(split, metric)` series in epoch order.
    pub fn series(&self, split: &str, metric: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&format_record(r));
            out.push('\n');
        }
        out
    }
}

fn format_record(r: &MetricRecord) -> String {
    format!("{}\t{}\t{}\t{}", r.epoch, r.split, r.metric, r.value)
}

/// Shuffled example order for one epoch.
pub(crate) fn epoch_order<R: rand::Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Rows `idx` of `t`, in that order.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_rows(idx.len(), c, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_patience() {
        let mut es = EarlyStopping::new(Some(2));
        assert_eq!(es.observe(1, 0.5), Verdict::Improved);
        assert_eq!(es.observe(2, 0.5), Verdict::Stale);
        assert_eq!(es.observe(3, 0.7), Verdict::Improved);
        assert_eq!(es.observe(4, 0.1), Verdict::Stale);
        assert_eq!(es.observe(5, 0.2), Verdict::Stop);
        assert_eq!(es.best(), Some((3, 0.7)));
        let mut forever = EarlyStopping::new(None);
        forever.observe(1, 1.0);
        for e in 2..50 {
            assert_eq!(forever.observe(e, 0.0), Verdict::Stale);
        }
    }

    #[test]
    fn log_lines() {
        let mut log = MetricsLog::memory();
        log.record(1, "dev", "accuracy", 0.25).unwrap();
        log.record(2, "train", "loss", 1.0 / 3.0).unwrap();
        assert_eq!(log.to_tsv(), "1\tdev\taccuracy\t0.25\n2\ttrain\tloss\t0.3333333333333333\n");
        assert_eq!(log.series("dev", "accuracy"), vec![0.25]);
    }

    #[test]
    fn plan_validation() {
        assert!(TrainPlan::default().validate().is_ok());
        let mut p = TrainPlan::default();
        p.weights.entropy = -1.0;
        assert!(p.validate().is_ok());
        p.weights.anchor = -1.0;
        assert!(p.validate().is_err());
        let mut p = TrainPlan::default();
        p.batch_size = 0;
        assert!(p.validate().is_err());
    }
}

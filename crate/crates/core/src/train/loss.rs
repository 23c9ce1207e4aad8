use super::plan::StabilizerWeights;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::inference::{DiscreteLabeling, RelaxedOutput};

/// Structured cost `Δ(y_pred, y_gold)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostKind {
    SquaredL2,
    L1,
    Zero,
    One,
}

impl CostKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "squared-l2" => Some(Self::SquaredL2),
            "l1" => Some(Self::L1),
            "zero" => Some(Self::Zero),
            "one" => Some(Self::One),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SquaredL2 => "squared-l2",
            Self::L1 => "l1",
            Self::Zero => "zero",
            Self::One => "one",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HingeKind {
    MarginRescaled,
    SlackRescaled,
    Perceptron,
    Contrastive,
}

impl HingeKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "margin-rescaled" => Some(Self::MarginRescaled),
            "slack-rescaled" => Some(Self::SlackRescaled),
            "perceptron" => Some(Self::Perceptron),
            "contrastive" => Some(Self::Contrastive),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MarginRescaled => "margin-rescaled",
            Self::SlackRescaled => "slack-rescaled",
            Self::Perceptron => "perceptron",
            Self::Contrastive => "contrastive",
        }
    }

    /// The cost actually used with this hinge: perceptron and contrastive
    /// fix it to 0 and 1, the rescaled hinges use `configured`.
    pub fn effective_cost(self, configured: CostKind) -> CostKind {
        match self {
            Self::Perceptron => CostKind::Zero,
            Self::Contrastive => CostKind::One,
            Self::MarginRescaled | Self::SlackRescaled => configured,
        }
    }
}

/// Hinge value. `delta` is ignored by the perceptron and contrastive kinds.
pub fn hinge(kind: HingeKind, delta: f64, e_pred: f64, e_gold: f64) -> f64 {
    match kind {
        HingeKind::MarginRescaled => (delta - e_pred + e_gold).max(0.0),
        HingeKind::SlackRescaled => delta * (1.0 - e_pred + e_gold).max(0.0),
        HingeKind::Perceptron => (e_gold - e_pred).max(0.0),
        HingeKind::Contrastive => (1.0 + e_gold - e_pred).max(0.0),
    }
}

/// Elementwise tape hinge over equally shaped `delta`, `e_pred`, `e_gold`.
/// The caller supplies the effective cost (see [`HingeKind::effective_cost`]).
pub fn hinge_var(tape: &Tape, kind: HingeKind, delta: Var, e_pred: Var, e_gold: Var) -> Var {
    let gap = tape.sub(e_gold, e_pred);
    match kind {
        HingeKind::MarginRescaled | HingeKind::Perceptron | HingeKind::Contrastive => {
            tape.relu(tape.add(delta, gap))
        }
        HingeKind::SlackRescaled => tape.mul(delta, tape.relu(tape.add_scalar(gap, 1.0))),
    }
}

/// Cost of a relaxed output against a discrete labeling.
///
/// L1 is `sum |y - g|` and squared-L2 `sum (y - g)^2` over the 0/1 encoding
/// of the gold labeling (one-hot rows for sequences).
pub fn cost(kind: CostKind, pred: &RelaxedOutput, gold: &DiscreteLabeling) -> Result<f64> {
    let (p, g): (&[f64], Tensor) = match (pred, gold) {
        (RelaxedOutput::Mlc(y), DiscreteLabeling::Mlc(labels)) => {
            if let Some(&bad) = labels.iter().find(|&&i| i >= y.len()) {
                return Err(shape_err(format!("gold label {bad} for {} outputs", y.len())));
            }
            let mut g = Tensor::zeros(1, y.len().max(1));
            for &i in labels {
                g.data_mut()[i] = 1.0;
            }
            (y.as_slice(), g)
        }
        (RelaxedOutput::Seq(y), DiscreteLabeling::Seq(labels)) => {
            if y.rows() != labels.len() {
                return Err(shape_err(format!(
                    "{} output positions for {} gold tags",
                    y.rows(),
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&i| i >= y.cols()) {
                return Err(shape_err(format!("gold tag {bad} for {} labels", y.cols())));
            }
            (y.data(), crate::energy::one_hot(labels, y.cols()))
        }
        _ => return Err(shape_err("multi-label and sequence outputs mixed".into())),
    };
    Ok(match kind {
        CostKind::SquaredL2 => p.iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum(),
        CostKind::L1 => p.iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum(),
        CostKind::Zero => 0.0,
        CostKind::One => 1.0,
    })
}

fn shape_err(detail: String) -> Error {
    Error::Shape { op: "cost", detail }
}

/// Per-row costs (`B x 1`) of relaxed outputs `y` against a 0/1 matrix `gold`.
///
/// L1 uses `y + g - 2 y g`, which equals `|y - g|` for `y` in `[0, 1]` and
/// `g` in `{0, 1}` and is smooth in `y`.
pub fn row_costs(tape: &Tape, kind: CostKind, y: Var, gold: &Tensor) -> Var {
    let (r, _) = tape.shape(y);
    match kind {
        CostKind::Zero => tape.constant(Tensor::zeros(r, 1)),
        CostKind::One => tape.constant(Tensor::filled(r, 1, 1.0)),
        CostKind::SquaredL2 => {
            let d = tape.sub(y, tape.constant(gold.clone()));
            tape.sum_rows(tape.mul(d, d))
        }
        CostKind::L1 => {
            let g = tape.constant(gold.clone());
            let yg = tape.mul(y, g);
            tape.sum_rows(tape.add(tape.sub(y, tape.add(yg, yg)), g))
        }
    }
}

/// Cost of a whole relaxed sequence (`N x L`) as a `1 x 1` value, divided
/// by `N` when `per_token` is set.
pub fn sequence_cost(tape: &Tape, kind: CostKind, y: Var, gold: &Tensor, per_token: bool) -> Var {
    let (n, _) = tape.shape(y);
    let total = match kind {
        CostKind::Zero => tape.constant(Tensor::scalar(0.0)),
        CostKind::One => tape.constant(Tensor::scalar(1.0)),
        _ => tape.sum(row_costs(tape, kind, y, gold)),
    };
    if per_token {
        tape.scale(total, 1.0 / n as f64)
    } else {
        total
    }
}

/// How the rows of an inference network's output are distributed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Independent Bernoulli per entry (multi-label).
    Bernoulli,
    /// One categorical per row (sequence positions).
    Categorical,
}

/// Entropy of each row's distribution(s) (`B x 1`), computed from logits.
pub fn entropy_rows(tape: &Tape, kind: OutputKind, logits: Var) -> Var {
    match kind {
        OutputKind::Bernoulli => {
            // -log p = softplus(-z), -log(1 - p) = softplus(z)
            let p = tape.sigmoid(logits);
            let a = tape.mul(p, tape.softplus(tape.neg(logits)));
            let b = tape.mul(tape.one_minus(p), tape.softplus(logits));
            tape.sum_rows(tape.add(a, b))
        }
        OutputKind::Categorical => {
            let logp = tape.log_softmax_rows(logits);
            let p = tape.exp(logp);
            tape.neg(tape.sum_rows(tape.mul(p, logp)))
        }
    }
}

/// Cross entropy of each row against a 0/1 gold matrix (`B x 1`), from logits.
pub fn cross_entropy_rows(tape: &Tape, kind: OutputKind, logits: Var, gold: &Tensor) -> Var {
    let g = tape.constant(gold.clone());
    match kind {
        OutputKind::Bernoulli => {
            let pos = tape.mul(g, tape.softplus(tape.neg(logits)));
            let neg = tape.mul(tape.one_minus(g), tape.softplus(logits));
            tape.sum_rows(tape.add(pos, neg))
        }
        OutputKind::Categorical => tape.neg(tape.sum_rows(tape.mul(g, tape.log_softmax_rows(logits)))),
    }
}

/// `sum ||w||^2` over every tensor of a bound store.
pub fn squared_norm(tape: &Tape, bound: &Bound) -> Var {
    let parts: Vec<Var> = bound.vars().iter().map(|&v| tape.sum_sq(v)).collect();
    sum_all(tape, &parts)
}

/// `sum ||w - w0||^2`, pairing tensors of `store` with same-named tensors of `anchor`.
pub fn squared_distance(tape: &Tape, store: &ParamStore, bound: &Bound, anchor: &ParamStore) -> Result<Var> {
    let mut parts = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id);
        let aid = anchor
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("anchor network has no tensor {name}")))?;
        if !anchor.get(aid).same_shape(store.get(id)) {
            return Err(Error::Shape {
                op: "squared_distance",
                detail: format!("tensor {name} differs in shape from its anchor"),
            });
        }
        let d = tape.sub(bound[id], tape.constant_rc(anchor.shared(aid)));
        parts.push(tape.sum_sq(d));
    }
    Ok(sum_all(tape, &parts))
}

/// `λ₁ ||Φ||² + λ₄ ||Φ - Φ₀||²`, the parameter penalties subtracted from
/// an inference-network objective. `None` when both weights are zero.
pub fn network_penalty(
    tape: &Tape,
    store: &ParamStore,
    bound: &Bound,
    anchor: Option<&ParamStore>,
    weights: &StabilizerWeights,
) -> Result<Option<Var>> {
    let mut parts = Vec::new();
    if weights.l2 > 0.0 {
        parts.push(tape.scale(squared_norm(tape, bound), weights.l2));
    }
    if weights.anchor > 0.0 {
        let anchor =
            anchor.ok_or_else(|| Error::Invalid("anchor weight set but no pretrained network given".into()))?;
        parts.push(tape.scale(squared_distance(tape, store, bound, anchor)?, weights.anchor));
    }
    Ok((!parts.is_empty()).then(|| sum_all(tape, &parts)))
}

pub(crate) fn sum_all(tape: &Tape, parts: &[Var]) -> Var {
    match parts.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((&first, rest)) => rest.iter().fold(first, |acc, &v| tape.add(acc, v)),
    }
}

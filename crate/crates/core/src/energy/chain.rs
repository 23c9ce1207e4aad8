use rand::Rng;

use crate::autodiff::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::BlstmEncoder;

const SIMPLEX_TOL: f64 = 1e-6;

/// Linear-chain energy over BLSTM features:
/// `E(x, y) = -(sum_t sum_i y_{t,i} U_i^T f(x, t) + sum_{t>=2} y_{t-1}^T W y_t)`.
///
/// There are no start or stop transitions.
#[derive(Clone, Debug)]
pub struct ChainEnergy {
    encoder: BlstmEncoder,
    num_labels: usize,
    /// `encoder.output_dim() x num_labels`; column `i` is `U_i`.
    labels: ParamId,
    /// `num_labels x num_labels`, indexed `[previous, next]`.
    transitions: ParamId,
}

impl ChainEnergy {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || num_labels == 0 {
            return Err(Error::Invalid("chain energy dimensions must be positive".into()));
        }
        let encoder = BlstmEncoder::new(store, "energy.enc", input_dim, hidden, true, rng);
        let labels = store.add_uniform("energy.u", encoder.output_dim(), num_labels, rng);
        let transitions = store.add_zeros("energy.w", num_labels, num_labels);
        Ok(Self {
            encoder,
            num_labels,
            labels,
            transitions,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn encoder(&self) -> &BlstmEncoder {
        &self.encoder
    }

    pub fn label_vectors(&self) -> ParamId {
        self.labels
    }

    pub fn transitions(&self) -> ParamId {
        self.transitions
    }

    /// Unary scores `U_i^T f(x, t)` as an `N x L` matrix.
    pub fn unary(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        tape.matmul(self.encoder.encode(tape, p, x), p[self.labels])
    }

    pub fn unary_fast(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.encoder.encode_fast(store, x)?.matmul(store.get(self.labels))
    }

    /// Energy of relaxed outputs `y` (`N x L`) given precomputed unary scores.
    pub fn energy_from_unary(&self, tape: &Tape, p: &Bound, unary: Var, y: Var) -> Var {
        relaxed_energy(tape, unary, p[self.transitions], y)
    }

    pub fn energy(&self, tape: &Tape, p: &Bound, x: Var, y: Var) -> Var {
        let u = self.unary(tape, p, x);
        self.energy_from_unary(tape, p, u, y)
    }

    /// Validating tape-free energy of relaxed outputs.
    pub fn energy_value(&self, store: &ParamStore, x: &Tensor, y: &Tensor) -> Result<f64> {
        if x.rows() != y.rows() {
            return Err(Error::Shape {
                op: "chain_energy",
                detail: format!("input length {} but output length {}", x.rows(), y.rows()),
            });
        }
        check_sequence_simplex(y, self.num_labels, "chain_energy")?;
        let u = self.unary_fast(store, x)?;
        Ok(relaxed_energy_value(&u, store.get(self.transitions), y))
    }
}

/// Tape form of the chain energy for arbitrary unary scores and transitions.
pub fn relaxed_energy(tape: &Tape, unary: Var, transitions: Var, y: Var) -> Var {
    let (n, _) = tape.shape(y);
    let mut score = tape.sum(tape.mul(y, unary));
    if n > 1 {
        let prev = tape.slice_rows(y, 0, n - 1);
        let next = tape.slice_rows(y, 1, n);
        let pair = tape.sum(tape.mul(tape.matmul(prev, transitions), next));
        score = tape.add(score, pair);
    }
    tape.neg(score)
}

/// Tape-free relaxed chain energy.
pub fn relaxed_energy_value(unary: &Tensor, transitions: &Tensor, y: &Tensor) -> f64 {
    let l = unary.cols();
    let mut score: f64 = unary.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    for t in 1..y.rows() {
        let (prev, next) = (y.row(t - 1), y.row(t));
        for i in 0..l {
            if prev[i] == 0.0 {
                continue;
            }
            for j in 0..l {
                score += prev[i] * transitions.get(i, j) * next[j];
            }
        }
    }
    -score
}

/// Score of a discrete path: `sum_t unary[t, y_t] + sum_{t>=2} W[y_{t-1}, y_t]`.
/// The discrete chain energy is its negation.
pub fn path_score(unary: &Tensor, transitions: &Tensor, labels: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in labels.iter().enumerate() {
        s += unary.get(t, y);
        if t > 0 {
            s += transitions.get(labels[t - 1], y);
        }
    }
    s
}

/// One-hot `N x L` encoding of a label sequence.
pub fn one_hot(labels: &[usize], num_labels: usize) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), num_labels);
    for (i, &y) in labels.iter().enumerate() {
        t.set(i, y, 1.0);
    }
    t
}

pub(crate) fn check_sequence_simplex(y: &Tensor, num_labels: usize, op: &'static str) -> Result<()> {
    if y.cols() != num_labels {
        return Err(Error::Shape {
            op,
            detail: format!("outputs have {} columns, expected {num_labels}", y.cols()),
        });
    }
    for t in 0..y.rows() {
        let row = y.row(t);
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain {
                op,
                detail: format!("position {t} is not on the simplex (sum {sum})"),
            });
        }
    }
    Ok(())
}

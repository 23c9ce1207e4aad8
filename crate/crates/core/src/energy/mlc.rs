use rand::Rng;

use crate::autodiff::{softplus, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const RANGE_TOL: f64 = 1e-6;

/// Multi-label energy over precomputed input features:
/// `E(x, y) = sum_i y_i b_i^T F(x) + c2^T softplus(C1 y)`.
///
/// The feature network `F` lives outside this struct; its outputs are passed
/// in directly so that it can stay frozen while the energy trains.
#[derive(Clone, Debug)]
pub struct MlcEnergy {
    num_labels: usize,
    feature_dim: usize,
    interaction_dim: usize,
    /// `feature_dim x num_labels`; column `i` is `b_i`.
    labels: ParamId,
    /// `interaction_dim x num_labels`.
    c1: ParamId,
    /// `interaction_dim x 1`.
    c2: ParamId,
}

impl MlcEnergy {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        num_labels: usize,
        feature_dim: usize,
        interaction_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_labels == 0 || feature_dim == 0 || interaction_dim == 0 {
            return Err(Error::Invalid("MLC energy dimensions must be positive".into()));
        }
        let labels = store.add_uniform("energy.b", feature_dim, num_labels, rng);
        let c1 = store.add_uniform("energy.c1", interaction_dim, num_labels, rng);
        let c2 = store.add_uniform("energy.c2", interaction_dim, 1, rng);
        Ok(Self {
            num_labels,
            feature_dim,
            interaction_dim,
            labels,
            c1,
            c2,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn interaction_dim(&self) -> usize {
        self.interaction_dim
    }

    pub fn label_vectors(&self) -> ParamId {
        self.labels
    }

    pub fn c1(&self) -> ParamId {
        self.c1
    }

    pub fn c2(&self) -> ParamId {
        self.c2
    }

    /// Per-example energies (`B x 1`) for features `B x feature_dim` and outputs `B x L`.
    pub fn energies(&self, tape: &Tape, p: &Bound, features: Var, y: Var) -> Var {
        let scores = tape.matmul(features, p[self.labels]);
        let local = tape.sum_rows(tape.mul(y, scores));
        let inner = tape.softplus(tape.matmul(y, tape.transpose(p[self.c1])));
        let label = tape.matmul(inner, p[self.c2]);
        tape.add(local, label)
    }

    /// `(E_loc, E_lab)` for one example without any range check on `y`.
    pub fn terms_unchecked(&self, store: &ParamStore, features: &[f64], y: &[f64]) -> (f64, f64) {
        let b = store.get(self.labels);
        let mut local = 0.0;
        for (i, &yi) in y.iter().enumerate() {
            if yi == 0.0 {
                continue;
            }
            let dot: f64 = features.iter().enumerate().map(|(k, f)| f * b.get(k, i)).sum();
            local += yi * dot;
        }
        let c1 = store.get(self.c1);
        let c2 = store.get(self.c2).data();
        let mut label = 0.0;
        for (r, c) in c2.iter().enumerate() {
            let z: f64 = c1.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
            label += c * softplus(z);
        }
        (local, label)
    }

    /// Energy of one example; `y` must lie in `[0, 1]^L` up to 1e-6.
    pub fn energy(&self, store: &ParamStore, features: &[f64], y: &[f64]) -> Result<f64> {
        if features.len() != self.feature_dim || y.len() != self.num_labels {
            return Err(Error::Shape {
                op: "mlc_energy",
                detail: format!(
                    "features {} (expected {}), outputs {} (expected {})",
                    features.len(),
                    self.feature_dim,
                    y.len(),
                    self.num_labels
                ),
            });
        }
        if let Some((i, v)) = y
            .iter()
            .enumerate()
            .find(|(_, &v)| !(-RANGE_TOL..=1.0 + RANGE_TOL).contains(&v))
        {
            return Err(Error::Domain {
                op: "mlc_energy",
                detail: format!("output {i} = {v} outside [0, 1]"),
            });
        }
        let (local, label) = self.terms_unchecked(store, features, y);
        Ok(local + label)
    }

    /// Tape-free batch energies, one per row.
    pub fn energies_fast(&self, store: &ParamStore, features: &Tensor, y: &Tensor) -> Vec<f64> {
        (0..y.rows())
            .map(|r| {
                let (a, b) = self.terms_unchecked(store, features.row(r), y.row(r));
                a + b
            })
            .collect()
    }
}

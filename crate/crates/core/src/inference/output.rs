use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const TOL: f64 = 1e-6;

/// A point of the relaxed output space.
#[derive(Clone, Debug, PartialEq)]
pub enum RelaxedOutput {
    /// One probability per label, each in `[0, 1]`.
    Mlc(Vec<f64>),
    /// `N x L`, each row on the simplex.
    Seq(Tensor),
}

impl RelaxedOutput {
    pub fn mlc(y: Vec<f64>) -> Result<Self> {
        if let Some((i, v)) = y.iter().enumerate().find(|(_, &v)| !(-TOL..=1.0 + TOL).contains(&v)) {
            return Err(Error::Domain {
                op: "relaxed_output",
                detail: format!("label {i} has value {v} outside [0, 1]"),
            });
        }
        Ok(Self::Mlc(y))
    }

    pub fn seq(y: Tensor) -> Result<Self> {
        for t in 0..y.rows() {
            let row = y.row(t);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v < -TOL) || (s - 1.0).abs() > TOL {
                return Err(Error::Domain {
                    op: "relaxed_output",
                    detail: format!("position {t} is not on the simplex (sum {s})"),
                });
            }
        }
        Ok(Self::Seq(y))
    }
}

/// A discrete output: a label set or a label sequence, 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DiscreteLabeling {
    /// Sorted, distinct label indices.
    Mlc(Vec<usize>),
    Seq(Vec<usize>),
}

impl DiscreteLabeling {
    pub fn mlc(mut labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        labels.sort_unstable();
        labels.dedup();
        check_range(&labels, num_labels)?;
        Ok(Self::Mlc(labels))
    }

    pub fn seq(labels: Vec<usize>, num_labels: usize) -> Result<Self> {
        check_range(&labels, num_labels)?;
        Ok(Self::Seq(labels))
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            Self::Mlc(v) | Self::Seq(v) => v,
        }
    }
}

fn check_range(labels: &[usize], num_labels: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_labels) {
        Some(y) => Err(Error::Domain {
            op: "labeling",
            detail: format!("label {y} outside 0..{num_labels}"),
        }),
        None => Ok(()),
    }
}

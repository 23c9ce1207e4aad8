//! Structured prediction energy networks with inference networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tensors, a reverse-mode tape, Adam / SGD-momentum and
//!   finite-difference gradient checks.
//! * [`nn`]: MLPs, BLSTM encoders, frozen embedding tables and the tag
//!   language model cell.
//! * [`energy`]: multi-label, linear-chain, tag-LM and joint energies, each
//!   defined on both discrete and relaxed outputs.
//! * [`inference`]: inference networks, projected gradient-descent
//!   inference, Viterbi, forward-backward and discretization.
//! * [`train`]: hinge losses, the alternating minimax trainer, retuning,
//!   CRF / local baselines, distillation, tag-LM pretraining and threshold
//!   tuning.
//! * [`data`]: readers and writers, BIOES conversion, synthetic corpora and
//!   evaluation metrics.

pub mod autodiff;
pub mod data;
pub mod energy;
pub mod error;
pub mod inference;
pub mod nn;
pub mod train;

pub use error::{Error, Result};

/// Seeded generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

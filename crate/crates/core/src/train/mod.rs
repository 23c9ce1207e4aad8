//! Losses, the alternating minimax trainer, retuning, baselines,
//! distillation, tag-LM pretraining and threshold tuning.

mod crf;
mod lm;
mod loops;
mod loss;
mod minimax;
mod mlc;
mod plan;
mod seq;
mod threshold;

pub use crf::*;
pub use lm::*;
pub use loops::FitOutcome;
pub use loss::*;
pub use minimax::*;
pub use mlc::*;
pub use plan::*;
pub use seq::*;
pub use threshold::*;

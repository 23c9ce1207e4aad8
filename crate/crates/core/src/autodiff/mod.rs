//! Dense tensors, a reverse-mode tape, optimizers and gradient checking.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use params::{ParamId, ParamStore};
pub use tape::{log_sum_exp, sigmoid, softmax_in_place, softplus, Bound, Gradients, Tape, Var};
pub use tensor::Tensor;

//! Producing outputs: inference networks, gradient-descent inference, exact
//! chain decoding and discretization.

mod decode;
mod gd;
mod network;
mod output;

pub use decode::{argmax, discretize_mlc, discretize_seq, forward_backward, viterbi, ChainMarginals};
pub use gd::{gd_inference, Domain, GdOutcome, MAX_HALVINGS};
pub use network::{Arch, InferenceNetwork, Role, INFNET_PREFIX};
pub use output::{DiscreteLabeling, RelaxedOutput};

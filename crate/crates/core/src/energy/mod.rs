//! Energy functions. Lower energy means a better output.

mod chain;
mod mlc;
mod tlm;

pub use chain::{one_hot, path_score, relaxed_energy, relaxed_energy_value, ChainEnergy};
pub use mlc::MlcEnergy;
pub use tlm::{JointEnergy, TlmEnergy, TLM_FLOOR};

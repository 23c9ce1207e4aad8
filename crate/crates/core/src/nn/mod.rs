//! Network building blocks.

mod embedding;
mod lstm;
mod mlp;
mod tag_lm;

pub use embedding::{load_embeddings, EmbeddingTable};
pub use lstm::{BlstmEncoder, LstmCell};
pub use mlp::{Activation, Head, Mlp};
pub use tag_lm::TagLm;

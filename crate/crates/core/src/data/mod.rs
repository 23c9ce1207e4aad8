//! Dataset formats, tagging schemes, synthetic corpora and evaluation metrics.

mod conll;
mod encode;
mod metrics;
mod mlc;
mod scheme;
mod synth;

pub use conll::{format_conll, parse_conll, read_conll, write_conll, Sentence, SeqDataset, TagSet};
pub use encode::{auto_tag, encode_sentences, SeqExample};
pub use metrics::{chunk_f1, example_f1, set_f1, token_accuracy, ChunkScores};
pub use mlc::{format_mlc, parse_mlc, read_mlc, write_mlc, MlcDataset, MlcExample};
pub use scheme::{bio2_to_bioes, bioes_to_bio2, chunks, repair_bio2};
pub use synth::{gen_hmm, gen_mlc, HmmSpec};

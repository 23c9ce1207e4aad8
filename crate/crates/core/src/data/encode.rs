use super::conll::SeqDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::nn::EmbeddingTable;

/// A sentence as an `N x dim` embedding matrix plus tag indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqExample {
    pub x: Tensor,
    pub tags: Vec<usize>,
}

impl SeqExample {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

pub fn encode_sentences(ds: &SeqDataset, emb: &EmbeddingTable) -> Result<Vec<SeqExample>> {
    let tags = ds.tag_ids()?;
    ds.sentences
        .iter()
        .zip(tags)
        .map(|(s, tags)| {
            Ok(SeqExample {
                x: emb.rows(&emb.ids(&s.tokens))?,
                tags,
            })
        })
        .collect()
}

/// Tags every input with `tagger`, producing a discrete tag corpus.
pub fn auto_tag<F>(mut tagger: F, inputs: &[Tensor]) -> Result<Vec<Vec<usize>>>
where
    F: FnMut(&Tensor) -> Result<Vec<usize>>,
{
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let tags = tagger(x)?;
            if tags.len() != x.rows() {
                return Err(Error::Invalid(format!(
                    "tagger returned {} tags for sentence {i} of length {}",
                    tags.len(),
                    x.rows()
                )));
            }
            Ok(tags)
        })
        .collect()
}

use std::path::Path;

use spen_core::autodiff::Tensor;
use spen_core::data::{encode_sentences, read_conll, SeqDataset, SeqExample, TagSet};
use spen_core::nn::{load_embeddings, EmbeddingTable};

use crate::error::{CliError, CliResult};

/// Reads an embeddings file, taking the dimension from its header line or,
/// without one, from the first row.
pub fn read_embeddings(path: &Path) -> CliResult<EmbeddingTable> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let first = text
        .lines()
        .map(|l| l.split(' ').filter(|f| !f.is_empty()).collect::<Vec<_>>())
        .find(|f| !f.is_empty())
        .ok_or_else(|| CliError::Config(format!("{} holds no embeddings", path.display())))?;
    let dim = match (first.len(), first.first().and_then(|f| f.parse::<usize>().ok()), first.get(1).and_then(|f| f.parse::<usize>().ok())) {
        (2, Some(_), Some(d)) => d,
        (n, _, _) => n - 1,
    };
    if dim == 0 {
        return Err(CliError::Config(format!("{}: embeddings have no values", path.display())));
    }
    Ok(load_embeddings(path, dim)?)
}

/// Reads a tagged split and encodes it. With `tags` given, every tag must
/// belong to it.
pub fn read_tagged(path: &Path, tags: Option<&TagSet>, emb: &EmbeddingTable) -> CliResult<(SeqDataset, Vec<SeqExample>)> {
    let ds = read_conll(path, tags)?;
    let examples = encode_sentences(&ds, emb)?;
    Ok((ds, examples))
}

/// Reads token sequences: one token per line (anything after a tab is
/// ignored), blank lines between sentences.
pub fn read_tokens(path: &Path) -> CliResult<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for line in text.lines() {
        let tok = line.split('\t').next().unwrap_or("").trim();
        if tok.is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(tok.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("{} holds no sentences", path.display())));
    }
    Ok(out)
}

pub fn encode_tokens(sentences: &[Vec<String>], emb: &EmbeddingTable) -> CliResult<Vec<Tensor>> {
    sentences
        .iter()
        .map(|s| Ok(emb.rows(&emb.ids(s))?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_dimension_with_and_without_header() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "2 3\nx 1 2 3\ny 4 5 6\n").unwrap();
        assert_eq!(read_embeddings(&a).unwrap().dim(), 3);
        let b = dir.path().join("b.txt");
        std::fs::write(&b, "x 1 2\ny 4 5\n").unwrap();
        assert_eq!(read_embeddings(&b).unwrap().dim(), 2);
    }

    #[test]
    fn token_files_split_on_blank_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.txt");
        std::fs::write(&p, "a\tX\nb\n\n\nc\n").unwrap();
        assert_eq!(read_tokens(&p).unwrap(), vec![vec!["a", "b"], vec!["c"]]);
    }
}

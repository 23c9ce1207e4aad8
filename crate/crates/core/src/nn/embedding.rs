use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Frozen word vectors with a dedicated unknown-token row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    /// `(tokens.len() + 1) x dim`; the last row is the unknown vector.
    matrix: Tensor,
}

impl EmbeddingTable {
    /// Builds a table from rows; the unknown row is the mean of all rows.
    pub fn from_rows(tokens: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("embedding table".into()));
        }
        if tokens.len() != rows.len() {
            return Err(Error::Invalid("token and row counts differ".into()));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("ragged embedding rows".into()));
        }
        let mut mean = vec![0.0; dim];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        let mut data: Vec<f64> = rows.into_iter().flatten().collect();
        data.extend(mean);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate embedding token {t:?}")));
            }
        }
        let n = tokens.len() + 1;
        Ok(Self {
            tokens,
            index,
            matrix: Tensor::from_rows(n, dim, data),
        })
    }

    /// Rebuilds a table from a stored matrix whose last row is the unknown vector.
    pub fn from_matrix(tokens: Vec<String>, matrix: Tensor) -> Result<Self> {
        if matrix.rows() != tokens.len() + 1 {
            return Err(Error::Invalid(format!(
                "embedding matrix has {} rows for {} tokens",
                matrix.rows(),
                tokens.len()
            )));
        }
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index, matrix })
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn unknown_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unknown_id())
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        self.matrix.row(self.id(token))
    }

    /// Stacks the rows for `ids` into an `n x dim` matrix.
    pub fn rows(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim());
        for &i in ids {
            data.extend_from_slice(self.matrix.row(i));
        }
        Ok(Tensor::from_rows(ids.len(), self.dim(), data))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "{} {}", self.len(), self.dim()).unwrap();
        for (i, t) in self.tokens.iter().enumerate() {
            write!(out, "{t}").unwrap();
            for v in self.matrix.row(i) {
                write!(out, " {v}").unwrap();
            }
            out.push(b'\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Reads whitespace-separated `token v1 .. v_dim` lines, with an optional
/// `count dim` header on the first line.
pub fn load_embeddings(path: &Path, dim: usize) -> Result<EmbeddingTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        let fields: Vec<&str> = line.split(' ').filter(|f| !f.is_empty()).collect();
        if fields.is_empty() {
            continue;
        }
        if k == 0 && fields.len() == 2 {
            if let (Ok(_), Ok(d)) = (fields[0].parse::<usize>(), fields[1].parse::<usize>()) {
                if d != dim {
                    return Err(Error::parse(path, lineno, format!("header declares dim {d}, expected {dim}")));
                }
                continue;
            }
        }
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected token and {dim} values, found {} values", fields.len() - 1),
            ));
        }
        let row = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        tokens.push(fields[0].to_string());
        rows.push(row);
    }
    if tokens.is_empty() {
        return Err(Error::Empty(format!("no embeddings in {}", path.display())));
    }
    EmbeddingTable::from_rows(tokens, rows).map_err(|e| Error::parse(path, 0, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str, body: &str) -> std::path::PathBuf {
        let p = std::env::temp_dir().join(format!("spen-emb-{}-{name}", std::process::id()));
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_and_rows() {
        let p = tmp("a", "2 3\na 1 2 3\nb 3 2 1\n");
        let t = load_embeddings(&p, 3).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.dim(), 3);
        assert_eq!(t.lookup("b"), &[3.0, 2.0, 1.0]);
        assert_eq!(t.lookup("zzz"), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn headerless_file() {
        let p = tmp("b", "x 0.5 0.5\n");
        let t = load_embeddings(&p, 2).unwrap();
        assert_eq!(t.lookup("x"), &[0.5, 0.5]);
    }

    #[test]
    fn bad_dimension_names_line() {
        let p = tmp("c", "a 1 2 3\nb 1 2\n");
        let err = load_embeddings(&p, 3).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
    }

    #[test]
    fn empty_file_is_an_error() {
        let p = tmp("d", "");
        assert!(load_embeddings(&p, 3).is_err());
    }

    #[test]
    fn write_then_load() {
        let t = EmbeddingTable::from_rows(
            vec!["a".into(), "b".into()],
            vec![vec![0.1, -2.5], vec![1e-7, 3.0]],
        )
        .unwrap();
        let p = tmp("e", "");
        t.write(&p).unwrap();
        assert_eq!(load_embeddings(&p, 2).unwrap(), t);
    }
}

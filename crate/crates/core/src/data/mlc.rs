use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MlcExample {
    /// Sorted, distinct, 0-based.
    pub labels: Vec<usize>,
    /// Sparse `(index, value)` pairs in file order.
    pub features: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlcDataset {
    pub num_labels: usize,
    pub num_features: usize,
    pub examples: Vec<MlcExample>,
}

impl MlcDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Dense `|idx| x num_features` input matrix.
    pub fn dense_inputs(&self, idx: &[usize]) -> Tensor {
        let d = self.num_features;
        let mut t = Tensor::zeros(idx.len().max(1), d);
        for (r, &i) in idx.iter().enumerate() {
            for &(k, v) in &self.examples[i].features {
                t.data_mut()[r * d + k] += v;
            }
        }
        t
    }

    /// `|idx| x num_labels` 0/1 gold matrix.
    pub fn gold_matrix(&self, idx: &[usize]) -> Tensor {
        let l = self.num_labels;
        let mut t = Tensor::zeros(idx.len().max(1), l);
        for (r, &i) in idx.iter().enumerate() {
            for &y in &self.examples[i].labels {
                t.data_mut()[r * l + y] = 1.0;
            }
        }
        t
    }

    pub fn gold_sets(&self) -> Vec<Vec<usize>> {
        self.examples.iter().map(|e| e.labels.clone()).collect()
    }
}

/// Reads the line format: an `L D` header, then one example per line as
/// comma-separated label indices, a space, and space-separated
/// `index:value` pairs. Lines starting with `#` and empty lines are skipped;
/// an example with neither labels nor features is written as a single space.
pub fn read_mlc(path: &Path) -> Result<MlcDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mlc(&text, path)
}

pub fn parse_mlc(text: &str, path: &Path) -> Result<MlcDataset> {
    let mut header: Option<(usize, usize)> = None;
    let mut examples = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((l, d)) = header else {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed = match fields.as_slice() {
                [a, b] => a.parse::<usize>().ok().zip(b.parse::<usize>().ok()),
                _ => None,
            };
            match parsed {
                Some((l, d)) if l > 0 && d > 0 => header = Some((l, d)),
                _ => return Err(Error::parse(path, lineno, "expected header `L D` with positive sizes")),
            }
            continue;
        };
        let (label_field, rest) = line.split_once(' ').unwrap_or((line, ""));
        let mut labels = Vec::new();
        if !label_field.is_empty() {
            for tok in label_field.split(',') {
                let y: usize = tok
                    .parse()
                    .map_err(|_| Error::parse(path, lineno, format!("bad label index {tok:?}")))?;
                if y >= l {
                    return Err(Error::parse(path, lineno, format!("label {y} >= L = {l}")));
                }
                labels.push(y);
            }
        }
        labels.sort_unstable();
        labels.dedup();
        let mut features = Vec::new();
        for tok in rest.split(' ').filter(|s| !s.is_empty()) {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(path, lineno, format!("expected index:value, found {tok:?}")))?;
            let i: usize = i
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad feature index {i:?}")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad feature value {v:?}")))?;
            if i >= d {
                return Err(Error::parse(path, lineno, format!("feature index {i} >= D = {d}")));
            }
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite feature value {v}")));
            }
            features.push((i, v));
        }
        examples.push(MlcExample { labels, features });
    }
    let (num_labels, num_features) = header.ok_or_else(|| Error::parse(path, 0, "missing `L D` header"))?;
    Ok(MlcDataset {
        num_labels,
        num_features,
        examples,
    })
}

pub fn format_mlc(ds: &MlcDataset) -> String {
    let mut out = format!("{} {}\n", ds.num_labels, ds.num_features);
    for ex in &ds.examples {
        let labels: Vec<String> = ex.labels.iter().map(usize::to_string).collect();
        out.push_str(&labels.join(","));
        for &(i, v) in &ex.features {
            write!(out, " {i}:{v}").unwrap();
        }
        if ex.labels.is_empty() && ex.features.is_empty() {
            out.push(' ');
        }
        out.push('\n');
    }
    out
}

pub fn write_mlc(path: &Path, ds: &MlcDataset) -> Result<()> {
    fs::write(path, format_mlc(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<MlcDataset> {
        parse_mlc(s, Path::new("t.mlc"))
    }

    #[test]
    fn parses_example_line() {
        let ds = parse("# comment\n4 8\n1,3 0:1.0 5:2.5\n").unwrap();
        assert_eq!((ds.num_labels, ds.num_features), (4, 8));
        assert_eq!(ds.examples[0].labels, vec![1, 3]);
        assert_eq!(ds.examples[0].features, vec![(0, 1.0), (5, 2.5)]);
    }

    #[test]
    fn empty_label_field_is_legal() {
        let ds = parse("4 8\n 2:1\n").unwrap();
        assert!(ds.examples[0].labels.is_empty());
        assert_eq!(ds.examples[0].features, vec![(2, 1.0)]);
    }

    #[test]
    fn out_of_range_indices_name_the_line() {
        let err = parse("4 8\n0 1:1\n1 8:1.0\n").unwrap_err().to_string();
        assert!(err.contains(":3:"), "{err}");
        assert!(parse("4 8\n4 1:1\n").is_err());
        assert!(parse("4 8\n0 1-1\n").is_err());
        assert!(parse("0 1:1\n").is_err());
    }

    #[test]
    fn dense_views() {
        let ds = parse("3 4\n0,2 1:0.5 3:2\n1\n").unwrap();
        let x = ds.dense_inputs(&[0, 1]);
        assert_eq!(x.data(), &[0.0, 0.5, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0]);
        let g = ds.gold_matrix(&[1, 0]);
        assert_eq!(g.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(
            rows in prop::collection::vec(
                (prop::collection::btree_set(0usize..6, 0..4),
                 prop::collection::vec((0usize..10, -1e3f64..1e3), 0..5)),
                0..8)
        ) {
            let ds = MlcDataset {
                num_labels: 6,
                num_features: 10,
                examples: rows
                    .into_iter()
                    .map(|(l, f)| MlcExample { labels: l.into_iter().collect(), features: f })
                    .collect(),
            };
            let back = parse(&format_mlc(&ds)).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}

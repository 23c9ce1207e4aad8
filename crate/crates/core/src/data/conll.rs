use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// An ordered tag vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagSet {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl TagSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Empty("tag set".into()));
        }
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("tag name {n:?} is empty or contains whitespace")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate tag {n:?}")));
            }
        }
        Ok(Self { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.index.get(tag).copied()
    }

    pub fn encode<S: AsRef<str>>(&self, tags: &[S]) -> Result<Vec<usize>> {
        tags.iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::Invalid(format!("unknown tag {:?}", t.as_ref())))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.names[i].clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqDataset {
    pub sentences: Vec<Sentence>,
    pub tags: TagSet,
}

impl SeqDataset {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn tag_ids(&self) -> Result<Vec<Vec<usize>>> {
        self.sentences.iter().map(|s| self.tags.encode(&s.tags)).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.sentences.iter().map(|s| s.tokens.len()).sum()
    }
}

/// Reads `token<TAB>tag` lines with blank lines between sentences. With
/// `tags` given, every tag must belong to it; otherwise the vocabulary is
/// induced from the file in sorted order.
pub fn read_conll(path: &Path, tags: Option<&TagSet>) -> Result<SeqDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_conll(&text, path, tags)
}

pub fn parse_conll(text: &str, path: &Path, tags: Option<&TagSet>) -> Result<SeqDataset> {
    let mut sentences = Vec::new();
    let mut cur = Sentence {
        tokens: Vec::new(),
        tags: Vec::new(),
    };
    let mut seen = BTreeSet::new();
    for (k, line) in text.lines().enumerate() {
        let lineno = k + 1;
        if line.is_empty() {
            if !cur.tokens.is_empty() {
                sentences.push(std::mem::replace(
                    &mut cur,
                    Sentence {
                        tokens: Vec::new(),
                        tags: Vec::new(),
                    },
                ));
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [token, tag] = fields.as_slice() else {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected token<TAB>tag, found {} field(s)", fields.len()),
            ));
        };
        if token.is_empty() || tag.is_empty() {
            return Err(Error::parse(path, lineno, "empty token or tag"));
        }
        if let Some(ts) = tags {
            if ts.id(tag).is_none() {
                return Err(Error::parse(path, lineno, format!("unknown tag {tag:?}")));
            }
        } else {
            seen.insert(tag.to_string());
        }
        cur.tokens.push(token.to_string());
        cur.tags.push(tag.to_string());
    }
    if !cur.tokens.is_empty() {
        sentences.push(cur);
    }
    let tags = match tags {
        Some(ts) => ts.clone(),
        None => TagSet::new(seen.into_iter().collect()).map_err(|e| Error::parse(path, 0, e.to_string()))?,
    };
    Ok(SeqDataset { sentences, tags })
}

pub fn format_conll(ds: &SeqDataset) -> String {
    let mut out = String::new();
    for (i, s) in ds.sentences.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push('\t');
            out.push_str(tag);
            out.push('\n');
        }
    }
    out
}

pub fn write_conll(path: &Path, ds: &SeqDataset) -> Result<()> {
    fs::write(path, format_conll(ds)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<SeqDataset> {
        parse_conll(s, Path::new("t.conll"), None)
    }

    #[test]
    fn sentences_and_vocabulary() {
        let ds = parse("a\tN\nb\tV\n\nc\tN\n\n\n").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.tags.names(), &["N".to_string(), "V".to_string()]);
        assert_eq!(ds.sentences[1].tokens, vec!["c".to_string()]);
        assert_eq!(ds.tag_ids().unwrap(), vec![vec![0, 1], vec![0]]);
    }

    #[test]
    fn single_token_file() {
        let ds = parse("x\tT").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.sentences[0].tokens.len(), 1);
    }

    #[test]
    fn ragged_line_names_the_line() {
        let err = parse("a\tN\nb V\n").unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(parse("a\tN\tX\n").is_err());
    }

    #[test]
    fn unknown_tag_against_given_set() {
        let ts = TagSet::new(vec!["N".into()]).unwrap();
        assert!(parse_conll("a\tV\n", Path::new("t"), Some(&ts)).is_err());
        assert!(parse_conll("a\tN\n", Path::new("t"), Some(&ts)).is_ok());
    }

    proptest! {
        #[test]
        fn write_then_read_is_identity(
            sents in prop::collection::vec(
                prop::collection::vec(("[a-z]{1,4}", prop::sample::select(vec!["A", "B", "C"])), 1..6),
                1..6)
        ) {
            let sentences: Vec<Sentence> = sents
                .into_iter()
                .map(|s| Sentence {
                    tokens: s.iter().map(|(t, _)| t.clone()).collect(),
                    tags: s.iter().map(|(_, g)| g.to_string()).collect(),
                })
                .collect();
            let ds = parse(&format_conll(&SeqDataset {
                sentences: sentences.clone(),
                tags: TagSet::new(vec!["A".into()]).unwrap(),
            }))
            .unwrap();
            prop_assert_eq!(&ds.sentences, &sentences);
            let again = parse(&format_conll(&ds)).unwrap();
            prop_assert_eq!(again, ds);
        }
    }
}

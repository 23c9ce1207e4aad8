use std::collections::HashSet;

use super::scheme::chunks;
use crate::error::{Error, Result};

fn check_lengths(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("{what}: {a} predictions for {b} gold items")));
    }
    Ok(())
}

/// F1 of one predicted label set against gold; both empty counts as 1.
pub fn set_f1(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    let g: HashSet<usize> = gold.iter().copied().collect();
    let tp = pred.iter().filter(|y| g.contains(y)).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    // 2PR / (P + R) with P = tp/|pred|, R = tp/|gold|
    2.0 * tp / (pred.len() + gold.len()) as f64
}

/// Example-averaged (macro) F1 over label sets.
pub fn example_f1(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), "example_f1")?;
    if pred.is_empty() {
        return Err(Error::Empty("example_f1 over no examples".into()));
    }
    let total: f64 = pred.iter().zip(gold).map(|(p, g)| set_f1(p, g)).sum();
    Ok(total / pred.len() as f64)
}

/// Fraction of positions whose labels match.
pub fn token_accuracy<T: PartialEq>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<f64> {
    check_lengths(pred.len(), gold.len(), "token_accuracy")?;
    let mut right = 0usize;
    let mut total = 0usize;
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!(
                "token_accuracy: sentence {i} has {} predicted and {} gold tags",
                p.len(),
                g.len()
            )));
        }
        right += p.iter().zip(g).filter(|(a, b)| a == b).count();
        total += g.len();
    }
    if total == 0 {
        return Err(Error::Empty("token_accuracy over no tokens".into()));
    }
    Ok(right as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChunkScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match chunk precision, recall and F1 over BIOES sequences.
pub fn chunk_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<ChunkScores> {
    check_lengths(pred.len(), gold.len(), "chunk_f1")?;
    let (mut tp, mut np, mut ng) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!("chunk_f1: sentence {i} lengths differ")));
        }
        let pc = chunks(p);
        let gc: HashSet<_> = chunks(g).into_iter().collect();
        np += pc.len();
        ng += gc.len();
        tp += pc.iter().filter(|c| gc.contains(*c)).count();
    }
    let precision = if np == 0 { 0.0 } else { tp as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { tp as f64 / ng as f64 };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ChunkScores { precision, recall, f1 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn example_f1_cases() {
        assert_eq!(example_f1(&[vec![1, 2]], &[vec![0, 1]]).unwrap(), 0.5);
        assert_eq!(example_f1(&[vec![0], vec![]], &[vec![0], vec![]]).unwrap(), 1.0);
        assert_eq!(example_f1(&[vec![]], &[vec![0]]).unwrap(), 0.0);
        assert!(example_f1(&[vec![]], &[]).is_err());
    }

    #[test]
    fn accuracy_and_chunks() {
        let g = vec![v(&["B-PER", "E-PER", "O", "O"])];
        assert_eq!(token_accuracy(&g, &g).unwrap(), 1.0);
        assert_eq!(chunk_f1(&g, &g).unwrap().f1, 1.0);
        let p = vec![v(&["B-PER", "E-PER", "O", "S-LOC"])];
        let s = chunk_f1(&p, &g).unwrap();
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let none = vec![v(&["O", "O", "O", "O"])];
        assert_eq!(chunk_f1(&none, &g).unwrap().f1, 0.0);
        assert!(token_accuracy(&[vec![1, 2]], &[vec![1]]).is_err());
    }

    proptest! {
        #[test]
        fn f1_bounded_and_symmetric(
            a in prop::collection::btree_set(0usize..8, 0..6),
            b in prop::collection::btree_set(0usize..8, 0..6),
        ) {
            let a: Vec<usize> = a.into_iter().collect();
            let b: Vec<usize> = b.into_iter().collect();
            let f = set_f1(&a, &b);
            prop_assert!((0.0..=1.0).contains(&f));
            prop_assert_eq!(f, set_f1(&b, &a));
        }
    }
}

use crate::autodiff::{log_sum_exp, Tensor};
use crate::error::{Error, Result};

fn check_scores(unary: &Tensor, transitions: &Tensor, op: &'static str) -> Result<()> {
    if unary.rows() == 0 {
        return Err(Error::Empty(format!("{op}: sequence of length 0")));
    }
    let l = unary.cols();
    if transitions.rows() != l || transitions.cols() != l {
        return Err(Error::Shape {
            op,
            detail: format!(
                "{} labels but transitions are {}x{}",
                l,
                transitions.rows(),
                transitions.cols()
            ),
        });
    }
    if !unary.all_finite() || !transitions.all_finite() {
        return Err(Error::NonFinite {
            name: format!("{op} scores"),
        });
    }
    Ok(())
}

/// Highest-scoring path under `sum_t unary[t, y_t] + sum_{t>=2} W[y_{t-1}, y_t]`.
///
/// Among equally scoring paths the lexicographically smallest is returned:
/// best suffix scores are computed right to left, then decoding runs left to
/// right taking the lowest label that attains the maximum.
pub fn viterbi(unary: &Tensor, transitions: &Tensor) -> Result<(Vec<usize>, f64)> {
    check_scores(unary, transitions, "viterbi")?;
    let n = unary.rows();
    let l = unary.cols();
    let w = transitions.data();
    // suffix[t * l + i]: best score of positions t.. given y_t = i
    let mut suffix = vec![0.0; n * l];
    suffix[(n - 1) * l..].copy_from_slice(unary.row(n - 1));
    for t in (0..n - 1).rev() {
        let (head, tail) = suffix.split_at_mut((t + 1) * l);
        let next = &tail[..l];
        let cur = &mut head[t * l..];
        for i in 0..l {
            let row = &w[i * l..(i + 1) * l];
            let mut best = f64::NEG_INFINITY;
            for j in 0..l {
                let s = row[j] + next[j];
                if s > best {
                    best = s;
                }
            }
            cur[i] = unary.get(t, i) + best;
        }
    }
    let mut path = Vec::with_capacity(n);
    let first = argmax(&suffix[..l]);
    let score = suffix[first];
    path.push(first);
    for t in 1..n {
        let prev = path[t - 1];
        let row = &w[prev * l..(prev + 1) * l];
        let next = &suffix[t * l..(t + 1) * l];
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for j in 0..l {
            let s = row[j] + next[j];
            if s > best_v {
                best_v = s;
                best = j;
            }
        }
        path.push(best);
    }
    Ok((path, score))
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Log partition function and marginals of the linear-chain distribution
/// `p(y) ∝ exp(score(y))`.
#[derive(Clone, Debug)]
pub struct ChainMarginals {
    pub log_z: f64,
    /// `N x L`.
    pub unary: Tensor,
    /// `N - 1` matrices, entry `[i, j]` = `p(y_t = i, y_{t+1} = j)`.
    pub pairwise: Vec<Tensor>,
}

pub fn forward_backward(unary: &Tensor, transitions: &Tensor) -> Result<ChainMarginals> {
    check_scores(unary, transitions, "forward_backward")?;
    let n = unary.rows();
    let l = unary.cols();
    let mut alpha = Tensor::zeros(n, l);
    let mut beta = Tensor::zeros(n, l);
    let mut buf = vec![0.0; l];
    alpha.data_mut()[..l].copy_from_slice(unary.row(0));
    for t in 1..n {
        for j in 0..l {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = alpha.get(t - 1, i) + transitions.get(i, j);
            }
            alpha.set(t, j, log_sum_exp(&buf) + unary.get(t, j));
        }
    }
    for t in (0..n - 1).rev() {
        for i in 0..l {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = transitions.get(i, j) + unary.get(t + 1, j) + beta.get(t + 1, j);
            }
            beta.set(t, i, log_sum_exp(&buf));
        }
    }
    let log_z = log_sum_exp(alpha.row(n - 1));
    let mut marg = Tensor::zeros(n, l);
    for t in 0..n {
        for i in 0..l {
            marg.set(t, i, (alpha.get(t, i) + beta.get(t, i) - log_z).exp());
        }
    }
    let mut pairwise = Vec::with_capacity(n.saturating_sub(1));
    for t in 0..n.saturating_sub(1) {
        let mut p = Tensor::zeros(l, l);
        for i in 0..l {
            for j in 0..l {
                let s = alpha.get(t, i) + transitions.get(i, j) + unary.get(t + 1, j) + beta.get(t + 1, j) - log_z;
                p.set(i, j, s.exp());
            }
        }
        pairwise.push(p);
    }
    Ok(ChainMarginals {
        log_z,
        unary: marg,
        pairwise,
    })
}

/// Labels whose probability exceeds `tau`, in increasing order.
pub fn discretize_mlc(y: &[f64], tau: f64) -> Vec<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, &v)| v > tau)
        .map(|(i, _)| i)
        .collect()
}

/// Per-position argmax with ties to the lower label.
pub fn discretize_seq(y: &Tensor) -> Vec<usize> {
    (0..y.rows()).map(|t| argmax(y.row(t))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{one_hot, relaxed_energy_value};
    use crate::rng_from_seed;
    use rand::Rng;
    use spen_testkit::{brute_argmax, brute_log_partition, brute_marginals};

    fn random(rows: usize, cols: usize, rng: &mut crate::Rng) -> Tensor {
        Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    fn as_vecs(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    #[test]
    fn decoupled_when_no_transitions() {
        let u = Tensor::from_rows(3, 3, vec![0.1, 0.5, 0.2, 2.0, 1.0, 0.0, -1.0, -1.0, -0.5]);
        let (path, score) = viterbi(&u, &Tensor::zeros(3, 3)).unwrap();
        assert_eq!(path, vec![1, 0, 2]);
        assert!((score - 2.0).abs() < 1e-15);
        let fb = forward_backward(&u, &Tensor::zeros(3, 3)).unwrap();
        for t in 0..3 {
            let mut row = u.row(t).to_vec();
            crate::autodiff::softmax_in_place(&mut row);
            for i in 0..3 {
                assert!((fb.unary.get(t, i) - row[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn hand_evaluated_two_by_two() {
        let u = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let w = Tensor::from_rows(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(viterbi(&u, &w).unwrap(), (vec![0, 1], 3.0));
    }

    #[test]
    fn ties_go_to_lower_labels() {
        let (path, _) = viterbi(&Tensor::zeros(3, 2), &Tensor::zeros(2, 2)).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
        // (0,1) and (1,0) tie; the lexicographically smaller wins
        let u = Tensor::from_rows(2, 2, vec![0.0, 0.0, 0.0, 0.0]);
        let w = Tensor::from_rows(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(viterbi(&u, &w).unwrap().0, vec![0, 1]);
    }

    #[test]
    fn single_position() {
        let u = Tensor::row_vector(vec![0.3, -0.2, 1.1]);
        let fb = forward_backward(&u, &Tensor::zeros(3, 3)).unwrap();
        assert!((fb.log_z - log_sum_exp(u.row(0))).abs() < 1e-15);
        assert!(fb.pairwise.is_empty());
    }

    #[test]
    fn mismatched_or_non_finite_inputs_are_errors() {
        assert!(viterbi(&Tensor::zeros(2, 2), &Tensor::zeros(3, 3)).is_err());
        assert!(forward_backward(&Tensor::filled(2, 2, f64::NAN), &Tensor::zeros(2, 2)).is_err());
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = rng_from_seed(99);
        for _ in 0..200 {
            let n = rng.random_range(1..=6);
            let l = rng.random_range(1..=4);
            let u = random(n, l, &mut rng);
            let w = random(l, l, &mut rng);
            let (path, score) = viterbi(&u, &w).unwrap();
            let (bpath, bscore) = brute_argmax(&as_vecs(&u), &as_vecs(&w));
            assert_eq!(path, bpath);
            assert!((score - bscore).abs() < 1e-12);
            assert!((score + relaxed_energy_value(&u, &w, &one_hot(&path, l))).abs() < 1e-12);

            let fb = forward_backward(&u, &w).unwrap();
            assert!((fb.log_z - brute_log_partition(&as_vecs(&u), &as_vecs(&w))).abs() < 1e-9);
            let bm = brute_marginals(&as_vecs(&u), &as_vecs(&w));
            for t in 0..n {
                let s: f64 = fb.unary.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                for i in 0..l {
                    assert!((fb.unary.get(t, i) - bm[t][i]).abs() < 1e-9);
                }
            }
            for (t, p) in fb.pairwise.iter().enumerate() {
                for i in 0..l {
                    let row: f64 = p.row(i).iter().sum();
                    assert!((row - fb.unary.get(t, i)).abs() < 1e-8);
                    let col: f64 = (0..l).map(|k| p.get(k, i)).sum();
                    assert!((col - fb.unary.get(t + 1, i)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn discretization() {
        assert_eq!(discretize_mlc(&[0.2, 0.8], 0.5), vec![1]);
        assert_eq!(discretize_mlc(&[0.0, 1e-9, 0.4], 0.0), vec![1, 2]);
        let y = Tensor::from_rows(2, 2, vec![0.6, 0.4, 0.3, 0.7]);
        assert_eq!(discretize_seq(&y), vec![0, 1]);
        assert_eq!(discretize_seq(&Tensor::filled(1, 3, 1.0 / 3.0)), vec![0]);
    }
}

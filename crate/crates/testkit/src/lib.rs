//! Exhaustive reference computations for small linear-chain models.
//!
//! Everything here enumerates all `L^N` labelings directly and shares no
//! code with the dynamic-programming implementations it is used to check.

/// All labelings of length `n` over `l` labels, in lexicographic order.
pub fn all_labelings(n: usize, l: usize) -> Vec<Vec<usize>> {
    let total = l.pow(n as u32);
    (0..total)
        .map(|mut code| {
            let mut path = vec![0; n];
            for slot in path.iter_mut().rev() {
                *slot = code % l;
                code /= l;
            }
            path
        })
        .collect()
}

/// `sum_t unary[t][y_t] + sum_{t>=1} trans[y_{t-1}][y_t]`.
pub fn path_score(unary: &[Vec<f64>], trans: &[Vec<f64>], path: &[usize]) -> f64 {
    let mut s = 0.0;
    for (t, &y) in path.iter().enumerate() {
        s += unary[t][y];
        if t > 0 {
            s += trans[path[t - 1]][y];
        }
    }
    s
}

/// Highest-scoring labeling; the lexicographically smallest wins ties.
pub fn brute_argmax(unary: &[Vec<f64>], trans: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let l = trans.len();
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in all_labelings(unary.len(), l) {
        let s = path_score(unary, trans, &p);
        if best.as_ref().is_none_or(|(_, b)| s > *b) {
            best = Some((p, s));
        }
    }
    best.expect("at least one labeling")
}

/// Lowest-energy labeling for an arbitrary energy; ties go to the lexicographically smallest.
pub fn brute_argmin_by(n: usize, l: usize, mut energy: impl FnMut(&[usize]) -> f64) -> Vec<usize> {
    let mut best: Option<(Vec<usize>, f64)> = None;
    for p in all_labelings(n, l) {
        let e = energy(&p);
        if best.as_ref().is_none_or(|(_, b)| e < *b) {
            best = Some((p, e));
        }
    }
    best.expect("at least one labeling").0
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log sum_y exp(score(y))` over every labeling.
pub fn brute_log_partition(unary: &[Vec<f64>], trans: &[Vec<f64>]) -> f64 {
    let scores: Vec<f64> = all_labelings(unary.len(), trans.len())
        .iter()
        .map(|p| path_score(unary, trans, p))
        .collect();
    lse(&scores)
}

/// Per-position marginals `p(y_t = i)` by enumeration.
pub fn brute_marginals(unary: &[Vec<f64>], trans: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let l = trans.len();
    let n = unary.len();
    let log_z = brute_log_partition(unary, trans);
    let mut m = vec![vec![0.0; l]; n];
    for p in all_labelings(n, l) {
        let w = (path_score(unary, trans, &p) - log_z).exp();
        for (t, &y) in p.iter().enumerate() {
            m[t][y] += w;
        }
    }
    m
}

/// Central-difference derivative of a scalar function of one variable.
pub fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_is_complete_and_ordered() {
        let all = all_labelings(2, 3);
        assert_eq!(all.len(), 9);
        assert_eq!(all[0], vec![0, 0]);
        assert_eq!(all[1], vec![0, 1]);
        assert_eq!(all[8], vec![2, 2]);
    }

    #[test]
    fn two_by_two_hand_example() {
        let unary = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let trans = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let (p, s) = brute_argmax(&unary, &trans);
        assert_eq!(p, vec![0, 1]);
        assert_eq!(s, 3.0);
    }

    #[test]
    fn marginals_sum_to_one() {
        let unary = vec![vec![0.3, -0.2, 1.0], vec![0.0, 0.5, -1.0]];
        let trans = vec![vec![0.1, 0.2, 0.3], vec![0.0, -0.4, 0.2], vec![1.0, 0.0, 0.0]];
        for row in brute_marginals(&unary, &trans) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

use super::loops::{fit, FitOutcome};
use super::plan::{LoopPlan, MetricsLog};
use super::seq::{network_accuracy, viterbi_accuracy};
use super::loss::sum_all;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::data::SeqExample;
use crate::energy::{path_score, ChainEnergy};
use crate::error::{Error, Result};
use crate::inference::{forward_backward, InferenceNetwork};

/// Negative conditional log-likelihood `log Z - score(gold)` of a linear
/// chain with the given unary scores (`N x L`) and transitions (`L x L`).
///
/// Gradients come from forward-backward: marginals minus gold indicators
/// for the unary scores, expected minus gold transition counts for `W`.
pub fn chain_nll(tape: &Tape, unary: Var, transitions: Var, gold: &[usize]) -> Result<Var> {
    let u = tape.value(unary);
    let w = tape.value(transitions);
    if u.rows() != gold.len() {
        return Err(Error::Shape {
            op: "chain_nll",
            detail: format!("{} unary rows for {} gold labels", u.rows(), gold.len()),
        });
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= u.cols()) {
        return Err(Error::Domain {
            op: "chain_nll",
            detail: format!("gold label {bad} with {} labels", u.cols()),
        });
    }
    let m = forward_backward(&u, &w)?;
    let nll = m.log_z - path_score(&u, &w, gold);
    let mut du = m.unary;
    for (t, &g) in gold.iter().enumerate() {
        du.set(t, g, du.get(t, g) - 1.0);
    }
    let mut dw = Tensor::zeros(w.rows(), w.cols());
    for p in &m.pairwise {
        dw.add_assign(p);
    }
    for pair in gold.windows(2) {
        dw.set(pair[0], pair[1], dw.get(pair[0], pair[1]) - 1.0);
    }
    Ok(tape.scalar_fn(nll, vec![(unary, du), (transitions, dw)]))
}

/// CRF negative log-likelihood of one sentence under a chain energy, whose
/// negated energy is the path score.
pub fn crf_nll(tape: &Tape, chain: &ChainEnergy, theta: &Bound, x: &Tensor, gold: &[usize]) -> Result<Var> {
    let u = chain.unary(tape, theta, tape.constant(x.clone()));
    chain_nll(tape, u, theta[chain.transitions()], gold)
}

/// Trains a chain energy by conditional log-likelihood, early-stopping on
/// dev Viterbi accuracy when a patience is set.
pub fn train_crf(
    chain: &ChainEnergy,
    theta: &mut ParamStore,
    train: &[SeqExample],
    dev: &[SeqExample],
    plan: &LoopPlan,
    log: &mut MetricsLog,
) -> Result<FitOutcome> {
    fit(
        theta,
        train.len(),
        plan,
        "crf",
        log,
        |tape, p, batch, _| {
            let terms = batch
                .iter()
                .map(|&i| crf_nll(tape, chain, p, &train[i].x, &train[i].tags))
                .collect::<Result<Vec<_>>>()?;
            Ok(tape.scale(sum_all(tape, &terms), 1.0 / batch.len() as f64))
        },
        |s| {
            if dev.is_empty() {
                Ok(None)
            } else {
                Ok(Some(("accuracy", viterbi_accuracy(chain, s, dev)?)))
            }
        },
    )
}

/// Summed per-token log loss of a sequence network on one sentence.
pub fn token_log_loss(tape: &Tape, net: &InferenceNetwork, p: &Bound, x: &Tensor, gold: &[usize]) -> Result<Var> {
    if x.rows() != gold.len() {
        return Err(Error::Shape {
            op: "token_log_loss",
            detail: format!("{} inputs for {} gold labels", x.rows(), gold.len()),
        });
    }
    let logp = tape.log_softmax_rows(net.logits(tape, p, tape.constant(x.clone())));
    let target = crate::energy::one_hot(gold, net.num_labels());
    Ok(tape.neg(tape.sum(tape.mul(logp, tape.constant(target)))))
}

/// Trains a local BLSTM tagger by per-token log loss, early-stopping on dev
/// token accuracy when a patience is set.
pub fn train_tagger(
    net: &InferenceNetwork,
    store: &mut ParamStore,
    train: &[SeqExample],
    dev: &[SeqExample],
    plan: &LoopPlan,
    log: &mut MetricsLog,
) -> Result<FitOutcome> {
    if !net.is_sequence() {
        return Err(Error::Invalid("tagger must be a sequence network".into()));
    }
    fit(
        store,
        train.len(),
        plan,
        "tagger",
        log,
        |tape, p, batch, _| {
            let terms = batch
                .iter()
                .map(|&i| token_log_loss(tape, net, p, &train[i].x, &train[i].tags))
                .collect::<Result<Vec<_>>>()?;
            Ok(tape.scale(sum_all(tape, &terms), 1.0 / batch.len() as f64))
        },
        |s| {
            if dev.is_empty() {
                Ok(None)
            } else {
                Ok(Some(("accuracy", network_accuracy(net, s, dev)?)))
            }
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, log_sum_exp, OptimizerConfig};
    use crate::inference::Role;
    use crate::rng_from_seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_scores(n: usize, l: usize, seed: u64) -> ParamStore {
        let mut rng = rng_from_seed(seed);
        let mut s = ParamStore::new();
        s.add("u", Tensor::from_rows(n, l, (0..n * l).map(|_| rng.random_range(-2.0..2.0)).collect()));
        s.add("w", Tensor::from_rows(l, l, (0..l * l).map(|_| rng.random_range(-2.0..2.0)).collect()));
        s
    }

    fn nll_of(s: &ParamStore, gold: &[usize]) -> f64 {
        let tape = Tape::new();
        let p = tape.bind(s, false);
        let ids: Vec<_> = s.ids().collect();
        tape.scalar(chain_nll(&tape, p[ids[0]], p[ids[1]], gold).unwrap())
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let mut s = random_scores(3, 3, seed);
            let gold = [seed as usize % 3, 2, (seed as usize / 3) % 3];
            let ids: Vec<_> = s.ids().collect();
            let r = finite_diff_check(&mut s, 1e-5, |tape, p| chain_nll(tape, p[ids[0]], p[ids[1]], &gold)).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn zero_transitions_reduce_to_token_cross_entropy() {
        let mut s = random_scores(4, 3, 11);
        let w = s.find("w").unwrap();
        s.get_mut(w).data_mut().fill(0.0);
        let gold = [0, 2, 2, 1];
        let u = s.get(s.find("u").unwrap());
        let ce: f64 = gold
            .iter()
            .enumerate()
            .map(|(t, &g)| log_sum_exp(u.row(t)) - u.get(t, g))
            .sum();
        assert!((nll_of(&s, &gold) - ce).abs() < 1e-12);
    }

    #[test]
    fn nll_vanishes_only_when_all_mass_is_on_gold() {
        let mut s = random_scores(3, 2, 12);
        let gold = [1, 0, 1];
        assert!(nll_of(&s, &gold) > 0.0);
        let u = s.find("u").unwrap();
        let mut peaked = Tensor::filled(3, 2, -200.0);
        for (t, &g) in gold.iter().enumerate() {
            peaked.set(t, g, 200.0);
        }
        *s.get_mut(u) = peaked;
        assert!(nll_of(&s, &gold) < 1e-12);
    }

    proptest! {
        #[test]
        fn nll_is_nonnegative(seed in 0u64..500, n in 1usize..6, l in 1usize..5) {
            let s = random_scores(n, l, seed);
            let mut rng = rng_from_seed(seed + 1);
            let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..l)).collect();
            prop_assert!(nll_of(&s, &gold) >= -1e-12);
        }
    }

    #[test]
    fn nll_rejects_mismatched_gold() {
        let s = random_scores(3, 2, 1);
        let tape = Tape::new();
        let p = tape.bind(&s, false);
        let ids: Vec<_> = s.ids().collect();
        assert!(chain_nll(&tape, p[ids[0]], p[ids[1]], &[0, 1]).is_err());
        assert!(chain_nll(&tape, p[ids[0]], p[ids[1]], &[0, 1, 2]).is_err());
    }

    fn copy_task(n: usize, seed: u64) -> Vec<SeqExample> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(2..6);
                let tags: Vec<usize> = (0..len).map(|_| rng.random_range(0..3)).collect();
                SeqExample {
                    x: crate::energy::one_hot(&tags, 3),
                    tags,
                }
            })
            .collect()
    }

    #[test]
    fn crf_gradient_through_the_encoder() {
        let mut theta = ParamStore::new();
        let chain = ChainEnergy::new(&mut theta, 3, 2, 3, &mut rng_from_seed(2)).unwrap();
        let w = chain.transitions();
        for (k, v) in theta.get_mut(w).data_mut().iter_mut().enumerate() {
            *v = 0.1 * k as f64 - 0.4;
        }
        let data = copy_task(2, 3);
        let r = finite_diff_check(&mut theta, 1e-6, |tape, p| {
            let a = crf_nll(tape, &chain, p, &data[0].x, &data[0].tags)?;
            let b = crf_nll(tape, &chain, p, &data[1].x, &data[1].tags)?;
            Ok(tape.add(a, b))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn baselines_learn_a_copy_task() {
        let data = copy_task(40, 4);
        let mut plan = LoopPlan::new(OptimizerConfig::adam(0.05), 15, 5);
        plan.batch_size = 8;
        plan.patience = Some(15);

        let mut theta = ParamStore::new();
        let chain = ChainEnergy::new(&mut theta, 3, 4, 3, &mut rng_from_seed(6)).unwrap();
        let out = train_crf(&chain, &mut theta, &data, &data, &plan, &mut MetricsLog::memory()).unwrap();
        assert!(out.best_metric.unwrap() > 0.95, "{out:?}");

        let mut store = ParamStore::new();
        let net = InferenceNetwork::seq(&mut store, Role::TestTime, 3, 4, 3, &mut rng_from_seed(7)).unwrap();
        let mut log = MetricsLog::memory();
        let out = train_tagger(&net, &mut store, &data, &data, &plan, &mut log).unwrap();
        assert!(out.best_metric.unwrap() > 0.95, "{out:?}");
        assert!(out.train_loss.last() < out.train_loss.first());
    }
}

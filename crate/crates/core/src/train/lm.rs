use rand::Rng;

use super::loops::{fit, FitOutcome};
use super::loss::sum_all;
use super::plan::{LoopPlan, MetricsLog};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::TagLm;

/// Negative log-likelihood of a tag sequence (end symbol included) on the
/// tape. `dropout` is `Some` in training mode only.
pub fn lm_nll<R: Rng>(tape: &Tape, lm: &TagLm, p: &Bound, tags: &[usize], dropout: Option<(f64, &mut R)>) -> Var {
    let w = lm.num_tags() + 1;
    let mut targets = Tensor::zeros(tags.len() + 1, w);
    for (t, &y) in tags.iter().enumerate() {
        targets.set(t, y, 1.0);
    }
    targets.set(tags.len(), lm.eos(), 1.0);
    let dist = lm.next_distributions(tape, p, tape.constant(lm.one_hot_inputs(tags)), dropout);
    let picked = tape.sum_rows(tape.mul(dist, tape.constant(targets)));
    tape.neg(tape.sum(tape.log_clamped(picked, f64::MIN_POSITIVE)))
}

/// Per-symbol perplexity over `seqs`, counting each end symbol.
pub fn perplexity(lm: &TagLm, store: &ParamStore, seqs: &[Vec<usize>]) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("perplexity needs at least one sequence".into()));
    }
    check_tags(lm, seqs)?;
    let (nll, count) = seqs
        .iter()
        .fold((0.0, 0usize), |(s, c), q| (s + lm.sequence_nll(store, q), c + q.len() + 1));
    Ok((nll / count as f64).exp())
}

fn check_tags(lm: &TagLm, seqs: &[Vec<usize>]) -> Result<()> {
    if let Some(&bad) = seqs.iter().flatten().find(|&&t| t >= lm.num_tags()) {
        return Err(Error::Domain {
            op: "tag_lm",
            detail: format!("tag {bad} with {} tags", lm.num_tags()),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmOutcome {
    pub fit: FitOutcome,
    /// Held-out perplexity of the kept parameters (`None` without held-out data).
    pub heldout_perplexity: Option<f64>,
}

/// Trains a tag language model on discrete tag sequences with inverted
/// dropout, early-stopping on held-out perplexity when a patience is set.
/// The batch loss is the NLL per predicted symbol.
pub fn train_tag_lm(
    lm: &TagLm,
    store: &mut ParamStore,
    train: &[Vec<usize>],
    heldout: &[Vec<usize>],
    plan: &LoopPlan,
    dropout: f64,
    log: &mut MetricsLog,
) -> Result<LmOutcome> {
    if train.is_empty() {
        return Err(Error::Empty("tag LM training corpus".into()));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Invalid(format!("dropout rate {dropout} must be in [0, 1)")));
    }
    check_tags(lm, train)?;
    check_tags(lm, heldout)?;
    let fitted = fit(
        store,
        train.len(),
        plan,
        "lm",
        log,
        |tape, p, batch, rng| {
            let symbols: usize = batch.iter().map(|&i| train[i].len() + 1).sum();
            let terms: Vec<Var> = batch
                .iter()
                .map(|&i| lm_nll(tape, lm, p, &train[i], Some((dropout, &mut *rng))))
                .collect();
            Ok(tape.scale(sum_all(tape, &terms), 1.0 / symbols as f64))
        },
        |s| {
            if heldout.is_empty() {
                Ok(None)
            } else {
                Ok(Some(("neg_perplexity", -perplexity(lm, s, heldout)?)))
            }
        },
    )?;
    let heldout_perplexity = if heldout.is_empty() {
        None
    } else {
        Some(perplexity(lm, store, heldout)?)
    };
    Ok(LmOutcome {
        fit: fitted,
        heldout_perplexity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerConfig;
    use crate::{rng_from_seed, Rng as SeededRng};

    fn model(tags: usize, seed: u64) -> (TagLm, ParamStore) {
        let mut store = ParamStore::new();
        let lm = TagLm::new(&mut store, "lm", tags, 8, 1, &mut rng_from_seed(seed)).unwrap();
        (lm, store)
    }

    #[test]
    fn zero_parameters_give_uniform_perplexity() {
        let (lm, mut store) = model(5, 1);
        store.set_all(0.0);
        let p = perplexity(&lm, &store, &[vec![0, 3, 4], vec![1]]).unwrap();
        // the output layer covers the tags and the end symbol
        assert!((p - 6.0).abs() < 1e-12, "{p}");
    }

    #[test]
    fn tape_nll_matches_tape_free_nll() {
        let (lm, store) = model(4, 2);
        let tags = [2, 0, 3, 3];
        let tape = Tape::new();
        let p = tape.bind(&store, false);
        let v = tape.scalar(lm_nll::<SeededRng>(&tape, &lm, &p, &tags, None));
        assert!((v - lm.sequence_nll(&store, &tags)).abs() < 1e-10);
    }

    #[test]
    fn degenerate_corpus_is_learned_to_perplexity_one() {
        let (lm, mut store) = model(4, 3);
        let seq = vec![1, 3, 0, 2, 2];
        let train = vec![seq.clone(); 8];
        let mut plan = LoopPlan::new(OptimizerConfig::adam(0.05), 150, 4);
        plan.batch_size = 8;
        let before = perplexity(&lm, &store, &[seq.clone()]).unwrap();
        let out = train_tag_lm(&lm, &mut store, &train, &[seq.clone()], &plan, 0.0, &mut MetricsLog::memory()).unwrap();
        let after = out.heldout_perplexity.unwrap();
        assert!(before > 3.0 && after < 1.05, "{before} -> {after}");
    }

    #[test]
    fn dropout_is_active_only_in_training_mode() {
        let (lm, store) = model(3, 5);
        let tags = [0, 1, 2, 1];
        let run = |dropout: Option<f64>, seed: u64| {
            let tape = Tape::new();
            let p = tape.bind(&store, false);
            let mut rng = rng_from_seed(seed);
            tape.scalar(lm_nll(&tape, &lm, &p, &tags, dropout.map(|d| (d, &mut rng))))
        };
        assert_eq!(run(None, 1), run(None, 2));
        assert_ne!(run(Some(0.5), 1), run(Some(0.5), 2));
        assert_eq!(run(Some(0.5), 1), run(Some(0.5), 1));
    }

    #[test]
    fn training_rejects_bad_input() {
        let (lm, mut store) = model(3, 6);
        let plan = LoopPlan::new(OptimizerConfig::sgd_momentum(0.1, 0.9), 1, 0);
        let mut log = MetricsLog::memory();
        assert!(train_tag_lm(&lm, &mut store, &[], &[], &plan, 0.5, &mut log).is_err());
        assert!(train_tag_lm(&lm, &mut store, &[vec![3]], &[], &plan, 0.5, &mut log).is_err());
        assert!(train_tag_lm(&lm, &mut store, &[vec![1]], &[], &plan, 1.0, &mut log).is_err());
        assert!(perplexity(&lm, &store, &[]).is_err());
    }
}

use super::loss::squared_norm;
use super::plan::{epoch_order, EarlyStopping, LoopPlan, MetricsLog, Verdict};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::{rng_from_seed, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub epochs_run: usize,
    /// Epoch whose parameters were kept (0 if none was evaluated).
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    /// Mean mini-batch loss per epoch.
    pub train_loss: Vec<f64>,
}

/// Mini-batch training of one store.
///
/// `loss` returns the mean loss of a batch on the tape; `l2 * ||params||^2`
/// is added here. `eval` returns a dev metric to maximize, or `None` when
/// there is nothing to evaluate. With a patience set, the best evaluated
/// parameters are restored at the end; otherwise the last ones are kept.
pub(crate) fn fit<L, E>(
    store: &mut ParamStore,
    n: usize,
    plan: &LoopPlan,
    tag: &str,
    log: &mut MetricsLog,
    mut loss: L,
    mut eval: E,
) -> Result<FitOutcome>
where
    L: FnMut(&Tape, &Bound, &[usize], &mut Rng) -> Result<Var>,
    E: FnMut(&ParamStore) -> Result<Option<(&'static str, f64)>>,
{
    plan.validate()?;
    if n == 0 {
        return Err(Error::Empty(format!("{tag} training data")));
    }
    let mut rng = rng_from_seed(plan.seed);
    let mut opt = plan.optimizer.build(store);
    let mut stopper = EarlyStopping::new(plan.patience);
    let mut best: Option<ParamStore> = None;
    let mut last_metric = None;
    let mut out = FitOutcome {
        epochs_run: 0,
        best_epoch: 0,
        best_metric: None,
        train_loss: Vec::new(),
    };
    for epoch in 1..=plan.epochs {
        let order = epoch_order(n, &mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(plan.batch_size).enumerate() {
            let tape = Tape::new();
            let p = tape.bind(store, true);
            let mut l = loss(&tape, &p, batch, &mut rng)?;
            if plan.l2 > 0.0 {
                l = tape.add(l, tape.scale(squared_norm(&tape, &p), plan.l2));
            }
            let v = tape.scalar(l);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("{tag} loss at epoch {epoch}, batch {b}"),
                });
            }
            total += v;
            batches += 1;
            let mut grads = tape.backward(l)?.for_params(&p);
            if let Some(c) = plan.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step(store, &grads)?;
        }
        let mean = total / batches as f64;
        out.train_loss.push(mean);
        out.epochs_run = epoch;
        log.record(epoch, "train", &format!("{tag}_loss"), mean)?;
        let mut stop = false;
        if let Some((name, value)) = eval(store)? {
            last_metric = Some(value);
            log.record(epoch, "dev", name, value)?;
            match stopper.observe(epoch, value) {
                Verdict::Improved => {
                    if plan.patience.is_some() {
                        best = Some(store.clone());
                    }
                }
                Verdict::Stale => {}
                Verdict::Stop => stop = true,
            }
        }
        log.end_epoch()?;
        if stop {
            break;
        }
    }
    match best {
        Some(b) => {
            store.copy_from(&b)?;
            if let Some((e, m)) = stopper.best() {
                out.best_epoch = e;
                out.best_metric = Some(m);
            }
        }
        None => {
            out.best_epoch = out.epochs_run;
            out.best_metric = last_metric;
        }
    }
    Ok(out)
}

fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) {
    let norm = grads.iter().flatten().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerConfig;

    fn quadratic_plan(patience: Option<usize>) -> LoopPlan {
        let mut p = LoopPlan::new(OptimizerConfig::sgd_momentum(0.1, 0.0), 30, 1);
        p.batch_size = 2;
        p.patience = patience;
        p
    }

    #[test]
    fn minimizes_a_quadratic_and_logs() {
        let mut store = ParamStore::new();
        let w = store.add_zeros("w", 1, 1);
        let targets = [1.0, 2.0, 3.0];
        let mut log = MetricsLog::memory();
        let out = fit(
            &mut store,
            3,
            &quadratic_plan(None),
            "q",
            &mut log,
            |t, p, batch, _| {
                let parts: Vec<Var> = batch
                    .iter()
                    .map(|&i| {
                        let d = t.add_scalar(p[w], -targets[i]);
                        t.sum_sq(d)
                    })
                    .collect();
                Ok(t.scale(super::super::loss::sum_all(t, &parts), 1.0 / batch.len() as f64))
            },
            |_| Ok(None),
        )
        .unwrap();
        assert_eq!(out.epochs_run, 30);
        assert!((store.get(w).item() - 2.0).abs() < 0.3);
        assert_eq!(log.series("train", "q_loss").len(), 30);
    }

    #[test]
    fn restores_best_and_stops() {
        let mut store = ParamStore::new();
        let w = store.add(String::from("w"), Tensor::scalar(0.0));
        let mut log = MetricsLog::memory();
        // The loss pushes w upward forever; the metric peaks at w = 0.35.
        let out = fit(
            &mut store,
            2,
            &quadratic_plan(Some(3)),
            "q",
            &mut log,
            |t, p, _, _| Ok(t.neg(t.sum(p[w]))),
            |s| Ok(Some(("m", -(s.get(w).item() - 0.35).abs()))),
        )
        .unwrap();
        assert!(out.epochs_run < 30);
        let kept = store.get(w).item();
        assert_eq!(out.best_metric, Some(-(kept - 0.35).abs()));
    }

    #[test]
    fn non_finite_loss_names_epoch_and_batch() {
        let mut store = ParamStore::new();
        store.add_zeros("w", 1, 1);
        let mut log = MetricsLog::memory();
        let err = fit(
            &mut store,
            4,
            &quadratic_plan(None),
            "q",
            &mut log,
            |t, p, _, _| Ok(t.log(t.sum(p.vars()[0]))),
            |_| Ok(None),
        )
        .unwrap_err();
        assert!(err.to_string().contains("epoch 1, batch 0"), "{err}");
        assert!(err.is_numeric());
    }
}

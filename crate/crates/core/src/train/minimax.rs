use super::loops::fit;
use super::plan::{epoch_order, EarlyStopping, LoopPlan, MetricsLog, TrainPlan, Verdict};
use crate::autodiff::{Bound, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng_from_seed;

/// A store together with its leaves on the current tape.
#[derive(Clone, Copy)]
pub struct Side<'a> {
    pub store: &'a ParamStore,
    pub bound: &'a Bound,
}

/// The pieces of a SPEN training problem that depend on the task.
pub trait SpenTask {
    fn num_train(&self) -> usize;

    /// Objective Φ maximizes on a batch of training indices (Θ is bound
    /// non-trainable).
    fn phi_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var>;

    /// Objective Θ minimizes on a batch (Φ is bound non-trainable).
    fn theta_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var>;

    /// Dev metric to maximize, computed from the cost-augmented network.
    fn dev_metric(&self, theta: &ParamStore, phi: &ParamStore) -> Result<f64>;

    fn metric_name(&self) -> &'static str;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Player {
    Phi,
    Theta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MinimaxOutcome {
    /// Which player each mini-batch updated, in order.
    pub schedule: Vec<Player>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub dev_history: Vec<f64>,
}

/// Alternating optimization of Θ (energy) and Φ (cost-augmented inference
/// network): one mini-batch updates Φ, the next Θ, and so on across epochs.
/// The parameters of the epoch with the best dev metric are restored.
pub fn minimax_train<T: SpenTask>(
    task: &T,
    plan: &TrainPlan,
    theta: &mut ParamStore,
    phi: &mut ParamStore,
    log: &mut MetricsLog,
) -> Result<MinimaxOutcome> {
    plan.validate()?;
    let n = task.num_train();
    if n == 0 {
        return Err(Error::Empty("SPEN training data".into()));
    }
    let mut rng = rng_from_seed(plan.seed);
    let mut theta_opt = plan.theta_optimizer.build(theta);
    let mut phi_opt = plan.phi_optimizer.build(phi);
    let mut stopper = EarlyStopping::new(Some(plan.patience.max(1)));
    let mut best = (theta.clone(), phi.clone());
    let mut out = MinimaxOutcome {
        schedule: Vec::new(),
        epochs_run: 0,
        best_epoch: 0,
        best_metric: f64::NEG_INFINITY,
        dev_history: Vec::new(),
    };
    for epoch in 1..=plan.epochs {
        let order = epoch_order(n, &mut rng);
        let (mut phi_sum, mut phi_batches, mut theta_sum, mut theta_batches) = (0.0, 0usize, 0.0, 0usize);
        for (b, batch) in order.chunks(plan.batch_size).enumerate() {
            let player = if out.schedule.len() % 2 == 0 { Player::Phi } else { Player::Theta };
            let tape = Tape::new();
            let tb = tape.bind(theta, player == Player::Theta);
            let pb = tape.bind(phi, player == Player::Phi);
            let theta_side = Side { store: theta, bound: &tb };
            let phi_side = Side { store: phi, bound: &pb };
            let obj = match player {
                Player::Phi => task.phi_objective(&tape, theta_side, phi_side, batch)?,
                Player::Theta => task.theta_objective(&tape, theta_side, phi_side, batch)?,
            };
            let value = tape.scalar(obj);
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    name: format!("{player:?} objective at epoch {epoch}, batch {b}"),
                });
            }
            let loss = match player {
                Player::Phi => tape.neg(obj),
                Player::Theta => obj,
            };
            let mut grads = tape.backward(loss)?;
            let (frozen, trained) = match player {
                Player::Phi => (&tb, &pb),
                Player::Theta => (&pb, &tb),
            };
            assert!(
                grads.for_params(frozen).iter().all(Option::is_none),
                "gradient reached the frozen player during a {player:?} step"
            );
            let g = grads.for_params(trained);
            match player {
                Player::Phi => {
                    let before = cfg!(debug_assertions).then(|| theta.fingerprint());
                    phi_opt.step(phi, &g)?;
                    phi_sum += value;
                    phi_batches += 1;
                    if let Some(h) = before {
                        assert_eq!(h, theta.fingerprint(), "a Φ step changed Θ");
                    }
                }
                Player::Theta => {
                    let before = cfg!(debug_assertions).then(|| phi.fingerprint());
                    theta_opt.step(theta, &g)?;
                    theta_sum += value;
                    theta_batches += 1;
                    if let Some(h) = before {
                        assert_eq!(h, phi.fingerprint(), "a Θ step changed Φ");
                    }
                }
            }
            out.schedule.push(player);
        }
        out.epochs_run = epoch;
        if phi_batches > 0 {
            log.record(epoch, "train", "phi_objective", phi_sum / phi_batches as f64)?;
        }
        if theta_batches > 0 {
            log.record(epoch, "train", "theta_objective", theta_sum / theta_batches as f64)?;
        }
        let metric = task.dev_metric(theta, phi)?;
        log.record(epoch, "dev", task.metric_name(), metric)?;
        log.end_epoch()?;
        out.dev_history.push(metric);
        match stopper.observe(epoch, metric) {
            Verdict::Improved => best = (theta.clone(), phi.clone()),
            Verdict::Stale => {}
            Verdict::Stop => break,
        }
    }
    if let Some((e, m)) = stopper.best() {
        out.best_epoch = e;
        out.best_metric = m;
        theta.copy_from(&best.0)?;
        phi.copy_from(&best.1)?;
    }
    Ok(out)
}

/// Energy minimization over a set of unlabeled inputs.
pub trait RetuneTask {
    fn num_inputs(&self) -> usize;

    /// Mean energy of the network's outputs over a batch of input indices.
    fn energy_loss(&self, tape: &Tape, theta: &ParamStore, psi: &Bound, batch: &[usize]) -> Result<Var>;

    /// Mean energy over all inputs, without a tape.
    fn mean_energy(&self, theta: &ParamStore, psi: &ParamStore) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetuneOutcome {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Set when no epoch lowered the mean energy and Ψ was reset.
    pub reverted: bool,
    pub epochs_run: usize,
}

/// Trains Ψ (initialized by the caller, typically from Φ) to minimize the
/// mean energy of its outputs with Θ fixed. Keeps the epoch with the lowest
/// mean energy and falls back to the initial Ψ if no epoch beat it, so the
/// final mean energy never exceeds the initial one.
pub fn retune<T: RetuneTask>(
    task: &T,
    plan: &LoopPlan,
    theta: &ParamStore,
    psi: &mut ParamStore,
    log: &mut MetricsLog,
) -> Result<RetuneOutcome> {
    let initial = psi.clone();
    let initial_energy = task.mean_energy(theta, psi)?;
    if !initial_energy.is_finite() {
        return Err(Error::NonFinite {
            name: "mean energy before retuning".into(),
        });
    }
    if plan.epochs == 0 {
        return Ok(RetuneOutcome {
            initial_energy,
            final_energy: initial_energy,
            reverted: false,
            epochs_run: 0,
        });
    }
    let mut keep_best = plan.clone();
    keep_best.patience = Some(usize::MAX);
    let fitted = fit(
        psi,
        task.num_inputs(),
        &keep_best,
        "retune",
        log,
        |tape, p, batch, _| task.energy_loss(tape, theta, p, batch),
        |s| Ok(Some(("neg_mean_energy", -task.mean_energy(theta, s)?))),
    )?;
    let mut final_energy = task.mean_energy(theta, psi)?;
    let reverted = !(final_energy <= initial_energy);
    if reverted {
        psi.copy_from(&initial)?;
        final_energy = initial_energy;
    }
    Ok(RetuneOutcome {
        initial_energy,
        final_energy,
        reverted,
        epochs_run: fitted.epochs_run,
    })
}

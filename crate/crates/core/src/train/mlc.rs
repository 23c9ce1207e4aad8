use super::loops::{fit, FitOutcome};
use super::loss::{cross_entropy_rows, entropy_rows, hinge_var, network_penalty, row_costs, squared_norm, OutputKind};
use super::minimax::{RetuneTask, Side, SpenTask};
use super::plan::{gather_rows, LoopPlan, MetricsLog, TrainPlan};
use super::threshold::tune_threshold;
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::data::MlcDataset;
use crate::energy::MlcEnergy;
use crate::error::{Error, Result};
use crate::inference::{Arch, InferenceNetwork};
use crate::nn::Mlp;

/// Dense views of a multi-label split: raw inputs for the inference
/// network, frozen features `F(x)` for the energy, and 0/1 gold labels.
#[derive(Clone, Debug)]
pub struct MlcData {
    pub inputs: Tensor,
    pub features: Tensor,
    pub gold: Tensor,
    pub gold_sets: Vec<Vec<usize>>,
}

impl MlcData {
    /// `feature_net` must be the multi-label network whose last hidden layer
    /// defines `F(x)`; it is only read.
    pub fn new(ds: &MlcDataset, feature_net: &InferenceNetwork, feature_store: &ParamStore) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Empty("multi-label split".into()));
        }
        let idx: Vec<usize> = (0..ds.len()).collect();
        let inputs = ds.dense_inputs(&idx);
        let features = feature_activations(mlp_of(feature_net)?, feature_store, &inputs);
        Ok(Self {
            inputs,
            features,
            gold: ds.gold_matrix(&idx),
            gold_sets: ds.gold_sets(),
        })
    }

    pub fn len(&self) -> usize {
        self.gold_sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold_sets.is_empty()
    }
}

pub(crate) fn mlp_of(net: &InferenceNetwork) -> Result<&Mlp> {
    match &net.arch {
        Arch::Mlc(m) => Ok(m),
        Arch::Seq { .. } => Err(Error::Invalid("expected a multi-label network".into())),
    }
}

/// Last-hidden-layer activations of `net` for every row of `x`.
pub fn feature_activations(net: &Mlp, store: &ParamStore, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let p = tape.bind(store, false);
    let h = net.hidden(&tape, &p, tape.constant(x.clone()));
    (*tape.value(h)).clone()
}

/// Trains a multi-label network with independent per-label cross entropy.
/// Used both for the local MLP baseline and to obtain `F` and `Φ₀`.
pub fn pretrain_mlc(
    net: &InferenceNetwork,
    store: &mut ParamStore,
    inputs: &Tensor,
    gold: &Tensor,
    dev: Option<(&Tensor, &[Vec<usize>])>,
    plan: &LoopPlan,
    log: &mut MetricsLog,
) -> Result<FitOutcome> {
    mlp_of(net)?;
    fit(
        store,
        inputs.rows(),
        plan,
        "local",
        log,
        |tape, p, batch, _| {
            let x = tape.constant(gather_rows(inputs, batch));
            let z = net.logits(tape, p, x);
            let ce = cross_entropy_rows(tape, OutputKind::Bernoulli, z, &gather_rows(gold, batch));
            Ok(tape.mean(ce))
        },
        |s| match dev {
            Some((x, g)) => Ok(Some(("f1", tune_threshold(&net.predict(s, x)?, g)?.1))),
            None => Ok(None),
        },
    )
}

/// Sets the energy's label vectors to the negated output weights of the
/// pretrained network, so that `E_loc` starts out preferring the labels the
/// local classifier scores highly.
pub fn init_energy_from_pretrained(
    energy: &MlcEnergy,
    theta: &mut ParamStore,
    feature_net: &InferenceNetwork,
    feature_store: &ParamStore,
) -> Result<()> {
    let w = feature_store.get(mlp_of(feature_net)?.output_weight());
    if w.rows() != energy.feature_dim() || w.cols() != energy.num_labels() {
        return Err(Error::Shape {
            op: "init_energy_from_pretrained",
            detail: format!(
                "output weights {}x{} vs energy {}x{}",
                w.rows(),
                w.cols(),
                energy.feature_dim(),
                energy.num_labels()
            ),
        });
    }
    *theta.get_mut(energy.label_vectors()) = w.map(|v| -v);
    Ok(())
}

/// Alternating SPEN training for multi-label classification.
pub struct MlcSpenTask<'a> {
    pub energy: &'a MlcEnergy,
    pub net: &'a InferenceNetwork,
    pub train: &'a MlcData,
    pub dev: &'a MlcData,
    pub plan: &'a TrainPlan,
    /// Pretrained network `Φ₀` for the anchor term.
    pub anchor: Option<&'a ParamStore>,
}

impl MlcSpenTask<'_> {
    fn batch_hinge(&self, tape: &Tape, theta: &Bound, y: Var, batch: &[usize]) -> Var {
        let f = tape.constant(gather_rows(&self.train.features, batch));
        let gold = gather_rows(&self.train.gold, batch);
        let e_pred = self.energy.energies(tape, theta, f, y);
        let e_gold = self.energy.energies(tape, theta, f, tape.constant(gold.clone()));
        let delta = row_costs(tape, self.plan.hinge.effective_cost(self.plan.cost), y, &gold);
        hinge_var(tape, self.plan.hinge, delta, e_pred, e_gold)
    }
}

impl SpenTask for MlcSpenTask<'_> {
    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn phi_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var> {
        let w = &self.plan.weights;
        let x = tape.constant(gather_rows(&self.train.inputs, batch));
        let z = self.net.logits(tape, phi.bound, x);
        let y = tape.sigmoid(z);
        let mut per_example = self.batch_hinge(tape, theta.bound, y, batch);
        if w.entropy != 0.0 {
            let h = entropy_rows(tape, OutputKind::Bernoulli, z);
            per_example = tape.add(per_example, tape.scale(h, w.entropy));
        }
        if w.cross_entropy != 0.0 {
            let gold = gather_rows(&self.train.gold, batch);
            let ce = cross_entropy_rows(tape, OutputKind::Bernoulli, z, &gold);
            per_example = tape.sub(per_example, tape.scale(ce, w.cross_entropy));
        }
        let mut obj = tape.mean(per_example);
        if let Some(pen) = network_penalty(tape, phi.store, phi.bound, self.anchor, w)? {
            obj = tape.sub(obj, pen);
        }
        Ok(obj)
    }

    fn theta_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var> {
        let y_pred = self.net.predict(phi.store, &gather_rows(&self.train.inputs, batch))?;
        let y = tape.constant(y_pred);
        let mut obj = tape.mean(self.batch_hinge(tape, theta.bound, y, batch));
        if self.plan.weights.energy_l2 > 0.0 {
            obj = tape.add(obj, tape.scale(squared_norm(tape, theta.bound), self.plan.weights.energy_l2));
        }
        Ok(obj)
    }

    fn dev_metric(&self, _theta: &ParamStore, phi: &ParamStore) -> Result<f64> {
        let probs = self.net.predict(phi, &self.dev.inputs)?;
        Ok(tune_threshold(&probs, &self.dev.gold_sets)?.1)
    }

    fn metric_name(&self) -> &'static str {
        "f1"
    }
}

/// Retuning of a multi-label test-time network on unlabeled inputs.
pub struct MlcRetune<'a> {
    pub energy: &'a MlcEnergy,
    pub net: &'a InferenceNetwork,
    pub data: &'a MlcData,
}

impl RetuneTask for MlcRetune<'_> {
    fn num_inputs(&self) -> usize {
        self.data.len()
    }

    fn energy_loss(&self, tape: &Tape, theta: &ParamStore, psi: &Bound, batch: &[usize]) -> Result<Var> {
        let tb = tape.bind(theta, false);
        let x = tape.constant(gather_rows(&self.data.inputs, batch));
        let y = self.net.forward(tape, psi, x);
        let f = tape.constant(gather_rows(&self.data.features, batch));
        Ok(tape.mean(self.energy.energies(tape, &tb, f, y)))
    }

    fn mean_energy(&self, theta: &ParamStore, psi: &ParamStore) -> Result<f64> {
        let y = self.net.predict(psi, &self.data.inputs)?;
        let e = self.energy.energies_fast(theta, &self.data.features, &y);
        Ok(e.iter().sum::<f64>() / e.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, OptimizerConfig};
    use crate::data::gen_mlc;
    use crate::inference::Role;
    use crate::train::loss::{cost, hinge, CostKind, HingeKind};
    use crate::train::minimax::{minimax_train, retune, Player};
    use crate::train::plan::StabilizerWeights;
    use crate::inference::{DiscreteLabeling, RelaxedOutput};
    use crate::rng_from_seed;

    struct Fixture {
        net: InferenceNetwork,
        phi0: ParamStore,
        energy: MlcEnergy,
        theta: ParamStore,
        train: MlcData,
        dev: MlcData,
    }

    fn fixture(n_train: usize, seed: u64) -> Fixture {
        let (l, d, hidden) = (6, 12, 5);
        let train_ds = gen_mlc(l, d, n_train, seed).unwrap();
        let dev_ds = gen_mlc(l, d, 40, seed + 1000).unwrap();
        let mut rng = rng_from_seed(seed);
        let mut phi0 = ParamStore::new();
        let net = InferenceNetwork::mlc(&mut phi0, Role::Anchor, &[d, 8, hidden, l], &mut rng).unwrap();
        let mut theta = ParamStore::new();
        let energy = MlcEnergy::new(&mut theta, l, hidden, 4, &mut rng).unwrap();
        let train = MlcData::new(&train_ds, &net, &phi0).unwrap();
        let dev = MlcData::new(&dev_ds, &net, &phi0).unwrap();
        Fixture {
            net,
            phi0,
            energy,
            theta,
            train,
            dev,
        }
    }

    fn plan(hinge: HingeKind, weights: StabilizerWeights) -> TrainPlan {
        TrainPlan {
            hinge,
            cost: CostKind::SquaredL2,
            weights,
            batch_size: 8,
            epochs: 3,
            ..TrainPlan::default()
        }
    }

    #[test]
    fn raw_phi_objective_is_the_mean_hinge() {
        let fx = fixture(10, 1);
        for kind in [
            HingeKind::MarginRescaled,
            HingeKind::SlackRescaled,
            HingeKind::Perceptron,
            HingeKind::Contrastive,
        ] {
            let p = plan(kind, StabilizerWeights::NONE);
            let task = MlcSpenTask {
                energy: &fx.energy,
                net: &fx.net,
                train: &fx.train,
                dev: &fx.dev,
                plan: &p,
                anchor: None,
            };
            let batch = [3, 7, 1];
            let tape = Tape::new();
            let tb = tape.bind(&fx.theta, false);
            let pb = tape.bind(&fx.phi0, true);
            let obj = task
                .phi_objective(
                    &tape,
                    Side { store: &fx.theta, bound: &tb },
                    Side { store: &fx.phi0, bound: &pb },
                    &batch,
                )
                .unwrap();
            let y = fx.net.predict(&fx.phi0, &gather_rows(&fx.train.inputs, &batch)).unwrap();
            let mut expected = 0.0;
            for (r, &i) in batch.iter().enumerate() {
                let feats = fx.train.features.row(i);
                let ep = fx.energy.energy(&fx.theta, feats, y.row(r)).unwrap();
                let eg = fx.energy.energy(&fx.theta, feats, fx.train.gold.row(i)).unwrap();
                let delta = cost(
                    CostKind::SquaredL2,
                    &RelaxedOutput::Mlc(y.row(r).to_vec()),
                    &DiscreteLabeling::Mlc(fx.train.gold_sets[i].clone()),
                )
                .unwrap();
                expected += hinge(kind, delta, ep, eg);
            }
            expected /= batch.len() as f64;
            assert!((tape.scalar(obj) - expected).abs() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn objectives_pass_gradient_checks() {
        let fx = fixture(10, 2);
        let weights = StabilizerWeights {
            l2: 0.01,
            entropy: -0.5,
            cross_entropy: 0.3,
            anchor: 0.2,
            energy_l2: 0.01,
        };
        let p = plan(HingeKind::MarginRescaled, weights);
        let task = MlcSpenTask {
            energy: &fx.energy,
            net: &fx.net,
            train: &fx.train,
            dev: &fx.dev,
            plan: &p,
            anchor: Some(&fx.phi0),
        };
        let batch = [0, 5];
        // move Φ off its anchor so the anchor term is not flat
        let mut phi = fx.phi0.clone();
        for id in phi.ids().collect::<Vec<_>>() {
            let t = phi.get_mut(id);
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v += 0.01 * ((k % 7) as f64 - 3.0);
            }
        }
        let theta = fx.theta.clone();
        // Φ's store is borrowed by the check; the penalty only needs a store
        // with the same tensor names and shapes, which Φ₀ provides.
        let r = finite_diff_check(&mut phi, 1e-6, |tape, pb| {
            let tb = tape.bind(&theta, false);
            task.phi_objective(tape, Side { store: &theta, bound: &tb }, Side { store: &fx.phi0, bound: pb }, &batch)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");

        let mut theta = fx.theta.clone();
        let r = finite_diff_check(&mut theta, 1e-6, |tape, tb| {
            let pb = tape.bind(&phi, false);
            task.theta_objective(tape, Side { store: &fx.theta, bound: tb }, Side { store: &phi, bound: &pb }, &batch)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn one_epoch_of_two_batches_alternates_phi_then_theta() {
        let fx = fixture(16, 3);
        let mut p = plan(HingeKind::Contrastive, StabilizerWeights::NONE);
        p.epochs = 1;
        let task = MlcSpenTask {
            energy: &fx.energy,
            net: &fx.net,
            train: &fx.train,
            dev: &fx.dev,
            plan: &p,
            anchor: None,
        };
        let (mut theta, mut phi) = (fx.theta.clone(), fx.phi0.clone());
        let out = minimax_train(&task, &p, &mut theta, &mut phi, &mut MetricsLog::memory()).unwrap();
        assert_eq!(out.schedule, vec![Player::Phi, Player::Theta]);
        let mut p3 = p.clone();
        p3.epochs = 2;
        p3.batch_size = 6;
        let (mut theta, mut phi) = (fx.theta.clone(), fx.phi0.clone());
        let out = minimax_train(&task, &p3, &mut theta, &mut phi, &mut MetricsLog::memory()).unwrap();
        use Player::*;
        assert_eq!(out.schedule, vec![Phi, Theta, Phi, Theta, Phi, Theta]);
    }

    /// Reports the raw dev hinge (the Φ objective with no stabilizers) as the
    /// dev metric.
    struct DevHinge<'a>(MlcSpenTask<'a>, MlcSpenTask<'a>);

    impl SpenTask for DevHinge<'_> {
        fn num_train(&self) -> usize {
            self.0.num_train()
        }
        fn phi_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var> {
            self.0.phi_objective(tape, theta, phi, batch)
        }
        fn theta_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var> {
            self.0.theta_objective(tape, theta, phi, batch)
        }
        fn dev_metric(&self, theta: &ParamStore, phi: &ParamStore) -> Result<f64> {
            let tape = Tape::new();
            let tb = tape.bind(theta, false);
            let pb = tape.bind(phi, false);
            let all: Vec<usize> = (0..self.1.num_train()).collect();
            let h = self.1.phi_objective(&tape, Side { store: theta, bound: &tb }, Side { store: phi, bound: &pb }, &all)?;
            Ok(tape.scalar(h))
        }
        fn metric_name(&self) -> &'static str {
            "hinge"
        }
    }

    #[test]
    fn frozen_energy_phi_steps_raise_the_dev_hinge() {
        let fx = fixture(16, 9);
        let mut p = plan(HingeKind::MarginRescaled, StabilizerWeights::NONE);
        p.epochs = 50;
        p.patience = 50;
        p.theta_optimizer = OptimizerConfig::adam(0.0);
        p.phi_optimizer = OptimizerConfig::adam(1e-3);
        let task = |train| MlcSpenTask {
            energy: &fx.energy,
            net: &fx.net,
            train,
            dev: &fx.dev,
            plan: &p,
            anchor: None,
        };
        let wrapped = DevHinge(task(&fx.train), task(&fx.dev));
        let (mut theta, mut phi) = (fx.theta.clone(), fx.phi0.clone());
        let before = wrapped.dev_metric(&theta, &phi).unwrap();
        let out = minimax_train(&wrapped, &p, &mut theta, &mut phi, &mut MetricsLog::memory()).unwrap();
        assert_eq!(theta.fingerprint(), fx.theta.fingerprint());
        assert_eq!(out.schedule.iter().filter(|&&s| s == Player::Phi).count(), 50);
        // Φ maximizes the hinge, so its loss (the negated hinge) should trend
        // down; dev is a separate sample, so single steps may move against it
        let mut series = vec![before];
        series.extend(&out.dev_history);
        let drops = series.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(drops * 10 <= series.len() - 1, "{drops} decreases in {series:?}");
        assert!(series[series.len() - 1] > before);
    }

    #[test]
    fn rerun_with_same_seed_is_identical() {
        let fx = fixture(40, 4);
        let p = plan(HingeKind::MarginRescaled, StabilizerWeights { l2: 1e-3, ..StabilizerWeights::NONE });
        let task = MlcSpenTask {
            energy: &fx.energy,
            net: &fx.net,
            train: &fx.train,
            dev: &fx.dev,
            plan: &p,
            anchor: None,
        };
        let run = || {
            let (mut theta, mut phi) = (fx.theta.clone(), fx.phi0.clone());
            let mut log = MetricsLog::memory();
            minimax_train(&task, &p, &mut theta, &mut phi, &mut log).unwrap();
            (log.to_tsv(), theta.fingerprint(), phi.fingerprint())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn local_pretraining_starts_at_l_ln2_and_is_deterministic() {
        let fx = fixture(30, 5);
        let mut store = fx.phi0.clone();
        let out_w = mlp_of(&fx.net).unwrap().output_weight();
        store.get_mut(out_w).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let tape = Tape::new();
        let pb = tape.bind(&store, false);
        let z = fx.net.logits(&tape, &pb, tape.constant(fx.train.inputs.clone()));
        let loss = tape.scalar(tape.mean(cross_entropy_rows(&tape, OutputKind::Bernoulli, z, &fx.train.gold)));
        assert!((loss - 6.0 * 2f64.ln()).abs() < 1e-12);

        let lp = LoopPlan::new(OptimizerConfig::adam(1e-3), 10, 7);
        let run = || {
            let mut s = store.clone();
            pretrain_mlc(&fx.net, &mut s, &fx.train.inputs, &fx.train.gold, None, &lp, &mut MetricsLog::memory())
                .unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.train_loss.last().unwrap() < &a.train_loss[0]);
    }

    #[test]
    fn retuning_never_raises_mean_energy() {
        let fx = fixture(10, 6);
        let task = MlcRetune {
            energy: &fx.energy,
            net: &fx.net,
            data: &fx.dev,
        };
        let mut psi = fx.phi0.clone();
        let zero = LoopPlan::new(OptimizerConfig::adam(1e-3), 0, 1);
        let out = retune(&task, &zero, &fx.theta, &mut psi, &mut MetricsLog::memory()).unwrap();
        assert_eq!(psi.fingerprint(), fx.phi0.fingerprint());
        assert_eq!(out.final_energy, out.initial_energy);
        for lr in [1e-5, 1e-2, 10.0] {
            let mut psi = fx.phi0.clone();
            let lp = LoopPlan::new(OptimizerConfig::adam(lr), 5, 1);
            let out = retune(&task, &lp, &fx.theta, &mut psi, &mut MetricsLog::memory()).unwrap();
            assert!(out.final_energy <= out.initial_energy);
            let now = task.mean_energy(&fx.theta, &psi).unwrap();
            assert_eq!(now, out.final_energy);
        }
    }

    #[test]
    fn energy_initialized_from_pretrained_output_layer() {
        let mut fx = fixture(5, 7);
        init_energy_from_pretrained(&fx.energy, &mut fx.theta, &fx.net, &fx.phi0).unwrap();
        let w = fx.phi0.get(mlp_of(&fx.net).unwrap().output_weight());
        let b = fx.theta.get(fx.energy.label_vectors());
        for (x, y) in w.data().iter().zip(b.data()) {
            assert_eq!(*y, -x);
        }
    }
}

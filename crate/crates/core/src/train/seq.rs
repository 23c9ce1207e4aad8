use super::loops::{fit, FitOutcome};
use super::loss::{
    cross_entropy_rows, entropy_rows, hinge_var, network_penalty, sequence_cost, squared_norm, sum_all, OutputKind,
};
use super::minimax::{RetuneTask, Side, SpenTask};
use super::plan::{LoopPlan, MetricsLog, StabilizerWeights, TrainPlan};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::data::{token_accuracy, SeqExample};
use crate::energy::{one_hot, relaxed_energy_value, ChainEnergy, JointEnergy};
use crate::error::{Error, Result};
use crate::inference::{discretize_seq, viterbi, InferenceNetwork};

/// Energy for sequence labeling: the chain energy alone, or the chain plus a
/// weighted tag-LM term whose parameters never train.
#[derive(Clone, Debug)]
pub enum SequenceEnergy {
    Chain(ChainEnergy),
    Joint { energy: JointEnergy, lm: ParamStore },
}

impl SequenceEnergy {
    pub fn chain(&self) -> &ChainEnergy {
        match self {
            Self::Chain(c) => c,
            Self::Joint { energy, .. } => &energy.chain,
        }
    }

    pub fn num_labels(&self) -> usize {
        self.chain().num_labels()
    }

    /// The tag LM's parameters bound as constants, if there is a TLM term.
    pub fn bind_lm(&self, tape: &Tape) -> Option<Bound> {
        match self {
            Self::Chain(_) => None,
            Self::Joint { lm, .. } => Some(tape.bind(lm, false)),
        }
    }

    /// `lm` must come from [`SequenceEnergy::bind_lm`] on the same tape.
    pub fn energy_from_unary(&self, tape: &Tape, theta: &Bound, lm: Option<&Bound>, unary: Var, y: Var) -> Var {
        match (self, lm) {
            (Self::Chain(c), _) => c.energy_from_unary(tape, theta, unary, y),
            (Self::Joint { energy, .. }, Some(lm)) => energy.energy_from_unary(tape, theta, lm, unary, y),
            (Self::Joint { .. }, None) => panic!("joint energy evaluated without its tag LM"),
        }
    }

    /// Tape-free energy for precomputed unary scores.
    pub fn value_from_unary(&self, theta: &ParamStore, unary: &Tensor, y: &Tensor) -> Result<f64> {
        let c = relaxed_energy_value(unary, theta.get(self.chain().transitions()), y);
        match self {
            Self::Chain(_) => Ok(c),
            Self::Joint { energy, lm } if energy.weight != 0.0 => Ok(c + energy.weight * energy.tlm.energy_value(lm, y)?),
            Self::Joint { .. } => Ok(c),
        }
    }

    pub fn unary_fast(&self, theta: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.chain().unary_fast(theta, x)
    }
}

/// Viterbi labels of one sentence under a chain energy.
pub fn viterbi_decode(chain: &ChainEnergy, theta: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
    let u = chain.unary_fast(theta, x)?;
    Ok(viterbi(&u, theta.get(chain.transitions()))?.0)
}

/// Token accuracy of Viterbi decoding.
pub fn viterbi_accuracy(chain: &ChainEnergy, theta: &ParamStore, data: &[SeqExample]) -> Result<f64> {
    let pred = data
        .iter()
        .map(|ex| viterbi_decode(chain, theta, &ex.x))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<usize>> = data.iter().map(|ex| ex.tags.clone()).collect();
    token_accuracy(&pred, &gold)
}

/// Per-position argmax of an inference network's output.
pub fn network_decode(net: &InferenceNetwork, store: &ParamStore, x: &Tensor) -> Result<Vec<usize>> {
    Ok(discretize_seq(&net.predict(store, x)?))
}

pub fn network_accuracy(net: &InferenceNetwork, store: &ParamStore, data: &[SeqExample]) -> Result<f64> {
    let pred = data
        .iter()
        .map(|ex| network_decode(net, store, &ex.x))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<Vec<usize>> = data.iter().map(|ex| ex.tags.clone()).collect();
    token_accuracy(&pred, &gold)
}

fn check_sequence_net(net: &InferenceNetwork, energy: &SequenceEnergy) -> Result<()> {
    if !net.is_sequence() || net.num_labels() != energy.num_labels() {
        return Err(Error::Invalid(format!(
            "inference network must be a sequence network over {} labels",
            energy.num_labels()
        )));
    }
    Ok(())
}

/// Alternating SPEN training for sequence labeling.
pub struct SeqSpenTask<'a> {
    pub energy: &'a SequenceEnergy,
    pub net: &'a InferenceNetwork,
    pub train: &'a [SeqExample],
    pub dev: &'a [SeqExample],
    pub plan: &'a TrainPlan,
    pub anchor: Option<&'a ParamStore>,
}

impl<'a> SeqSpenTask<'a> {
    pub fn new(
        energy: &'a SequenceEnergy,
        net: &'a InferenceNetwork,
        train: &'a [SeqExample],
        dev: &'a [SeqExample],
        plan: &'a TrainPlan,
        anchor: Option<&'a ParamStore>,
    ) -> Result<Self> {
        check_sequence_net(net, energy)?;
        Ok(Self {
            energy,
            net,
            train,
            dev,
            plan,
            anchor,
        })
    }
}

impl SpenTask for SeqSpenTask<'_> {
    fn num_train(&self) -> usize {
        self.train.len()
    }

    fn phi_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var> {
        let w = &self.plan.weights;
        let cost_kind = self.plan.hinge.effective_cost(self.plan.cost);
        let lm = self.energy.bind_lm(tape);
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &self.train[i];
            let z = self.net.logits(tape, phi.bound, tape.constant(ex.x.clone()));
            let y = tape.softmax_rows(z);
            // Θ is fixed during this step, so its unary scores are constants.
            let unary = tape.constant(self.energy.unary_fast(theta.store, &ex.x)?);
            let gold = one_hot(&ex.tags, self.energy.num_labels());
            let e_pred = self.energy.energy_from_unary(tape, theta.bound, lm.as_ref(), unary, y);
            let e_gold = self
                .energy
                .energy_from_unary(tape, theta.bound, lm.as_ref(), unary, tape.constant(gold.clone()));
            let delta = sequence_cost(tape, cost_kind, y, &gold, self.plan.per_token_cost);
            let mut t = hinge_var(tape, self.plan.hinge, delta, e_pred, e_gold);
            if w.entropy != 0.0 {
                let h = tape.sum(entropy_rows(tape, OutputKind::Categorical, z));
                t = tape.add(t, tape.scale(h, w.entropy));
            }
            if w.cross_entropy != 0.0 {
                let ce = tape.sum(cross_entropy_rows(tape, OutputKind::Categorical, z, &gold));
                t = tape.sub(t, tape.scale(ce, w.cross_entropy));
            }
            terms.push(t);
        }
        let mut obj = tape.scale(sum_all(tape, &terms), 1.0 / batch.len() as f64);
        if let Some(pen) = network_penalty(tape, phi.store, phi.bound, self.anchor, w)? {
            obj = tape.sub(obj, pen);
        }
        Ok(obj)
    }

    fn theta_objective(&self, tape: &Tape, theta: Side, phi: Side, batch: &[usize]) -> Result<Var> {
        let cost_kind = self.plan.hinge.effective_cost(self.plan.cost);
        let lm = self.energy.bind_lm(tape);
        let mut terms = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &self.train[i];
            let y = tape.constant(self.net.predict(phi.store, &ex.x)?);
            let unary = self.energy.chain().unary(tape, theta.bound, tape.constant(ex.x.clone()));
            let gold = one_hot(&ex.tags, self.energy.num_labels());
            let e_pred = self.energy.energy_from_unary(tape, theta.bound, lm.as_ref(), unary, y);
            let e_gold = self
                .energy
                .energy_from_unary(tape, theta.bound, lm.as_ref(), unary, tape.constant(gold.clone()));
            let delta = sequence_cost(tape, cost_kind, y, &gold, self.plan.per_token_cost);
            terms.push(hinge_var(tape, self.plan.hinge, delta, e_pred, e_gold));
        }
        let mut obj = tape.scale(sum_all(tape, &terms), 1.0 / batch.len() as f64);
        if self.plan.weights.energy_l2 > 0.0 {
            obj = tape.add(obj, tape.scale(squared_norm(tape, theta.bound), self.plan.weights.energy_l2));
        }
        Ok(obj)
    }

    fn dev_metric(&self, _theta: &ParamStore, phi: &ParamStore) -> Result<f64> {
        network_accuracy(self.net, phi, self.dev)
    }

    fn metric_name(&self) -> &'static str {
        "accuracy"
    }
}

/// Inputs together with their unary scores under a fixed energy.
#[derive(Clone, Debug)]
pub struct FixedEnergyInputs {
    pub inputs: Vec<Tensor>,
    pub unary: Vec<Tensor>,
    energy_fingerprint: u64,
}

impl FixedEnergyInputs {
    pub fn new(energy: &SequenceEnergy, theta: &ParamStore, inputs: Vec<Tensor>) -> Result<Self> {
        let unary = inputs
            .iter()
            .map(|x| energy.unary_fast(theta, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            inputs,
            unary,
            energy_fingerprint: theta.fingerprint(),
        })
    }

    fn check(&self, theta: &ParamStore) -> Result<()> {
        if theta.fingerprint() != self.energy_fingerprint {
            return Err(Error::Invalid("energy parameters changed after unary scores were cached".into()));
        }
        Ok(())
    }
}

/// `E(x, A(x))` for one cached input, plus the entropy and cross-entropy
/// stabilizers when weighted (entropy is subtracted: positive weights
/// reward higher entropy, matching the Φ objective's sign).
#[allow(clippy::too_many_arguments)]
fn inference_loss(
    tape: &Tape,
    energy: &SequenceEnergy,
    theta: &Bound,
    lm: Option<&Bound>,
    net: &InferenceNetwork,
    psi: &Bound,
    x: &Tensor,
    unary: &Tensor,
    gold: Option<&[usize]>,
    weights: &StabilizerWeights,
) -> Result<Var> {
    let z = net.logits(tape, psi, tape.constant(x.clone()));
    let y = tape.softmax_rows(z);
    let mut loss = energy.energy_from_unary(tape, theta, lm, tape.constant(unary.clone()), y);
    if weights.entropy != 0.0 {
        let h = tape.sum(entropy_rows(tape, OutputKind::Categorical, z));
        loss = tape.sub(loss, tape.scale(h, weights.entropy));
    }
    if weights.cross_entropy != 0.0 {
        let gold = gold.ok_or_else(|| Error::Invalid("cross-entropy stabilizer needs gold labels".into()))?;
        let g = one_hot(gold, energy.num_labels());
        let ce = tape.sum(cross_entropy_rows(tape, OutputKind::Categorical, z, &g));
        loss = tape.add(loss, tape.scale(ce, weights.cross_entropy));
    }
    Ok(loss)
}

fn mean_energy_of(
    energy: &SequenceEnergy,
    theta: &ParamStore,
    net: &InferenceNetwork,
    psi: &ParamStore,
    cached: &FixedEnergyInputs,
) -> Result<f64> {
    cached.check(theta)?;
    let mut total = 0.0;
    for (x, u) in cached.inputs.iter().zip(&cached.unary) {
        total += energy.value_from_unary(theta, u, &net.predict(psi, x)?)?;
    }
    Ok(total / cached.inputs.len() as f64)
}

/// Retuning of a sequence test-time network on unlabeled inputs.
pub struct SeqRetune<'a> {
    pub energy: &'a SequenceEnergy,
    pub net: &'a InferenceNetwork,
    pub cached: &'a FixedEnergyInputs,
}

impl RetuneTask for SeqRetune<'_> {
    fn num_inputs(&self) -> usize {
        self.cached.inputs.len()
    }

    fn energy_loss(&self, tape: &Tape, theta: &ParamStore, psi: &Bound, batch: &[usize]) -> Result<Var> {
        let tb = tape.bind(theta, false);
        let lm = self.energy.bind_lm(tape);
        let terms = batch
            .iter()
            .map(|&i| {
                inference_loss(
                    tape,
                    self.energy,
                    &tb,
                    lm.as_ref(),
                    self.net,
                    psi,
                    &self.cached.inputs[i],
                    &self.cached.unary[i],
                    None,
                    &StabilizerWeights::NONE,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.scale(sum_all(tape, &terms), 1.0 / batch.len() as f64))
    }

    fn mean_energy(&self, theta: &ParamStore, psi: &ParamStore) -> Result<f64> {
        mean_energy_of(self.energy, theta, self.net, psi, self.cached)
    }
}

/// Stabilizer used while distilling a fixed energy into an inference network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Stabilizer {
    /// Local cross entropy against gold labels.
    CrossEntropy(f64),
    /// Entropy; positive weights reward higher-entropy outputs.
    Entropy(f64),
    /// Squared distance to a pretrained network.
    AnchorL2(f64),
    None,
}

impl Stabilizer {
    pub fn weights(self) -> StabilizerWeights {
        let mut w = StabilizerWeights::NONE;
        match self {
            Self::CrossEntropy(v) => w.cross_entropy = v,
            Self::Entropy(v) => w.entropy = v,
            Self::AnchorL2(v) => w.anchor = v,
            Self::None => {}
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillOutcome {
    pub fit: FitOutcome,
    pub dev_accuracy: f64,
}

/// Trains an inference network to minimize a fixed energy on the training
/// inputs plus a stabilizer, early-stopping on dev token accuracy. The
/// energy is only read.
#[allow(clippy::too_many_arguments)]
pub fn distill(
    energy: &SequenceEnergy,
    theta: &ParamStore,
    net: &InferenceNetwork,
    psi: &mut ParamStore,
    anchor: Option<&ParamStore>,
    stabilizer: Stabilizer,
    train: &[SeqExample],
    dev: &[SeqExample],
    plan: &LoopPlan,
    log: &mut MetricsLog,
) -> Result<DistillOutcome> {
    check_sequence_net(net, energy)?;
    let weights = stabilizer.weights();
    weights.validate()?;
    if weights.anchor > 0.0 && anchor.is_none() {
        return Err(Error::Invalid("anchor stabilizer needs a pretrained network".into()));
    }
    let cached = FixedEnergyInputs::new(energy, theta, train.iter().map(|ex| ex.x.clone()).collect())?;
    let psi_shape = psi.clone();
    let fitted = fit(
        psi,
        train.len(),
        plan,
        "distill",
        log,
        |tape, p, batch, _| {
            let tb = tape.bind(theta, false);
            let lm = energy.bind_lm(tape);
            let terms = batch
                .iter()
                .map(|&i| {
                    inference_loss(
                        tape,
                        energy,
                        &tb,
                        lm.as_ref(),
                        net,
                        p,
                        &cached.inputs[i],
                        &cached.unary[i],
                        Some(&train[i].tags),
                        &weights,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut loss = tape.scale(sum_all(tape, &terms), 1.0 / batch.len() as f64);
            if weights.anchor > 0.0 {
                let pen = network_penalty(tape, &psi_shape, p, anchor, &weights)?.expect("anchor weight is positive");
                loss = tape.add(loss, pen);
            }
            Ok(loss)
        },
        |s| Ok(Some(("accuracy", network_accuracy(net, s, dev)?))),
    )?;
    let dev_accuracy = network_accuracy(net, psi, dev)?;
    Ok(DistillOutcome {
        fit: fitted,
        dev_accuracy,
    })
}

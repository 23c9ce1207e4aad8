use std::cell::Cell;

use super::chain::{check_sequence_simplex, ChainEnergy};
use crate::autodiff::{Bound, ParamStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::TagLm;

/// Floor applied to `y_t^T LM(prefix)` before taking the log.
pub const TLM_FLOOR: f64 = 1e-12;

/// Tag-language-model energy:
/// `-sum_{t=1}^{N+1} log(y_t^T LM(y_0 .. y_{t-1}))` with `y_0` the start
/// symbol and `y_{N+1}` the end symbol.
///
/// The language model's parameters are never trained through this energy;
/// callers bind its store as non-trainable.
#[derive(Clone, Debug)]
pub struct TlmEnergy {
    lm: TagLm,
    clamped: Cell<u64>,
}

impl TlmEnergy {
    pub fn new(lm: TagLm) -> Self {
        Self {
            lm,
            clamped: Cell::new(0),
        }
    }

    pub fn lm(&self) -> &TagLm {
        &self.lm
    }

    pub fn num_labels(&self) -> usize {
        self.lm.num_tags()
    }

    /// Number of inner products that have hit [`TLM_FLOOR`] so far.
    pub fn clamp_events(&self) -> u64 {
        self.clamped.get()
    }

    /// `(N+1) x (L+1)` LM inputs `[SOS; y]` and targets `[y; EOS]`.
    fn inputs_and_targets(&self, tape: &Tape, y: Var) -> (Var, Var) {
        let (n, l) = tape.shape(y);
        let mut sos = Tensor::zeros(1, l + 1);
        sos.set(0, self.lm.sos(), 1.0);
        let mut eos = Tensor::zeros(1, l + 1);
        eos.set(0, self.lm.eos(), 1.0);
        let padded = tape.concat_cols(&[y, tape.constant(Tensor::zeros(n, 1))]);
        let inputs = tape.concat_rows(&[tape.constant(sos), padded]);
        let targets = tape.concat_rows(&[padded, tape.constant(eos)]);
        (inputs, targets)
    }

    /// Energy of relaxed outputs `y` (`N x L`).
    pub fn energy(&self, tape: &Tape, lm_p: &Bound, y: Var) -> Var {
        let (inputs, targets) = self.inputs_and_targets(tape, y);
        let dist = self.lm.next_distributions::<crate::Rng>(tape, lm_p, inputs, None);
        let inner = tape.sum_rows(tape.mul(dist, targets));
        let hits = tape.value(inner).data().iter().filter(|&&v| v < TLM_FLOOR).count() as u64;
        if hits > 0 {
            self.clamped.set(self.clamped.get() + hits);
            log::warn!("tag LM energy clamped {hits} inner product(s) at {TLM_FLOOR}");
        }
        tape.neg(tape.sum(tape.log_clamped(inner, TLM_FLOOR)))
    }

    /// Validating tape-free energy.
    pub fn energy_value(&self, lm_store: &ParamStore, y: &Tensor) -> Result<f64> {
        check_sequence_simplex(y, self.num_labels(), "tlm_energy")?;
        let tape = Tape::new();
        let p = tape.bind(lm_store, false);
        let e = self.energy(&tape, &p, tape.constant(y.clone()));
        Ok(tape.scalar(e))
    }
}

/// `chain + weight * tlm`.
#[derive(Clone, Debug)]
pub struct JointEnergy {
    pub chain: ChainEnergy,
    pub tlm: TlmEnergy,
    pub weight: f64,
}

impl JointEnergy {
    pub fn energy_from_unary(&self, tape: &Tape, chain_p: &Bound, lm_p: &Bound, unary: Var, y: Var) -> Var {
        let c = self.chain.energy_from_unary(tape, chain_p, unary, y);
        if self.weight == 0.0 {
            return c;
        }
        let t = self.tlm.energy(tape, lm_p, y);
        tape.add(c, tape.scale(t, self.weight))
    }

    pub fn energy(&self, tape: &Tape, chain_p: &Bound, lm_p: &Bound, x: Var, y: Var) -> Var {
        let u = self.chain.unary(tape, chain_p, x);
        self.energy_from_unary(tape, chain_p, lm_p, u, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::energy::chain::one_hot;
    use crate::rng_from_seed;
    use rand::Rng as _;

    fn lm(tags: usize, seed: u64) -> (ParamStore, TlmEnergy) {
        let mut store = ParamStore::new();
        let lm = TagLm::new(&mut store, "lm", tags, 6, 1, &mut rng_from_seed(seed)).unwrap();
        (store, TlmEnergy::new(lm))
    }

    #[test]
    fn uniform_lm_gives_log_of_output_size_per_step() {
        let (mut store, e) = lm(3, 0);
        store.set_all(0.0);
        let y = Tensor::from_rows(4, 3, vec![0.2, 0.3, 0.5, 1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.1, 0.1, 0.8]);
        // three tags plus the end symbol
        let expected = 5.0 * 4f64.ln();
        assert!((e.energy_value(&store, &y).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn one_hot_energy_is_sequence_nll() {
        let (store, e) = lm(4, 1);
        for tags in [vec![0], vec![3, 1, 2], vec![2, 2, 0, 1, 3]] {
            let energy = e.energy_value(&store, &one_hot(&tags, 4)).unwrap();
            let nll = e.lm().sequence_nll(&store, &tags);
            assert!((energy - nll).abs() < 1e-9);
            assert!(energy >= 0.0);
        }
    }

    #[test]
    fn table_lm_sum_of_lookups() {
        // sum of three next-tag lookups: A after SOS, B after A, EOS after B
        let (store, e) = lm(2, 7);
        let tags = [0usize, 1];
        let sos = vec![0.0, 0.0, 1.0];
        let a = vec![1.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0];
        let p1 = e.lm().tag_lm_next(&store, &[sos.clone()]).unwrap()[0];
        let p2 = e.lm().tag_lm_next(&store, &[sos.clone(), a.clone()]).unwrap()[1];
        let p3 = e.lm().tag_lm_next(&store, &[sos, a, b]).unwrap()[2];
        let expected = -(p1.ln() + p2.ln() + p3.ln());
        let got = e.energy_value(&store, &one_hot(&tags, 2)).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn floor_is_counted() {
        let (mut store, e) = lm(2, 2);
        store.set_all(0.0);
        store.assign("lm.out.b", Tensor::row_vector(vec![-1e3, 0.0, 0.0])).unwrap();
        let before = e.clamp_events();
        let v = e.energy_value(&store, &one_hot(&[0], 2)).unwrap();
        assert!(v.is_finite());
        assert_eq!(e.clamp_events(), before + 1);
    }

    #[test]
    fn gradient_wrt_outputs_matches_finite_differences() {
        let (lm_store, e) = lm(3, 5);
        let mut ys = ParamStore::new();
        let mut rng = rng_from_seed(9);
        let logits = ys.add(
            "logits",
            Tensor::from_rows(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()),
        );
        let report = finite_diff_check(&mut ys, 1e-6, |tape, p| {
            let lp = tape.bind(&lm_store, false);
            Ok(e.energy(tape, &lp, tape.softmax_rows(p[logits])))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn joint_is_weighted_sum_and_gradients_add() {
        let mut chain_store = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let chain = ChainEnergy::new(&mut chain_store, 2, 3, 3, &mut rng).unwrap();
        let (lm_store, tlm) = lm(3, 4);
        let x = Tensor::from_rows(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = Tensor::from_rows(3, 3, vec![0.2, 0.3, 0.5, 0.6, 0.2, 0.2, 0.1, 0.1, 0.8]);
        let e1 = chain.energy_value(&chain_store, &x, &y).unwrap();
        let e2 = tlm.energy_value(&lm_store, &y).unwrap();
        for w in [0.0, 0.5] {
            let joint = JointEnergy {
                chain: chain.clone(),
                tlm: tlm.clone(),
                weight: w,
            };
            let tape = Tape::new();
            let cp = tape.bind(&chain_store, false);
            let lp = tape.bind(&lm_store, false);
            let v = joint.energy(&tape, &cp, &lp, tape.constant(x.clone()), tape.constant(y.clone()));
            assert!((tape.scalar(v) - (e1 + w * e2)).abs() < 1e-12);
        }

        let joint = JointEnergy {
            chain,
            tlm,
            weight: 0.5,
        };
        let mut ys = ParamStore::new();
        let logits = ys.add("logits", y.map(f64::ln));
        let report = finite_diff_check(&mut ys, 1e-6, |tape, p| {
            let cp = tape.bind(&chain_store, false);
            let lp = tape.bind(&lm_store, false);
            Ok(joint.energy(tape, &cp, &lp, tape.constant(x.clone()), tape.softmax_rows(p[logits])))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

use super::params::ParamStore;
use super::tape::{Bound, Tape, Var};
use crate::error::{Error, Result};

/// Worst entry found by [`finite_diff_check`].
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences for every entry of `store`.
///
/// The per-entry error is `|a - n| / (|a| + |n| + 1e-12)`; the report
/// carries the maximum. `f` is evaluated once with gradients and twice per
/// entry without.
pub fn finite_diff_check<F>(store: &mut ParamStore, epsilon: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&Tape, &Bound) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Invalid(format!(
            "finite-difference epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let analytic = {
        let tape = Tape::new();
        let bound = tape.bind(store, true);
        let out = f(&tape, &bound)?;
        check_finite(tape.scalar(out))?;
        let mut grads = tape.backward(out)?;
        grads.for_params(&bound)
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let bound = tape.bind(store, false);
        let out = f(&tape, &bound)?;
        check_finite(tape.scalar(out))
    };

    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + epsilon;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - epsilon;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[k].as_ref().map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.entries_checked == 1 {
                report.max_rel_error = err;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            name: "finite-difference objective".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add_uniform("x", 1, 4, &mut rng);
        let a: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = Tensor::from_rows(4, 4, a);
        let r = finite_diff_check(&mut store, 1e-5, |t, b| {
            let av = t.constant(a.clone());
            let xv = b[x];
            let ax = t.matmul(xv, av);
            Ok(t.dot(ax, xv))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn two_layer_mlp_squared_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w1 = store.add_uniform("w1", 3, 5, &mut rng);
        let b1 = store.add_uniform("b1", 1, 5, &mut rng);
        let w2 = store.add_uniform("w2", 5, 2, &mut rng);
        let b2 = store.add_uniform("b2", 1, 2, &mut rng);
        let x = Tensor::from_rows(2, 3, vec![0.5, -1.0, 0.25, 1.5, 0.3, -0.7]);
        let y = Tensor::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let r = finite_diff_check(&mut store, 1e-5, |t, b| {
            let h = t.tanh(t.affine(t.constant(x.clone()), b[w1], b[b1]));
            let o = t.sigmoid(t.affine(h, b[w2], b[b2]));
            Ok(t.sum_sq(t.sub(o, t.constant(y.clone()))))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn epsilon_range_enforced() {
        let mut store = ParamStore::new();
        store.add_zeros("x", 1, 1);
        assert!(finite_diff_check(&mut store, 1e-2, |t, b| Ok(t.sum(b.vars()[0]))).is_err());
        assert!(finite_diff_check(&mut store, 1e-9, |t, b| Ok(t.sum(b.vars()[0]))).is_err());
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.add_zeros("x", 1, 1);
        let r = finite_diff_check(&mut store, 1e-5, |t, b| Ok(t.log(t.sum(b.vars()[0]))));
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }
}

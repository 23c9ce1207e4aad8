use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    SgdMomentum { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            learning_rate,
        }
    }

    pub fn sgd_momentum(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::SgdMomentum { momentum },
            learning_rate,
        }
    }

    pub fn build(&self, store: &ParamStore) -> Optimizer {
        Optimizer::new(*self, store)
    }
}

/// Optimizer state with one accumulator set per parameter of a store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        if let OptimizerKind::SgdMomentum { momentum } = config.kind {
            assert!(
                (0.0..1.0).contains(&momentum),
                "momentum {momentum} outside [0, 1)"
            );
        }
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        let second = match config.kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::SgdMomentum { .. } => Vec::new(),
        };
        Self {
            config,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// moves; a non-finite entry aborts the step and names the tensor.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "gradient count vs parameter count");
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        name: format!("gradient of {}", store.name(id)),
                    });
                }
            }
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        let ids: Vec<_> = store.ids().collect();
        match self.config.kind {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for (k, id) in ids.into_iter().enumerate() {
                    let Some(g) = &grads[k] else { continue };
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        let gi = g.data()[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        p[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum { momentum } => {
                for (k, id) in ids.into_iter().enumerate() {
                    let Some(g) = &grads[k] else { continue };
                    let vel = &mut self.first[k];
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        vel[i] = momentum * vel[i] - lr * g.data()[i];
                        p[i] += vel[i];
                    }
                }
            }
        }
        for id in store.ids() {
            if !store.get(id).all_finite() {
                return Err(Error::NonFinite {
                    name: store.name(id).to_string(),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v));
        s
    }

    fn g(v: f64) -> Vec<Option<Tensor>> {
        vec![Some(Tensor::scalar(v))]
    }

    fn p(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.item()
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for grad in [3.0, -0.02, 1e-3] {
            let mut s = one_param(0.0);
            let mut opt = OptimizerConfig::adam(0.001).build(&s);
            opt.step(&mut s, &g(grad)).unwrap();
            let expect = -0.001 * grad / (grad.abs() + 1e-8);
            assert!((p(&s) - expect).abs() < 1e-12, "{} vs {}", p(&s), expect);
            assert!((p(&s).abs() - 0.001).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut s = one_param(1.5);
        let mut opt = OptimizerConfig::adam(0.001).build(&s);
        opt.step(&mut s, &g(0.0)).unwrap();
        assert_eq!(p(&s), 1.5);
    }

    #[test]
    fn adam_constant_gradient_second_step_not_larger() {
        let mut s = one_param(0.0);
        let mut opt = OptimizerConfig::adam(0.001).build(&s);
        opt.step(&mut s, &g(0.7)).unwrap();
        let first = p(&s).abs();
        let before = p(&s);
        opt.step(&mut s, &g(0.7)).unwrap();
        let second = (p(&s) - before).abs();
        assert!(second <= first + 1e-9);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut s = one_param(1.0);
        let mut opt = OptimizerConfig::adam(0.001).build(&s);
        let err = opt.step(&mut s, &g(f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("gradient of p"));
        assert_eq!(p(&s), 1.0);
    }

    #[test]
    fn plain_sgd_step() {
        let mut s = one_param(1.0);
        let mut opt = OptimizerConfig::sgd_momentum(0.1, 0.0).build(&s);
        opt.step(&mut s, &g(1.0)).unwrap();
        assert!((p(&s) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_step_converges_to_geometric_limit() {
        let mut s = one_param(0.0);
        let mut opt = OptimizerConfig::sgd_momentum(0.01, 0.9).build(&s);
        let mut last = 0.0;
        let mut step = 0.0;
        for _ in 0..500 {
            opt.step(&mut s, &g(2.0)).unwrap();
            step = (p(&s) - last).abs();
            last = p(&s);
        }
        assert!((step - 0.01 * 2.0 / 0.1).abs() < 1e-9);
    }

    #[test]
    fn sgd_zero_gradient_unchanged() {
        let mut s = one_param(-2.0);
        let mut opt = OptimizerConfig::sgd_momentum(0.1, 0.9).build(&s);
        opt.step(&mut s, &g(0.0)).unwrap();
        assert_eq!(p(&s), -2.0);
    }
}

use crate::autodiff::{Tape, Tensor, Var};

/// Feasible set for gradient-descent inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// `[0, 1]^L`; steps are followed by clamping.
    UnitBox,
    /// One simplex per row; optimized through unconstrained logits mapped by softmax.
    Simplex,
}

/// Step-size halvings allowed before a step is rejected.
pub const MAX_HALVINGS: usize = 5;

#[derive(Clone, Debug)]
pub struct GdOutcome {
    pub y: Tensor,
    /// Energy before the first step and after each step.
    pub trajectory: Vec<f64>,
    /// Set when a non-finite energy or gradient stopped the descent early.
    pub aborted: bool,
}

/// Minimizes `energy(y)` over the relaxed domain by gradient descent from the
/// uniform point. A step that raises the energy is retried with the step size
/// halved, up to [`MAX_HALVINGS`] times, and rejected if it still does; the
/// reduced step size carries over to later iterations. The trajectory is
/// therefore non-increasing.
pub fn gd_inference<F>(energy: F, rows: usize, cols: usize, domain: Domain, steps: usize, step_size: f64) -> GdOutcome
where
    F: Fn(&Tape, Var) -> Var,
{
    let init = match domain {
        Domain::UnitBox => Tensor::filled(rows, cols, 0.5),
        Domain::Simplex => Tensor::zeros(rows, cols),
    };
    let to_output = |param: &Tensor| -> Tensor {
        match domain {
            Domain::UnitBox => param.clone(),
            Domain::Simplex => {
                let mut y = param.clone();
                for row in y.data_mut().chunks_mut(cols.max(1)) {
                    crate::autodiff::softmax_in_place(row);
                }
                y
            }
        }
    };
    let eval = |param: &Tensor, want_grad: bool| -> (f64, Option<Tensor>) {
        let tape = Tape::new();
        let v = tape.var(param.clone());
        let y = match domain {
            Domain::UnitBox => v,
            Domain::Simplex => tape.softmax_rows(v),
        };
        let e = energy(&tape, y);
        let value = tape.scalar(e);
        if !want_grad || !value.is_finite() {
            return (value, None);
        }
        let grad = tape
            .backward(e)
            .ok()
            .and_then(|g| g.wrt(v).cloned())
            .unwrap_or_else(|| Tensor::zeros(rows, cols));
        (value, Some(grad))
    };

    let mut param = init;
    let (mut value, mut grad) = eval(&param, steps > 0);
    let mut trajectory = vec![value];
    if !value.is_finite() {
        return GdOutcome {
            y: to_output(&param),
            trajectory,
            aborted: true,
        };
    }
    let mut eta = step_size;
    for _ in 0..steps {
        let g = grad.take().expect("gradient available after a finite evaluation");
        if !g.all_finite() {
            return GdOutcome {
                y: to_output(&param),
                trajectory,
                aborted: true,
            };
        }
        let mut accepted = None;
        for attempt in 0..=MAX_HALVINGS {
            if attempt > 0 {
                eta *= 0.5;
            }
            let mut cand = param.clone();
            for (c, gv) in cand.data_mut().iter_mut().zip(g.data()) {
                *c -= eta * gv;
                if domain == Domain::UnitBox {
                    *c = c.clamp(0.0, 1.0);
                }
            }
            let (cv, _) = eval(&cand, false);
            if cv.is_finite() && cv <= value {
                accepted = Some((cand, cv));
                break;
            }
        }
        if let Some((cand, cv)) = accepted {
            param = cand;
            value = cv;
        }
        trajectory.push(value);
        grad = eval(&param, true).1;
    }
    GdOutcome {
        y: to_output(&param),
        trajectory,
        aborted: false,
    }
}

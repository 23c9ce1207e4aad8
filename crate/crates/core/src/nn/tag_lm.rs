use rand::Rng;

use super::lstm::LstmCell;
use crate::autodiff::{softmax_in_place, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

const SIMPLEX_TOL: f64 = 1e-6;

/// LSTM language model over tag vectors.
///
/// Inputs live in `num_tags + 1` dimensions (the tags plus a reserved
/// start-of-sequence slot at index `num_tags`); outputs are distributions
/// over `num_tags + 1` symbols (the tags plus end-of-sequence at index
/// `num_tags`). Inputs may be any point of the simplex, not only one-hot
/// vertices.
#[derive(Clone, Debug)]
pub struct TagLm {
    num_tags: usize,
    layers: Vec<LstmCell>,
    out_w: ParamId,
    out_b: ParamId,
}

impl TagLm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        num_tags: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_tags == 0 || hidden == 0 || num_layers == 0 {
            return Err(Error::Invalid("tag LM needs tags, hidden units and at least one layer".into()));
        }
        let layers = (0..num_layers)
            .map(|k| {
                let input = if k == 0 { num_tags + 1 } else { hidden };
                LstmCell::new(store, &format!("{prefix}.lstm{k}"), input, hidden, rng)
            })
            .collect();
        let out_w = store.add_uniform(format!("{prefix}.out.w"), hidden, num_tags + 1, rng);
        let out_b = store.add_zeros(format!("{prefix}.out.b"), 1, num_tags + 1);
        Ok(Self {
            num_tags,
            layers,
            out_w,
            out_b,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.num_tags
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Input index of the start-of-sequence symbol.
    pub fn sos(&self) -> usize {
        self.num_tags
    }

    /// Output index of the end-of-sequence symbol.
    pub fn eos(&self) -> usize {
        self.num_tags
    }

    /// Row `t` of the result is the next-symbol distribution after reading
    /// rows `0..=t` of `inputs` (`m x (num_tags + 1)`, row 0 being the
    /// start symbol). `dropout` applies an inverted-dropout mask to every
    /// layer's hidden output; pass `None` in evaluation mode.
    pub fn next_distributions<R: Rng>(
        &self,
        tape: &Tape,
        p: &Bound,
        inputs: Var,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Var {
        let mut h = inputs;
        for cell in &self.layers {
            let states = cell.run(tape, p, h, false);
            h = tape.concat_rows(&states);
            if let Some((rate, rng)) = dropout.as_mut() {
                if *rate > 0.0 {
                    let (r, c) = tape.shape(h);
                    let keep = 1.0 - *rate;
                    let mask = (0..r * c)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    h = tape.mul(h, tape.constant(Tensor::from_rows(r, c, mask)));
                }
            }
        }
        tape.softmax_rows(tape.affine(h, p[self.out_w], p[self.out_b]))
    }

    /// One-hot input matrix `[SOS, tags...]` for a discrete sequence.
    pub fn one_hot_inputs(&self, tags: &[usize]) -> Tensor {
        let w = self.num_tags + 1;
        let mut t = Tensor::zeros(tags.len() + 1, w);
        t.set(0, self.sos(), 1.0);
        for (i, &y) in tags.iter().enumerate() {
            t.set(i + 1, y, 1.0);
        }
        t
    }

    /// Tape-free next-symbol distribution for a prefix whose first vector is
    /// the start-of-sequence one-hot. Every vector must lie on the simplex.
    pub fn tag_lm_next(&self, store: &ParamStore, prefix: &[Vec<f64>]) -> Result<Vec<f64>> {
        let w = self.num_tags + 1;
        if prefix.is_empty() {
            return Err(Error::Empty("tag LM prefix".into()));
        }
        for (t, v) in prefix.iter().enumerate() {
            check_simplex(v, w, t)?;
        }
        if (prefix[0][self.sos()] - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain {
                op: "tag_lm_next",
                detail: "prefix must start with the start-of-sequence vector".into(),
            });
        }
        let xs = Tensor::from_rows(prefix.len(), w, prefix.concat());
        let probs = self.distributions_fast(store, &xs);
        Ok(probs.row(prefix.len() - 1).to_vec())
    }

    /// Tape-free evaluation-mode version of [`TagLm::next_distributions`].
    pub fn distributions_fast(&self, store: &ParamStore, inputs: &Tensor) -> Tensor {
        let mut h = inputs.clone();
        for cell in &self.layers {
            h = cell.run_fast(store, &h, false);
        }
        let mut z = h.matmul(store.get(self.out_w)).expect("tag LM widths");
        let b = store.get(self.out_b).data();
        let c = z.cols();
        for row in z.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
            softmax_in_place(row);
        }
        z
    }

    /// Negative log-likelihood of a discrete tag sequence, end symbol included.
    pub fn sequence_nll(&self, store: &ParamStore, tags: &[usize]) -> f64 {
        let probs = self.distributions_fast(store, &self.one_hot_inputs(tags));
        let mut nll = 0.0;
        for t in 0..=tags.len() {
            let target = if t < tags.len() { tags[t] } else { self.eos() };
            nll -= probs.get(t, target).ln();
        }
        nll
    }
}

fn check_simplex(v: &[f64], width: usize, t: usize) -> Result<()> {
    if v.len() != width {
        return Err(Error::Shape {
            op: "tag_lm_next",
            detail: format!("prefix vector {t} has width {} (expected {width})", v.len()),
        });
    }
    let sum: f64 = v.iter().sum();
    if v.iter().any(|&x| x < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::Domain {
            op: "tag_lm_next",
            detail: format!("prefix vector {t} is not on the simplex (sum {sum})"),
        });
    }
    Ok(())
}

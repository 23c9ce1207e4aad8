use rand::Rng;

use crate::autodiff::{sigmoid, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Standard LSTM cell. Gate columns are laid out `[input | forget | output | candidate]`.
#[derive(Clone, Debug)]
pub struct LstmCell {
    input: usize,
    hidden: usize,
    w_x: ParamId,
    w_h: ParamId,
    bias: ParamId,
}

impl LstmCell {
    /// Weights are Glorot-uniform; the forget-gate bias starts at 1.
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = store.add_uniform(format!("{prefix}.w_x"), input, 4 * hidden, rng);
        let w_h = store.add_uniform(format!("{prefix}.w_h"), hidden, 4 * hidden, rng);
        let mut b = Tensor::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.data_mut()[j] = 1.0;
        }
        let bias = store.add(format!("{prefix}.b"), b);
        Self {
            input,
            hidden,
            w_x,
            w_h,
            bias,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.w_x, self.w_h, self.bias]
    }

    /// One hidden state (`1 x hidden`) per row of `xs`, in row order.
    /// With `reverse` the recurrence runs from the last row to the first.
    pub fn run(&self, tape: &Tape, p: &Bound, xs: Var, reverse: bool) -> Vec<Var> {
        let (n, _) = tape.shape(xs);
        let h = self.hidden;
        let pre = tape.affine(xs, p[self.w_x], p[self.bias]);
        let mut out = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..n).rev())
        } else {
            Box::new(0..n)
        };
        for t in order {
            let mut z = tape.row(pre, t);
            if let Some((hp, _)) = state {
                z = tape.add(z, tape.matmul(hp, p[self.w_h]));
            }
            let s = tape.sigmoid(tape.slice_cols(z, 0, 3 * h));
            let gi = tape.slice_cols(s, 0, h);
            let go = tape.slice_cols(s, 2 * h, 3 * h);
            let cand = tape.tanh(tape.slice_cols(z, 3 * h, 4 * h));
            let mut c = tape.mul(gi, cand);
            if let Some((_, cp)) = state {
                let gf = tape.slice_cols(s, h, 2 * h);
                c = tape.add(c, tape.mul(gf, cp));
            }
            let hn = tape.mul(go, tape.tanh(c));
            out[t] = Some(hn);
            state = Some((hn, c));
        }
        out.into_iter().map(Option::unwrap).collect()
    }

    /// Tape-free equivalent of [`LstmCell::run`], returning an `n x hidden` matrix.
    pub fn run_fast(&self, store: &ParamStore, xs: &Tensor, reverse: bool) -> Tensor {
        let n = xs.rows();
        let h = self.hidden;
        let pre = xs.matmul(store.get(self.w_x)).expect("lstm input width");
        let b = store.get(self.bias).data();
        let wh = store.get(self.w_h).data();
        let mut out = Tensor::zeros(n, h);
        let mut hp = vec![0.0; h];
        let mut cp = vec![0.0; h];
        let mut z = vec![0.0; 4 * h];
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            for (j, zj) in z.iter_mut().enumerate() {
                *zj = pre.get(t, j) + b[j];
            }
            if step > 0 {
                for (k, &hk) in hp.iter().enumerate() {
                    if hk == 0.0 {
                        continue;
                    }
                    let row = &wh[k * 4 * h..(k + 1) * 4 * h];
                    for (zj, w) in z.iter_mut().zip(row) {
                        *zj += hk * w;
                    }
                }
            }
            for j in 0..h {
                let gi = sigmoid(z[j]);
                let gf = sigmoid(z[h + j]);
                let go = sigmoid(z[2 * h + j]);
                let cand = z[3 * h + j].tanh();
                let c = if step > 0 { gf * cp[j] + gi * cand } else { gi * cand };
                cp[j] = c;
                hp[j] = go * c.tanh();
                out.set(t, j, hp[j]);
            }
        }
        out
    }
}

/// Bidirectional LSTM producing one feature vector per position.
///
/// The two directions' states are concatenated (width `2 * hidden`) and,
/// when a projection is configured, mapped back to `hidden` through an
/// affine layer with `tanh`.
#[derive(Clone, Debug)]
pub struct BlstmEncoder {
    forward: LstmCell,
    backward: LstmCell,
    projection: Option<(ParamId, ParamId)>,
}

impl BlstmEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        project: bool,
        rng: &mut R,
    ) -> Self {
        let forward = LstmCell::new(store, &format!("{prefix}.fwd"), input, hidden, rng);
        let backward = LstmCell::new(store, &format!("{prefix}.bwd"), input, hidden, rng);
        let projection = project.then(|| {
            (
                store.add_uniform(format!("{prefix}.proj.w"), 2 * hidden, hidden, rng),
                store.add_zeros(format!("{prefix}.proj.b"), 1, hidden),
            )
        });
        Self {
            forward,
            backward,
            projection,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward.hidden
    }

    pub fn is_projected(&self) -> bool {
        self.projection.is_some()
    }

    pub fn output_dim(&self) -> usize {
        if self.projection.is_some() {
            self.forward.hidden
        } else {
            2 * self.forward.hidden
        }
    }

    pub fn cells(&self) -> (&LstmCell, &LstmCell) {
        (&self.forward, &self.backward)
    }

    /// Encodes an `n x input` matrix into `n x output_dim` features.
    pub fn encode(&self, tape: &Tape, p: &Bound, xs: Var) -> Var {
        let f = self.forward.run(tape, p, xs, false);
        let b = self.backward.run(tape, p, xs, true);
        let both = tape.concat_cols(&[tape.concat_rows(&f), tape.concat_rows(&b)]);
        match self.projection {
            Some((w, bias)) => tape.tanh(tape.affine(both, p[w], p[bias])),
            None => both,
        }
    }

    /// Validating wrapper around [`BlstmEncoder::encode`].
    pub fn encode_checked(&self, tape: &Tape, p: &Bound, xs: &Tensor) -> Result<Var> {
        self.check_input(xs)?;
        Ok(self.encode(tape, p, tape.constant(xs.clone())))
    }

    fn check_input(&self, xs: &Tensor) -> Result<()> {
        if xs.is_empty() {
            return Err(Error::Empty("sequence to encode".into()));
        }
        if xs.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "blstm_encode",
                detail: format!("input width {} but encoder expects {}", xs.cols(), self.input_dim()),
            });
        }
        Ok(())
    }

    /// Tape-free equivalent of [`BlstmEncoder::encode`].
    pub fn encode_fast(&self, store: &ParamStore, xs: &Tensor) -> Result<Tensor> {
        self.check_input(xs)?;
        let f = self.forward.run_fast(store, xs, false);
        let b = self.backward.run_fast(store, xs, true);
        let n = xs.rows();
        let h = self.forward.hidden;
        let mut both = Vec::with_capacity(n * 2 * h);
        for t in 0..n {
            both.extend_from_slice(f.row(t));
            both.extend_from_slice(b.row(t));
        }
        let both = Tensor::from_rows(n, 2 * h, both);
        Ok(match self.projection {
            Some((w, bias)) => {
                let mut z = both.matmul(store.get(w))?;
                let b = store.get(bias).data();
                for (i, v) in z.data_mut().iter_mut().enumerate() {
                    *v = (*v + b[i % h]).tanh();
                }
                z
            }
            None => both,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::from_rows(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn zero_parameters_give_zero_features() {
        let mut store = ParamStore::new();
        let enc = BlstmEncoder::new(&mut store, "e", 3, 4, true, &mut rng_from_seed(1));
        store.set_all(0.0);
        let out = enc.encode_fast(&store, &random_input(5, 3, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!((out.rows(), out.cols()), (5, 4));
    }

    #[test]
    fn tape_matches_fast_path() {
        let mut store = ParamStore::new();
        for project in [false, true] {
            let enc = BlstmEncoder::new(&mut store, &format!("e{project}"), 3, 4, project, &mut rng_from_seed(3));
            let xs = random_input(6, 3, 4);
            let tape = Tape::new();
            let p = tape.bind(&store, false);
            let y = enc.encode_checked(&tape, &p, &xs).unwrap();
            let fast = enc.encode_fast(&store, &xs).unwrap();
            for (a, b) in tape.value(y).data().iter().zip(fast.data()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn reversal_with_swapped_directions_reverses_output() {
        let mut store = ParamStore::new();
        let enc = BlstmEncoder::new(&mut store, "e", 3, 4, false, &mut rng_from_seed(7));
        let xs = random_input(5, 3, 8);
        let out = enc.encode_fast(&store, &xs).unwrap();

        let mut swapped = store.clone();
        for part in ["w_x", "w_h", "b"] {
            let f = store.get(store.find(&format!("e.fwd.{part}")).unwrap()).clone();
            let b = store.get(store.find(&format!("e.bwd.{part}")).unwrap()).clone();
            swapped.assign(&format!("e.fwd.{part}"), b).unwrap();
            swapped.assign(&format!("e.bwd.{part}"), f).unwrap();
        }
        let rev_rows: Vec<f64> = (0..5).rev().flat_map(|t| xs.row(t).to_vec()).collect();
        let rev = Tensor::from_rows(5, 3, rev_rows);
        let out_rev = enc.encode_fast(&swapped, &rev).unwrap();
        for t in 0..5 {
            let a = out.row(t);
            let b = out_rev.row(4 - t);
            // forward half of one equals backward half of the other
            for j in 0..4 {
                assert!((a[j] - b[4 + j]).abs() < 1e-14);
                assert!((a[4 + j] - b[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_position_depends_only_on_that_token() {
        let mut store = ParamStore::new();
        let enc = BlstmEncoder::new(&mut store, "e", 2, 3, true, &mut rng_from_seed(9));
        let x = random_input(1, 2, 10);
        let a = enc.encode_fast(&store, &x).unwrap();
        let b = enc.encode_fast(&store, &x).unwrap();
        assert_eq!(a, b);
        let (f, bw) = enc.cells();
        let hf = f.run_fast(&store, &x, false);
        let hb = bw.run_fast(&store, &x, true);
        // with no history both directions see the same single input
        assert_eq!(hf.rows(), 1);
        assert_eq!(hb.rows(), 1);
    }

    #[test]
    fn wrong_width_is_an_error() {
        let mut store = ParamStore::new();
        let enc = BlstmEncoder::new(&mut store, "e", 2, 3, true, &mut rng_from_seed(9));
        assert!(enc.encode_fast(&store, &Tensor::zeros(3, 5)).is_err());
    }
}

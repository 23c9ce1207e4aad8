use rand::Rng;

use crate::autodiff::{sigmoid, softmax_in_place, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Sigmoid,
    Softmax,
    Linear,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Sigmoid => "sigmoid",
            Head::Softmax => "softmax",
            Head::Linear => "linear",
        }
    }

    pub fn parse(s: &str) -> Option<Head> {
        match s {
            "sigmoid" => Some(Head::Sigmoid),
            "softmax" => Some(Head::Softmax),
            "linear" => Some(Head::Linear),
            _ => None,
        }
    }
}

/// Feed-forward network: affine layers with a hidden nonlinearity and an output head.
#[derive(Clone, Debug)]
pub struct Mlp {
    widths: Vec<usize>,
    hidden: Activation,
    head: Head,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes; at least one hidden layer is required.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        hidden: Activation,
        head: Head,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Invalid(format!(
                "an MLP needs input, at least one hidden and an output width; got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::Invalid(format!("zero width in {widths:?}")));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (k, w) in widths.windows(2).enumerate() {
            weights.push(store.add_uniform(format!("{prefix}.w{k}"), w[0], w[1], rng));
            biases.push(store.add_zeros(format!("{prefix}.b{k}"), 1, w[1]));
        }
        Ok(Self {
            widths: widths.to_vec(),
            hidden,
            head,
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Width of the last hidden layer.
    pub fn hidden_dim(&self) -> usize {
        self.widths[self.widths.len() - 2]
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn output_weight(&self) -> ParamId {
        *self.weights.last().unwrap()
    }

    pub fn output_bias(&self) -> ParamId {
        *self.biases.last().unwrap()
    }

    fn act(&self, tape: &Tape, v: Var) -> Var {
        match self.hidden {
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }

    /// Activations of the last hidden layer for a batch `x` (rows are examples).
    pub fn hidden(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let mut h = x;
        let last = self.weights.len() - 1;
        for k in 0..last {
            h = self.act(tape, tape.affine(h, p[self.weights[k]], p[self.biases[k]]));
        }
        h
    }

    /// Pre-head output scores.
    pub fn logits(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let h = self.hidden(tape, p, x);
        tape.affine(h, p[self.output_weight()], p[self.output_bias()])
    }

    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let z = self.logits(tape, p, x);
        match self.head {
            Head::Sigmoid => tape.sigmoid(z),
            Head::Softmax => tape.softmax_rows(z),
            Head::Linear => z,
        }
    }

    /// Tape-free forward pass for a batch; checks the input width.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("input width {} but network expects {}", x.cols(), self.input_dim()),
            });
        }
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for k in 0..=last {
            let mut z = h.matmul(store.get(self.weights[k]))?;
            let b = store.get(self.biases[k]);
            let cols = z.cols();
            for (i, v) in z.data_mut().iter_mut().enumerate() {
                *v += b.data()[i % cols];
            }
            if k < last {
                if self.hidden == Activation::Tanh {
                    z = z.map(f64::tanh);
                }
            } else {
                match self.head {
                    Head::Sigmoid => z = z.map(sigmoid),
                    Head::Softmax => {
                        for row in z.data_mut().chunks_mut(cols) {
                            softmax_in_place(row);
                        }
                    }
                    Head::Linear => {}
                }
            }
            h = z;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;

    #[test]
    fn zero_net_with_sigmoid_head_outputs_half() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        let net = Mlp::new(&mut store, "m", &[4, 3, 3, 5], Activation::Tanh, Head::Sigmoid, &mut rng).unwrap();
        store.set_all(0.0);
        let x = Tensor::row_vector(vec![1.0, -2.0, 3.0, 0.5]);
        let y = net.predict(&store, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert_eq!(y.cols(), 5);
    }

    #[test]
    fn identity_network_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        let net = Mlp::new(&mut store, "m", &[3, 3, 3], Activation::Identity, Head::Linear, &mut rng).unwrap();
        store.set_all(0.0);
        for w in ["m.w0", "m.w1"] {
            let mut eye = Tensor::zeros(3, 3);
            for i in 0..3 {
                eye.set(i, i, 1.0);
            }
            store.assign(w, eye).unwrap();
        }
        let x = Tensor::row_vector(vec![0.25, -1.0, 7.0]);
        assert_eq!(net.predict(&store, &x).unwrap(), x);
    }

    #[test]
    fn tape_and_fast_paths_agree_and_are_pure() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(5);
        let net = Mlp::new(&mut store, "m", &[4, 6, 6, 3], Activation::Tanh, Head::Softmax, &mut rng).unwrap();
        let x = Tensor::from_rows(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]);
        let fast = net.predict(&store, &x).unwrap();
        assert_eq!(fast, net.predict(&store, &x).unwrap());
        let tape = Tape::new();
        let p = tape.bind(&store, false);
        let y = net.forward(&tape, &p, tape.constant(x));
        for (a, b) in tape.value(y).data().iter().zip(fast.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_wrong_input_width_and_missing_hidden_layer() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(0);
        assert!(Mlp::new(&mut store, "a", &[2, 2], Activation::Tanh, Head::Linear, &mut rng).is_err());
        let net = Mlp::new(&mut store, "m", &[2, 2, 2], Activation::Tanh, Head::Linear, &mut rng).unwrap();
        assert!(net.predict(&store, &Tensor::zeros(1, 3)).is_err());
    }
}

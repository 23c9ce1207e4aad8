use rand::Rng;

use crate::autodiff::{softmax_in_place, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, BlstmEncoder, Head, Mlp};

/// Parameter-name prefix shared by every inference network, so that the
/// stores of Φ, Ψ and Φ₀ for one architecture are interchangeable.
pub const INFNET_PREFIX: &str = "infnet";

/// What an inference network is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Ψ: produces test-time predictions.
    TestTime,
    /// Φ: approximates cost-augmented inference during training.
    CostAugmented,
    /// Φ₀: frozen pretrained anchor.
    Anchor,
}

#[derive(Clone, Debug)]
pub enum Arch {
    /// MLP with a sigmoid head over a dense feature batch.
    Mlc(Mlp),
    /// BLSTM with a per-position softmax head.
    Seq {
        encoder: BlstmEncoder,
        out_w: ParamId,
        out_b: ParamId,
        num_labels: usize,
    },
}

/// A network mapping an input directly to a relaxed output.
#[derive(Clone, Debug)]
pub struct InferenceNetwork {
    pub role: Role,
    pub arch: Arch,
}

impl InferenceNetwork {
    /// MLC network with widths `[input, hidden.., num_labels]`.
    pub fn mlc<R: Rng>(store: &mut ParamStore, role: Role, widths: &[usize], rng: &mut R) -> Result<Self> {
        let mlp = Mlp::new(store, INFNET_PREFIX, widths, Activation::Tanh, Head::Sigmoid, rng)?;
        Ok(Self {
            role,
            arch: Arch::Mlc(mlp),
        })
    }

    pub fn seq<R: Rng>(
        store: &mut ParamStore,
        role: Role,
        input_dim: usize,
        hidden: usize,
        num_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || num_labels == 0 {
            return Err(Error::Invalid("inference network dimensions must be positive".into()));
        }
        let encoder = BlstmEncoder::new(store, &format!("{INFNET_PREFIX}.enc"), input_dim, hidden, false, rng);
        let out_w = store.add_uniform(format!("{INFNET_PREFIX}.out.w"), encoder.output_dim(), num_labels, rng);
        let out_b = store.add_zeros(format!("{INFNET_PREFIX}.out.b"), 1, num_labels);
        Ok(Self {
            role,
            arch: Arch::Seq {
                encoder,
                out_w,
                out_b,
                num_labels,
            },
        })
    }

    pub fn with_role(&self, role: Role) -> Self {
        Self {
            role,
            arch: self.arch.clone(),
        }
    }

    pub fn num_labels(&self) -> usize {
        match &self.arch {
            Arch::Mlc(m) => m.output_dim(),
            Arch::Seq { num_labels, .. } => *num_labels,
        }
    }

    pub fn input_dim(&self) -> usize {
        match &self.arch {
            Arch::Mlc(m) => m.input_dim(),
            Arch::Seq { encoder, .. } => encoder.input_dim(),
        }
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self.arch, Arch::Seq { .. })
    }

    /// Scores before the output nonlinearity.
    pub fn logits(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        match &self.arch {
            Arch::Mlc(m) => m.logits(tape, p, x),
            Arch::Seq {
                encoder, out_w, out_b, ..
            } => tape.affine(encoder.encode(tape, p, x), p[*out_w], p[*out_b]),
        }
    }

    /// Relaxed outputs: `B x L` probabilities for MLC, `N x L` rows on the simplex for sequences.
    pub fn forward(&self, tape: &Tape, p: &Bound, x: Var) -> Var {
        let z = self.logits(tape, p, x);
        match self.arch {
            Arch::Mlc(_) => tape.sigmoid(z),
            Arch::Seq { .. } => tape.softmax_rows(z),
        }
    }

    /// Tape-free [`InferenceNetwork::forward`].
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match &self.arch {
            Arch::Mlc(m) => m.predict(store, x),
            Arch::Seq {
                encoder, out_w, out_b, ..
            } => {
                let mut z = encoder.encode_fast(store, x)?.matmul(store.get(*out_w))?;
                let b = store.get(*out_b).data();
                let c = z.cols();
                for row in z.data_mut().chunks_mut(c) {
                    for (v, bv) in row.iter_mut().zip(b) {
                        *v += bv;
                    }
                    softmax_in_place(row);
                }
                Ok(z)
            }
        }
    }
}

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::Normal;

use super::conll::{Sentence, SeqDataset, TagSet};
use super::mlc::{MlcDataset, MlcExample};
use crate::error::{Error, Result};
use crate::rng_from_seed;

/// A hidden Markov model used to generate tagged corpora. Hidden states are
/// the tags; emitted symbols are the tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct HmmSpec {
    pub num_states: usize,
    pub num_symbols: usize,
    pub initial: Vec<f64>,
    /// `transitions[i][j] = p(next = j | current = i)`.
    pub transitions: Vec<Vec<f64>>,
    /// `emissions[i][k] = p(symbol k | state i)`.
    pub emissions: Vec<Vec<f64>>,
    pub seed: u64,
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= s;
    }
}

fn stochastic(v: &[f64]) -> bool {
    v.iter().all(|&p| p >= 0.0 && p.is_finite()) && (v.iter().sum::<f64>() - 1.0).abs() < 1e-9
}

impl HmmSpec {
    /// A random model with sparse structure: every state has three likely
    /// successors and emits mostly from its own set of `num_symbols / 6`
    /// symbols, which overlap between states. A small floor keeps every
    /// transition and emission possible.
    pub fn sparse_random(num_states: usize, num_symbols: usize, seed: u64) -> Result<Self> {
        if num_states < 2 || num_symbols < 2 {
            return Err(Error::Invalid("an HMM needs at least two states and two symbols".into()));
        }
        let mut rng = rng_from_seed(seed);
        let mut transitions = Vec::with_capacity(num_states);
        for _ in 0..num_states {
            let mut row = vec![0.01 / num_states as f64; num_states];
            for j in sample(&mut rng, num_states, 3.min(num_states)) {
                row[j] += rng.random_range(0.2..1.0);
            }
            normalize(&mut row);
            transitions.push(row);
        }
        let per_state = (num_symbols / 6).max(2).min(num_symbols);
        let mut emissions = Vec::with_capacity(num_states);
        for _ in 0..num_states {
            let mut row = vec![0.01 / num_symbols as f64; num_symbols];
            for k in sample(&mut rng, num_symbols, per_state) {
                row[k] += rng.random_range(0.2..1.0);
            }
            normalize(&mut row);
            emissions.push(row);
        }
        let spec = Self {
            num_states,
            num_symbols,
            initial: vec![1.0 / num_states as f64; num_states],
            transitions,
            emissions,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.initial.len() == self.num_states
            && stochastic(&self.initial)
            && self.transitions.len() == self.num_states
            && self
                .transitions
                .iter()
                .all(|r| r.len() == self.num_states && stochastic(r))
            && self.emissions.len() == self.num_states
            && self
                .emissions
                .iter()
                .all(|r| r.len() == self.num_symbols && stochastic(r));
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid("HMM rows must be stochastic and correctly sized".into()))
        }
    }

    pub fn tag_names(&self) -> Vec<String> {
        let w = (self.num_states - 1).to_string().len();
        (0..self.num_states).map(|i| format!("S{i:0w$}")).collect()
    }

    pub fn symbol_names(&self) -> Vec<String> {
        let w = (self.num_symbols - 1).to_string().len();
        (0..self.num_symbols).map(|k| format!("w{k:0w$}")).collect()
    }
}

/// Samples `n` sentences with lengths uniform in `lengths`. The stream is
/// determined by `spec.seed` and `stream`, so different streams of the same
/// model give independent splits.
pub fn gen_hmm(spec: &HmmSpec, n: usize, lengths: (usize, usize), stream: u64) -> Result<SeqDataset> {
    spec.validate()?;
    let (lo, hi) = lengths;
    if lo == 0 || lo > hi {
        return Err(Error::Invalid(format!("bad length range {lo}..={hi}")));
    }
    let mut rng = rng_from_seed(spec.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let dist = |w: &[f64]| WeightedIndex::new(w).map_err(|e| Error::Invalid(e.to_string()));
    let init = dist(&spec.initial)?;
    let trans = spec.transitions.iter().map(|r| dist(r)).collect::<Result<Vec<_>>>()?;
    let emit = spec.emissions.iter().map(|r| dist(r)).collect::<Result<Vec<_>>>()?;
    let tags = spec.tag_names();
    let symbols = spec.symbol_names();
    let mut sentences = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(lo..=hi);
        let mut s = Sentence {
            tokens: Vec::with_capacity(len),
            tags: Vec::with_capacity(len),
        };
        let mut state = init.sample(&mut rng);
        for t in 0..len {
            if t > 0 {
                state = trans[state].sample(&mut rng);
            }
            s.tags.push(tags[state].clone());
            s.tokens.push(symbols[emit[state].sample(&mut rng)].clone());
        }
        sentences.push(s);
    }
    Ok(SeqDataset {
        sentences,
        tags: TagSet::new(tags)?,
    })
}

/// Synthetic multi-label data with correlated labels. Examples draw one of a
/// few latent groups, take each of the group's labels with probability 0.8
/// and every other label with probability 0.03; features are noisy sums of
/// sparse per-label prototypes plus a few distractor features.
pub fn gen_mlc(num_labels: usize, num_features: usize, n: usize, seed: u64) -> Result<MlcDataset> {
    if num_labels < 2 || num_features < 4 {
        return Err(Error::Invalid("need at least 2 labels and 4 features".into()));
    }
    let mut rng = rng_from_seed(seed);
    let active = 5.min(num_features);
    let prototypes: Vec<Vec<(usize, f64)>> = (0..num_labels)
        .map(|_| {
            sample(&mut rng, num_features, active)
                .into_iter()
                .map(|k| (k, rng.random_range(0.5..1.5)))
                .collect()
        })
        .collect();
    let groups: Vec<Vec<usize>> = (0..4)
        .map(|_| sample(&mut rng, num_labels, 3.min(num_labels)).into_vec())
        .collect();
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let g = &groups[rng.random_range(0..groups.len())];
        let mut labels: Vec<usize> = (0..num_labels)
            .filter(|y| rng.random::<f64>() < if g.contains(y) { 0.8 } else { 0.03 })
            .collect();
        labels.sort_unstable();
        let mut dense = vec![0.0; num_features];
        for &y in &labels {
            for &(k, v) in &prototypes[y] {
                dense[k] += v + noise.sample(&mut rng);
            }
        }
        for k in sample(&mut rng, num_features, 3) {
            dense[k] += rng.random_range(0.0..1.0);
        }
        let features = dense
            .into_iter()
            .enumerate()
            .filter(|(_, v)| *v != 0.0)
            .collect();
        examples.push(MlcExample { labels, features });
    }
    Ok(MlcDataset {
        num_labels,
        num_features,
        examples,
    })
}

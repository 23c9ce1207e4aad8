use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside the [`ParamStore`] that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named, ordered collection of trainable tensors.
///
/// Each jointly trained unit (energy parameters, an inference network, a
/// tag language model) owns one store. Graph leaves borrow the tensors by
/// reference count, so binding a store into a tape never copies data.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Rc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(Rc::new(value));
        ParamId(self.values.len() - 1)
    }

    /// Glorot-style uniform(-r, r) with r = sqrt(6 / (fan_in + fan_out)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let r = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-r..r)).collect();
        self.add(name, Tensor::from_rows(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Rc<Tensor> {
        Rc::clone(&self.values[id.0])
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces a tensor by name; the shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Invalid(format!("no parameter named {name}")))?;
        let cur = self.get(id);
        if !cur.same_shape(&value) {
            return Err(Error::Shape {
                op: "assign",
                detail: format!("{name}: {:?} vs {:?}", cur.shape(), value.shape()),
            });
        }
        self.values[id.0] = Rc::new(value);
        Ok(())
    }

    /// Copies every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Invalid("parameter layouts differ".into()));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if !dst.same_shape(src) {
                return Err(Error::Invalid("parameter shapes differ".into()));
            }
            *dst = Rc::clone(src);
        }
        Ok(())
    }

    pub fn sum_sq(&self) -> f64 {
        self.values.iter().map(|v| v.sum_sq()).sum()
    }

    pub fn num_values(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Hash over names, shapes and exact bit patterns of all values.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, v) in self.iter() {
            name.hash(&mut h);
            v.shape().hash(&mut h);
            for x in v.data() {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn set_all(&mut self, v: f64) {
        for id in self.ids().collect::<Vec<_>>() {
            for x in self.get_mut(id).data_mut() {
                *x = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn glorot_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.add_uniform("w", 4, 2, &mut rng);
        let r = 1.0f64;
        assert!(s.get(id).data().iter().all(|x| x.abs() < r));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut s = ParamStore::new();
        let id = s.add_zeros("w", 2, 2);
        let before = s.fingerprint();
        s.get_mut(id).data_mut()[0] = 1e-300;
        assert_ne!(before, s.fingerprint());
    }

    #[test]
    fn assign_checks_shape() {
        let mut s = ParamStore::new();
        s.add_zeros("w", 2, 2);
        assert!(s.assign("w", Tensor::zeros(2, 3)).is_err());
        assert!(s.assign("w", Tensor::zeros(2, 2)).is_ok());
        assert!(s.assign("v", Tensor::zeros(2, 2)).is_err());
    }
}

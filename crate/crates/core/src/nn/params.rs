use std::collections::BTreeMap;

use rand::Rng;

use super::Tensor2;
use crate::error::{Error, Result};

/// Handle to a parameter slot inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

/// Named parameter tensors, each paired with a same-shaped gradient buffer.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2>,
    grads: Vec<Tensor2>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor2::zeros(value.rows(), value.cols()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn init<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let mut t = Tensor2::zeros(rows, cols);
        match init {
            Init::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.random_range(-bound..bound);
                }
            }
            Init::Zeros => {}
            Init::Ones => t.fill(1.0),
        }
        self.insert(name, t)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.values[id.0]
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.values[id.0]
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.grads[id.0]
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.grads[id.0]
    }

    /// Simultaneous access to a value and its gradient buffer.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&Tensor2, &mut Tensor2) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.data().len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rounds every value to the nearest f32 so the in-memory model equals
    /// what a checkpoint round-trip reproduces.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor2] {
        &self.values
    }

    /// Replaces values by name; every stored parameter must be present with
    /// the same shape.
    pub fn load_values(&mut self, tensors: &[(String, Tensor2)]) -> Result<()> {
        if tensors.len() != self.values.len() {
            return Err(Error::dim("checkpoint tensor count", self.values.len(), tensors.len()));
        }
        for (name, t) in tensors {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Invalid(format!("unknown parameter `{name}` in checkpoint")))?;
            let slot = &mut self.values[id.0];
            if slot.shape() != t.shape() {
                return Err(Error::dim(
                    format!("parameter `{name}`"),
                    slot.data().len(),
                    t.data().len(),
                ));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_grads_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.init("w", 3, 4, Init::Uniform { fan_in: 3 }, &mut rng).unwrap();
        assert_eq!(store.grad(id).shape(), (3, 4));
        assert!(store.init("w", 1, 1, Init::Zeros, &mut rng).is_err());
        let bound = 1.0 / 3f64.sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut s = ParamStore::new();
            s.init("a", 5, 5, Init::Uniform { fan_in: 5 }, &mut rng).unwrap();
            s
        };
        assert_eq!(build().values(), build().values());
    }
}

use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named learnable tensors, kept in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "parameter {name} registered twice");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
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

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Overwrites every tensor with the same-named tensor from `other`.
    ///
    /// Both stores must hold exactly the same names with identical shapes.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let mut offending = Vec::new();
        for (name, t) in other {
            match self.index.get(name) {
                None => offending.push(format!("{name} (unknown)")),
                Some(&i) if self.values[i].shape() != t.shape() => offending.push(format!(
                    "{name} (expected {:?}, found {:?})",
                    self.values[i].shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for name in &self.names {
            if !other.iter().any(|(n, _)| n == name) {
                offending.push(format!("{name} (missing)"));
            }
        }
        if !offending.is_empty() {
            return Err(Error::Compatibility(offending.join(", ")));
        }
        for (name, t) in other {
            let i = self.index[name];
            self.values[i] = t.clone();
        }
        Ok(())
    }

    pub fn zero_like(&self) -> Vec<Tensor> {
        self.values.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
    }
}

/// Uniform init in `±sqrt(1/fan_in)`.
pub fn init_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

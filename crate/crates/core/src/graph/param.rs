use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{invalid_config, Result};

/// Handle to one named parameter matrix inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named learnable matrices.
///
/// Ids are assigned in registration order, so two stores built by the same
/// constructor share ids even when they hold different scalar types.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Array2<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid_config(format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<T>)> + '_ {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from(x).expect("finite parameter")))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// FNV-1a over the bit patterns of every value in the group, in id order.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for id in self.group(prefix) {
            for x in self.values[id.0].iter() {
                let bits = x.to_f64().unwrap_or(f64::NAN).to_bits();
                for byte in bits.to_le_bytes() {
                    hash ^= u64::from(byte);
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }
}

/// Truncated normal draw (cut at two standard deviations).
pub fn trunc_normal<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            // round through f32 so f32 and f64 models initialize identically
            return T::from(x as f32).unwrap();
        }
    })
}

//! Named parameter store shared by models, optimizers, and checkpoints.

use indexmap::IndexMap;

use super::{numel, Elem};

/// A named tensor's storage: shape plus row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct PTensor<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
}

impl<E: Elem> PTensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Self {
        assert_eq!(numel(&shape), data.len(), "PTensor shape/data mismatch");
        PTensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        PTensor {
            shape,
            data: vec![E::zero(); n],
        }
    }

    pub fn filled(shape: Vec<usize>, v: E) -> Self {
        let n = numel(&shape);
        PTensor {
            shape,
            data: vec![v; n],
        }
    }
}

/// Ordered map from parameter name to tensor. Insertion order is the canonical
/// order used for checkpoint layout and optimizer state, so it must be
/// deterministic across runs.
#[derive(Debug, Clone, Default)]
pub struct Params<E> {
    map: IndexMap<String, PTensor<E>>,
}

impl<E: Elem> Params<E> {
    pub fn new() -> Self {
        Params {
            map: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: PTensor<E>) {
        let name = name.into();
        assert!(
            self.map.insert(name.clone(), t).is_none(),
            "duplicate parameter '{name}'"
        );
    }

    pub fn get(&self, name: &str) -> Option<&PTensor<E>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut PTensor<E>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &PTensor<E>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut PTensor<E>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Total scalar count across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.data.len()).sum()
    }

    /// Convert every tensor to another element type (f32 <-> f64).
    pub fn convert<F: Elem>(&self) -> Params<F> {
        let mut out = Params::new();
        for (name, t) in &self.map {
            out.insert(
                name.clone(),
                PTensor::new(
                    t.shape.clone(),
                    t.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
                ),
            );
        }
        out
    }
}

impl<E: Elem> FromIterator<(String, PTensor<E>)> for Params<E> {
    fn from_iter<I: IntoIterator<Item = (String, PTensor<E>)>>(iter: I) -> Self {
        let mut p = Params::new();
        for (name, t) in iter {
            p.insert(name, t);
        }
        p
    }
}

use std::collections::BTreeMap;

use super::Array;
use crate::error::{Error, Result};

/// Named parameter arrays, iterated in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    arrays: BTreeMap<String, Array>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.arrays.get_mut(name)
    }

    /// Mutable data of a parameter that is known to exist.
    pub fn slot(&mut self, name: &str) -> &mut [f64] {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .data_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), Array::zeros(v.shape())))
                .collect(),
        }
    }

    /// `self += other`, matching by name.
    pub fn add_assign(&mut self, other: &ParamSet) -> Result<()> {
        for (name, g) in &other.arrays {
            let dst = self
                .arrays
                .get_mut(name)
                .ok_or_else(|| Error::dim(format!("unknown parameter {name}")))?;
            dst.ensure_same_shape(g, name)?;
            for (a, b) in dst.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        Ok(())
    }

    pub fn scale_all(&mut self, s: f64) {
        for a in self.arrays.values_mut() {
            a.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Checks that this set has exactly the expected names and shapes.
    pub fn validate(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        if self.arrays.len() != expected.len() {
            return Err(Error::config(format!(
                "expected {} parameter arrays, found {}",
                expected.len(),
                self.arrays.len()
            )));
        }
        for (name, shape) in expected {
            let a = self
                .arrays
                .get(name)
                .ok_or_else(|| Error::config(format!("missing parameter {name}")))?;
            a.ensure_shape(shape, name)?;
        }
        Ok(())
    }
}

impl std::ops::Index<&str> for ParamSet {
    type Output = Array;

    fn index(&self, name: &str) -> &Array {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }
}

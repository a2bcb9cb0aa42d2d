use std::collections::BTreeMap;

use super::RealArray;
use crate::error::{Error, Result};

/// Named parameter arrays. Iteration order is by name, which keeps every
/// reduction over parameters deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, RealArray>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: RealArray) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RealArray> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RealArray)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(RealArray::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), RealArray::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    fn check_layout(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets differ in names or shapes".into()))
        }
    }

    /// `self += scale * other`, element-wise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.entries.values_mut().zip(other.entries.values()) {
            for (d, s) in dst.values_mut().iter_mut().zip(src.values()) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    /// Squared Euclidean norm over all values.
    pub fn norm_sq(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.values())
            .map(|x| x * x)
            .sum()
    }

    /// Euclidean distance between two sets with the same layout.
    pub fn distance(&self, other: &Self) -> Result<f64> {
        self.check_layout(other)?;
        let d2: f64 = self
            .entries
            .values()
            .zip(other.entries.values())
            .flat_map(|(a, b)| a.values().iter().zip(b.values()))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(d2.sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(RealArray::is_finite)
    }

    /// First parameter holding a non-finite value, if any.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.as_str())
    }

    /// Mutable access to one flat value, used by perturbation probes.
    pub fn value_mut(&mut self, name: &str, index: usize) -> Option<&mut f64> {
        self.entries
            .get_mut(name)
            .and_then(|v| v.values_mut().get_mut(index))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .entries
            .values()
            .zip(other.entries.values())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max))
    }
}

impl FromIterator<(String, RealArray)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, RealArray)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

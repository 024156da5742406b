use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Mat, NnError};

/// Handle to a tensor living in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Flat, name-addressed collection of trainable matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

/// Serializable form of a single parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value.as_standard_layout().to_owned());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.values[id.0].dim(), value.dim(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar entries across the given parameters.
    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.values[id.0].len()).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of the selected tensors.
    pub fn fingerprint(&self, ids: &[ParamId]) -> String {
        let mut hasher = Sha256::new();
        for id in ids {
            let value = &self.values[id.0];
            hasher.update(self.names[id.0].as_bytes());
            hasher.update((value.nrows() as u64).to_le_bytes());
            hasher.update((value.ncols() as u64).to_le_bytes());
            for x in value.iter() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_tensors(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(name, value)| NamedTensor {
                name: name.clone(),
                rows: value.nrows(),
                cols: value.ncols(),
                data: value.iter().copied().collect(),
            })
            .collect()
    }

    /// Overwrite every parameter from `tensors`, matched by name.
    pub fn load_tensors(&mut self, tensors: &[NamedTensor]) -> Result<(), NnError> {
        let by_name: BTreeMap<&str, &NamedTensor> =
            tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (i, name) in self.names.iter().enumerate() {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| NnError::MissingParameter(name.clone()))?;
            if (t.rows, t.cols) != self.values[i].dim() || t.data.len() != t.rows * t.cols {
                return Err(NnError::Shape(format!(
                    "parameter {name}: stored {}x{}, expected {:?}",
                    t.rows,
                    t.cols,
                    self.values[i].dim()
                )));
            }
            self.values[i] = Array2::from_shape_vec((t.rows, t.cols), t.data.clone())
                .map_err(|e| NnError::Shape(e.to_string()))?;
        }
        Ok(())
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound))
}

/// Gaussian initialization with the given standard deviation (Box-Muller).
pub fn normal<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Mat {
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.random();
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

/// Gradient buffers indexed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Mat) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(existing) => *existing += grad,
            slot @ None => *slot = Some(grad.clone()),
        }
    }

    /// Sum another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (i, g) in other.grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.grads.len() <= i {
                    self.grads.resize(i + 1, None);
                }
                match &mut self.grads[i] {
                    Some(existing) => *existing += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn global_norm(&self, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|id| self.get(*id))
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Which parameters a graph should track gradients for.
#[derive(Debug, Clone, Default)]
pub struct ParamMask {
    trainable: Vec<bool>,
}

impl ParamMask {
    /// No parameter is trainable; graphs built with this mask skip all bookkeeping.
    pub fn none() -> Self {
        Self::default()
    }

    pub fn only(ids: &[ParamId]) -> Self {
        let len = ids.iter().map(|id| id.0 + 1).max().unwrap_or(0);
        let mut trainable = vec![false; len];
        for id in ids {
            trainable[id.0] = true;
        }
        Self { trainable }
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.trainable.get(id.0).copied().unwrap_or(false)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.trainable
            .iter()
            .enumerate()
            .filter(|(_, t)| **t)
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

//! Action chunks, conditions, and the training interpolant.
//!
//! An [`ActionChunk`] is an `H x d` matrix of consecutive actions stored
//! row-major by horizon step: entry `(step, coord)` lives at
//! `step * d + coord`. The flattened layout is part of the checkpoint and
//! dataset formats and must not change. The warm-start copy relies on the
//! leading rows being a contiguous prefix.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    horizon: usize,
    dim: usize,
    values: Vec<f64>,
}

impl ActionChunk {
    pub fn new(horizon: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if horizon == 0 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "chunk dimensions must be positive, got {horizon}x{dim}"
            )));
        }
        if values.len() != horizon * dim {
            return Err(Error::shape(
                format!("{} values for {horizon}x{dim}", horizon * dim),
                format!("{} values", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite chunk entry at index {i}")));
        }
        Ok(Self { horizon, dim, values })
    }

    pub fn zeros(horizon: usize, dim: usize) -> Self {
        assert!(horizon > 0 && dim > 0, "chunk dimensions must be positive");
        Self {
            horizon,
            dim,
            values: vec![0.0; horizon * dim],
        }
    }

    pub fn filled(horizon: usize, dim: usize, value: f64) -> Self {
        let mut c = Self::zeros(horizon, dim);
        c.values.fill(value);
        c
    }

    /// Builds a chunk from nested rows (one row per horizon step).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let horizon = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(horizon, dim, rows.concat())
    }

    /// I.i.d. standard-normal entries.
    pub fn standard_normal<R: Rng + ?Sized>(horizon: usize, dim: usize, rng: &mut R) -> Self {
        let values = (0..horizon * dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { horizon, dim, values }
    }

    /// Wraps values produced by internal arithmetic; finiteness is the caller's problem.
    pub(crate) fn from_raw(horizon: usize, dim: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), horizon * dim);
        Self { horizon, dim, values }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, step: usize, coord: usize) -> f64 {
        self.values[step * self.dim + coord]
    }

    pub fn row(&self, step: usize) -> &[f64] {
        &self.values[step * self.dim..(step + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dim)
    }

    /// Row-major flattening by horizon step.
    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn unflatten(values: &[f64], horizon: usize, dim: usize) -> Result<Self> {
        Self::new(horizon, dim, values.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.horizon == other.horizon && self.dim == other.dim
    }

    pub fn ensure_shape(&self, horizon: usize, dim: usize) -> Result<()> {
        if self.horizon != horizon || self.dim != dim {
            return Err(Error::shape(
                format!("{horizon}x{dim} chunk"),
                format!("{}x{} chunk", self.horizon, self.dim),
            ));
        }
        Ok(())
    }

    fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        other.ensure_shape(self.horizon, self.dim)
    }

    /// `self + alpha * other`
    pub fn axpy(&self, alpha: f64, other: &Self) -> Result<Self> {
        self.ensure_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + alpha * b)
            .collect();
        Ok(Self::from_raw(self.horizon, self.dim, values))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.axpy(1.0, other)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_raw(
            self.horizon,
            self.dim,
            self.values.iter().map(|v| v * s).collect(),
        )
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// Frobenius norm of the flattened matrix.
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn distance(&self, other: &Self) -> Result<f64> {
        Ok(self.sub(other)?.norm())
    }
}

/// Conditioning vector: state features followed by goal features.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    features: Vec<f64>,
    state_len: usize,
}

impl Condition {
    pub fn new(state: Vec<f64>, goal: Vec<f64>) -> Result<Self> {
        let state_len = state.len();
        let mut features = state;
        features.extend(goal);
        Self::from_features(features, state_len)
    }

    pub fn from_features(features: Vec<f64>, state_len: usize) -> Result<Self> {
        if state_len > features.len() {
            return Err(Error::InvalidArgument(format!(
                "state length {state_len} exceeds condition width {}",
                features.len()
            )));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite condition entry at index {i}")));
        }
        Ok(Self { features, state_len })
    }

    /// Condition with no features, for fields that ignore conditioning.
    pub fn empty() -> Self {
        Self {
            features: Vec::new(),
            state_len: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.features.len()
    }

    pub fn state(&self) -> &[f64] {
        &self.features[..self.state_len]
    }

    pub fn goal(&self) -> &[f64] {
        &self.features[self.state_len..]
    }

    pub fn state_len(&self) -> usize {
        self.state_len
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.features
    }

    pub fn ensure_width(&self, width: usize) -> Result<()> {
        if self.width() != width {
            return Err(Error::shape(
                format!("condition width {width}"),
                format!("condition width {}", self.width()),
            ));
        }
        Ok(())
    }
}

/// `a_gamma = gamma * data + (1 - gamma) * noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolant {
    pub a_gamma: ActionChunk,
    pub gamma: f64,
    pub data: ActionChunk,
    pub noise: ActionChunk,
}

pub fn make_interpolant(data: &ActionChunk, noise: &ActionChunk, gamma: f64) -> Result<Interpolant> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1]")));
    }
    data.ensure_same_shape(noise)?;
    let values = data
        .values
        .iter()
        .zip(&noise.values)
        .map(|(a, e)| gamma * a + (1.0 - gamma) * e)
        .collect();
    Ok(Interpolant {
        a_gamma: ActionChunk::from_raw(data.horizon, data.dim, values),
        gamma,
        data: data.clone(),
        noise: noise.clone(),
    })
}

/// `||F||_2 / sqrt(H d)` with the Frobenius norm of the flattened field output.
pub fn normalized_residual(field_output: &ActionChunk) -> Result<f64> {
    if !field_output.is_finite() {
        return Err(Error::Numeric("non-finite field output in residual".into()));
    }
    Ok(field_output.norm() / (field_output.len() as f64).sqrt())
}

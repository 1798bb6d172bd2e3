//! Dense row-major `f32` tensors of rank 1 or 2.
//!
//! Every public operation returns a tensor whose values are all finite;
//! anything that would overflow is reported as [`Error::NonFinite`].
//! Products accumulate in `f64` and round once on store.

use std::fmt;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Clone, PartialEq)]
pub struct TensorF32 {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for TensorF32 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "TensorF32({:?}, {:?})", self.shape, self.data)
        } else {
            write!(f, "TensorF32({:?}, [{} values])", self.shape, self.data.len())
        }
    }
}

/// Initialization schemes for parameter tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `±gain·sqrt(3/fan_in)` with `gain = sqrt(1/3)`, i.e. `±1/sqrt(fan_in)`.
    /// This is the `a = sqrt(5)` convention used for LoRA `A` factors.
    KaimingUniform { fan_in: usize },
}

/// Gain applied to the Kaiming bound. `sqrt(1/3)` reproduces `kaiming_uniform_(a=sqrt(5))`.
pub const KAIMING_GAIN: f32 = 0.577_350_26;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub frobenius: f64,
    pub l2_flat: f64,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > 2 || shape.iter().product::<usize>() != len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl TensorF32 {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("TensorF32::new"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn init(kind: Init, shape: &[usize], rng: &mut SeededRng) -> Result<Self> {
        check_shape(shape, shape.iter().product())?;
        match kind {
            Init::Zeros => Ok(Self::zeros(shape)),
            Init::Ones => Ok(Self::ones(shape)),
            Init::KaimingUniform { fan_in } => {
                if fan_in == 0 {
                    return Err(Error::invalid("kaiming_uniform requires fan_in > 0"));
                }
                let bound = kaiming_bound(fan_in);
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
                Ok(Self {
                    shape: shape.to_vec(),
                    data,
                })
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count; 1 for vectors.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols() + c]
    }

    /// Mutable access for in-place parameter updates. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape, self.data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    fn finish(self, op: &'static str) -> Result<Self> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.same_shape(other, op)?;
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
        .finish(op)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f32) -> Result<Self> {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| alpha * v).collect(),
        }
        .finish("scale")
    }

    /// `alpha * self + y`.
    pub fn axpy(&self, alpha: f32, y: &Self) -> Result<Self> {
        self.zip_with(y, "axpy", |x, y| alpha * x + y)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, n, p) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0f32; m * p];
        let mut acc = vec![0.0f64; p];
        for i in 0..m {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for k in 0..n {
                let a = self.data[i * n + k] as f64;
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * p..(k + 1) * p];
                for (acc, &b) in acc.iter_mut().zip(row) {
                    *acc += a * b as f64;
                }
            }
            for (o, &a) in out[i * p..(i + 1) * p].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
        Self {
            shape: vec![m, p],
            data: out,
        }
        .finish("matmul")
    }

    pub fn transpose(&self) -> Self {
        if self.shape.len() == 1 {
            return Self {
                shape: vec![1, self.shape[0]],
                data: self.data.clone(),
            };
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data,
        }
    }

    /// Flat inner product in `f64`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        if self.data.len() != other.data.len() {
            return Err(Error::Shape {
                op: "dot",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
    }

    pub fn norms(&self) -> Norms {
        let f = self.frobenius();
        Norms {
            frobenius: f,
            l2_flat: f,
        }
    }

    /// Cosine similarity of the flattened tensors, clamped to `[-1, 1]`.
    pub fn cosine(&self, other: &Self) -> Result<f64> {
        let dot = self.dot(other)?;
        let (na, nb) = (self.frobenius(), other.frobenius());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Degenerate("cosine of a zero vector".into()));
        }
        Ok((dot / (na * nb)).clamp(-1.0, 1.0))
    }

    /// Largest absolute value (0 for empty tensors).
    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

pub fn kaiming_bound(fan_in: usize) -> f32 {
    KAIMING_GAIN * (3.0 / fan_in as f32).sqrt()
}

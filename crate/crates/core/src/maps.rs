//! Full-resolution per-pixel maps exchanged between modules.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Disparities in pixels with a validity mask. Valid entries are finite and
/// non-negative. Equality ignores values under invalid pixels.
#[derive(Debug, Clone)]
pub struct DisparityMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl PartialEq for DisparityMap {
    fn eq(&self, other: &Self) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.valid == other.valid
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(&self.valid)
                .all(|((a, b), &ok)| !ok || a == b)
    }
}

impl DisparityMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if values.len() != n || valid.len() != n {
            return Err(Error::shape(format!(
                "disparity map {height}x{width} needs {n} values and mask entries, got {} and {}",
                values.len(),
                valid.len()
            )));
        }
        if let Some(i) = (0..n).find(|&i| valid[i] && !(values[i].is_finite() && values[i] >= 0.0)) {
            return Err(Error::invalid(format!(
                "valid disparity at index {i} is {} (must be finite and >= 0)",
                values[i]
            )));
        }
        Ok(DisparityMap {
            height,
            width,
            values,
            valid,
        })
    }

    /// Every finite, non-negative entry is marked valid.
    pub fn dense(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        let valid = values.iter().map(|v| v.is_finite() && *v >= 0.0).collect();
        Self::new(height, width, values, valid)
    }

    /// From a (1, 1, H, W) tensor, all entries valid.
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let s = t.shape();
        if s.n() != 1 || s.c() != 1 {
            return Err(Error::shape(format!("disparity tensor must be 1x1xHxW, got {s}")));
        }
        Self::dense(s.h(), s.w(), t.data().iter().map(|v| v.to_f64() as f32).collect())
    }

    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.values.iter().map(|&v| S::from_f64(v as f64)).collect(),
        )
        .expect("consistent extents")
    }

    pub fn mask_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.valid.iter().map(|&v| if v { S::ONE } else { S::ZERO }).collect(),
        )
        .expect("consistent extents")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Additionally invalidates every pixel for which `keep` is false.
    pub fn restrict(&mut self, keep: impl Fn(f32) -> bool) {
        for (v, ok) in self.values.iter().zip(self.valid.iter_mut()) {
            *ok = *ok && keep(*v);
        }
    }

    /// Sub-window copy.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::invalid("crop window exceeds disparity map"));
        }
        let mut values = Vec::with_capacity(h * w);
        let mut valid = Vec::with_capacity(h * w);
        for y in top..top + h {
            let row = y * self.width;
            values.extend_from_slice(&self.values[row + left..row + left + w]);
            valid.extend_from_slice(&self.valid[row + left..row + left + w]);
        }
        Ok(DisparityMap {
            height: h,
            width: w,
            values,
            valid,
        })
    }
}

/// Per-pixel entropy of the matching distribution, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl EntropyMap {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let s = t.shape();
        if s.n() != 1 || s.c() != 1 {
            return Err(Error::shape(format!("entropy tensor must be 1x1xHxW, got {s}")));
        }
        Ok(EntropyMap {
            height: s.h(),
            width: s.w(),
            values: t.data().iter().map(|v| v.to_f64() as f32).collect(),
        })
    }
}

//! Latent-space tensor: the `h x w x d` projection of an image or
//! watermark, stored channel-major (d, h, w). Values are unconstrained
//! reals; shape invariants (`h*f == H`, `w*f == W`) are enforced where
//! latents are produced.

use crate::error::{Error, Result};
use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    data: Vec<f64>,
}

impl LatentTensor {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::shape(format!(
                "latent data length {} != {h}*{w}*{d}",
                data.len()
            )));
        }
        Ok(LatentTensor { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        LatentTensor {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    pub fn standard_normal(h: usize, w: usize, d: usize, rng: &mut SeedRng) -> Self {
        LatentTensor {
            h,
            w,
            d,
            data: rng.normal_vec(h * w * d),
        }
    }

    pub fn same_shape(&self, other: &LatentTensor) -> bool {
        self.h == other.h && self.w == other.w && self.d == other.d
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `a*self + b*other`, shape-checked.
    pub fn lincomb(&self, a: f64, other: &LatentTensor, b: f64) -> Result<LatentTensor> {
        if !self.same_shape(other) {
            return Err(Error::shape("latent shape mismatch in lincomb".to_string()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(LatentTensor {
            h: self.h,
            w: self.w,
            d: self.d,
            data,
        })
    }

    pub fn scaled(&self, a: f64) -> LatentTensor {
        LatentTensor {
            h: self.h,
            w: self.w,
            d: self.d,
            data: self.data.iter().map(|x| a * x).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lincomb_checks_shapes() {
        let a = LatentTensor::zeros(2, 2, 3);
        let b = LatentTensor::zeros(2, 3, 2);
        assert!(a.lincomb(1.0, &b, 1.0).is_err());
    }

    #[test]
    fn lincomb_arithmetic() {
        let a = LatentTensor::new(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = LatentTensor::new(1, 1, 2, vec![10.0, 20.0]).unwrap();
        let c = a.lincomb(2.0, &b, 0.5).unwrap();
        assert_eq!(c.data(), &[7.0, 14.0]);
    }
}

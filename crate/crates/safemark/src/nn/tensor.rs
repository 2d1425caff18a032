//! Dense 4-D tensor (N, C, H, W) in f64, plus the parameter tensor used
//! by layers, optimizer and checkpoints.

use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Tensor { n, c, h, w, data }
    }

    pub fn randn(n: usize, c: usize, h: usize, w: usize, rng: &mut SeedRng) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: rng.normal_vec(n * c * h * w),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    pub fn same_shape(&self, o: &Tensor) -> bool {
        self.n == o.n && self.c == o.c && self.h == o.h && self.w == o.w
    }

    pub fn add_assign(&mut self, o: &Tensor) {
        debug_assert!(self.same_shape(o));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn add(&self, o: &Tensor) -> Tensor {
        let mut out = self.clone();
        out.add_assign(o);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape mismatch");
        let mut out = Tensor::zeros(a.n, a.c + b.c, a.h, a.w);
        let plane = a.h * a.w;
        for n in 0..a.n {
            let dst = &mut out.data[n * (a.c + b.c) * plane..];
            dst[..a.c * plane].copy_from_slice(&a.data[n * a.c * plane..(n + 1) * a.c * plane]);
            dst[a.c * plane..(a.c + b.c) * plane]
                .copy_from_slice(&b.data[n * b.c * plane..(n + 1) * b.c * plane]);
        }
        out
    }

    /// Split the channel axis at `c_split`.
    pub fn split_channels(&self, c_split: usize) -> (Tensor, Tensor) {
        assert!(c_split < self.c);
        let c2 = self.c - c_split;
        let plane = self.h * self.w;
        let mut a = Tensor::zeros(self.n, c_split, self.h, self.w);
        let mut b = Tensor::zeros(self.n, c2, self.h, self.w);
        for n in 0..self.n {
            let src = &self.data[n * self.c * plane..];
            a.data[n * c_split * plane..(n + 1) * c_split * plane]
                .copy_from_slice(&src[..c_split * plane]);
            b.data[n * c2 * plane..(n + 1) * c2 * plane]
                .copy_from_slice(&src[c_split * plane..self.c * plane]);
        }
        (a, b)
    }

    /// Mean of squared entries.
    pub fn mean_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>() / self.numel() as f64
    }
}

/// A named parameter block with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl PTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        PTensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Gaussian init scaled by `std`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeedRng) -> Self {
        let mut p = PTensor::zeros(shape);
        for v in &mut p.data {
            *v = rng.normal() * std;
        }
        p
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

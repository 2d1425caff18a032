//! Layers with explicit forward/backward passes.
//!
//! Every layer exposes `forward` returning the output plus a cache, and
//! `backward` mapping the upstream gradient to an input gradient while
//! accumulating parameter gradients into a [`GradStore`]. Analytic
//! gradients of every layer are pinned against central finite
//! differences in the tests at the bottom of this file.

use super::tensor::{PTensor, Tensor};
use super::{GradStore, Module, ParamVisit, ParamVisitMut};
use crate::rng::SeedRng;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------- conv

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: PTensor, // (co, ci, k, k)
    pub b: PTensor, // (co)
    pub stride: usize,
    pub pad: usize,
}

pub struct Conv2dCache {
    cols: Vec<f64>, // (K, L) per sample, concatenated over the batch
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(ci: usize, co: usize, k: usize, stride: usize, pad: usize, rng: &mut SeedRng) -> Self {
        let std = (2.0 / (ci * k * k) as f64).sqrt();
        Conv2d {
            w: PTensor::randn(&[co, ci, k, k], std, rng),
            b: PTensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    pub fn k(&self) -> usize {
        self.w.shape[2]
    }

    pub fn ci(&self) -> usize {
        self.w.shape[1]
    }

    pub fn co(&self) -> usize {
        self.w.shape[0]
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.k();
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Tensor, n: usize, cols: &mut [f64]) {
        let k = self.k();
        let (oh, ow) = self.out_hw(x.h, x.w);
        let l = oh * ow;
        // cols is (ci*k*k, l), row-major
        let mut row = 0;
        for c in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let dst = &mut cols[row * l..(row + 1) * l];
                    let mut idx = 0;
                    for oy in 0..oh {
                        let sy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let sx = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[idx] = if sy >= 0
                                && sy < x.h as isize
                                && sx >= 0
                                && sx < x.w as isize
                            {
                                x.at(n, c, sy as usize, sx as usize)
                            } else {
                                0.0
                            };
                            idx += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, dcols: &[f64], dx: &mut Tensor, n: usize) {
        let k = self.k();
        let (oh, ow) = self.out_hw(dx.h, dx.w);
        let l = oh * ow;
        let mut row = 0;
        for c in 0..dx.c {
            for ky in 0..k {
                for kx in 0..k {
                    let src = &dcols[row * l..(row + 1) * l];
                    let mut idx = 0;
                    for oy in 0..oh {
                        let sy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..ow {
                            let sx = (ox * self.stride + kx) as isize - self.pad as isize;
                            if sy >= 0 && sy < dx.h as isize && sx >= 0 && sx < dx.w as isize {
                                *dx.at_mut(n, c, sy as usize, sx as usize) += src[idx];
                            }
                            idx += 1;
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, Conv2dCache) {
        assert_eq!(x.c, self.ci(), "conv input channels");
        let (oh, ow) = self.out_hw(x.h, x.w);
        let (co, kdim, l) = (self.co(), self.ci() * self.k() * self.k(), oh * ow);
        let mut cols = vec![0.0; x.n * kdim * l];
        let mut y = Tensor::zeros(x.n, co, oh, ow);
        for n in 0..x.n {
            let cn = &mut cols[n * kdim * l..(n + 1) * kdim * l];
            self.im2col(x, n, cn);
            unsafe {
                matrixmultiply::dgemm(
                    co,
                    kdim,
                    l,
                    1.0,
                    self.w.data.as_ptr(),
                    kdim as isize,
                    1,
                    cn.as_ptr(),
                    l as isize,
                    1,
                    0.0,
                    y.data[n * co * l..].as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            for c in 0..co {
                let bias = self.b.data[c];
                for v in &mut y.data[(n * co + c) * l..(n * co + c + 1) * l] {
                    *v += bias;
                }
            }
        }
        (
            y,
            Conv2dCache {
                cols,
                in_shape: (x.n, x.c, x.h, x.w),
                out_hw: (oh, ow),
            },
        )
    }

    pub fn backward(
        &self,
        cache: &Conv2dCache,
        dy: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Tensor {
        let (n_batch, ci, h, w) = cache.in_shape;
        let (oh, ow) = cache.out_hw;
        let (co, kdim, l) = (self.co(), ci * self.k() * self.k(), oh * ow);
        let mut dw = vec![0.0; co * kdim];
        let mut db = vec![0.0; co];
        let mut dx = Tensor::zeros(n_batch, ci, h, w);
        let mut dcols = vec![0.0; kdim * l];
        for n in 0..n_batch {
            let cn = &cache.cols[n * kdim * l..(n + 1) * kdim * l];
            let dyn_ = &dy.data[n * co * l..(n + 1) * co * l];
            unsafe {
                // dW += dY * cols^T
                matrixmultiply::dgemm(
                    co,
                    l,
                    kdim,
                    1.0,
                    dyn_.as_ptr(),
                    l as isize,
                    1,
                    cn.as_ptr(),
                    1,
                    l as isize,
                    1.0,
                    dw.as_mut_ptr(),
                    kdim as isize,
                    1,
                );
                // dcols = W^T * dY
                matrixmultiply::dgemm(
                    kdim,
                    co,
                    l,
                    1.0,
                    self.w.data.as_ptr(),
                    1,
                    kdim as isize,
                    dyn_.as_ptr(),
                    l as isize,
                    1,
                    0.0,
                    dcols.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            for c in 0..co {
                db[c] += dyn_[c * l..(c + 1) * l].iter().sum::<f64>();
            }
            self.col2im(&dcols, &mut dx, n);
        }
        grads.add(&format!("{prefix}.w"), &dw);
        grads.add(&format!("{prefix}.b"), &db);
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

// ----------------------------------------------------------- groupnorm

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub gamma: PTensor, // (c)
    pub beta: PTensor,  // (c)
    pub eps: f64,
}

pub struct GroupNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>, // per (n, group)
}

impl GroupNorm {
    pub fn new(c: usize, groups: usize) -> Self {
        assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
        GroupNorm {
            groups,
            gamma: PTensor {
                shape: vec![c],
                data: vec![1.0; c],
            },
            beta: PTensor::zeros(&[c]),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, GroupNormCache) {
        let cg = x.c / self.groups;
        let m = cg * x.h * x.w;
        let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
        let mut inv_std = vec![0.0; x.n * self.groups];
        let plane = x.h * x.w;
        for n in 0..x.n {
            for g in 0..self.groups {
                let base = (n * x.c + g * cg) * plane;
                let slice = &x.data[base..base + m];
                let mean = slice.iter().sum::<f64>() / m as f64;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[n * self.groups + g] = istd;
                for (i, v) in slice.iter().enumerate() {
                    let c = g * cg + i / plane;
                    let xh = (v - mean) * istd;
                    xhat.data[base + i] = xh;
                    y.data[base + i] = self.gamma.data[c] * xh + self.beta.data[c];
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        cache: &GroupNormCache,
        dy: &Tensor,
        prefix: &str,
        grads: &mut GradStore,
    ) -> Tensor {
        let x = &cache.xhat;
        let cg = x.c / self.groups;
        let m = cg * x.h * x.w;
        let plane = x.h * x.w;
        let mut dgamma = vec![0.0; x.c];
        let mut dbeta = vec![0.0; x.c];
        let mut dx = Tensor::zeros(x.n, x.c, x.h, x.w);
        for n in 0..x.n {
            for g in 0..self.groups {
                let base = (n * x.c + g * cg) * plane;
                let istd = cache.inv_std[n * self.groups + g];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for i in 0..m {
                    let c = g * cg + i / plane;
                    let dyv = dy.data[base + i];
                    let xh = x.data[base + i];
                    dgamma[c] += dyv * xh;
                    dbeta[c] += dyv;
                    let dxhat = dyv * self.gamma.data[c];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xh;
                }
                for i in 0..m {
                    let c = g * cg + i / plane;
                    let dxhat = dy.data[base + i] * self.gamma.data[c];
                    let xh = x.data[base + i];
                    dx.data[base + i] = istd / m as f64
                        * (m as f64 * dxhat - sum_dxhat - xh * sum_dxhat_xhat);
                }
            }
        }
        grads.add(&format!("{prefix}.gamma"), &dgamma);
        grads.add(&format!("{prefix}.beta"), &dbeta);
        dx
    }
}

impl Module for GroupNorm {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

// ---------------------------------------------------------------- silu

/// SiLU x * sigmoid(x); smooth everywhere, which keeps the
/// finite-difference checks tight.
pub fn silu(x: &Tensor) -> (Tensor, Tensor) {
    let mut y = x.clone();
    for v in &mut y.data {
        *v = *v * sigmoid(*v);
    }
    (y, x.clone())
}

pub fn silu_backward(cache_x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, x) in dx.data.iter_mut().zip(&cache_x.data) {
        let s = sigmoid(*x);
        *d *= s * (1.0 + x * (1.0 - s));
    }
    dx
}

// -------------------------------------------------------------- linear

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: PTensor, // (out, in)
    pub b: PTensor, // (out)
}

impl Linear {
    pub fn new(inp: usize, out: usize, rng: &mut SeedRng) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        Linear {
            w: PTensor::randn(&[out, inp], std, rng),
            b: PTensor::zeros(&[out]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = PTensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data[i * dim + i] = 1.0;
        }
        Linear {
            w,
            b: PTensor::zeros(&[dim]),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    /// x: (n, in) row-major -> (n, out).
    pub fn forward(&self, x: &[f64], n: usize) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        assert_eq!(x.len(), n * i);
        let mut y = vec![0.0; n * o];
        for b in 0..n {
            for r in 0..o {
                let mut acc = self.b.data[r];
                let wrow = &self.w.data[r * i..(r + 1) * i];
                let xrow = &x[b * i..(b + 1) * i];
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                y[b * o + r] = acc;
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &[f64],
        n: usize,
        dy: &[f64],
        prefix: &str,
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let mut dw = vec![0.0; o * i];
        let mut db = vec![0.0; o];
        let mut dx = vec![0.0; n * i];
        for b in 0..n {
            for r in 0..o {
                let d = dy[b * o + r];
                db[r] += d;
                let wrow = &self.w.data[r * i..(r + 1) * i];
                for c in 0..i {
                    dw[r * i + c] += d * x[b * i + c];
                    dx[b * i + c] += d * wrow[c];
                }
            }
        }
        grads.add(&format!("{prefix}.w"), &dw);
        grads.add(&format!("{prefix}.b"), &db);
        dx
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

// ------------------------------------------------------------ upsample

/// Nearest-neighbour 2x upsample.
pub fn upsample2(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.n, x.c, x.h * 2, x.w * 2);
    for n in 0..x.n {
        for c in 0..x.c {
            for yy in 0..y.h {
                for xx in 0..y.w {
                    *y.at_mut(n, c, yy, xx) = x.at(n, c, yy / 2, xx / 2);
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Tensor) -> Tensor {
    let mut dx = Tensor::zeros(dy.n, dy.c, dy.h / 2, dy.w / 2);
    for n in 0..dy.n {
        for c in 0..dy.c {
            for yy in 0..dy.h {
                for xx in 0..dy.w {
                    *dx.at_mut(n, c, yy / 2, xx / 2) += dy.at(n, c, yy, xx);
                }
            }
        }
    }
    dx
}

// ------------------------------------------------------ time embedding

/// Sinusoidal timestep embedding of dimension `dim` (even).
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10_000f64.ln()).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd_check_params;

    fn proj_loss(y: &Tensor, r: &Tensor) -> f64 {
        y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        for (stride, pad) in [(1usize, 1usize), (2, 1)] {
            let mut rng = SeedRng::new(10 + stride as u64, 0);
            let conv = Conv2d::new(2, 3, 3, stride, pad, &mut rng);
            let x = Tensor::randn(2, 2, 6, 6, &mut rng);
            let (y, _) = conv.forward(&x);
            let r = Tensor::randn(y.n, y.c, y.h, y.w, &mut rng);

            let mut grads = GradStore::default();
            let (_, cache) = conv.forward(&x);
            let dx = conv.backward(&cache, &r, "c", &mut grads);

            let rel = fd_check_params(
                &mut conv.clone(),
                "c",
                &grads,
                |m| {
                    let (y, _) = m.forward(&x);
                    proj_loss(&y, &r)
                },
                1e-5,
            );
            assert!(rel < 1e-7, "conv param rel err {rel} (stride {stride})");

            // input gradient
            let mut max_rel: f64 = 0.0;
            for i in (0..x.numel()).step_by(7) {
                let mut xp = x.clone();
                xp.data[i] += 1e-5;
                let mut xm = x.clone();
                xm.data[i] -= 1e-5;
                let fd = (proj_loss(&conv.forward(&xp).0, &r) - proj_loss(&conv.forward(&xm).0, &r))
                    / 2e-5;
                let an = dx.data[i];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                max_rel = max_rel.max((fd - an).abs() / denom);
            }
            assert!(max_rel < 1e-6, "conv input rel err {max_rel}");
        }
    }

    #[test]
    fn groupnorm_matches_finite_differences() {
        let mut rng = SeedRng::new(21, 0);
        let mut gn = GroupNorm::new(4, 2);
        for v in &mut gn.gamma.data {
            *v = 1.0 + 0.3 * rng.normal();
        }
        let x = Tensor::randn(2, 4, 3, 3, &mut rng);
        let r = Tensor::randn(2, 4, 3, 3, &mut rng);

        let (_, cache) = gn.forward(&x);
        let mut grads = GradStore::default();
        let dx = gn.backward(&cache, &r, "g", &mut grads);

        let rel = fd_check_params(
            &mut gn.clone(),
            "g",
            &grads,
            |m| proj_loss(&m.forward(&x).0, &r),
            1e-5,
        );
        assert!(rel < 1e-6, "groupnorm param rel err {rel}");

        let mut max_rel: f64 = 0.0;
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data[i] += 1e-5;
            let mut xm = x.clone();
            xm.data[i] -= 1e-5;
            let fd = (proj_loss(&gn.forward(&xp).0, &r) - proj_loss(&gn.forward(&xm).0, &r)) / 2e-5;
            let an = dx.data[i];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            max_rel = max_rel.max((fd - an).abs() / denom);
        }
        assert!(max_rel < 1e-5, "groupnorm input rel err {max_rel}");
    }

    #[test]
    fn silu_and_upsample_backward() {
        let mut rng = SeedRng::new(33, 0);
        let x = Tensor::randn(1, 2, 4, 4, &mut rng);
        let r = Tensor::randn(1, 2, 4, 4, &mut rng);
        let (_, cache) = silu(&x);
        let dx = silu_backward(&cache, &r);
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.data[i] += 1e-6;
            let mut xm = x.clone();
            xm.data[i] -= 1e-6;
            let fd = (proj_loss(&silu(&xp).0, &r) - proj_loss(&silu(&xm).0, &r)) / 2e-6;
            assert!((fd - dx.data[i]).abs() < 1e-7, "silu fd {fd} vs {}", dx.data[i]);
        }

        let up = upsample2(&x);
        assert_eq!((up.h, up.w), (8, 8));
        let dy = Tensor::randn(1, 2, 8, 8, &mut rng);
        let dx = upsample2_backward(&dy);
        // each input pixel receives the sum of its 2x2 block
        assert!((dx.at(0, 0, 0, 0)
            - (dy.at(0, 0, 0, 0) + dy.at(0, 0, 0, 1) + dy.at(0, 0, 1, 0) + dy.at(0, 0, 1, 1)))
        .abs()
            < 1e-12);
    }

    #[test]
    fn linear_matches_finite_differences() {
        let mut rng = SeedRng::new(44, 0);
        let lin = Linear::new(5, 3, &mut rng);
        let x: Vec<f64> = rng.normal_vec(2 * 5);
        let r: Vec<f64> = rng.normal_vec(2 * 3);
        let loss = |m: &Linear, x: &[f64]| -> f64 {
            m.forward(x, 2).iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let mut grads = GradStore::default();
        let dx = lin.backward(&x, 2, &r, "l", &mut grads);
        let rel = fd_check_params(&mut lin.clone(), "l", &grads, |m| loss(m, &x), 1e-5);
        assert!(rel < 1e-8, "linear param rel err {rel}");
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += 1e-6;
            let mut xm = x.clone();
            xm[i] -= 1e-6;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / 2e-6;
            assert!((fd - dx[i]).abs() < 1e-7);
        }
    }
}

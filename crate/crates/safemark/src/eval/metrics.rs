//! Image-quality metrics: PSNR plus desk-scale proxies for the
//! large-network metrics — a Fréchet distance and a perceptual distance
//! over stage-1 encoder features, and an encoder-feature cosine
//! similarity reported as `clip_proxy`. The proxies track trends, not
//! the absolute values of their full-scale namesakes.

use crate::autoencoder::{encode, AutoencoderParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Peak for the internal [-1, 1] value range.
const PEAK: f64 = 2.0;
const PSNR_CAP: f64 = 100.0;

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    if a.side() != b.side() {
        return Err(Error::shape("psnr/mse shape mismatch".to_string()));
    }
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak^2 / mse)`, capped at 100 dB (returned for any
/// mse below 1e-10, including exact equality).
pub fn psnr_with_peak(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// PSNR over the internal [-1, 1] range (peak 2). Numerically equal to
/// the conventional [0, 1]-range PSNR of the same content.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    psnr_with_peak(a, b, PEAK)
}

/// Stage-1 encoder feature vector (flattened latent).
pub fn encoder_features(img: &ImageTensor, ae: &AutoencoderParams) -> Result<Vec<f64>> {
    Ok(encode(img, ae)?.data().to_vec())
}

// ------------------------------------------------------------ frechet

#[derive(Clone, Copy, Debug)]
pub struct FrechetOut {
    pub value: f64,
    /// True when a degenerate covariance was ridge-regularized.
    pub regularized: bool,
}

fn mean_cov(feats: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = feats.len();
    let d = feats[0].len();
    let mut mu = vec![0.0; d];
    for f in feats {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in feats {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in i..d {
                cov[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    let denom = (n as f64 - 1.0).max(1.0);
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    (mu, cov)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix:
/// returns (eigenvalues, eigenvectors as columns, row-major).
fn jacobi_eig(mat: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = mat.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..20 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j] * a[i * d + j];
            }
        }
        if off < 1e-22 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                // zero a_pq with the Givens rotation J (J_pp=J_qq=c,
                // J_pq=s, J_qp=-s): tan(2 theta) = 2 a_pq / (a_qq - a_pp)
                let theta = 0.5 * (2.0 * apq).atan2(a[q * d + q] - a[p * d + p]);
                let (s, c) = theta.sin_cos();
                // A <- J^T A J: columns then rows
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                // V <- V J
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..d).map(|i| a[i * d + i]).collect(), v)
}

fn sym_eigenvalues(mat: &[f64], d: usize) -> Vec<f64> {
    jacobi_eig(mat, d).0
}

/// Symmetric PSD square root `V sqrt(L) V^T`.
fn sym_sqrt(mat: &[f64], d: usize) -> Vec<f64> {
    let (eigs, v) = jacobi_eig(mat, d);
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let s = eigs[k].max(0.0).sqrt();
        if s == 0.0 {
            continue;
        }
        for i in 0..d {
            let vik = v[i * d + k] * s;
            for j in 0..d {
                out[i * d + j] += vik * v[j * d + k];
            }
        }
    }
    out
}

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^{1/2})`, computed through
/// the symmetric similarity `Sa^{1/2} Sb Sa^{1/2}`.
pub fn frechet_proxy(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<FrechetOut> {
    if feats_a.len() < 2 || feats_b.len() < 2 {
        return Err(Error::domain("need at least 2 samples per set".to_string()));
    }
    let d = feats_a[0].len();
    if feats_b[0].len() != d {
        return Err(Error::shape("feature dimension mismatch".to_string()));
    }
    let (mu_a, mut cov_a) = mean_cov(feats_a);
    let (mu_b, mut cov_b) = mean_cov(feats_b);

    let mut regularized = false;
    for cov in [&mut cov_a, &mut cov_b] {
        let eigs = sym_eigenvalues(cov, d);
        if eigs.iter().any(|e| *e < 1e-10) {
            for i in 0..d {
                cov[i * d + i] += 1e-6;
            }
            regularized = true;
        }
    }

    let mean_term: f64 = mu_a
        .iter()
        .zip(&mu_b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr = |m: &[f64]| (0..d).map(|i| m[i * d + i]).sum::<f64>();
    let sqrt_a = sym_sqrt(&cov_a, d);
    let inner = matmul(&matmul(&sqrt_a, &cov_b, d), &sqrt_a, d);
    let eigs = sym_eigenvalues(&inner, d);
    let tr_sqrt: f64 = eigs.iter().map(|e| e.max(0.0).sqrt()).sum();
    let value = (mean_term + tr(&cov_a) + tr(&cov_b) - 2.0 * tr_sqrt).max(0.0);
    Ok(FrechetOut { value, regularized })
}

// --------------------------------------------------------- perceptual

/// Normalized L2 distance between stage-1 encoder feature maps:
/// each feature vector is unit-normalized before the squared distance,
/// so the measure is 0 iff the inputs agree and grows with perceptual
/// difference rather than raw intensity.
pub fn perceptual_proxy(a: &ImageTensor, b: &ImageTensor, ae: &AutoencoderParams) -> Result<f64> {
    if a.side() != b.side() {
        return Err(Error::shape("perceptual_proxy shape mismatch".to_string()));
    }
    let fa = encoder_features(a, ae)?;
    let fb = encoder_features(b, ae)?;
    let norm = |v: &[f64]| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        } else {
            v.to_vec()
        }
    };
    let na = norm(&fa);
    let nb = norm(&fb);
    Ok(na
        .iter()
        .zip(&nb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>())
}

/// Encoder-feature cosine similarity, the desk-scale `clip_proxy`.
pub fn clip_proxy(a: &ImageTensor, b: &ImageTensor, ae: &AutoencoderParams) -> Result<f64> {
    let fa = encoder_features(a, ae)?;
    let fb = encoder_features(b, ae)?;
    let dot: f64 = fa.iter().zip(&fb).map(|(x, y)| x * y).sum();
    let na = fa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = fb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(dot / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn img_of(side: usize, v: f64) -> ImageTensor {
        let mut img = ImageTensor::zeros(side);
        for x in img.data_mut() {
            *x = v;
        }
        img
    }

    #[test]
    fn psnr_cap_and_closed_form() {
        let a = img_of(8, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        // constant difference 0.1 on a unit range -> MSE 0.01 -> 20 dB
        let b = img_of(8, 0.4);
        assert!((psnr_with_peak(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        // internal peak-2 convention: same content scores +6.02 dB
        assert!((psnr(&a, &b).unwrap() - 26.0206).abs() < 1e-3);
        let c = ImageTensor::zeros(4);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn frechet_identical_sets_zero_and_symmetric() {
        let mut rng = SeedRng::new(1, 0);
        let set: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(3)).collect();
        let out = frechet_proxy(&set, &set).unwrap();
        assert!(out.value < 1e-9, "identical sets: {}", out.value);

        let other: Vec<Vec<f64>> = (0..40).map(|_| rng.normal_vec(3)).collect();
        let ab = frechet_proxy(&set, &other).unwrap().value;
        let ba = frechet_proxy(&other, &set).unwrap().value;
        assert!((ab - ba).abs() < 1e-9, "symmetry: {ab} vs {ba}");
    }

    #[test]
    fn frechet_matches_1d_closed_form() {
        let mut rng = SeedRng::new(2, 0);
        let a: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.normal()]).collect();
        let b: Vec<Vec<f64>> = (0..10_000).map(|_| vec![rng.normal() + 1.0]).collect();
        let out = frechet_proxy(&a, &b).unwrap();
        assert!(
            (out.value - 1.0).abs() < 0.1,
            "1-D N(0,1) vs N(1,1): {}",
            out.value
        );
    }

    #[test]
    fn frechet_flags_degenerate_covariance() {
        // constant features: zero covariance
        let a: Vec<Vec<f64>> = (0..5).map(|_| vec![1.0, 2.0]).collect();
        let out = frechet_proxy(&a, &a).unwrap();
        assert!(out.regularized);
    }

    #[test]
    fn frechet_needs_two_samples() {
        let a = vec![vec![1.0]];
        assert!(frechet_proxy(&a, &a).is_err());
    }
}

//! Stage-1 model: shared graphic encoder, injection convolution `f_c`,
//! and dual decoders — a frozen image generator `D_i` and a trainable
//! watermark extractor `D_w` fed the same mixture latent. Trained with
//! the weighting loss `||x - x̂||² + γ·||w - ŵ||² + L_adv`, mean-reduced,
//! with the adversarial term gated behind a config flag.
//!
//! `D_i` is initialized from a base autoencoder (pretrained here when no
//! base checkpoint is supplied) and never changes afterwards; `D_w`
//! starts as a copy of it. The injection convolution starts as a
//! pass-through: identity on the image half of the concatenation, zero
//! on the watermark half, so training begins from an unwatermarked,
//! correctly reconstructing state.

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{ImageTensor, WatermarkImage};
use crate::latent::LatentTensor;
use crate::nn::{
    silu, silu_backward, upsample2, upsample2_backward, Adam, Conv2d, GradStore, GroupNorm,
    Module, ParamVisit, ParamVisitMut, PTensor, Tensor,
};
use crate::rng::{SeedRng, STREAM_TRAIN};

fn norm_groups(c: usize) -> usize {
    if c % 8 == 0 {
        8
    } else if c % 4 == 0 {
        4
    } else {
        1
    }
}

// ------------------------------------------------------------ resblock

#[derive(Clone, Debug)]
pub struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

pub struct ResCache {
    n1: super::nn::layers::GroupNormCache,
    x1: Tensor,
    c1: super::nn::layers::Conv2dCache,
    n2: super::nn::layers::GroupNormCache,
    x2: Tensor,
    c2: super::nn::layers::Conv2dCache,
}

impl ResBlock {
    fn new(c: usize, rng: &mut SeedRng) -> Self {
        ResBlock {
            n1: GroupNorm::new(c, norm_groups(c)),
            c1: Conv2d::new(c, c, 3, 1, 1, rng),
            n2: GroupNorm::new(c, norm_groups(c)),
            c2: Conv2d::new(c, c, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, ResCache) {
        let (h1, n1) = self.n1.forward(x);
        let (s1, x1) = silu(&h1);
        let (h2, c1) = self.c1.forward(&s1);
        let (h3, n2) = self.n2.forward(&h2);
        let (s2, x2) = silu(&h3);
        let (h4, c2) = self.c2.forward(&s2);
        (x.add(&h4), ResCache { n1, x1, c1, n2, x2, c2 })
    }

    fn backward(&self, cache: &ResCache, dy: &Tensor, prefix: &str, g: &mut GradStore) -> Tensor {
        let ds2 = self.c2.backward(&cache.c2, dy, &format!("{prefix}.c2"), g);
        let dh3 = silu_backward(&cache.x2, &ds2);
        let dh2 = self.n2.backward(&cache.n2, &dh3, &format!("{prefix}.n2"), g);
        let ds1 = self.c1.backward(&cache.c1, &dh2, &format!("{prefix}.c1"), g);
        let dh1 = silu_backward(&cache.x1, &ds1);
        let dx = self.n1.backward(&cache.n1, &dh1, &format!("{prefix}.n1"), g);
        dx.add(dy)
    }
}

impl Module for ResBlock {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        self.n1.visit(&format!("{prefix}.n1"), f);
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.n2.visit(&format!("{prefix}.n2"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        self.n1.visit_mut(&format!("{prefix}.n1"), f);
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.n2.visit_mut(&format!("{prefix}.n2"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
    }
}

// ------------------------------------------------------------- encoder

#[derive(Clone, Debug)]
pub struct Encoder {
    conv_in: Conv2d,
    downs: Vec<Conv2d>,
    res: ResBlock,
    conv_out: Conv2d,
}

pub struct EncCache {
    c_in: super::nn::layers::Conv2dCache,
    x0: Tensor,
    downs: Vec<(super::nn::layers::Conv2dCache, Tensor)>,
    res: ResCache,
    c_out: super::nn::layers::Conv2dCache,
}

impl Encoder {
    fn new(arch: &AeArch, rng: &mut SeedRng) -> Self {
        let w = &arch.widths;
        Encoder {
            conv_in: Conv2d::new(3, w[0], 3, 1, 1, rng),
            downs: (0..w.len() - 1)
                .map(|i| Conv2d::new(w[i], w[i + 1], 3, 2, 1, rng))
                .collect(),
            res: ResBlock::new(*w.last().unwrap(), rng),
            conv_out: Conv2d::new(*w.last().unwrap(), arch.d, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, EncCache) {
        let (h, c_in) = self.conv_in.forward(x);
        let (mut h, x0) = silu(&h);
        let mut downs = Vec::with_capacity(self.downs.len());
        for d in &self.downs {
            let (y, cache) = d.forward(&h);
            let (s, xs) = silu(&y);
            downs.push((cache, xs));
            h = s;
        }
        let (h, res) = self.res.forward(&h);
        let (z, c_out) = self.conv_out.forward(&h);
        (z, EncCache { c_in, x0, downs, res, c_out })
    }

    pub fn backward(&self, cache: &EncCache, dz: &Tensor, prefix: &str, g: &mut GradStore) -> Tensor {
        let dh = self
            .conv_out
            .backward(&cache.c_out, dz, &format!("{prefix}.out"), g);
        let mut dh = self.res.backward(&cache.res, &dh, &format!("{prefix}.res"), g);
        for (i, d) in self.downs.iter().enumerate().rev() {
            let (cache_i, xs) = &cache.downs[i];
            let dy = silu_backward(xs, &dh);
            dh = d.backward(cache_i, &dy, &format!("{prefix}.down{i}"), g);
        }
        let dh = silu_backward(&cache.x0, &dh);
        self.conv_in
            .backward(&cache.c_in, &dh, &format!("{prefix}.in"), g)
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        self.conv_in.visit(&format!("{prefix}.in"), f);
        for (i, d) in self.downs.iter().enumerate() {
            d.visit(&format!("{prefix}.down{i}"), f);
        }
        self.res.visit(&format!("{prefix}.res"), f);
        self.conv_out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        self.conv_in.visit_mut(&format!("{prefix}.in"), f);
        for (i, d) in self.downs.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}.down{i}"), f);
        }
        self.res.visit_mut(&format!("{prefix}.res"), f);
        self.conv_out.visit_mut(&format!("{prefix}.out"), f);
    }
}

// ------------------------------------------------------------- decoder

#[derive(Clone, Debug)]
pub struct Decoder {
    conv_in: Conv2d,
    res: ResBlock,
    ups: Vec<Conv2d>,
    conv_out: Conv2d,
}

pub struct DecCache {
    c_in: super::nn::layers::Conv2dCache,
    res: ResCache,
    ups: Vec<(super::nn::layers::Conv2dCache, Tensor)>,
    c_out: super::nn::layers::Conv2dCache,
}

impl Decoder {
    fn new(arch: &AeArch, rng: &mut SeedRng) -> Self {
        let w = &arch.widths;
        let last = *w.last().unwrap();
        Decoder {
            conv_in: Conv2d::new(arch.d, last, 3, 1, 1, rng),
            res: ResBlock::new(last, rng),
            ups: (0..w.len() - 1)
                .rev()
                .map(|i| Conv2d::new(w[i + 1], w[i], 3, 1, 1, rng))
                .collect(),
            conv_out: Conv2d::new(w[0], 3, 3, 1, 1, rng),
        }
    }

    pub fn forward(&self, z: &Tensor) -> (Tensor, DecCache) {
        let (h, c_in) = self.conv_in.forward(z);
        let (mut h, res) = self.res.forward(&h);
        let mut ups = Vec::with_capacity(self.ups.len());
        for u in &self.ups {
            let up = upsample2(&h);
            let (y, cache) = u.forward(&up);
            let (s, xs) = silu(&y);
            ups.push((cache, xs));
            h = s;
        }
        let (x, c_out) = self.conv_out.forward(&h);
        (x, DecCache { c_in, res, ups, c_out })
    }

    pub fn backward(&self, cache: &DecCache, dx: &Tensor, prefix: &str, g: &mut GradStore) -> Tensor {
        let mut dh = self
            .conv_out
            .backward(&cache.c_out, dx, &format!("{prefix}.out"), g);
        for (i, u) in self.ups.iter().enumerate().rev() {
            let (cache_i, xs) = &cache.ups[i];
            let dy = silu_backward(xs, &dh);
            let dup = u.backward(cache_i, &dy, &format!("{prefix}.up{i}"), g);
            dh = upsample2_backward(&dup);
        }
        let dh = self.res.backward(&cache.res, &dh, &format!("{prefix}.res"), g);
        self.conv_in
            .backward(&cache.c_in, &dh, &format!("{prefix}.in"), g)
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        self.conv_in.visit(&format!("{prefix}.in"), f);
        self.res.visit(&format!("{prefix}.res"), f);
        for (i, u) in self.ups.iter().enumerate() {
            u.visit(&format!("{prefix}.up{i}"), f);
        }
        self.conv_out.visit(&format!("{prefix}.out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        self.conv_in.visit_mut(&format!("{prefix}.in"), f);
        self.res.visit_mut(&format!("{prefix}.res"), f);
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_mut(&format!("{prefix}.up{i}"), f);
        }
        self.conv_out.visit_mut(&format!("{prefix}.out"), f);
    }
}

// ------------------------------------------------------- discriminator

/// Patch discriminator for the optional hinge adversarial term.
#[derive(Clone, Debug)]
pub struct PatchDisc {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl PatchDisc {
    fn new(rng: &mut SeedRng) -> Self {
        PatchDisc {
            c1: Conv2d::new(3, 16, 3, 2, 1, rng),
            c2: Conv2d::new(16, 32, 3, 2, 1, rng),
            c3: Conv2d::new(32, 1, 3, 1, 1, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, DiscCache) {
        let (h, a) = self.c1.forward(x);
        let (h, x1) = silu(&h);
        let (h, b) = self.c2.forward(&h);
        let (h, x2) = silu(&h);
        let (y, c) = self.c3.forward(&h);
        (y, DiscCache { a, x1, b, x2, c })
    }

    fn backward(&self, cache: &DiscCache, dy: &Tensor, prefix: &str, g: &mut GradStore) -> Tensor {
        let dh = self.c3.backward(&cache.c, dy, &format!("{prefix}.c3"), g);
        let dh = silu_backward(&cache.x2, &dh);
        let dh = self.c2.backward(&cache.b, &dh, &format!("{prefix}.c2"), g);
        let dh = silu_backward(&cache.x1, &dh);
        self.c1.backward(&cache.a, &dh, &format!("{prefix}.c1"), g)
    }
}

pub struct DiscCache {
    a: super::nn::layers::Conv2dCache,
    x1: Tensor,
    b: super::nn::layers::Conv2dCache,
    x2: Tensor,
    c: super::nn::layers::Conv2dCache,
}

impl Module for PatchDisc {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        self.c1.visit(&format!("{prefix}.c1"), f);
        self.c2.visit(&format!("{prefix}.c2"), f);
        self.c3.visit(&format!("{prefix}.c3"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        self.c1.visit_mut(&format!("{prefix}.c1"), f);
        self.c2.visit_mut(&format!("{prefix}.c2"), f);
        self.c3.visit_mut(&format!("{prefix}.c3"), f);
    }
}

// ------------------------------------------------------------- params

/// Architecture hyperparameters derived from a [`RunConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct AeArch {
    pub f: usize,
    pub d: usize,
    /// Channel widths from image resolution down to the latent level;
    /// length is log2(f) + 1.
    pub widths: Vec<usize>,
}

impl AeArch {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let levels = match cfg.f {
            2 => 1,
            4 => 2,
            8 => 3,
            other => return Err(Error::domain(format!("unsupported f {other}"))),
        };
        let base = [16usize, 24, 48, 64];
        Ok(AeArch {
            f: cfg.f,
            d: cfg.d,
            widths: base[..levels + 1].to_vec(),
        })
    }

    /// Tiny architecture (< 1k parameters) for gradient checks.
    pub fn micro() -> Self {
        AeArch {
            f: 2,
            d: 2,
            widths: vec![2, 2],
        }
    }

    /// Recover the architecture from checkpoint array shapes.
    pub fn from_arrays(arrays: &[crate::checkpoint::ArrayInfo]) -> Result<Self> {
        let shape_of = |name: &str| -> Result<&[usize]> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .map(|a| a.shape.as_slice())
                .ok_or_else(|| Error::Checkpoint(format!("array '{name}' missing")))
        };
        let mut widths = vec![shape_of("enc.in.w")?[0]];
        let mut i = 0;
        while let Ok(s) = shape_of(&format!("enc.down{i}.w")) {
            widths.push(s[0]);
            i += 1;
        }
        let d = shape_of("enc.out.w")?[0];
        Ok(AeArch {
            f: 1 << (widths.len() - 1),
            d,
            widths,
        })
    }
}

#[derive(Clone, Debug)]
pub struct AutoencoderParams {
    pub arch: AeArch,
    pub enc: Encoder,
    pub inj: Conv2d,
    pub dec_i: Decoder,
    pub dec_w: Decoder,
    pub disc: Option<PatchDisc>,
}

impl AutoencoderParams {
    /// Random init; `dec_w` is a copy of `dec_i` and the injection layer
    /// is the pass-through initializer.
    pub fn init(arch: &AeArch, rng: &mut SeedRng) -> Self {
        let enc = Encoder::new(arch, rng);
        let dec_i = Decoder::new(arch, rng);
        let dec_w = dec_i.clone();
        let inj = pass_through_injection(arch.d);
        AutoencoderParams {
            arch: arch.clone(),
            enc,
            inj,
            dec_i,
            dec_w,
            disc: None,
        }
    }

    pub fn ensure_disc(&mut self, rng: &mut SeedRng) {
        if self.disc.is_none() {
            self.disc = Some(PatchDisc::new(rng));
        }
    }

    /// Flat copy of the frozen image-decoder parameters.
    pub fn frozen_decoder_params(&self) -> Vec<f64> {
        self.dec_i.flat_params()
    }
}

impl Module for AutoencoderParams {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        self.enc.visit(&format!("{prefix}enc"), f);
        self.inj.visit(&format!("{prefix}inj"), f);
        self.dec_i.visit(&format!("{prefix}dec_i"), f);
        self.dec_w.visit(&format!("{prefix}dec_w"), f);
        if let Some(d) = &self.disc {
            d.visit(&format!("{prefix}disc"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        self.enc.visit_mut(&format!("{prefix}enc"), f);
        self.inj.visit_mut(&format!("{prefix}inj"), f);
        self.dec_i.visit_mut(&format!("{prefix}dec_i"), f);
        self.dec_w.visit_mut(&format!("{prefix}dec_w"), f);
        if let Some(d) = &mut self.disc {
            d.visit_mut(&format!("{prefix}disc"), f);
        }
    }
}

/// Stage-1 trainables: everything except the frozen `dec_i` (and the
/// discriminator, which has its own optimizer).
struct TrainableView<'a>(&'a mut AutoencoderParams);

impl Module for TrainableView<'_> {
    fn visit(&self, prefix: &str, f: &mut ParamVisit) {
        self.0.enc.visit(&format!("{prefix}enc"), f);
        self.0.inj.visit(&format!("{prefix}inj"), f);
        self.0.dec_w.visit(&format!("{prefix}dec_w"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
        self.0.enc.visit_mut(&format!("{prefix}enc"), f);
        self.0.inj.visit_mut(&format!("{prefix}inj"), f);
        self.0.dec_w.visit_mut(&format!("{prefix}dec_w"), f);
    }
}

/// 3x3 convolution over the 2d-channel concatenation, initialized so the
/// image half maps through identically and the watermark half to zero.
pub fn pass_through_injection(d: usize) -> Conv2d {
    let mut w = PTensor::zeros(&[d, 2 * d, 3, 3]);
    for c in 0..d {
        // center tap of the matching image channel
        let idx = ((c * 2 * d + c) * 3 + 1) * 3 + 1;
        w.data[idx] = 1.0;
    }
    Conv2d {
        w,
        b: PTensor::zeros(&[d]),
        stride: 1,
        pad: 1,
    }
}

// --------------------------------------------------------- conversions

pub fn images_to_tensor(batch: &[&ImageTensor]) -> Tensor {
    let side = batch[0].side();
    let mut t = Tensor::zeros(batch.len(), 3, side, side);
    for (n, img) in batch.iter().enumerate() {
        t.data[n * 3 * side * side..(n + 1) * 3 * side * side].copy_from_slice(img.data());
    }
    t
}

pub fn tensor_to_images(t: &Tensor) -> Vec<ImageTensor> {
    assert_eq!(t.c, 3);
    (0..t.n)
        .map(|n| {
            ImageTensor::new(
                t.h,
                t.data[n * 3 * t.h * t.w..(n + 1) * 3 * t.h * t.w].to_vec(),
            )
            .expect("image shape")
        })
        .collect()
}

pub fn latents_to_tensor(batch: &[&LatentTensor]) -> Tensor {
    let (h, w, d) = (batch[0].h, batch[0].w, batch[0].d);
    let mut t = Tensor::zeros(batch.len(), d, h, w);
    for (n, z) in batch.iter().enumerate() {
        t.data[n * d * h * w..(n + 1) * d * h * w].copy_from_slice(z.data());
    }
    t
}

pub fn tensor_to_latents(t: &Tensor) -> Vec<LatentTensor> {
    (0..t.n)
        .map(|n| {
            LatentTensor::new(
                t.h,
                t.w,
                t.c,
                t.data[n * t.c * t.h * t.w..(n + 1) * t.c * t.h * t.w].to_vec(),
            )
            .expect("latent shape")
        })
        .collect()
}

// ---------------------------------------------------------- operations

/// Project an image (or watermark — same weights) into latent space.
pub fn encode(x: &ImageTensor, p: &AutoencoderParams) -> Result<LatentTensor> {
    if x.side() % p.arch.f != 0 {
        return Err(Error::shape(format!(
            "image side {} not divisible by f {}",
            x.side(),
            p.arch.f
        )));
    }
    let t = images_to_tensor(&[x]);
    let (z, _) = p.enc.forward(&t);
    Ok(tensor_to_latents(&z).remove(0))
}

/// Mix image and watermark latents through the injection convolution.
pub fn inject(z_i: &LatentTensor, z_w: &LatentTensor, p: &AutoencoderParams) -> Result<LatentTensor> {
    if !z_i.same_shape(z_w) {
        return Err(Error::shape("inject: latent shape mismatch".to_string()));
    }
    let a = latents_to_tensor(&[z_i]);
    let b = latents_to_tensor(&[z_w]);
    let cat = Tensor::concat_channels(&a, &b);
    let (zm, _) = p.inj.forward(&cat);
    Ok(tensor_to_latents(&zm).remove(0))
}

/// Decode a mixture latent with the frozen image generator.
pub fn decode_image(z: &LatentTensor, p: &AutoencoderParams) -> Result<ImageTensor> {
    if z.d != p.arch.d {
        return Err(Error::shape(format!(
            "latent channels {} != configured d {}",
            z.d, p.arch.d
        )));
    }
    let t = latents_to_tensor(&[z]);
    let (x, _) = p.dec_i.forward(&t);
    Ok(tensor_to_images(&x).remove(0))
}

/// Decode a mixture latent with the trainable watermark extractor.
pub fn decode_watermark(z: &LatentTensor, p: &AutoencoderParams) -> Result<WatermarkImage> {
    if z.d != p.arch.d {
        return Err(Error::shape(format!(
            "latent channels {} != configured d {}",
            z.d, p.arch.d
        )));
    }
    let t = latents_to_tensor(&[z]);
    let (x, _) = p.dec_w.forward(&t);
    Ok(WatermarkImage(tensor_to_images(&x).remove(0)))
}

// --------------------------------------------------------------- loss

/// The separately reported terms of the stage-1 objective. The total is
/// exactly `img + gamma * wm + adv`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Stage1Loss {
    pub total: f64,
    pub img: f64,
    pub wm: f64,
    pub adv: f64,
}

/// Mean-squared error and its gradient with respect to the prediction.
fn mse_and_grad(target: &Tensor, pred: &Tensor) -> (f64, Tensor) {
    debug_assert!(target.same_shape(pred));
    let n = pred.numel() as f64;
    let mut grad = Tensor::zeros(pred.n, pred.c, pred.h, pred.w);
    let mut acc = 0.0;
    for i in 0..pred.data.len() {
        let diff = pred.data[i] - target.data[i];
        acc += diff * diff;
        grad.data[i] = 2.0 * diff / n;
    }
    (acc / n, grad)
}

/// Pure arithmetic of the weighting loss given the reconstructions;
/// returns the loss decomposition plus gradients with respect to x̂ and
/// ŵ. `adv` contributes the pre-computed generator term when enabled.
pub fn stage1_loss(
    x: &Tensor,
    w: &Tensor,
    xhat: &Tensor,
    what: &Tensor,
    gamma: f64,
    adv: Option<f64>,
) -> Result<(Stage1Loss, Tensor, Tensor)> {
    if gamma <= 0.0 {
        return Err(Error::domain("gamma must be > 0".to_string()));
    }
    if !x.same_shape(xhat) || !w.same_shape(what) {
        return Err(Error::shape("stage1_loss shape mismatch".to_string()));
    }
    let (img, dxhat) = mse_and_grad(x, xhat);
    let (wm, mut dwhat) = mse_and_grad(w, what);
    dwhat.scale_assign(gamma);
    let adv = adv.unwrap_or(0.0);
    Ok((
        Stage1Loss {
            total: img + gamma * wm + adv,
            img,
            wm,
            adv,
        },
        dxhat,
        dwhat,
    ))
}

/// Full differentiable stage-1 pass over a batch:
/// encode both inputs with the shared encoder, inject, decode with both
/// decoders, evaluate the weighting loss, and backpropagate into every
/// parameter (the frozen decoder's gradients are accumulated but the
/// optimizer never applies them).
pub fn stage1_forward_backward(
    p: &AutoencoderParams,
    x: &Tensor,
    w: &Tensor,
    gamma: f64,
    grads: &mut GradStore,
) -> Result<Stage1Loss> {
    stage1_train_step(p, x, w, gamma, false, grads)
}

/// Training step behind [`train_stage1`]. With `channel` set, a second
/// extraction term `gamma * ||w - D_w(E(D_i(z_m)))||^2` trains the
/// extractor through the decode/re-encode cycle the detector actually
/// sees; the reported loss decomposition stays that of the weighting
/// objective (img + gamma*wm + adv), the channel term being training
/// plumbing on top of it.
pub fn stage1_train_step(
    p: &AutoencoderParams,
    x: &Tensor,
    w: &Tensor,
    gamma: f64,
    channel: bool,
    grads: &mut GradStore,
) -> Result<Stage1Loss> {
    let (z_i, enc_i) = p.enc.forward(x);
    let (z_w, enc_w) = p.enc.forward(w);
    let cat = Tensor::concat_channels(&z_i, &z_w);
    let (z_m, inj_cache) = p.inj.forward(&cat);
    let (xhat, dec_i_cache) = p.dec_i.forward(&z_m);
    let (what, dec_w_cache) = p.dec_w.forward(&z_m);

    let (loss, mut dxhat, dwhat) = stage1_loss(x, w, &xhat, &what, gamma, None)?;

    if channel {
        let (z_r, enc_r) = p.enc.forward(&xhat);
        let (what2, dec_w2_cache) = p.dec_w.forward(&z_r);
        let n = what2.numel() as f64;
        let mut dwhat2 = Tensor::zeros(what2.n, what2.c, what2.h, what2.w);
        for i in 0..what2.data.len() {
            dwhat2.data[i] = 2.0 * gamma * (what2.data[i] - w.data[i]) / n;
        }
        let dz_r = p.dec_w.backward(&dec_w2_cache, &dwhat2, "dec_w", grads);
        let dxhat_channel = p.enc.backward(&enc_r, &dz_r, "enc", grads);
        dxhat.add_assign(&dxhat_channel);
    }

    let dz_m_i = p.dec_i.backward(&dec_i_cache, &dxhat, "dec_i", grads);
    let dz_m_w = p.dec_w.backward(&dec_w_cache, &dwhat, "dec_w", grads);
    let dz_m = dz_m_i.add(&dz_m_w);
    let dcat = p.inj.backward(&inj_cache, &dz_m, "inj", grads);
    let (dz_i, dz_w) = dcat.split_channels(z_i.c);
    let g_i = p.enc.backward(&enc_i, &dz_i, "enc", grads);
    let g_w = p.enc.backward(&enc_w, &dz_w, "enc", grads);
    let _ = (g_i, g_w);
    Ok(loss)
}

// ------------------------------------------------------------ training

/// One row of the persisted loss curves (`step,img,wm,adv`).
#[derive(Clone, Copy, Debug)]
pub struct CurveRow {
    pub step: usize,
    pub img: f64,
    pub wm: f64,
    pub adv: f64,
}

pub fn curves_to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("step,img,wm,adv\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6},{:.6}\n", r.step, r.img, r.wm, r.adv));
    }
    out
}

/// Pretrain a base autoencoder (encoder + image decoder, reconstruction
/// loss only). This provides the weights that stage 1 freezes into D_i.
pub fn train_base(
    images: &[ImageTensor],
    cfg: &RunConfig,
    steps: usize,
) -> Result<AutoencoderParams> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::domain("empty image dataset".to_string()));
    }
    let arch = AeArch::from_config(cfg)?;
    let mut rng = SeedRng::new(cfg.seed, STREAM_TRAIN);
    let mut p = AutoencoderParams::init(&arch, &mut rng);
    let mut opt = Adam::new(cfg.lr);
    for step in 0..steps {
        let batch: Vec<&ImageTensor> = (0..cfg.batch)
            .map(|_| &images[rng.below(images.len())])
            .collect();
        let x = images_to_tensor(&batch);
        let (z, enc_cache) = p.enc.forward(&x);
        let (xhat, dec_cache) = p.dec_i.forward(&z);
        let (loss, dxhat) = mse_and_grad(&x, &xhat);
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("base loss at step {step}")));
        }
        let mut grads = GradStore::default();
        let dz = p.dec_i.backward(&dec_cache, &dxhat, "dec_i", &mut grads);
        p.enc.backward(&enc_cache, &dz, "enc", &mut grads);
        grads.clip_global_norm(1.0);
        opt.lr = crate::nn::cosine_lr(cfg.lr, step, steps);
        // During base training the image decoder is still trainable.
        struct BaseView<'a>(&'a mut AutoencoderParams);
        impl Module for BaseView<'_> {
            fn visit(&self, prefix: &str, f: &mut ParamVisit) {
                self.0.enc.visit(&format!("{prefix}enc"), f);
                self.0.dec_i.visit(&format!("{prefix}dec_i"), f);
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
                self.0.enc.visit_mut(&format!("{prefix}enc"), f);
                self.0.dec_i.visit_mut(&format!("{prefix}dec_i"), f);
            }
        }
        opt.step(&mut BaseView(&mut p), &grads);
    }
    // Stage 1 proper starts from decoder copies.
    p.dec_w = p.dec_i.clone();
    p.inj = pass_through_injection(arch.d);
    Ok(p)
}

/// Joint stage-1 training of the unified injector/extractor.
///
/// `base` supplies the pretrained autoencoder whose decoder becomes the
/// frozen `D_i`; when absent, a base is pretrained here for
/// `cfg.base_budget` steps. Returns the trained parameters plus the
/// per-step loss curves of the joint phase.
pub fn train_stage1(
    images: &[ImageTensor],
    watermarks: &[WatermarkImage],
    cfg: &RunConfig,
    base: Option<AutoencoderParams>,
) -> Result<(AutoencoderParams, Vec<CurveRow>)> {
    cfg.validate()?;
    if images.is_empty() || watermarks.is_empty() {
        return Err(Error::domain("empty dataset".to_string()));
    }
    let mut p = match base {
        Some(b) => b,
        None => train_base(images, cfg, cfg.base_budget)?,
    };
    let frozen = p.frozen_decoder_params();
    let mut rng = SeedRng::new(cfg.seed, STREAM_TRAIN + 1);
    if cfg.adv {
        p.ensure_disc(&mut rng);
    }
    let mut opt = Adam::new(cfg.lr);
    let mut disc_opt = Adam::new(cfg.lr);
    let mut curves = Vec::with_capacity(cfg.budget);
    for step in 0..cfg.budget {
        let xb: Vec<&ImageTensor> = (0..cfg.batch)
            .map(|_| &images[rng.below(images.len())])
            .collect();
        let wb: Vec<&ImageTensor> = (0..cfg.batch)
            .map(|_| watermarks[rng.below(watermarks.len())].as_image())
            .collect();
        let x = images_to_tensor(&xb);
        let w = images_to_tensor(&wb);

        let mut grads = GradStore::default();
        let mut loss = stage1_train_step(&p, &x, &w, cfg.gamma, true, &mut grads)?;

        if cfg.adv {
            let adv = adv_step(&mut p, &x, &w, &mut grads, &mut disc_opt)?;
            loss.adv = adv;
            loss.total += adv;
        }
        if !loss.total.is_finite() {
            return Err(Error::Diverged(format!(
                "stage-1 loss not finite at step {step}"
            )));
        }
        grads.clip_global_norm(1.0);
        opt.lr = crate::nn::cosine_lr(cfg.lr, step, cfg.budget);
        opt.step(&mut TrainableView(&mut p), &grads);
        curves.push(CurveRow {
            step,
            img: loss.img,
            wm: loss.wm,
            adv: loss.adv,
        });
    }
    debug_assert_eq!(p.frozen_decoder_params(), frozen);
    Ok((p, curves))
}

/// One adversarial round: update the discriminator on (real x, fake x̂)
/// with hinge loss, then add the generator term to the stage-1 grads.
fn adv_step(
    p: &mut AutoencoderParams,
    x: &Tensor,
    w: &Tensor,
    gen_grads: &mut GradStore,
    disc_opt: &mut Adam,
) -> Result<f64> {
    const ADV_WEIGHT: f64 = 0.1;
    // Rebuild the reconstruction (cheap at toy scale, keeps the main
    // backward pass untouched).
    let (z_i, enc_i) = p.enc.forward(x);
    let (z_w, _) = p.enc.forward(w);
    let cat = Tensor::concat_channels(&z_i, &z_w);
    let (z_m, inj_cache) = p.inj.forward(&cat);
    let (xhat, dec_cache) = p.dec_i.forward(&z_m);

    let disc = p.disc.as_ref().expect("disc initialized");
    // Discriminator update: hinge on real and fake.
    let mut d_grads = GradStore::default();
    let (real_out, real_cache) = disc.forward(x);
    let (fake_out, fake_cache) = disc.forward(&xhat);
    let m = real_out.numel() as f64;
    let mut d_real = Tensor::zeros(real_out.n, real_out.c, real_out.h, real_out.w);
    let mut d_fake = d_real.clone();
    for i in 0..real_out.data.len() {
        if 1.0 - real_out.data[i] > 0.0 {
            d_real.data[i] = -1.0 / m;
        }
        if 1.0 + fake_out.data[i] > 0.0 {
            d_fake.data[i] = 1.0 / m;
        }
    }
    disc.backward(&real_cache, &d_real, "disc", &mut d_grads);
    disc.backward(&fake_cache, &d_fake, "disc", &mut d_grads);
    struct DiscView<'a>(&'a mut PatchDisc);
    impl Module for DiscView<'_> {
        fn visit(&self, prefix: &str, f: &mut ParamVisit) {
            self.0.visit(&format!("{prefix}disc"), f);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitMut) {
            self.0.visit_mut(&format!("{prefix}disc"), f);
        }
    }
    disc_opt.step(&mut DiscView(p.disc.as_mut().unwrap()), &d_grads);

    // Generator term: -mean D(x̂), back through the reconstruction path.
    let disc = p.disc.as_ref().unwrap();
    let (fake_out, fake_cache) = disc.forward(&xhat);
    let g_adv = -ADV_WEIGHT * fake_out.data.iter().sum::<f64>() / m;
    let mut dy = Tensor::zeros(fake_out.n, fake_out.c, fake_out.h, fake_out.w);
    for v in &mut dy.data {
        *v = -ADV_WEIGHT / m;
    }
    let mut sink = GradStore::default();
    let dxhat = disc.backward(&fake_cache, &dy, "disc_frozen", &mut sink);
    let dz_m = p.dec_i.backward(&dec_cache, &dxhat, "dec_i", gen_grads);
    let dcat = p.inj.backward(&inj_cache, &dz_m, "inj", gen_grads);
    let (dz_i, _dz_w) = dcat.split_channels(z_i.c);
    p.enc.backward(&enc_i, &dz_i, "enc", gen_grads);
    Ok(g_adv)
}

// ---------------------------------------------------------- checkpoint

pub const STAGE1_KIND: &str = "stage1";

pub fn save_stage1(
    path: impl AsRef<std::path::Path>,
    cfg: &RunConfig,
    p: &AutoencoderParams,
) -> Result<()> {
    crate::checkpoint::save(path, STAGE1_KIND, cfg, p)
}

pub fn load_stage1(path: impl AsRef<std::path::Path>) -> Result<(RunConfig, AutoencoderParams)> {
    let (meta, _) = crate::checkpoint::load(&path)?;
    let arch = AeArch::from_arrays(&meta.arrays)?;
    let mut rng = SeedRng::new(0, 0);
    let mut p = AutoencoderParams::init(&arch, &mut rng);
    // A stage-1 checkpoint may or may not carry discriminator weights.
    if meta.arrays.iter().any(|a| a.name.starts_with("disc.")) {
        p.ensure_disc(&mut rng);
    }
    let cfg = crate::checkpoint::load_module(&path, STAGE1_KIND, &mut p)?;
    Ok((cfg, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fd_check_params;

    fn micro_params(seed: u64) -> AutoencoderParams {
        let mut rng = SeedRng::new(seed, 0);
        AutoencoderParams::init(&AeArch::micro(), &mut rng)
    }

    fn toy_image(side: usize, seed: u64) -> ImageTensor {
        crate::corpus::synth_image(crate::corpus::ImageFamily::Shapes, side, seed, 0)
    }

    #[test]
    fn encode_shape_contract() {
        let p = micro_params(1);
        let z = encode(&toy_image(8, 0), &p).unwrap();
        assert_eq!((z.h, z.w, z.d), (4, 4, 2));
        let err = encode(&toy_image(9, 0), &p).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn encode_is_deterministic() {
        let p = micro_params(2);
        let x = toy_image(8, 3);
        assert_eq!(encode(&x, &p).unwrap(), encode(&x, &p).unwrap());
    }

    #[test]
    fn inject_shape_and_pass_through() {
        let p = micro_params(3);
        let x = toy_image(8, 1);
        let z = encode(&x, &p).unwrap();
        let zero = LatentTensor::zeros(z.h, z.w, z.d);
        let out = inject(&z, &zero, &p).unwrap();
        assert_eq!((out.h, out.w, out.d), (z.h, z.w, z.d));
        assert!(out.max_abs_diff(&z) < 1e-6, "pass-through init failed");

        let bad = LatentTensor::zeros(z.h + 1, z.w, z.d);
        assert!(matches!(inject(&z, &bad, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn decoders_start_identical() {
        let p = micro_params(4);
        let z = encode(&toy_image(8, 2), &p).unwrap();
        let img = decode_image(&z, &p).unwrap();
        let wm = decode_watermark(&z, &p).unwrap();
        let diff = img
            .data()
            .iter()
            .zip(wm.as_image().data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-6, "copy-initialized decoders diverge: {diff}");
        assert_eq!(img.side(), 8);
    }

    #[test]
    fn stage1_loss_arithmetic() {
        // mean-square terms 0.2 and 0.3 with gamma 0.5 -> 0.35
        let x = Tensor::zeros(1, 1, 2, 2);
        let mut xhat = Tensor::zeros(1, 1, 2, 2);
        for v in &mut xhat.data {
            *v = 0.2f64.sqrt();
        }
        let w = Tensor::zeros(1, 1, 2, 2);
        let mut what = Tensor::zeros(1, 1, 2, 2);
        for v in &mut what.data {
            *v = 0.3f64.sqrt();
        }
        let (loss, _, _) = stage1_loss(&x, &w, &xhat, &what, 0.5, None).unwrap();
        assert!((loss.img - 0.2).abs() < 1e-12);
        assert!((loss.wm - 0.3).abs() < 1e-12);
        assert!((loss.total - 0.35).abs() < 1e-12);

        let (eq, _, _) = stage1_loss(&x, &w, &x, &w, 1.0, None).unwrap();
        assert_eq!(eq.total, 0.0);

        assert!(stage1_loss(&x, &w, &xhat, &what, 0.0, None).is_err());
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let mut rng = SeedRng::new(8, 0);
        let x = Tensor::randn(2, 3, 4, 4, &mut rng);
        let w = Tensor::randn(2, 3, 4, 4, &mut rng);
        let xhat = Tensor::randn(2, 3, 4, 4, &mut rng);
        let what = Tensor::randn(2, 3, 4, 4, &mut rng);
        let (loss, _, _) = stage1_loss(&x, &w, &xhat, &what, 0.7, Some(0.11)).unwrap();
        assert_eq!(loss.total, loss.img + 0.7 * loss.wm + loss.adv);
        assert_eq!(loss.adv, 0.11);
    }

    #[test]
    fn micro_gradients_match_finite_differences() {
        let mut p = micro_params(5);
        assert!(p.param_count() <= 1000, "micro model has {} params", p.param_count());
        let mut rng = SeedRng::new(6, 0);
        let x = Tensor::randn(1, 3, 4, 4, &mut rng);
        let w = Tensor::randn(1, 3, 4, 4, &mut rng);
        let mut grads = GradStore::default();
        stage1_forward_backward(&p, &x, &w, 1.3, &mut grads).unwrap();
        let rel = fd_check_params(
            &mut p,
            "",
            &grads,
            |m| {
                let mut sink = GradStore::default();
                stage1_forward_backward(m, &x, &w, 1.3, &mut sink)
                    .unwrap()
                    .total
            },
            1e-5,
        );
        assert!(rel < 1e-4, "stage-1 micro gradient rel err {rel}");
    }

    #[test]
    fn budget_zero_returns_initialization() {
        let images = vec![toy_image(8, 1)];
        let wms = vec![WatermarkImage(toy_image(8, 2))];
        let mut cfg = RunConfig {
            resolution: 8,
            f: 2,
            d: 2,
            budget: 0,
            base_budget: 0,
            ..RunConfig::default()
        };
        cfg.validate().unwrap();
        let base = micro_params(7);
        let before = base.flat_params();
        let (p, curves) = train_stage1(&images, &wms, &cfg, Some(base)).unwrap();
        assert!(curves.is_empty());
        assert_eq!(p.flat_params(), before);
    }

    #[test]
    fn frozen_decoder_is_bitwise_stable_and_others_move() {
        let images: Vec<ImageTensor> = (0..4).map(|i| toy_image(8, i)).collect();
        let wms: Vec<WatermarkImage> = (0..3)
            .map(|i| WatermarkImage(toy_image(8, 100 + i)))
            .collect();
        let cfg = RunConfig {
            resolution: 8,
            f: 2,
            d: 2,
            budget: 5,
            base_budget: 0,
            batch: 2,
            ..RunConfig::default()
        };
        let base = micro_params(9);
        let frozen_before = base.frozen_decoder_params();
        let enc_before = base.enc.flat_params();
        let (p, curves) = train_stage1(&images, &wms, &cfg, Some(base)).unwrap();
        assert_eq!(p.frozen_decoder_params(), frozen_before, "theta_f drifted");
        assert_ne!(p.enc.flat_params(), enc_before, "encoder never updated");
        assert_eq!(curves.len(), 5);
        assert!(curves.iter().all(|r| r.img.is_finite() && r.wm >= 0.0));
    }

    #[test]
    fn adversarial_round_runs_and_stays_finite() {
        let images: Vec<ImageTensor> = (0..2).map(|i| toy_image(8, i)).collect();
        let wms = vec![WatermarkImage(toy_image(8, 50))];
        let cfg = RunConfig {
            resolution: 8,
            f: 2,
            d: 2,
            budget: 3,
            base_budget: 0,
            batch: 2,
            adv: true,
            ..RunConfig::default()
        };
        let (p, curves) = train_stage1(&images, &wms, &cfg, Some(micro_params(11))).unwrap();
        assert!(p.disc.is_some());
        assert!(curves.iter().all(|r| r.adv.is_finite()));
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s1.ckpt");
        let p = micro_params(12);
        let cfg = RunConfig {
            resolution: 8,
            f: 2,
            d: 2,
            ..RunConfig::default()
        };
        save_stage1(&path, &cfg, &p).unwrap();
        let (cfg2, p2) = load_stage1(&path).unwrap();
        assert_eq!(cfg2.d, 2);
        let x = toy_image(8, 4);
        let a = encode(&x, &p).unwrap();
        let b = encode(&x, &p2).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}

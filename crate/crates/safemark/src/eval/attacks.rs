//! The five-attack robustness suite: rotate 90, resize 0.7, brightness
//! 2.0, crop 10%, and their composition. All attacks are deterministic;
//! the rng parameter is part of the operation contract for stochastic
//! attacks and is currently unused.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::SeedRng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackKind {
    Rotate90,
    Resize,
    Brightness,
    Crop,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Resize scale, brightness gain, or crop area fraction; unused for
    /// rotate90 and combined (combined applies the canonical factors).
    pub factor: f64,
}

impl AttackSpec {
    pub fn rotate90() -> Self {
        AttackSpec {
            kind: AttackKind::Rotate90,
            factor: 1.0,
        }
    }
    pub fn resize(factor: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Resize,
            factor,
        }
    }
    pub fn brightness(gain: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Brightness,
            factor: gain,
        }
    }
    pub fn crop(fraction: f64) -> Self {
        AttackSpec {
            kind: AttackKind::Crop,
            factor: fraction,
        }
    }
    pub fn combined() -> Self {
        AttackSpec {
            kind: AttackKind::Combined,
            factor: 1.0,
        }
    }

    /// The Table-3 row set: rotate 90, resize 0.7, brightness 2.0,
    /// crop 10%, combined.
    pub fn standard_suite() -> Vec<AttackSpec> {
        vec![
            AttackSpec::rotate90(),
            AttackSpec::resize(0.7),
            AttackSpec::brightness(2.0),
            AttackSpec::crop(0.10),
            AttackSpec::combined(),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            AttackKind::Resize if !(self.factor > 0.0 && self.factor <= 1.0) => Err(
                Error::domain(format!("resize factor {} outside (0,1]", self.factor)),
            ),
            AttackKind::Brightness if self.factor <= 0.0 => {
                Err(Error::domain("brightness gain must be > 0".to_string()))
            }
            AttackKind::Crop if !(self.factor > 0.0 && self.factor <= 1.0) => Err(Error::domain(
                format!("crop fraction {} outside (0,1]", self.factor),
            )),
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Rotate90 => "rotate90".to_string(),
            AttackKind::Resize => format!("resize{}", self.factor),
            AttackKind::Brightness => format!("brightness{}", self.factor),
            AttackKind::Crop => format!("crop{}", self.factor),
            AttackKind::Combined => "combined".to_string(),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for AttackSpec {
    type Err = Error;
    /// Parses `rotate90`, `resize:0.7`, `brightness:2.0`, `crop:0.1`,
    /// `combined`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, factor) = match s.split_once(':') {
            Some((n, f)) => (
                n,
                f.parse::<f64>()
                    .map_err(|_| Error::domain(format!("bad attack factor '{f}'")))?,
            ),
            None => (s, f64::NAN),
        };
        let spec = match name {
            "rotate90" => AttackSpec::rotate90(),
            "resize" => AttackSpec::resize(if factor.is_nan() { 0.7 } else { factor }),
            "brightness" => AttackSpec::brightness(if factor.is_nan() { 2.0 } else { factor }),
            "crop" => AttackSpec::crop(if factor.is_nan() { 0.10 } else { factor }),
            "combined" => AttackSpec::combined(),
            other => return Err(Error::domain(format!("unknown attack '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Side of the intermediate crop: `round(sqrt(fraction) * side)`.
pub fn crop_side(side: usize, fraction: f64) -> usize {
    ((fraction.sqrt() * side as f64).round() as usize).clamp(1, side)
}

fn apply_brightness(img: &ImageTensor, gain: f64) -> ImageTensor {
    let mut out = img.clone();
    for v in out.data_mut() {
        // gain applied in [0,1] space, clamped, mapped back
        let v01 = (*v + 1.0) / 2.0;
        *v = (gain * v01).clamp(0.0, 1.0) * 2.0 - 1.0;
    }
    out
}

/// Apply an attack; the output always has the input's dimensions.
pub fn attack(img: &ImageTensor, spec: &AttackSpec, _rng: &mut SeedRng) -> Result<ImageTensor> {
    spec.validate()?;
    let side = img.side();
    Ok(match spec.kind {
        AttackKind::Rotate90 => img.rot90(),
        AttackKind::Resize => {
            let small = ((spec.factor * side as f64).round() as usize).clamp(1, side);
            img.resize_bilinear(small).resize_bilinear(side)
        }
        AttackKind::Brightness => apply_brightness(img, spec.factor),
        AttackKind::Crop => {
            let cs = crop_side(side, spec.factor);
            img.center_crop(cs)?.resize_bilinear(side)
        }
        AttackKind::Combined => {
            let mut out = img.rot90();
            out = attack(&out, &AttackSpec::resize(0.7), _rng)?;
            out = apply_brightness(&out, 2.0);
            let cs = crop_side(side, 0.10);
            out.center_crop(cs)?.resize_bilinear(side)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_image, ImageFamily};

    fn sample() -> ImageTensor {
        synth_image(ImageFamily::Shapes, 32, 4, 1)
    }

    #[test]
    fn rotate_group_property() {
        let img = sample();
        let mut rng = SeedRng::new(0, 0);
        let r = |x: &ImageTensor| attack(x, &AttackSpec::rotate90(), &mut SeedRng::new(0, 0)).unwrap();
        let r2 = r(&r(&img));
        // rotate twice == rotate180: check against double manual rot
        assert_eq!(r2, img.rot90().rot90());
        let r4 = r(&r(&r2));
        assert_eq!(r4, img, "four rotations are the identity");
        let _ = rng;
    }

    #[test]
    fn crop_arithmetic() {
        assert_eq!(crop_side(256, 0.10), 81);
        assert_eq!(crop_side(32, 1.0), 32);
        let img = sample();
        let out = attack(&img, &AttackSpec::crop(0.10), &mut SeedRng::new(0, 0)).unwrap();
        assert_eq!(out.side(), 32);
    }

    #[test]
    fn brightness_clamps() {
        // [0,1]-value 0.6 with gain 2.0 clamps to 1.0
        let mut img = ImageTensor::zeros(2);
        for v in img.data_mut() {
            *v = 0.6 * 2.0 - 1.0;
        }
        let out = attack(&img, &AttackSpec::brightness(2.0), &mut SeedRng::new(0, 0)).unwrap();
        assert!(out.data().iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn invalid_factors_rejected() {
        let img = sample();
        let mut rng = SeedRng::new(0, 0);
        assert!(attack(&img, &AttackSpec::resize(0.0), &mut rng).is_err());
        assert!(attack(&img, &AttackSpec::crop(1.5), &mut rng).is_err());
        assert!(attack(&img, &AttackSpec::brightness(-1.0), &mut rng).is_err());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!("rotate90".parse::<AttackSpec>().unwrap(), AttackSpec::rotate90());
        assert_eq!(
            "resize:0.5".parse::<AttackSpec>().unwrap(),
            AttackSpec::resize(0.5)
        );
        assert!("resize:0".parse::<AttackSpec>().is_err());
        assert!("wat".parse::<AttackSpec>().is_err());
    }
}

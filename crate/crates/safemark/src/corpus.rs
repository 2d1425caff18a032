//! Deterministic synthetic corpora: toy image families (shapes,
//! textures), watermark families (qr-like block grids, logo glyphs) and
//! prompt templates. Stand-ins for the full-scale photo/LOGO datasets;
//! every item is a pure function of `(spec.seed, index)`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, ImageTensor, WatermarkImage};
use crate::rng::SeedRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ImageFamily {
    Shapes,
    Textures,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WatermarkFamily {
    QrLike,
    LogoGlyph,
}

impl FromStr for ImageFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(ImageFamily::Shapes),
            "textures" => Ok(ImageFamily::Textures),
            other => Err(Error::domain(format!("unknown image family '{other}'"))),
        }
    }
}

impl fmt::Display for ImageFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageFamily::Shapes => "shapes",
            ImageFamily::Textures => "textures",
        })
    }
}

impl FromStr for WatermarkFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qr-like" => Ok(WatermarkFamily::QrLike),
            "logo-glyph" => Ok(WatermarkFamily::LogoGlyph),
            other => Err(Error::domain(format!("unknown watermark family '{other}'"))),
        }
    }
}

impl fmt::Display for WatermarkFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WatermarkFamily::QrLike => "qr-like",
            WatermarkFamily::LogoGlyph => "logo-glyph",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticCorpusSpec {
    pub n_images: usize,
    pub n_watermarks: usize,
    pub resolution: usize,
    pub image_family: ImageFamily,
    pub watermark_family: WatermarkFamily,
    pub seed: u64,
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_images == 0 || self.n_watermarks == 0 {
            return Err(Error::domain("corpus counts must be >= 1".to_string()));
        }
        if self.resolution == 0 {
            return Err(Error::domain("resolution must be positive".to_string()));
        }
        Ok(())
    }
}

fn item_rng(seed: u64, kind: u64, index: usize) -> SeedRng {
    // splitmix-style mixing keeps items independent of corpus size
    let mut z = seed
        .wrapping_add(kind.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    SeedRng::new(z ^ (z >> 31), 0)
}

fn rand_color(rng: &mut SeedRng) -> [f64; 3] {
    [
        rng.uniform() * 2.0 - 1.0,
        rng.uniform() * 2.0 - 1.0,
        rng.uniform() * 2.0 - 1.0,
    ]
}

/// Gradient background plus a handful of filled rectangles and discs.
pub fn shapes_image(res: usize, rng: &mut SeedRng) -> ImageTensor {
    let mut img = ImageTensor::zeros(res);
    let top = rand_color(rng);
    let bot = rand_color(rng);
    let horizontal = rng.below(2) == 0;
    for y in 0..res {
        for x in 0..res {
            let t = if horizontal { x } else { y } as f64 / (res - 1).max(1) as f64;
            for c in 0..3 {
                img.set(c, y, x, top[c] * (1.0 - t) + bot[c] * t);
            }
        }
    }
    // soft-edged shapes: coverage from a signed distance with a small
    // feather, like anti-aliased rendering
    let feather = 1.5;
    let blend = |img: &mut ImageTensor, y: usize, x: usize, color: &[f64; 3], cov: f64| {
        if cov <= 0.0 {
            return;
        }
        for c in 0..3 {
            let v = img.get(c, y, x);
            img.set(c, y, x, v * (1.0 - cov) + color[c] * cov);
        }
    };
    let count = 2 + rng.below(2);
    for _ in 0..count {
        let color = rand_color(rng);
        if rng.below(2) == 0 {
            // rectangle
            let x0 = rng.below(res) as f64;
            let y0 = rng.below(res) as f64;
            let w = (3 + rng.below(res / 2)) as f64;
            let h = (3 + rng.below(res / 2)) as f64;
            let (cx, cy) = (x0 + w / 2.0, y0 + h / 2.0);
            for y in 0..res {
                for x in 0..res {
                    let dx = (x as f64 - cx).abs() - w / 2.0;
                    let dy = (y as f64 - cy).abs() - h / 2.0;
                    let sd = dx.max(dy);
                    let cov = (0.5 - sd / feather).clamp(0.0, 1.0);
                    blend(&mut img, y, x, &color, cov);
                }
            }
        } else {
            // disc
            let cx = rng.below(res) as f64;
            let cy = rng.below(res) as f64;
            let r = (3 + rng.below(res / 3)) as f64;
            for y in 0..res {
                for x in 0..res {
                    let dx = x as f64 - cx;
                    let dy = y as f64 - cy;
                    let sd = (dx * dx + dy * dy).sqrt() - r;
                    let cov = (0.5 - sd / feather).clamp(0.0, 1.0);
                    blend(&mut img, y, x, &color, cov);
                }
            }
        }
    }
    img
}

/// Smooth random sinusoid mixtures per channel, scaled into [-0.9, 0.9].
pub fn textures_image(res: usize, rng: &mut SeedRng) -> ImageTensor {
    let mut img = ImageTensor::zeros(res);
    for c in 0..3 {
        let mut waves = Vec::new();
        for _ in 0..3 {
            let fx = (1.0 + rng.below(4) as f64) * std::f64::consts::TAU / res as f64;
            let fy = (1.0 + rng.below(4) as f64) * std::f64::consts::TAU / res as f64;
            let phase = rng.uniform() * std::f64::consts::TAU;
            let amp = 0.2 + 0.4 * rng.uniform();
            waves.push((fx, fy, phase, amp));
        }
        for y in 0..res {
            for x in 0..res {
                let mut v = 0.0;
                for (fx, fy, phase, amp) in &waves {
                    v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
                }
                img.set(c, y, x, (v * 0.9).clamp(-0.9, 0.9));
            }
        }
    }
    img
}

/// Number of blocks per side in a qr-like watermark.
pub const QR_BLOCKS: usize = 8;

/// Block grid with a quiet border: the outer ring of the 8x8 grid is
/// white, the inner 6x6 blocks are random black/white. Every block is
/// uniform.
pub fn qr_watermark(res: usize, rng: &mut SeedRng) -> Result<WatermarkImage> {
    if res % QR_BLOCKS != 0 {
        return Err(Error::domain(format!(
            "resolution {res} not divisible by {QR_BLOCKS} blocks"
        )));
    }
    let cell = res / QR_BLOCKS;
    let mut img = ImageTensor::zeros(res);
    for by in 0..QR_BLOCKS {
        for bx in 0..QR_BLOCKS {
            let border = by == 0 || bx == 0 || by == QR_BLOCKS - 1 || bx == QR_BLOCKS - 1;
            let v = if border {
                1.0
            } else if rng.below(2) == 0 {
                1.0
            } else {
                -1.0
            };
            for y in by * cell..(by + 1) * cell {
                for x in bx * cell..(bx + 1) * cell {
                    for c in 0..3 {
                        img.set(c, y, x, v);
                    }
                }
            }
        }
    }
    Ok(WatermarkImage(img))
}

/// Dark strokes and a disc on a white field; a crude random glyph.
pub fn logo_glyph(res: usize, rng: &mut SeedRng) -> WatermarkImage {
    let mut img = ImageTensor::zeros(res);
    for v in img.data_mut() {
        *v = 1.0;
    }
    let ink = [
        -0.6 - 0.4 * rng.uniform(),
        -0.6 - 0.4 * rng.uniform(),
        -0.6 - 0.4 * rng.uniform(),
    ];
    let strokes = 2 + rng.below(2);
    for _ in 0..strokes {
        let vertical = rng.below(2) == 0;
        let pos = res / 4 + rng.below(res / 2);
        let thick = 1 + res / 16 + rng.below(res / 16 + 1);
        let lo = res / 8 + rng.below(res / 4);
        let hi = res - res / 8 - rng.below(res / 4);
        for t in lo..hi {
            for d in 0..thick {
                let (y, x) = if vertical { (t, pos + d) } else { (pos + d, t) };
                if y < res && x < res {
                    for c in 0..3 {
                        img.set(c, y, x, ink[c]);
                    }
                }
            }
        }
    }
    if rng.below(2) == 0 {
        let cx = (res / 2) as f64;
        let cy = (res / 2) as f64;
        let r = (res / 4) as f64;
        let band = (res / 12).max(1) as f64;
        for y in 0..res {
            for x in 0..res {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                if (d - r).abs() <= band {
                    for c in 0..3 {
                        img.set(c, y, x, ink[c]);
                    }
                }
            }
        }
    }
    img = img.clamped();
    WatermarkImage(img)
}

pub fn synth_image(family: ImageFamily, res: usize, seed: u64, index: usize) -> ImageTensor {
    let mut rng = item_rng(seed, 1, index);
    match family {
        ImageFamily::Shapes => shapes_image(res, &mut rng),
        ImageFamily::Textures => textures_image(res, &mut rng),
    }
}

pub fn synth_watermark(
    family: WatermarkFamily,
    res: usize,
    seed: u64,
    index: usize,
) -> Result<WatermarkImage> {
    let mut rng = item_rng(seed, 2, index);
    match family {
        WatermarkFamily::QrLike => qr_watermark(res, &mut rng),
        WatermarkFamily::LogoGlyph => Ok(logo_glyph(res, &mut rng)),
    }
}

const PROMPT_NOUNS: &[&str] = &[
    "church", "house", "garden", "mountain", "harbor", "bridge", "forest", "tower",
];
const PROMPT_ADJS: &[&str] = &["quiet", "bright", "old", "small", "painted", "distant"];

/// Deterministic prompt for corpus item `index`, following the
/// `"a photo of a ... with watermark [V]"` template.
pub fn prompt_for(seed: u64, index: usize) -> String {
    let mut rng = item_rng(seed, 3, index);
    let adj = PROMPT_ADJS[rng.below(PROMPT_ADJS.len())];
    let noun = PROMPT_NOUNS[rng.below(PROMPT_NOUNS.len())];
    format!("a photo of a {adj} {noun} with watermark [V]")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    /// "image" or "watermark".
    pub kind: String,
    pub seed: u64,
}

/// In-memory corpus used by training and the harness.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub images: Vec<ImageTensor>,
    pub watermarks: Vec<WatermarkImage>,
    pub seed: u64,
}

impl Corpus {
    pub fn synthesize(spec: &SyntheticCorpusSpec) -> Result<Corpus> {
        spec.validate()?;
        let images = (0..spec.n_images)
            .map(|i| synth_image(spec.image_family, spec.resolution, spec.seed, i))
            .collect();
        let watermarks = (0..spec.n_watermarks)
            .map(|i| synth_watermark(spec.watermark_family, spec.resolution, spec.seed, i))
            .collect::<Result<_>>()?;
        Ok(Corpus {
            images,
            watermarks,
            seed: spec.seed,
        })
    }

    /// Read a corpus previously written by [`make_dataset`].
    pub fn load(dir: impl AsRef<Path>, resolution: usize) -> Result<Corpus> {
        let manifest = std::fs::read_to_string(dir.as_ref().join("manifest.jsonl"))
            .map_err(|e| Error::state(format!("manifest missing: {e}")))?;
        let mut images = Vec::new();
        let mut watermarks = Vec::new();
        for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
            let entry: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Format(format!("manifest entry: {e}")))?;
            let img = crate::image::load_image(dir.as_ref().join(&entry.file), resolution)?;
            match entry.kind.as_str() {
                "image" => images.push(img),
                "watermark" => watermarks.push(WatermarkImage(img)),
                other => return Err(Error::Format(format!("manifest kind '{other}'"))),
            }
        }
        if images.is_empty() || watermarks.is_empty() {
            return Err(Error::state("corpus is empty".to_string()));
        }
        Ok(Corpus {
            images,
            watermarks,
            seed: 0,
        })
    }
}

/// Write a deterministic PNG corpus plus `manifest.jsonl`; returns the
/// manifest path.
pub fn make_dataset(spec: &SyntheticCorpusSpec, out: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("watermarks"))?;
    let corpus = Corpus::synthesize(spec)?;
    let mut manifest = String::new();
    for (i, img) in corpus.images.iter().enumerate() {
        let file = format!("images/img_{i:04}.png");
        save_image(img, out.join(&file))?;
        let entry = ManifestEntry {
            file,
            kind: "image".to_string(),
            seed: spec.seed,
        };
        manifest.push_str(&serde_json::to_string(&entry).unwrap());
        manifest.push('\n');
    }
    for (i, wm) in corpus.watermarks.iter().enumerate() {
        let file = format!("watermarks/wm_{i:04}.png");
        save_image(wm.as_image(), out.join(&file))?;
        let entry = ManifestEntry {
            file,
            kind: "watermark".to_string(),
            seed: spec.seed,
        };
        manifest.push_str(&serde_json::to_string(&entry).unwrap());
        manifest.push('\n');
    }
    let path = out.join("manifest.jsonl");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_spec(seed: u64) -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            n_images: 4,
            n_watermarks: 3,
            resolution: 32,
            image_family: ImageFamily::Shapes,
            watermark_family: WatermarkFamily::QrLike,
            seed,
        }
    }

    #[test]
    fn qr_watermark_has_64_uniform_blocks() {
        let mut rng = SeedRng::new(9, 0);
        let wm = qr_watermark(32, &mut rng).unwrap();
        let img = wm.as_image();
        let cell = 32 / QR_BLOCKS;
        let mut blocks = 0;
        for by in 0..QR_BLOCKS {
            for bx in 0..QR_BLOCKS {
                let v0 = img.get(0, by * cell, bx * cell);
                for y in by * cell..(by + 1) * cell {
                    for x in bx * cell..(bx + 1) * cell {
                        for c in 0..3 {
                            assert_eq!(img.get(c, y, x), v0, "block ({by},{bx}) not uniform");
                        }
                    }
                }
                blocks += 1;
                let border = by == 0 || bx == 0 || by == QR_BLOCKS - 1 || bx == QR_BLOCKS - 1;
                if border {
                    assert_eq!(v0, 1.0, "quiet border must be white");
                }
            }
        }
        assert_eq!(blocks, 64);
    }

    #[test]
    fn dataset_is_seed_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        make_dataset(&toy_spec(1), d1.path()).unwrap();
        make_dataset(&toy_spec(1), d2.path()).unwrap();
        for sub in ["images/img_0000.png", "watermarks/wm_0002.png", "manifest.jsonl"] {
            let a = std::fs::read(d1.path().join(sub)).unwrap();
            let b = std::fs::read(d2.path().join(sub)).unwrap();
            assert_eq!(a, b, "{sub} differs across identical runs");
        }
        let other = tempfile::tempdir().unwrap();
        make_dataset(&toy_spec(2), other.path()).unwrap();
        assert_ne!(
            std::fs::read(d1.path().join("images/img_0000.png")).unwrap(),
            std::fs::read(other.path().join("images/img_0000.png")).unwrap()
        );
    }

    #[test]
    fn zero_counts_rejected() {
        let mut spec = toy_spec(1);
        spec.n_images = 0;
        let dir = tempfile::tempdir().unwrap();
        assert!(make_dataset(&spec, dir.path()).is_err());
    }

    #[test]
    fn corpus_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(&toy_spec(5), dir.path()).unwrap();
        let corpus = Corpus::load(dir.path(), 32).unwrap();
        assert_eq!(corpus.images.len(), 4);
        assert_eq!(corpus.watermarks.len(), 3);
    }

    #[test]
    fn families_produce_normalized_images() {
        for i in 0..3 {
            assert!(synth_image(ImageFamily::Shapes, 32, 3, i).is_normalized());
            assert!(synth_image(ImageFamily::Textures, 32, 3, i).is_normalized());
            assert!(synth_watermark(WatermarkFamily::LogoGlyph, 32, 3, i)
                .unwrap()
                .as_image()
                .is_normalized());
        }
    }

    #[test]
    fn prompts_are_deterministic() {
        assert_eq!(prompt_for(1, 0), prompt_for(1, 0));
        assert!(prompt_for(1, 0).contains("with watermark [V]"));
    }
}

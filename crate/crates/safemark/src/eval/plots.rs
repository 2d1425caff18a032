//! Minimal deterministic PNG rendering for reports: line charts and
//! image grids. No text rendering; the CSVs carry the numbers.

use std::path::Path;

use crate::error::Result;
use crate::image::ImageTensor;

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// Render one polyline per series over an auto-scaled y-axis.
pub fn line_chart(series: &[(String, Vec<f64>)], path: impl AsRef<Path>) -> Result<()> {
    let (w, h, margin) = (480usize, 320usize, 24usize);
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([255, 255, 255]));
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let mut max_len = 1usize;
    for (_, ys) in series {
        for y in ys {
            lo = lo.min(*y);
            hi = hi.max(*y);
        }
        max_len = max_len.max(ys.len());
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    // axes
    for x in margin..w - margin {
        img.put_pixel(x as u32, (h - margin) as u32, image::Rgb([0, 0, 0]));
    }
    for y in margin..h - margin {
        img.put_pixel(margin as u32, y as u32, image::Rgb([0, 0, 0]));
    }
    let to_px = |i: usize, y: f64| -> (i64, i64) {
        let fx = if max_len > 1 {
            i as f64 / (max_len - 1) as f64
        } else {
            0.0
        };
        let fy = (y - lo) / (hi - lo);
        (
            (margin as f64 + fx * (w - 2 * margin) as f64) as i64,
            ((h - margin) as f64 - fy * (h - 2 * margin) as f64) as i64,
        )
    };
    for (si, (_, ys)) in series.iter().enumerate() {
        let color = image::Rgb(PALETTE[si % PALETTE.len()]);
        for i in 1..ys.len() {
            let (x0, y0) = to_px(i - 1, ys[i - 1]);
            let (x1, y1) = to_px(i, ys[i]);
            let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
            for s in 0..=steps {
                let x = x0 + (x1 - x0) * s / steps;
                let y = y0 + (y1 - y0) * s / steps;
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    img.save(path.as_ref())
        .map_err(|e| crate::error::Error::Format(format!("plot save: {e}")))?;
    Ok(())
}

/// Tile images (clamped to the displayable range) into a grid PNG.
pub fn image_grid(images: &[&ImageTensor], cols: usize, path: impl AsRef<Path>) -> Result<()> {
    if images.is_empty() {
        return Err(crate::error::Error::domain("empty image grid".to_string()));
    }
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let side = images[0].side();
    let gap = 2usize;
    let (w, h) = (cols * side + (cols + 1) * gap, rows * side + (rows + 1) * gap);
    let mut canvas = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([230, 230, 230]));
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let (ox, oy) = (gap + c * (side + gap), gap + r * (side + gap));
        let rgb = img.to_rgb8();
        for y in 0..side.min(img.side()) {
            for x in 0..side.min(img.side()) {
                let p = [
                    rgb[(y * img.side() + x) * 3],
                    rgb[(y * img.side() + x) * 3 + 1],
                    rgb[(y * img.side() + x) * 3 + 2],
                ];
                canvas.put_pixel((ox + x) as u32, (oy + y) as u32, image::Rgb(p));
            }
        }
    }
    canvas
        .save(path.as_ref())
        .map_err(|e| crate::error::Error::Format(format!("grid save: {e}")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_deterministic_files() {
        let dir = tempfile::tempdir().unwrap();
        let series = vec![
            ("a".to_string(), vec![1.0, 0.5, 0.25, 0.2]),
            ("b".to_string(), vec![0.9, 0.8, 0.7, 0.65]),
        ];
        let p1 = dir.path().join("c1.png");
        let p2 = dir.path().join("c2.png");
        line_chart(&series, &p1).unwrap();
        line_chart(&series, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let img = ImageTensor::zeros(8);
        let g = dir.path().join("grid.png");
        image_grid(&[&img, &img, &img], 2, &g).unwrap();
        assert!(g.exists());
    }
}

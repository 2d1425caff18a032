//! Scratch tuning probe (dev only).

use safemark::autoencoder as ae;
use safemark::config::RunConfig;
use safemark::corpus::{Corpus, ImageFamily, SyntheticCorpusSpec, WatermarkFamily};
use safemark::eval::metrics::psnr;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let budget: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let base_budget: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let gamma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2e-3);

    let cfg = RunConfig {
        budget,
        base_budget,
        gamma,
        lr,
        ..RunConfig::default()
    };
    let spec = SyntheticCorpusSpec {
        n_images: 512,
        n_watermarks: 24,
        resolution: 32,
        image_family: ImageFamily::Shapes,
        watermark_family: WatermarkFamily::QrLike,
        seed: 1,
    };
    let corpus = Corpus::synthesize(&spec).unwrap();
    // held-out split
    let heldout_spec = SyntheticCorpusSpec { seed: 999, n_images: 16, n_watermarks: 8, ..spec };
    let heldout = Corpus::synthesize(&heldout_spec).unwrap();

    let t0 = std::time::Instant::now();
    let (params, curves) = ae::train_stage1(&corpus.images, &corpus.watermarks, &cfg, None).unwrap();
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());

    let k = 50.min(curves.len());
    let head: f64 = curves.iter().take(k).map(|r| r.wm).sum::<f64>() / k as f64;
    let tail: f64 = curves.iter().rev().take(k).map(|r| r.wm).sum::<f64>() / k as f64;
    println!("wm-term head {head:.5} tail {tail:.5} ratio {:.4}", tail / head);
    let ihead: f64 = curves.iter().take(k).map(|r| r.img).sum::<f64>() / k as f64;
    let itail: f64 = curves.iter().rev().take(k).map(|r| r.img).sum::<f64>() / k as f64;
    println!("img-term head {ihead:.5} tail {itail:.5}");

    // held-out reconstruction psnr: decode_image(encode(x))
    let mut recon = 0.0;
    for x in &heldout.images {
        let z = ae::encode(x, &params).unwrap();
        let xhat = ae::decode_image(&z, &params).unwrap();
        recon += psnr(&xhat.clamped(), x).unwrap();
    }
    recon /= heldout.images.len() as f64;
    println!("held-out recon PSNR {recon:.2} dB");

    // held-out mixture-path metrics
    let mut recon_mix = 0.0;
    let mut extr = 0.0;
    let mut n = 0.0;
    for (i, x) in heldout.images.iter().enumerate() {
        let w = &heldout.watermarks[i % heldout.watermarks.len()];
        let zi = ae::encode(x, &params).unwrap();
        let zw = ae::encode(w.as_image(), &params).unwrap();
        let zm = ae::inject(&zi, &zw, &params).unwrap();
        let xhat = ae::decode_image(&zm, &params).unwrap();
        let what = ae::decode_watermark(&zm, &params).unwrap();
        recon_mix += psnr(&xhat.clamped(), x).unwrap();
        extr += psnr(&what.0.clamped(), w.as_image()).unwrap();
        n += 1.0;
    }
    println!("held-out mixture recon PSNR {:.2} dB", recon_mix / n);
    println!("held-out extraction PSNR {:.2} dB (stage-1 path)", extr / n);

    // re-encode path: D_w(E(D_i(z_m)))
    let mut extr2 = 0.0;
    for (i, x) in heldout.images.iter().enumerate() {
        let w = &heldout.watermarks[i % heldout.watermarks.len()];
        let zi = ae::encode(x, &params).unwrap();
        let zw = ae::encode(w.as_image(), &params).unwrap();
        let zm = ae::inject(&zi, &zw, &params).unwrap();
        let xhat = ae::decode_image(&zm, &params).unwrap();
        let wext = safemark::diffuser::extract_watermark(&xhat.clamped(), &params).unwrap();
        extr2 += psnr(&wext.0.clamped(), w.as_image()).unwrap();
    }
    println!(
        "held-out extraction PSNR {:.2} dB (re-encoded image path)",
        extr2 / heldout.images.len() as f64
    );
}

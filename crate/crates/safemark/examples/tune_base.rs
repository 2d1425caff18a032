//! Scratch base-autoencoder capacity probe (dev only).

use safemark::autoencoder as ae;
use safemark::config::RunConfig;
use safemark::corpus::{Corpus, ImageFamily, SyntheticCorpusSpec, WatermarkFamily};
use safemark::eval::metrics::psnr;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let budget: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let n_images: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(64);

    let cfg = RunConfig { lr, ..RunConfig::default() };
    let spec = SyntheticCorpusSpec {
        n_images,
        n_watermarks: 16,
        resolution: 32,
        image_family: ImageFamily::Shapes,
        watermark_family: WatermarkFamily::QrLike,
        seed: 1,
    };
    let corpus = Corpus::synthesize(&spec).unwrap();
    let heldout_spec = SyntheticCorpusSpec { seed: 999, n_images: 16, ..spec };
    let heldout = Corpus::synthesize(&heldout_spec).unwrap();

    let t0 = std::time::Instant::now();
    let params = ae::train_base(&corpus.images, &cfg, budget).unwrap();
    let dt = t0.elapsed().as_secs_f64();

    let mut train_psnr = 0.0;
    for x in corpus.images.iter().take(16) {
        let z = ae::encode(x, &params).unwrap();
        train_psnr += psnr(&ae::decode_image(&z, &params).unwrap().clamped(), x).unwrap();
    }
    let mut held_psnr = 0.0;
    for x in &heldout.images {
        let z = ae::encode(x, &params).unwrap();
        held_psnr += psnr(&ae::decode_image(&z, &params).unwrap().clamped(), x).unwrap();
    }
    // latent round-trip consistency ||E(D(z)) - z|| / ||z||
    let mut cons = 0.0;
    for x in heldout.images.iter().take(8) {
        let z = ae::encode(x, &params).unwrap();
        let xhat = ae::decode_image(&z, &params).unwrap();
        let z2 = ae::encode(&xhat.clamped(), &params).unwrap();
        let num: f64 = z2
            .data()
            .iter()
            .zip(z.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = z.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        cons += num / den;
    }
    println!(
        "budget {budget} lr {lr}: {dt:.0}s train {:.2} dB held {:.2} dB latent-rt rel-err {:.3}",
        train_psnr / 16.0,
        held_psnr / heldout.images.len() as f64,
        cons / 8.0
    );
}

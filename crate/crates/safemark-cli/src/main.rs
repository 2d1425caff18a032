//! `safemark` — dataset synthesis, training, watermark registry,
//! generation, extraction, verification, attacks and reports.
//!
//! Configuration precedence: explicit flags > `--config` file > built-in
//! toy defaults. `SAFEMARK_HOME` (or `--home`) selects the directory
//! holding checkpoints, the watermark registry, the calibrated detection
//! threshold and the provenance ledger.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 missing
//! state (checkpoints/registry).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use safemark::config::{RunConfig, TimeBias};
use safemark::corpus::{self, Corpus, SyntheticCorpusSpec};
use safemark::diffuser::{self, GenerateRequest, PipelineModels};
use safemark::error::Error;
use safemark::eval::{self, AttackSpec};
use safemark::image::{load_image, save_image, WatermarkImage};
use safemark::ledger::Ledger;
use safemark::trigger;

#[derive(Parser)]
#[command(name = "safemark", version, about = "Traceable generative watermarking")]
struct Cli {
    /// Home directory for checkpoints, registry, ledger (default:
    /// $SAFEMARK_HOME or ./safemark_home)
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    /// Flat key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

/// Run-config fields exposed as flags; unset flags fall through to the
/// config file, then to the toy defaults.
#[derive(Args, Clone, Default)]
struct CfgFlags {
    /// Diffusion steps T
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    base_budget: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    cfg_scale: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Lambda time bias: uniform, early, mid, late
    #[arg(long)]
    bias: Option<String>,
    /// Enable the adversarial stage-1 term
    #[arg(long)]
    adv: bool,
}

impl CfgFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Error> {
        if let Some(v) = self.steps {
            cfg.t_steps = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.gamma {
            cfg.gamma = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.resolution {
            cfg.resolution = v;
        }
        if let Some(v) = self.budget {
            cfg.budget = v;
        }
        if let Some(v) = self.base_budget {
            cfg.base_budget = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.cfg_scale {
            cfg.cfg_scale = v;
        }
        if let Some(v) = self.eta {
            cfg.eta = v;
        }
        if let Some(b) = &self.bias {
            cfg.bias = b.parse()?;
        }
        if self.adv {
            cfg.adv = true;
        }
        cfg.validate()
    }

    fn explicit_seed(&self) -> bool {
        self.seed.is_some()
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a deterministic toy corpus (images + watermarks)
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        n_images: usize,
        #[arg(long, default_value_t = 16)]
        n_watermarks: usize,
        /// shapes or textures
        #[arg(long, default_value = "shapes")]
        image_family: String,
        /// qr-like or logo-glyph
        #[arg(long, default_value = "qr-like")]
        watermark_family: String,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Train the stage-1 injector/extractor (pretrains a base
    /// autoencoder first unless --base is given)
    TrainStage1 {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        base: Option<PathBuf>,
        /// Checkpoint output (default: HOME/stage1.ckpt)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Loss-curve CSV output (default: HOME/stage1_curves.csv)
        #[arg(long)]
        curves: Option<PathBuf>,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Fine-tune the lambda-encryption latent diffuser
    Finetune {
        #[arg(long)]
        dataset: PathBuf,
        /// Stage-1 checkpoint (default: HOME/stage1.ckpt)
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        curves: Option<PathBuf>,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Watermark registry management
    #[command(subcommand)]
    Wm(WmCommand),
    /// Generate a watermarked image (editing mode with --image,
    /// synthesis mode without)
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        image: Option<PathBuf>,
        /// Force a registry entry instead of the trigger argmax
        #[arg(long)]
        watermark_id: Option<String>,
        /// User watermark file for the [U] token
        #[arg(long)]
        user_watermark: Option<PathBuf>,
        #[arg(long, default_value = "out.png")]
        out: PathBuf,
        /// Also write the unwatermarked twin next to the output
        #[arg(long)]
        reference_out: Option<PathBuf>,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Extract the hidden watermark from an image
    Extract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "extracted.png")]
        out: PathBuf,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Extract + registry match + ledger lookup by content digest
    Verify {
        #[arg(long)]
        image: PathBuf,
        /// Detection threshold in dB (default: calibrated value in
        /// HOME/tau.txt, else 12)
        #[arg(long)]
        tau: Option<f64>,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Apply a robustness attack to an image
    Attack {
        #[arg(long)]
        image: PathBuf,
        /// rotate90 | resize:F | brightness:F | crop:F | combined
        #[arg(long)]
        kind: String,
        #[arg(long, default_value = "attacked.png")]
        out: PathBuf,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Calibrate detection, run the robustness suite, emit CSVs/plots
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Evaluation set size
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Lambda frequency / time-period study
    SweepLambda {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        n: usize,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// Gamma study: seed-matched stage-1 runs across loss weights
    SweepGamma {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        cfg: CfgFlags,
    },
}

#[derive(Subcommand)]
enum WmCommand {
    /// Register a watermark image under an id
    Add {
        #[arg(long)]
        id: String,
        #[arg(long)]
        file: PathBuf,
        #[command(flatten)]
        cfg: CfgFlags,
    },
    /// List registered watermarks
    List {
        #[command(flatten)]
        cfg: CfgFlags,
    },
}

// ------------------------------------------------------------- home

struct Home {
    root: PathBuf,
}

impl Home {
    fn resolve(flag: &Option<PathBuf>) -> Home {
        let root = flag
            .clone()
            .or_else(|| std::env::var_os("SAFEMARK_HOME").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("safemark_home"));
        Home { root }
    }

    fn stage1(&self) -> PathBuf {
        self.root.join("stage1.ckpt")
    }
    fn stage2(&self) -> PathBuf {
        self.root.join("stage2.ckpt")
    }
    fn registry_dir(&self) -> PathBuf {
        self.root.join("registry")
    }
    fn ledger(&self) -> Ledger {
        Ledger::new(self.root.join("ledger.jsonl"))
    }
    fn tau_path(&self) -> PathBuf {
        self.root.join("tau.txt")
    }

    fn read_tau(&self, flag: Option<f64>) -> f64 {
        flag.or_else(|| {
            std::fs::read_to_string(self.tau_path())
                .ok()
                .and_then(|s| s.trim().parse().ok())
        })
        .unwrap_or(12.0)
    }

    fn load_models(
        &self,
    ) -> Result<(RunConfig, safemark::autoencoder::AutoencoderParams, safemark::denoiser::UNet), Error>
    {
        let (cfg, ae) = safemark::autoencoder::load_stage1(self.stage1())?;
        let (_, unet) = safemark::denoiser::load_stage2(self.stage2())?;
        Ok((cfg, ae, unet))
    }

    fn load_registry(&self, resolution: usize) -> Result<trigger::TriggerRegistry, Error> {
        trigger::load_registry(self.registry_dir(), resolution)
    }
}

fn base_config(config: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match config {
        Some(path) => RunConfig::load_file(path),
        None => Ok(RunConfig::default()),
    }
}

fn default_prompts(seed: u64, n: usize) -> Vec<String> {
    (0..n).map(|i| corpus::prompt_for(seed, i)).collect()
}

fn eval_images(
    dataset: &Option<PathBuf>,
    n: usize,
    cfg: &RunConfig,
) -> Result<Vec<safemark::image::ImageTensor>, Error> {
    let images = match dataset {
        Some(dir) => Corpus::load(dir, cfg.resolution)?.images,
        None => (0..n)
            .map(|i| {
                corpus::synth_image(
                    corpus::ImageFamily::Shapes,
                    cfg.resolution,
                    cfg.seed ^ 0x5afe,
                    i,
                )
            })
            .collect(),
    };
    Ok(images.into_iter().take(n).collect())
}

// ------------------------------------------------------------ dispatch

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    let home = Home::resolve(&cli.home);
    std::fs::create_dir_all(&home.root)?;
    let mut cfg = base_config(&cli.config)?;

    match cli.command {
        Command::MakeDataset {
            out,
            n_images,
            n_watermarks,
            image_family,
            watermark_family,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let spec = SyntheticCorpusSpec {
                n_images,
                n_watermarks,
                resolution: cfg.resolution,
                image_family: image_family.parse()?,
                watermark_family: watermark_family.parse()?,
                seed: cfg.seed,
            };
            let manifest = corpus::make_dataset(&spec, &out)?;
            println!("wrote corpus manifest {}", manifest.display());
        }

        Command::TrainStage1 {
            dataset,
            base,
            out,
            curves,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let corpus = Corpus::load(&dataset, cfg.resolution)?;
            let base_params = match base {
                Some(path) => Some(safemark::autoencoder::load_stage1(path)?.1),
                None => None,
            };
            let (params, curve_rows) =
                safemark::autoencoder::train_stage1(&corpus.images, &corpus.watermarks, &cfg, base_params)?;
            let out = out.unwrap_or_else(|| home.stage1());
            safemark::autoencoder::save_stage1(&out, &cfg, &params)?;
            let curves_path = curves.unwrap_or_else(|| home.root.join("stage1_curves.csv"));
            std::fs::write(&curves_path, safemark::autoencoder::curves_to_csv(&curve_rows))?;
            println!(
                "stage-1 checkpoint {} ({} params), curves {}",
                out.display(),
                safemark::nn::Module::param_count(&params),
                curves_path.display()
            );
        }

        Command::Finetune {
            dataset,
            stage1,
            out,
            curves,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let corpus = Corpus::load(&dataset, cfg.resolution)?;
            let stage1_path = stage1.unwrap_or_else(|| home.stage1());
            let (_, ae) = safemark::autoencoder::load_stage1(stage1_path)?;
            let prompts = default_prompts(cfg.seed, 16);
            let (unet, curve_rows) =
                diffuser::finetune_stage2(&corpus.images, &corpus.watermarks, &prompts, &ae, &cfg)?;
            let out = out.unwrap_or_else(|| home.stage2());
            safemark::denoiser::save_stage2(&out, &cfg, &unet)?;
            let curves_path = curves.unwrap_or_else(|| home.root.join("stage2_curves.csv"));
            std::fs::write(&curves_path, diffuser::stage2_curves_to_csv(&curve_rows))?;
            println!("stage-2 checkpoint {}, curves {}", out.display(), curves_path.display());
        }

        Command::Wm(wm) => match wm {
            WmCommand::Add { id, file, cfg: flags } => {
                flags.apply(&mut cfg)?;
                let img = load_image(&file, cfg.resolution)?;
                let reg = trigger::load_registry(home.registry_dir(), cfg.resolution)
                    .unwrap_or_else(|_| trigger::TriggerRegistry::new(trigger::EMBED_DIM));
                let reg = reg.register_watermark(&id, WatermarkImage(img))?;
                trigger::save_registry(&reg, home.registry_dir())?;
                println!("registered '{id}' ({} entries)", reg.len());
            }
            WmCommand::List { cfg: flags } => {
                flags.apply(&mut cfg)?;
                let reg = home.load_registry(cfg.resolution)?;
                for e in reg.entries() {
                    println!("{}\t{}-dim embedding", e.id, e.embedding.len());
                }
            }
        },

        Command::Generate {
            prompt,
            image,
            watermark_id,
            user_watermark,
            out,
            reference_out,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let (_, ae, unet) = home.load_models()?;
            let mut registry = home.load_registry(cfg.resolution)?;
            if let Some(id) = &watermark_id {
                // force the chosen entry by shrinking the registry view
                let entry = registry
                    .get(id)
                    .ok_or_else(|| Error::State(format!("watermark id '{id}' not registered")))?
                    .clone();
                let mut forced = trigger::TriggerRegistry::new(registry.dim);
                forced = forced.register_watermark(&entry.id, entry.watermark.clone())?;
                registry = forced;
            }
            let source = match &image {
                Some(p) => Some(load_image(p, cfg.resolution)?),
                None => None,
            };
            let user_wm = match &user_watermark {
                Some(p) => Some(WatermarkImage(load_image(p, cfg.resolution)?)),
                None => None,
            };
            let req = GenerateRequest {
                prompt: &prompt,
                source: source.as_ref(),
                user_wm: user_wm.as_ref(),
                cfg: &cfg,
            };
            let models = PipelineModels { ae: &ae, unet: &unet };
            let (gen, record) = diffuser::generate_to_file(
                &req,
                &models,
                &registry,
                &out,
                &home.ledger(),
                flags.explicit_seed(),
            )?;
            if let Some(rp) = reference_out {
                save_image(&gen.reference, rp)?;
            }
            println!(
                "wrote {} watermark={} key={} digest={}",
                out.display(),
                record.watermark_id,
                record.key,
                record.digest
            );
        }

        Command::Extract { image, out, cfg: flags } => {
            flags.apply(&mut cfg)?;
            let (_, ae, _unet) = home.load_models()?;
            let img = load_image(&image, cfg.resolution)?;
            let wm = diffuser::extract_watermark(&img, &ae)?;
            save_image(wm.as_image(), &out)?;
            if let Ok(reg) = home.load_registry(cfg.resolution) {
                let (id, score) = eval::best_match(&wm, &reg)?;
                println!("extracted -> {} best-match={id} score={score:.2} dB", out.display());
            } else {
                println!("extracted -> {}", out.display());
            }
        }

        Command::Verify { image, tau, cfg: flags } => {
            flags.apply(&mut cfg)?;
            let (_, ae, _unet) = home.load_models()?;
            let registry = home.load_registry(cfg.resolution)?;
            let tau = home.read_tau(tau);
            let bytes = std::fs::read(&image)?;
            let digest = safemark::image::digest_bytes(&bytes);
            let img = load_image(&image, cfg.resolution)?;
            let decision = eval::detect(&img, &registry, &ae, tau)?;
            println!(
                "decision: accepted={} best_id={} score={:.2} dB tau={:.2} dB",
                decision.accepted, decision.best_id, decision.score, decision.threshold
            );
            match home.ledger().lookup(&digest)? {
                Some(rec) => println!(
                    "ledger: digest={} watermark={} key={} seed={} ts={} prompt={:?}",
                    rec.digest, rec.watermark_id, rec.key, rec.seed, rec.ts, rec.prompt
                ),
                None => println!("ledger: no record for digest {digest}"),
            }
        }

        Command::Attack {
            image,
            kind,
            out,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let spec: AttackSpec = kind.parse()?;
            let img = load_image(&image, cfg.resolution)?;
            let mut rng = safemark::rng::SeedRng::new(cfg.seed, 48);
            let attacked = eval::attack(&img, &spec, &mut rng)?;
            save_image(&attacked, &out)?;
            println!("attacked with {spec} -> {}", out.display());
        }

        Command::Report {
            out,
            dataset,
            n,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let (_, ae, unet) = home.load_models()?;
            let registry = home.load_registry(cfg.resolution)?;
            let models = PipelineModels { ae: &ae, unet: &unet };
            let images = eval_images(&dataset, n, &cfg)?;

            // calibration: positives from a held-out generated split,
            // negatives from pristine images
            let calib_n = (n / 2).clamp(4, 16);
            let calib_images = eval_images(&dataset, calib_n, &{
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(7777);
                c
            })?;
            let pos_samples = eval::generate_set(&calib_images, &models, &registry, &{
                let mut c = cfg.clone();
                c.seed = cfg.seed.wrapping_add(9999);
                c
            })?;
            let pos: Vec<safemark::image::ImageTensor> =
                pos_samples.iter().map(|s| s.marked.clone()).collect();
            let pos_scores = eval::detect::score_images(&pos, &registry, &ae)?;
            let neg_scores = eval::detect::score_images(&calib_images, &registry, &ae)?;
            let tau = eval::calibrate_tau(&pos_scores, &neg_scores)?;
            std::fs::create_dir_all(&home.root)?;
            std::fs::write(home.tau_path(), format!("{tau:.6}\n"))?;

            let rows = eval::full_report(
                &images,
                &models,
                &registry,
                &cfg,
                tau,
                &out,
                Some(&home.ledger()),
            )?;
            println!("tau = {tau:.2} dB (written to {})", home.tau_path().display());
            for r in &rows {
                println!(
                    "{:<14} psnr={:>7.2} frechet={:>9.4} lpips={:>8.5} clip={:>7.4} det={:.2}",
                    r.attack, r.psnr, r.frechet_proxy, r.perceptual_proxy, r.clip_proxy,
                    r.detection_rate
                );
            }
        }

        Command::SweepLambda {
            out,
            dataset,
            n,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let (_, ae, unet) = home.load_models()?;
            let registry = home.load_registry(cfg.resolution)?;
            let models = PipelineModels { ae: &ae, unet: &unet };
            let images = eval_images(&dataset, n, &cfg)?;
            let rows = eval::sweep_lambda(
                &images,
                &models,
                &registry,
                &cfg,
                &[0, 5, 10, 15],
                &[TimeBias::Early, TimeBias::Mid, TimeBias::Late],
                Some(&out),
            )?;
            for r in &rows {
                println!(
                    "lambda={:<3} bias={:<8} psnr={:>7.2} extraction={:>7.2}",
                    r.lambda,
                    r.bias.to_string(),
                    r.psnr,
                    r.extraction_psnr
                );
            }
        }

        Command::SweepGamma {
            out,
            dataset,
            cfg: flags,
        } => {
            flags.apply(&mut cfg)?;
            let (images, watermarks) = match &dataset {
                Some(dir) => {
                    let c = Corpus::load(dir, cfg.resolution)?;
                    (c.images, c.watermarks)
                }
                None => {
                    let spec = SyntheticCorpusSpec {
                        n_images: 32,
                        n_watermarks: 8,
                        resolution: cfg.resolution,
                        image_family: corpus::ImageFamily::Shapes,
                        watermark_family: corpus::WatermarkFamily::QrLike,
                        seed: cfg.seed ^ 0x9a,
                    };
                    let c = Corpus::synthesize(&spec)?;
                    (c.images, c.watermarks)
                }
            };
            let rows = eval::sweep_gamma(&images, &watermarks, &cfg, &[1.0, 0.1, 0.01], Some(&out))?;
            for r in &rows {
                println!("gamma={:<5} wm final/initial ratio={:.4}", r.gamma, r.wm_ratio);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::State(_) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

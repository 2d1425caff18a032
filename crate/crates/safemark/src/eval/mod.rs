//! Evaluation harness: metrics, attacks, detection, and the experiment
//! suites (robustness table, lambda and gamma studies,
//! multi-watermarking, pixel-difference visualization).

pub mod attacks;
pub mod detect;
pub mod metrics;
pub mod plots;
pub mod suites;

pub use attacks::{attack, AttackKind, AttackSpec};
pub use detect::{best_match, calibrate_tau, detect, match_score, DetectionDecision};
pub use metrics::{clip_proxy, frechet_proxy, perceptual_proxy, psnr, psnr_with_peak};
pub use suites::{
    full_report, generate_set, multi_watermark_run, pixel_diff, robustness_suite, sweep_gamma,
    sweep_lambda, GammaSweepRow, LambdaSweepRow, MultiWatermarkOutput, RobustnessRow, SuiteSample,
};

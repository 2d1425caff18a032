//! Run configuration: the knob set shared by training, generation and
//! the experiment suites, plus the flat `key = value` config-file
//! format. Precedence is handled by the CLI: explicit flags > config
//! file > the built-in toy defaults below.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Noise-schedule profile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Profile {
    LinearVp,
    Cosine,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-vp" => Ok(Profile::LinearVp),
            "cosine" => Ok(Profile::Cosine),
            other => Err(Error::domain(format!("unknown profile '{other}'"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::LinearVp => "linear-vp",
            Profile::Cosine => "cosine",
        })
    }
}

/// Where in 1..=T the lambda-sampler concentrates injected steps.
///
/// Step indices follow the diffusion chain: inverted denoising runs
/// t = T..1, so `Late` (low indices) means injection near the *end* of
/// generation and survives into the output most directly, while `Early`
/// (high indices) perturbs the trajectory when it is still coarse.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeBias {
    Uniform,
    Early,
    Mid,
    Late,
}

impl FromStr for TimeBias {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TimeBias::Uniform),
            "early" => Ok(TimeBias::Early),
            "mid" => Ok(TimeBias::Mid),
            "late" => Ok(TimeBias::Late),
            other => Err(Error::domain(format!("unknown time bias '{other}'"))),
        }
    }
}

impl fmt::Display for TimeBias {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeBias::Uniform => "uniform",
            TimeBias::Early => "early",
            TimeBias::Mid => "mid",
            TimeBias::Late => "late",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    /// Diffusion steps T.
    pub t_steps: usize,
    /// Injection count lambda, 0..=T.
    pub lambda: usize,
    /// Stage-1 loss weight gamma (> 0).
    pub gamma: f64,
    /// Spatial scale factor between image and latent (2, 4 or 8).
    pub f: usize,
    /// Latent channel count d.
    pub d: usize,
    /// Classifier-free guidance factor (>= 0).
    pub cfg_scale: f64,
    /// DDIM stochasticity, 0 = deterministic.
    pub eta: f64,
    pub seed: u64,
    /// Image side in pixels; must be divisible by `f`.
    pub resolution: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training step budget of the stage being run.
    pub budget: usize,
    /// Steps of base-autoencoder pretraining before the joint stage-1 phase.
    pub base_budget: usize,
    pub profile: Profile,
    pub bias: TimeBias,
    /// Enables the hinge-loss patch discriminator term in stage 1.
    pub adv: bool,
}

impl Default for RunConfig {
    /// Desk-scale toy profile.
    fn default() -> Self {
        RunConfig {
            t_steps: 50,
            lambda: 10,
            gamma: 1.0,
            f: 4,
            d: 4,
            cfg_scale: 7.5,
            eta: 0.0,
            seed: 0,
            resolution: 32,
            batch: 4,
            lr: 2e-3,
            budget: 2000,
            base_budget: 1500,
            profile: Profile::LinearVp,
            bias: TimeBias::Uniform,
            adv: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_steps < 1 {
            return Err(Error::domain("T must be >= 1".to_string()));
        }
        if self.lambda > self.t_steps {
            return Err(Error::domain(format!(
                "lambda {} exceeds T {}",
                self.lambda, self.t_steps
            )));
        }
        if self.gamma <= 0.0 {
            return Err(Error::domain("gamma must be > 0".to_string()));
        }
        if ![2, 4, 8].contains(&self.f) {
            return Err(Error::domain(format!("f must be one of 2,4,8, got {}", self.f)));
        }
        if self.cfg_scale < 0.0 {
            return Err(Error::domain("cfg_scale must be >= 0".to_string()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::domain("eta must be in [0,1]".to_string()));
        }
        if self.resolution == 0 || self.resolution % self.f != 0 {
            return Err(Error::domain(format!(
                "resolution {} not divisible by f {}",
                self.resolution, self.f
            )));
        }
        if self.d == 0 || self.batch == 0 {
            return Err(Error::domain("d and batch must be positive".to_string()));
        }
        Ok(())
    }

    /// Latent side at this configuration.
    pub fn latent_side(&self) -> usize {
        self.resolution / self.f
    }

    /// Apply one `key = value` assignment (config-file grammar).
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::domain(format!("bad value '{v}' for key '{key}'")))
        }
        match key {
            "T" => self.t_steps = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "f" => self.f = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "cfg_scale" => self.cfg_scale = parse(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "budget" => self.budget = parse(key, value)?,
            "base_budget" => self.base_budget = parse(key, value)?,
            "profile" => self.profile = value.parse()?,
            "bias" => self.bias = value.parse()?,
            "adv" => self.adv = parse(key, value)?,
            other => return Err(Error::domain(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse a flat config file: `key = value` lines, `#` comments.
    pub fn load_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::domain(format!("config line {} is not 'key = value'", lineno + 1))
            })?;
            cfg.set_field(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_values_are_domain_errors() {
        let mut cfg = RunConfig::default();
        cfg.lambda = 60;
        assert!(cfg.validate().is_err());
        cfg = RunConfig::default();
        cfg.gamma = 0.0;
        assert!(cfg.validate().is_err());
        cfg = RunConfig::default();
        cfg.f = 3;
        assert!(cfg.validate().is_err());
        cfg = RunConfig::default();
        cfg.eta = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(&path, "T = 20\nlambda = 4 # comment\nprofile = cosine\nbias = late\n")
            .unwrap();
        let cfg = RunConfig::load_file(&path).unwrap();
        assert_eq!(cfg.t_steps, 20);
        assert_eq!(cfg.lambda, 4);
        assert_eq!(cfg.profile, Profile::Cosine);
        assert_eq!(cfg.bias, TimeBias::Late);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set_field("nope", "1").is_err());
    }
}

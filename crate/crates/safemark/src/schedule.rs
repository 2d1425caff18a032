//! The deterministic control plane: noise schedules, lambda-sampling,
//! the lambda-distribution, and binary traceability keys.
//!
//! Conventions. `a[t]` are *cumulative* signal coefficients
//! (`a[0] = 1`, strictly decreasing, `a[T] > 0`), matching the DDIM
//! update used by inverted denoising. The per-step chain coefficient is
//! `r_t = sqrt(a[t]/a[t-1])` with noise scale `sqrt(1 - r_t^2)`, which
//! makes the stepwise forward chain marginal-consistent with the
//! cumulative convention: composing steps 1..t yields
//! `z_t = sqrt(a[t]) z_0 + sqrt(1 - a[t]) eps`.

use std::fmt;
use std::str::FromStr;

use crate::config::{Profile, TimeBias};
use crate::error::{Error, Result};
use crate::rng::SeedRng;

/// Cumulative signal coefficients and per-step DDIM stochasticity.
#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    a: Vec<f64>,
    eta: f64,
}

impl NoiseSchedule {
    /// Build from an explicit cumulative-coefficient vector
    /// `[a_0 = 1, a_1, ..., a_T]`; invariants are checked.
    pub fn from_cumulative(a: Vec<f64>, eta: f64) -> Result<Self> {
        if a.len() < 2 {
            return Err(Error::domain("schedule needs at least one step".to_string()));
        }
        if a[0] != 1.0 {
            return Err(Error::domain("a_0 must equal 1".to_string()));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::domain("eta must be in [0,1]".to_string()));
        }
        for t in 1..a.len() {
            if !(a[t] > 0.0 && a[t] < a[t - 1] && a[t] <= 1.0) {
                return Err(Error::domain(format!(
                    "cumulative coefficients must be strictly decreasing in (0,1]; \
                     violated at t={t}"
                )));
            }
        }
        Ok(NoiseSchedule { a, eta })
    }

    pub fn t_steps(&self) -> usize {
        self.a.len() - 1
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Cumulative coefficient a_t, t in 0..=T.
    pub fn a(&self, t: usize) -> f64 {
        self.a[t]
    }

    /// Per-step signal coefficient r_t = sqrt(a_t / a_{t-1}), t >= 1.
    pub fn step_signal(&self, t: usize) -> f64 {
        (self.a[t] / self.a[t - 1]).sqrt()
    }

    /// Per-step noise scale sqrt(1 - a_t / a_{t-1}), t >= 1.
    pub fn step_noise(&self, t: usize) -> f64 {
        (1.0 - self.a[t] / self.a[t - 1]).sqrt()
    }

    /// DDIM sigma_t for t >= 1 (sigma_1 is 0 because a_0 = 1).
    pub fn sigma(&self, t: usize) -> f64 {
        let (ap, at) = (self.a[t - 1], self.a[t]);
        self.eta * ((1.0 - ap) / (1.0 - at)).sqrt() * (1.0 - at / ap).sqrt()
    }

    /// Coefficient under the square root of the DDIM direction term,
    /// `1 - a_{t-1} - sigma_t^2`; nonnegative for any eta in [0,1].
    pub fn direction_coeff(&self, t: usize) -> f64 {
        let s = self.sigma(t);
        1.0 - self.a[t - 1] - s * s
    }
}

/// Construct a noise schedule with `T` steps.
///
/// `linear-vp` uses a linear per-step beta ramp with endpoints scaled by
/// 1000/T (clamped below 1), so the terminal signal stays near zero for
/// any step count; `cosine` uses the squared-cosine cumulative curve
/// with the usual 0.008 offset and per-step beta clipping.
pub fn make_noise_schedule(t_steps: usize, profile: Profile, eta: f64) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::domain("T must be >= 1".to_string()));
    }
    let betas: Vec<f64> = match profile {
        Profile::LinearVp => {
            let s = 1000.0 / t_steps as f64;
            let (b0, b1) = (1e-4 * s, 0.02 * s);
            (1..=t_steps)
                .map(|i| {
                    let frac = if t_steps == 1 {
                        0.5
                    } else {
                        (i - 1) as f64 / (t_steps - 1) as f64
                    };
                    (b0 + (b1 - b0) * frac).min(0.999)
                })
                .collect()
        }
        Profile::Cosine => {
            let off = 0.008;
            let f = |t: f64| {
                let x = (t / t_steps as f64 + off) / (1.0 + off) * std::f64::consts::FRAC_PI_2;
                x.cos() * x.cos()
            };
            (1..=t_steps)
                .map(|i| (1.0 - f(i as f64) / f((i - 1) as f64)).clamp(1e-8, 0.999))
                .collect()
        }
    };
    let mut a = Vec::with_capacity(t_steps + 1);
    a.push(1.0);
    for b in betas {
        let prev = *a.last().unwrap();
        a.push(prev * (1.0 - b));
    }
    NoiseSchedule::from_cumulative(a, eta)
}

/// The injected-step subset of 1..=T produced by lambda-sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LambdaSchedule {
    t_steps: usize,
    steps: Vec<usize>,
}

impl LambdaSchedule {
    pub fn new(t_steps: usize, mut steps: Vec<usize>) -> Result<Self> {
        steps.sort_unstable();
        steps.dedup();
        if let Some(&bad) = steps.iter().find(|&&t| t == 0 || t > t_steps) {
            return Err(Error::domain(format!("step {bad} outside 1..={t_steps}")));
        }
        Ok(LambdaSchedule { t_steps, steps })
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn lambda(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn contains(&self, t: usize) -> bool {
        self.steps.binary_search(&t).is_ok()
    }

    /// Two schedules over the same T with no shared steps.
    pub fn is_disjoint(&self, other: &LambdaSchedule) -> bool {
        self.t_steps == other.t_steps && !self.steps.iter().any(|t| other.contains(*t))
    }
}

/// The lambda-distribution: `t` when `t` was sampled, else 0.
pub fn lambda_dis(sched: &LambdaSchedule, t: usize) -> Result<usize> {
    if t == 0 || t > sched.t_steps() {
        return Err(Error::domain(format!(
            "step {t} outside 1..={}",
            sched.t_steps()
        )));
    }
    Ok(if sched.contains(t) { t } else { 0 })
}

/// Uniform lambda-sampling: a lambda-subset of 1..=T without
/// replacement, deterministic given the rng state.
pub fn lambda_sample(t_steps: usize, lambda: usize, rng: &mut SeedRng) -> Result<LambdaSchedule> {
    lambda_sample_biased(t_steps, lambda, TimeBias::Uniform, rng)
}

/// Lambda-sampling restricted to a time window.
///
/// `Late` concentrates injected steps at low indices (the end of the
/// denoising timeline), `Early` at high indices, `Mid` in the centre;
/// the window is the corresponding third of 1..=T, widened to `lambda`
/// when necessary.
pub fn lambda_sample_biased(
    t_steps: usize,
    lambda: usize,
    bias: TimeBias,
    rng: &mut SeedRng,
) -> Result<LambdaSchedule> {
    if lambda > t_steps {
        return Err(Error::domain(format!("lambda {lambda} exceeds T {t_steps}")));
    }
    let (lo, hi) = match bias {
        TimeBias::Uniform => (1, t_steps),
        _ => {
            let w = (t_steps.div_ceil(3)).max(lambda).min(t_steps);
            match bias {
                TimeBias::Late => (1, w),
                TimeBias::Early => (t_steps - w + 1, t_steps),
                TimeBias::Mid => {
                    let lo = (t_steps - w) / 2 + 1;
                    (lo, lo + w - 1)
                }
                TimeBias::Uniform => unreachable!(),
            }
        }
    };
    // Partial Fisher-Yates over the window.
    let mut pool: Vec<usize> = (lo..=hi).collect();
    let mut steps = Vec::with_capacity(lambda);
    for i in 0..lambda {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
        steps.push(pool[i]);
    }
    LambdaSchedule::new(t_steps, steps)
}

/// Binary traceability key m in {0,1}^T; bit t=1 is leftmost in the
/// serialized '0'/'1' string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyMask {
    bits: Vec<bool>,
}

impl KeyMask {
    pub fn t_steps(&self) -> usize {
        self.bits.len()
    }

    /// Bit for step t (1-based).
    pub fn bit(&self, t: usize) -> bool {
        self.bits[t - 1]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn all_zero(t_steps: usize) -> Self {
        KeyMask {
            bits: vec![false; t_steps],
        }
    }
}

impl fmt::Display for KeyMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.bits {
            f.write_str(if *b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for KeyMask {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::domain(format!("key character '{other}' not 0/1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if bits.is_empty() {
            return Err(Error::domain("empty key".to_string()));
        }
        Ok(KeyMask { bits })
    }
}

/// Compose per-step flags m_t (t = 1..T) into a key; exactly one flag
/// per step is required.
pub fn key_compose(flags: &[bool], t_steps: usize) -> Result<KeyMask> {
    if flags.len() != t_steps {
        return Err(Error::domain(format!(
            "got {} flags for T={t_steps}",
            flags.len()
        )));
    }
    Ok(KeyMask {
        bits: flags.to_vec(),
    })
}

/// Readout: the injected-step set recorded by a key. Inverse of
/// [`key_compose`].
pub fn key_readout(m: &KeyMask) -> LambdaSchedule {
    let steps = (1..=m.t_steps()).filter(|&t| m.bit(t)).collect();
    LambdaSchedule {
        t_steps: m.t_steps(),
        steps,
    }
}

/// Key whose set bits are exactly the schedule's steps.
pub fn key_from_schedule(sched: &LambdaSchedule) -> KeyMask {
    let bits = (1..=sched.t_steps()).map(|t| sched.contains(t)).collect();
    KeyMask { bits }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_basics() {
        let ns = make_noise_schedule(50, Profile::LinearVp, 0.0).unwrap();
        assert_eq!(ns.a(0), 1.0);
        for t in 1..=50 {
            assert_eq!(ns.sigma(t), 0.0);
        }
        let ns = make_noise_schedule(7, Profile::Cosine, 0.3).unwrap();
        assert_eq!(ns.a(0), 1.0);
        assert_eq!(ns.sigma(1), 0.0);
    }

    #[test]
    fn linear_vp_at_1000_steps_decays_below_cent() {
        let ns = make_noise_schedule(1000, Profile::LinearVp, 0.0).unwrap();
        for t in 1..=1000 {
            assert!(ns.a(t) < ns.a(t - 1));
            assert!(ns.a(t) > 0.0);
        }
        assert!(ns.a(1000) < 0.01, "a_T = {}", ns.a(1000));
    }

    #[test]
    fn t_zero_is_domain_error() {
        assert!(make_noise_schedule(0, Profile::LinearVp, 0.0).is_err());
    }

    #[test]
    fn direction_coeff_nonnegative_at_full_eta() {
        for profile in [Profile::LinearVp, Profile::Cosine] {
            for t_steps in [1usize, 2, 5, 50, 200] {
                let ns = make_noise_schedule(t_steps, profile, 1.0).unwrap();
                for t in 1..=t_steps {
                    assert!(
                        ns.direction_coeff(t) >= -1e-12,
                        "profile {profile}, T={t_steps}, t={t}: {}",
                        ns.direction_coeff(t)
                    );
                }
            }
        }
    }

    #[test]
    fn lambda_sampling_contract() {
        let mut rng = SeedRng::new(7, 0);
        let s = lambda_sample(50, 10, &mut rng).unwrap();
        assert_eq!(s.lambda(), 10);
        assert!(s.steps().iter().all(|&t| (1..=50).contains(&t)));

        let mut a = SeedRng::new(7, 0);
        let mut b = SeedRng::new(7, 0);
        assert_eq!(
            lambda_sample(50, 10, &mut a).unwrap(),
            lambda_sample(50, 10, &mut b).unwrap()
        );

        let mut rng = SeedRng::new(1, 0);
        assert_eq!(lambda_sample(5, 0, &mut rng).unwrap().lambda(), 0);
        let full = lambda_sample(5, 5, &mut rng).unwrap();
        assert_eq!(full.steps(), &[1, 2, 3, 4, 5]);
        assert!(lambda_sample(5, 6, &mut rng).is_err());
    }

    #[test]
    fn inclusion_frequency_matches_lambda_over_t() {
        let mut rng = SeedRng::new(42, 0);
        let mut counts = vec![0usize; 50];
        let draws = 10_000;
        for _ in 0..draws {
            let s = lambda_sample(50, 10, &mut rng).unwrap();
            for &t in s.steps() {
                counts[t - 1] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            let freq = *c as f64 / draws as f64;
            assert!((freq - 0.2).abs() <= 0.02, "step {}: freq {freq}", i + 1);
        }
    }

    #[test]
    fn biased_windows() {
        let mut rng = SeedRng::new(3, 0);
        let late = lambda_sample_biased(50, 10, TimeBias::Late, &mut rng).unwrap();
        assert!(late.steps().iter().all(|&t| t <= 17));
        let early = lambda_sample_biased(50, 10, TimeBias::Early, &mut rng).unwrap();
        assert!(early.steps().iter().all(|&t| t >= 34));
        let mid = lambda_sample_biased(50, 10, TimeBias::Mid, &mut rng).unwrap();
        assert!(mid.steps().iter().all(|&t| (17..=34).contains(&t)));
    }

    #[test]
    fn lambda_dis_branches() {
        let s = LambdaSchedule::new(6, vec![2, 5]).unwrap();
        assert_eq!(lambda_dis(&s, 5).unwrap(), 5);
        assert_eq!(lambda_dis(&s, 3).unwrap(), 0);
        assert!(lambda_dis(&s, 7).is_err());
        let empty = LambdaSchedule::new(6, vec![]).unwrap();
        for t in 1..=6 {
            assert_eq!(lambda_dis(&empty, t).unwrap(), 0);
        }
    }

    #[test]
    fn key_compose_and_readout_examples() {
        let m = key_compose(&[true, false, true, false], 4).unwrap();
        assert_eq!(m.to_string(), "1010");
        assert!(key_compose(&[true], 4).is_err());

        let paper_key: KeyMask = "10101101".parse().unwrap();
        assert_eq!(paper_key.popcount(), 5);
        assert_eq!(key_readout(&paper_key).steps(), &[1, 3, 5, 6, 8]);

        let zero: KeyMask = "0000".parse().unwrap();
        assert_eq!(key_readout(&zero).lambda(), 0);
        assert_eq!(KeyMask::all_zero(3).to_string(), "000");
    }

    proptest! {
        #[test]
        fn key_round_trip_random(t_steps in 1usize..64, seed in 0u64..1000) {
            let mut rng = SeedRng::new(seed, 0);
            let lambda = rng.below(t_steps + 1);
            let s = lambda_sample(t_steps, lambda, &mut rng).unwrap();
            let key = key_from_schedule(&s);
            prop_assert_eq!(key.popcount(), s.lambda());
            prop_assert_eq!(key_readout(&key), s);
        }

        #[test]
        fn key_string_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..60)) {
            let key = key_compose(&bits, bits.len()).unwrap();
            let parsed: KeyMask = key.to_string().parse().unwrap();
            prop_assert_eq!(parsed, key);
        }
    }
}

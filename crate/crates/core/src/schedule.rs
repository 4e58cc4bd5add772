//! Noise schedules and the closed-form forward/reverse maps.
//!
//! Inference steps are indexed `t ∈ [1, T]`; `t = T` is the noisiest step and
//! sampling walks `T, T-1, …, 1`. Each step maps onto one index of the
//! training schedule, and `alpha_bar(t)` is the cumulative product
//! `∏ (1 - β_i)` up to and including that index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

/// How β ranges from `beta_start` to `beta_end` over the training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BetaSchedule {
    Linear,
    /// Linear interpolation of `sqrt(β)`.
    #[default]
    ScaledLinear,
}

/// How inference steps are subsampled from the training steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TimestepSpacing {
    /// `k * (training_steps / T)` for `k = 0..T`.
    #[default]
    Leading,
    /// Evenly spaced from the last training step downwards, rounded.
    Trailing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub training_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub beta_schedule: BetaSchedule,
    pub spacing: TimestepSpacing,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            training_steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            beta_schedule: BetaSchedule::ScaledLinear,
            spacing: TimestepSpacing::Leading,
            inference_steps: 16,
        }
    }
}

impl ScheduleConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            inference_steps: steps,
            ..Self::default()
        }
    }

    fn betas(&self) -> Vec<f64> {
        let n = self.training_steps;
        let lerp = |a: f64, b: f64, i: usize| {
            if n == 1 {
                a
            } else {
                a + (b - a) * i as f64 / (n - 1) as f64
            }
        };
        (0..n)
            .map(|i| match self.beta_schedule {
                BetaSchedule::Linear => lerp(self.beta_start, self.beta_end, i),
                BetaSchedule::ScaledLinear => {
                    lerp(self.beta_start.sqrt(), self.beta_end.sqrt(), i).powi(2)
                }
            })
            .collect()
    }
}

/// Per-inference-step cumulative signal coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    training_steps: usize,
    // index t-1 holds the value for inference step t
    alpha_bar: Vec<f64>,
    step_to_training_index: Vec<usize>,
}

impl NoiseSchedule {
    pub fn build(cfg: &ScheduleConfig) -> Result<Self> {
        let steps = cfg.inference_steps;
        let train = cfg.training_steps;
        if steps == 0 || train == 0 || steps > train {
            return Err(Error::Config(format!(
                "inference steps must be in [1, training_steps={train}], got {steps}"
            )));
        }
        let beta_ok = |b: f64| b.is_finite() && (0.0..1.0).contains(&b);
        if !beta_ok(cfg.beta_start) || !beta_ok(cfg.beta_end) || cfg.beta_end < cfg.beta_start {
            return Err(Error::Config(format!(
                "beta range [{}, {}] must satisfy 0 <= start <= end < 1",
                cfg.beta_start, cfg.beta_end
            )));
        }

        let mut cumprod = Vec::with_capacity(train);
        let mut acc = 1.0;
        for b in cfg.betas() {
            acc *= 1.0 - b;
            cumprod.push(acc);
        }

        let indices: Vec<usize> = match cfg.spacing {
            TimestepSpacing::Leading => {
                let ratio = train / steps;
                (0..steps).map(|k| k * ratio).collect()
            }
            TimestepSpacing::Trailing => {
                let ratio = train as f64 / steps as f64;
                let mut v: Vec<usize> = (0..steps)
                    .map(|k| (train as f64 - k as f64 * ratio).round() as usize - 1)
                    .collect();
                v.reverse();
                v
            }
        };
        let alpha_bar = indices.iter().map(|&i| cumprod[i]).collect();
        Self::from_parts(train, alpha_bar, indices)
    }

    /// Builds a schedule directly from per-step `alpha_bar` values, ordered
    /// from step 1 to step T. Training indices are taken as `0..T`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        let n = alpha_bar.len();
        Self::from_parts(n.max(1), alpha_bar, (0..n).collect())
    }

    fn from_parts(
        training_steps: usize,
        alpha_bar: Vec<f64>,
        step_to_training_index: Vec<usize>,
    ) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if alpha_bar.iter().any(|&a| !(a > 0.0 && a <= 1.0)) {
            return Err(Error::Config("alpha_bar entries must lie in (0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(
                "alpha_bar must be strictly decreasing with the step index".into(),
            ));
        }
        if step_to_training_index.windows(2).any(|w| w[1] <= w[0])
            || step_to_training_index.iter().any(|&i| i >= training_steps)
        {
            return Err(Error::Config(
                "training indices must be strictly increasing and in range".into(),
            ));
        }
        Ok(Self {
            training_steps,
            alpha_bar,
            step_to_training_index,
        })
    }

    /// Number of inference steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn training_steps(&self) -> usize {
        self.training_steps
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn training_index(&self, t: usize) -> Result<usize> {
        self.check_step(t)?;
        Ok(self.step_to_training_index[t - 1])
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn training_indices(&self) -> &[usize] {
        &self.step_to_training_index
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                step: t,
                steps: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// Forward diffusion: `z_t = sqrt(ᾱ_t)·z_0 + sqrt(1-ᾱ_t)·ε`.
pub fn fdp(
    z0: &LatentGrid,
    eps: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_with(eps, |z, e| a * z + b * e)
}

/// One-shot clean-latent prediction: `ẑ_0 = (z_t - sqrt(1-ᾱ_t)·ε̂) / sqrt(ᾱ_t)`.
pub fn rgp_predict_x0(
    z_t: &LatentGrid,
    eps_hat: &LatentGrid,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentGrid> {
    let ab = sched.alpha_bar(t)?;
    if ab <= 0.0 {
        return Err(Error::Singularity(t));
    }
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z_t.zip_with(eps_hat, |z, e| (z - b * e) / a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Brute-force cumulative product over the full training schedule.
    fn oracle_alpha_bar(cfg: &ScheduleConfig, index: usize) -> f64 {
        let n = cfg.training_steps as f64;
        let mut prod = 1.0;
        for i in 0..=index {
            let frac = if cfg.training_steps == 1 {
                0.0
            } else {
                i as f64 / (n - 1.0)
            };
            let beta = match cfg.beta_schedule {
                BetaSchedule::Linear => cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start),
                BetaSchedule::ScaledLinear => {
                    let (s, e) = (cfg.beta_start.sqrt(), cfg.beta_end.sqrt());
                    (s + frac * (e - s)).powi(2)
                }
            };
            prod *= 1.0 - beta;
        }
        prod
    }

    #[test]
    fn single_step_zero_beta_is_noise_free() {
        let cfg = ScheduleConfig {
            training_steps: 1,
            beta_start: 0.0,
            beta_end: 0.0,
            inference_steps: 1,
            ..Default::default()
        };
        let s = NoiseSchedule::build(&cfg).unwrap();
        assert_eq!(s.alpha_bars(), &[1.0]);
    }

    #[test]
    fn sixteen_step_default_matches_cumprod_oracle() {
        let cfg = ScheduleConfig::with_steps(16);
        let s = NoiseSchedule::build(&cfg).unwrap();
        // frozen from an independent cumulative-product evaluation
        let frozen = [
            0.99915,
            0.9386873637938127,
            0.8634075569027956,
            0.7751207949622224,
            0.6770708151389062,
            0.5736680634010025,
            0.46999998780208785,
            0.37118647445990044,
            0.2817005455399883,
            0.2047981365862924,
            0.14218238048931336,
            0.09396858792373587,
            0.05893444394836846,
            0.034965055819202784,
            0.019561543210523023,
            0.010287202062971651,
        ];
        for t in 1..=16 {
            let idx = s.training_index(t).unwrap();
            assert_eq!(idx, (t - 1) * 62);
            let got = s.alpha_bar(t).unwrap();
            assert_relative_eq!(got, oracle_alpha_bar(&cfg, idx), max_relative = 1e-12);
            assert_relative_eq!(got, frozen[t - 1], max_relative = 1e-12);
        }
    }

    #[test]
    fn full_length_schedule_is_identity_map() {
        let cfg = ScheduleConfig {
            training_steps: 50,
            inference_steps: 50,
            ..Default::default()
        };
        let s = NoiseSchedule::build(&cfg).unwrap();
        assert_eq!(s.training_indices(), (0..50).collect::<Vec<_>>().as_slice());
        let trailing = NoiseSchedule::build(&ScheduleConfig {
            spacing: TimestepSpacing::Trailing,
            ..cfg
        })
        .unwrap();
        assert_eq!(trailing.training_indices(), s.training_indices());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            ScheduleConfig::with_steps(0),
            ScheduleConfig::with_steps(1001),
            ScheduleConfig {
                beta_start: 0.5,
                beta_end: 0.1,
                ..Default::default()
            },
            ScheduleConfig {
                beta_end: 1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(NoiseSchedule::build(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn alpha_bar_invariants_hold_for_common_step_counts() {
        for steps in [1, 8, 16, 50, 1000] {
            for spacing in [TimestepSpacing::Leading, TimestepSpacing::Trailing] {
                let s = NoiseSchedule::build(&ScheduleConfig {
                    spacing,
                    ..ScheduleConfig::with_steps(steps)
                })
                .unwrap();
                assert_eq!(s.steps(), steps);
                assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a <= 1.0));
                assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
            }
        }
    }

    #[test]
    fn fdp_endpoints_and_hand_value() {
        let z0 = LatentGrid::filled(2, 3, 3, 1.0);
        let eps = LatentGrid::filled(2, 3, 3, 2.0);

        let clean = NoiseSchedule::from_alpha_bar(vec![1.0]).unwrap();
        assert!(fdp(&z0, &eps, 1, &clean).unwrap().bitwise_eq(&z0));

        let noisy = NoiseSchedule::from_alpha_bar(vec![1e-300]).unwrap();
        let out = fdp(&z0, &eps, 1, &noisy).unwrap();
        assert!(out.as_slice().iter().all(|&v| (v - 2.0).abs() < 1e-12));

        let quarter = NoiseSchedule::from_alpha_bar(vec![0.25]).unwrap();
        let out = fdp(&z0, &eps, 1, &quarter).unwrap();
        for &v in out.as_slice() {
            assert_relative_eq!(v, 2.2320508, max_relative = 1e-7);
        }
    }

    #[test]
    fn rgp_inverts_hand_value_and_is_identity_at_zero_noise() {
        let quarter = NoiseSchedule::from_alpha_bar(vec![0.25]).unwrap();
        let z_t = LatentGrid::filled(1, 2, 2, 0.5 + 0.75f64.sqrt() * 2.0);
        let eps = LatentGrid::filled(1, 2, 2, 2.0);
        let x0 = rgp_predict_x0(&z_t, &eps, 1, &quarter).unwrap();
        for &v in x0.as_slice() {
            assert_relative_eq!(v, 1.0, max_relative = 1e-12);
        }
        let clean = NoiseSchedule::from_alpha_bar(vec![1.0]).unwrap();
        assert!(rgp_predict_x0(&z_t, &eps, 1, &clean)
            .unwrap()
            .bitwise_eq(&z_t));
    }

    #[test]
    fn out_of_range_step_is_index_error() {
        let s = NoiseSchedule::build(&ScheduleConfig::with_steps(8)).unwrap();
        let z = LatentGrid::zeros(1, 1, 1);
        assert!(matches!(
            fdp(&z, &z, 0, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            fdp(&z, &z, 9, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            rgp_predict_x0(&z, &z, 9, &s),
            Err(Error::StepOutOfRange { .. })
        ));
    }
}

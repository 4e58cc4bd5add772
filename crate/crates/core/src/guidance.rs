//! Editing guidance by inference-time gradient descent on the target latents.
//!
//! The energy compares backend features of the noisy target latents with
//! those of the noisy pixel-manipulated latents:
//!
//! ```text
//! E = k_edit·E_edit + k_content·E_content + k_contrast·E_contrast + k_inpaint·E_inpaint
//! ```
//!
//! * `E_edit`: `1 - mean cos` inside `m_new` (object keeps its appearance),
//! * `E_content`: `1 - mean cos` outside `m_old ∪ m_new` (background is kept),
//! * `E_contrast`: `mean cos` inside `m_ipt` (the old object is pushed away),
//! * `E_inpaint`: `1 - mean cos` between target features in `m_ipt` and the
//!   mean manipulated-branch feature of a ring around `m_ipt`.
//!
//! Each tapped layer contributes equally. A guidance step replaces
//! `z ← z - η·∇_z E` and is repeated per the step schedule.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDirectives, Matrix};
use crate::backend::{Conditioning, Denoiser, FeatureMaps};
use crate::edit::RegionMaskSet;
use crate::error::{Error, Result};
use crate::latent::LatentGrid;
use crate::mask::{Mask, ResamplePolicy};
use crate::schedule::NoiseSchedule;

/// Which end of the sampling loop the guidance schedule counts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleOrigin {
    /// Schedule position is `t - 1`: the step index itself, counted from the final step.
    #[default]
    FinalStep,
    /// Schedule position is `T - t`: iterations elapsed since sampling began.
    FirstStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyConfig {
    pub enabled: bool,
    pub k_edit: f64,
    pub k_content: f64,
    pub k_contrast: f64,
    pub k_inpaint: f64,
    pub eta: f64,
    pub dense_frac: f64,
    pub repeat_lo_frac: f64,
    pub cutoff_frac: f64,
    pub repeats: usize,
    pub count_from: ScheduleOrigin,
    /// Chebyshev radius (in layer cells) of the background ring around `m_ipt`.
    pub ring_radius: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k_edit: 1.0,
            k_content: 1.0,
            k_contrast: 0.2,
            k_inpaint: 1.0,
            eta: 0.1,
            dense_frac: 0.2,
            repeat_lo_frac: 0.4,
            cutoff_frac: 0.6,
            repeats: 3,
            count_from: ScheduleOrigin::FinalStep,
            ring_radius: 1,
        }
    }
}

impl EnergyConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> [f64; 4] {
        [self.k_edit, self.k_content, self.k_contrast, self.k_inpaint]
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights().iter().any(|&k| !(k >= 0.0 && k.is_finite())) {
            return Err(Error::Config(
                "energy weights must be finite and non-negative".into(),
            ));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        let fr = [self.dense_frac, self.repeat_lo_frac, self.cutoff_frac];
        if !(0.0 < fr[0] && fr[0] <= fr[1] && fr[1] <= fr[2] && fr[2] <= 1.0) {
            return Err(Error::Config(format!(
                "schedule fractions must satisfy 0 < dense <= repeat_lo <= cutoff <= 1, got {fr:?}"
            )));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whether guidance runs at a step, and how many descent repeats it takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GuidanceStep {
    pub apply: bool,
    pub repeats: usize,
}

/// Backend forwards each descent repeat costs (target and manipulated features).
pub const FORWARDS_PER_REPEAT: usize = 2;

/// Guidance schedule for step `t` of `T`.
///
/// With schedule position `j` (see [`ScheduleOrigin`]) and boundaries
/// `⌊f·T⌋`: every step while `j < ⌊0.2T⌋`; even `j` while `j < ⌊0.6T⌋`;
/// among those, `r` repeats when `j > ⌊0.4T⌋` and one otherwise.
pub fn guidance_schedule(t: usize, total: usize, cfg: &EnergyConfig) -> GuidanceStep {
    const OFF: GuidanceStep = GuidanceStep {
        apply: false,
        repeats: 0,
    };
    if t == 0 || t > total {
        return OFF;
    }
    let j = match cfg.count_from {
        ScheduleOrigin::FinalStep => t - 1,
        ScheduleOrigin::FirstStep => total - t,
    };
    let bound = |f: f64| (f * total as f64 + 1e-9).floor() as usize;
    let (dense, lo, cut) = (
        bound(cfg.dense_frac),
        bound(cfg.repeat_lo_frac),
        bound(cfg.cutoff_frac),
    );
    if j < dense {
        GuidanceStep {
            apply: true,
            repeats: 1,
        }
    } else if j < cut && j % 2 == 0 {
        GuidanceStep {
            apply: true,
            repeats: if j > lo { cfg.repeats } else { 1 },
        }
    } else {
        OFF
    }
}

/// Total descent repeats over a `T`-step run.
pub fn total_repeats(total: usize, cfg: &EnergyConfig) -> usize {
    (1..=total)
        .map(|t| guidance_schedule(t, total, cfg).repeats)
        .sum()
}

/// Energy value with per-component breakdown and the cotangent on target features.
#[derive(Debug, Clone)]
pub struct EnergyTerms {
    pub value: f64,
    /// `[edit, content, contrast, inpaint]`, unweighted, averaged over layers.
    pub components: [f64; 4],
    pub cotangent: FeatureMaps,
    pub diagnostics: Vec<String>,
}

/// Value and gradient of the energy with respect to the target latents.
#[derive(Debug, Clone)]
pub struct EnergyEval {
    pub value: f64,
    pub components: [f64; 4],
    pub grad: LatentGrid,
    pub diagnostics: Vec<String>,
}

const NORM_EPS: f64 = 1e-12;

/// `cos(a, b)` and its gradient with respect to `a`.
fn cosine_and_grad(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return (0.0, vec![0.0; a.len()]);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let cos = dot / (na * nb);
    let grad = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / (na * nb) - cos * x / (na * na))
        .collect();
    (cos, grad)
}

fn region_at(m: &Mask, h: usize, w: usize) -> Mask {
    let r = m.resample(h, w, ResamplePolicy::Nearest);
    if r.is_empty() && !m.is_empty() {
        m.resample(h, w, ResamplePolicy::AnyOverlap)
    } else {
        r
    }
}

fn indices(m: &Mask) -> Vec<usize> {
    m.as_slice()
        .iter()
        .enumerate()
        .filter_map(|(i, &b)| b.then_some(i))
        .collect()
}

/// Adds `sign/n · ∂cos(tgt_i, ref_i)/∂tgt_i` for every selected token into `cot`
/// and returns the mean cosine.
fn mean_cosine(
    tgt: &Matrix,
    reference: impl Fn(usize) -> Vec<f64>,
    idx: &[usize],
    sign: f64,
    cot: &mut Matrix,
) -> f64 {
    let n = idx.len() as f64;
    let mut total = 0.0;
    for &i in idx {
        let (c, g) = cosine_and_grad(tgt.row(i), &reference(i));
        total += c;
        for (o, gv) in cot.row_mut(i).iter_mut().zip(g) {
            *o += sign * gv / n;
        }
    }
    total / n
}

/// Energy of target features against manipulated-branch features.
pub fn energy_from_features(
    f_tgt: &FeatureMaps,
    f_man: &FeatureMaps,
    masks: &RegionMaskSet,
    cfg: &EnergyConfig,
) -> Result<EnergyTerms> {
    if f_tgt.maps.len() != f_man.maps.len() {
        return Err(Error::Shape(
            "target and manipulated feature taps differ".into(),
        ));
    }
    let k = cfg.weights();
    let mut cotangent = f_tgt.zeros_like();
    let mut components = [0.0; 4];
    let mut diagnostics = Vec::new();
    let layers = f_tgt.maps.len().max(1) as f64;
    const NAMES: [&str; 4] = ["edit", "content", "contrast", "inpaint"];

    for (li, (mt, mm)) in f_tgt.maps.iter().zip(&f_man.maps).enumerate() {
        let (h, w) = (mt.height, mt.width);
        if (mm.height, mm.width) != (h, w) || mt.features.rows() != mm.features.rows() {
            return Err(Error::Shape(format!(
                "feature tap {li} shapes differ between branches"
            )));
        }
        let tgt = &mt.features;
        let man = &mm.features;
        let m_new = region_at(&masks.m_new, h, w);
        let objects = region_at(&masks.m_old, h, w).union(&m_new);
        let m_ipt = region_at(&masks.m_ipt, h, w);
        let ring = m_ipt.dilate(cfg.ring_radius).minus(&m_ipt.union(&objects));

        let regions = [
            indices(&m_new),
            indices(&objects.complement()),
            indices(&m_ipt),
            indices(&m_ipt),
        ];
        let ring_idx = indices(&ring);
        let cot = &mut cotangent.maps[li].features;

        for (c, region) in regions.iter().enumerate() {
            if k[c] == 0.0 {
                continue;
            }
            if region.is_empty() || (c == 3 && ring_idx.is_empty()) {
                diagnostics.push(format!("layer {li}: empty region for {} term", NAMES[c]));
                continue;
            }
            let mut local = Matrix::zeros(tgt.rows(), tgt.cols());
            let value = match c {
                // 1 - mean cos against the same token of the manipulated branch
                0 | 1 => 1.0 - mean_cosine(tgt, |i| man.row(i).to_vec(), region, -1.0, &mut local),
                2 => mean_cosine(tgt, |i| man.row(i).to_vec(), region, 1.0, &mut local),
                _ => {
                    let mut mean = vec![0.0; man.cols()];
                    for &j in &ring_idx {
                        for (m, v) in mean.iter_mut().zip(man.row(j)) {
                            *m += v / ring_idx.len() as f64;
                        }
                    }
                    1.0 - mean_cosine(tgt, |_| mean.clone(), region, -1.0, &mut local)
                }
            };
            components[c] += value / layers;
            cot.add_assign(&local.scale(k[c] / layers));
        }
    }
    let value = components.iter().zip(k).map(|(e, w)| e * w).sum();
    Ok(EnergyTerms {
        value,
        components,
        cotangent,
        diagnostics,
    })
}

/// Evaluates the energy and its gradient at `z_tgt`. Costs
/// [`FORWARDS_PER_REPEAT`] backend forwards.
#[allow(clippy::too_many_arguments)]
pub fn energy(
    backend: &dyn Denoiser,
    cond: &Conditioning,
    z_tgt: &LatentGrid,
    z_man: &LatentGrid,
    masks: &RegionMaskSet,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &EnergyConfig,
) -> Result<EnergyEval> {
    z_tgt.check_dims(z_man, "energy latents")?;
    let plain = AttentionDirectives::plain();
    let man = backend.predict(cond, z_man, t, sched, &plain)?;
    let tgt = backend.predict(cond, z_tgt, t, sched, &plain)?;
    let (c, h, w) = z_tgt.dims();
    if cfg.weights().iter().all(|&k| k == 0.0) {
        return Ok(EnergyEval {
            value: 0.0,
            components: [0.0; 4],
            grad: LatentGrid::zeros(c, h, w),
            diagnostics: Vec::new(),
        });
    }
    let terms = energy_from_features(&tgt.features, &man.features, masks, cfg)?;
    let grad = backend.feature_vjp(cond, z_tgt, t, sched, &terms.cotangent)?;
    Ok(EnergyEval {
        value: terms.value,
        components: terms.components,
        grad,
        diagnostics: terms.diagnostics,
    })
}

/// Result of the descent repeats at one step.
#[derive(Debug, Clone)]
pub struct GsnOutcome {
    pub latents: LatentGrid,
    /// Energy before each repeat.
    pub energies: Vec<f64>,
    /// Set when a non-finite gradient stopped the step; `latents` is then the input.
    pub aborted: Option<String>,
    pub diagnostics: Vec<String>,
}

/// `repeats` rounds of `z ← z - η·∇E(z, z_man)`.
#[allow(clippy::too_many_arguments)]
pub fn gsn_update(
    backend: &dyn Denoiser,
    cond: &Conditioning,
    z_tgt: &LatentGrid,
    z_man: &LatentGrid,
    masks: &RegionMaskSet,
    t: usize,
    sched: &NoiseSchedule,
    cfg: &EnergyConfig,
    repeats: usize,
) -> Result<GsnOutcome> {
    let mut z = z_tgt.clone();
    let mut energies = Vec::with_capacity(repeats);
    let mut diagnostics = Vec::new();
    for r in 0..repeats {
        let eval = energy(backend, cond, &z, z_man, masks, t, sched, cfg)?;
        energies.push(eval.value);
        diagnostics.extend(eval.diagnostics);
        if !eval.grad.is_finite() || !eval.value.is_finite() {
            let msg = format!(
                "non-finite energy gradient at step {t}, repeat {r}; latents left unchanged"
            );
            log::warn!("{msg}");
            return Ok(GsnOutcome {
                latents: z_tgt.clone(),
                energies,
                aborted: Some(msg),
                diagnostics,
            });
        }
        z.axpy(-cfg.eta, &eval.grad)?;
    }
    Ok(GsnOutcome {
        latents: z,
        energies,
        aborted: None,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::FeatureMap;
    use crate::edit::{derive_mask_set, EditTransform};

    fn schedule_pair(t: usize, total: usize) -> (bool, usize) {
        let s = guidance_schedule(t, total, &EnergyConfig::default());
        (s.apply, s.repeats)
    }

    #[test]
    fn sixteen_step_schedule_points() {
        assert_eq!(schedule_pair(2, 16), (true, 1));
        assert_eq!(schedule_pair(12, 16), (false, 0));
        // calibrated convention: position 7 is odd, so step 8 is skipped
        assert_eq!(schedule_pair(8, 16), (false, 0));
        assert_eq!(schedule_pair(9, 16), (true, 3));
    }

    #[test]
    fn schedule_totals_reconcile_with_forward_counts() {
        let cfg = EnergyConfig::default();
        for (steps, repeats) in [(8, 2), (16, 8), (50, 28)] {
            assert_eq!(total_repeats(steps, &cfg), repeats, "T = {steps}");
        }
        let first = EnergyConfig {
            count_from: ScheduleOrigin::FirstStep,
            ..cfg
        };
        for (steps, repeats) in [(8, 2), (16, 8), (50, 28)] {
            assert_eq!(total_repeats(steps, &first), repeats, "T = {steps}");
        }
        assert_eq!(
            guidance_schedule(8, 16, &first),
            GuidanceStep {
                apply: true,
                repeats: 3
            }
        );
    }

    #[test]
    fn config_validation() {
        assert!(EnergyConfig::default().validate().is_ok());
        for bad in [
            EnergyConfig {
                k_edit: -1.0,
                ..Default::default()
            },
            EnergyConfig {
                eta: 0.0,
                ..Default::default()
            },
            EnergyConfig {
                dense_frac: 0.5,
                ..Default::default()
            },
            EnergyConfig {
                cutoff_frac: 1.5,
                ..Default::default()
            },
            EnergyConfig {
                repeats: 0,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn cosine_gradient_matches_differences() {
        let a = [0.3, -1.2, 0.7];
        let b = [1.0, 0.4, -0.2];
        let (_, g) = cosine_and_grad(&a, &b);
        let h = 1e-6;
        for i in 0..3 {
            let mut p = a;
            let mut m = a;
            p[i] += h;
            m[i] -= h;
            let fd = (cosine_and_grad(&p, &b).0 - cosine_and_grad(&m, &b).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-9);
        }
    }

    fn features(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> FeatureMaps {
        FeatureMaps {
            maps: vec![FeatureMap {
                layer: 0,
                height: h,
                width: w,
                features: Matrix::from_fn(h * w, 4, f),
            }],
        }
    }

    #[test]
    fn identical_features_give_zero_edit_and_content() {
        let m = Mask::rect(8, 8, 1, 1, 3, 3);
        let masks = derive_mask_set(&m, &EditTransform::translate(3, 2), None).unwrap();
        let f = features(8, 8, |r, c| ((r * 7 + c * 3) as f64 * 0.11).sin() + 0.1);
        let terms = energy_from_features(&f, &f, &masks, &EnergyConfig::default()).unwrap();
        assert!(terms.components[0].abs() < 1e-12);
        assert!(terms.components[1].abs() < 1e-12);
        // contrast sees identical features inside m_ipt: cosine 1
        assert!((terms.components[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_energy() {
        let m = Mask::rect(8, 8, 1, 1, 3, 3);
        let masks = derive_mask_set(&m, &EditTransform::translate(3, 2), None).unwrap();
        let a = features(8, 8, |r, c| (r + c) as f64);
        let b = features(8, 8, |r, c| (r * c) as f64 + 1.0);
        let cfg = EnergyConfig {
            k_edit: 0.0,
            k_content: 0.0,
            k_contrast: 0.0,
            k_inpaint: 0.0,
            ..Default::default()
        };
        let terms = energy_from_features(&a, &b, &masks, &cfg).unwrap();
        assert_eq!(terms.value, 0.0);
        assert!(terms.cotangent.maps[0]
            .features
            .as_slice()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn empty_regions_are_reported_not_fatal() {
        let m = Mask::rect(8, 8, 1, 1, 3, 3);
        let masks = derive_mask_set(&m, &EditTransform::translate(0, 0), None).unwrap();
        let f = features(8, 8, |r, c| (r + c) as f64 + 1.0);
        let terms = energy_from_features(&f, &f, &masks, &EnergyConfig::default()).unwrap();
        assert!(terms.diagnostics.iter().any(|d| d.contains("contrast")));
        assert!(terms.diagnostics.iter().any(|d| d.contains("inpaint")));
        assert!(terms.value.is_finite());
    }
}

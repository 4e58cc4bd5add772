//! The three-branch anchored sampling loop.
//!
//! Per step `t = T..1`:
//!
//! 1. draw one `ε`, noise the source, manipulated and output latents with it,
//! 2. run the guidance repeats on the target latents (when scheduled),
//! 3. predict on the manipulated branch, then on the source branch while
//!    capturing K/V, then on the target branch with those K/V injected and the
//!    leak mask `m_old ∪ m_new ∪ m_sim` applied,
//! 4. turn both predictions into clean-latent estimates and blend
//!    `z0_out = z0_man + (ẑ_tgt - ẑ_man)·blur(1 - m_new)`, unmasked for the
//!    last `unmasked_tail` steps.
//!
//! `m_sim` is extracted from the target-branch scores at step `t` and used by
//! the leak mask at step `t - 1`.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{extract_sim_mask, AttentionDirectives, DEFAULT_DEGENERACY_GUARD};
use crate::backend::{BackendSpec, Conditioning, CountingDenoiser, Denoiser};
use crate::dump::LatentDump;
use crate::edit::{derive_mask_set, make_manipulated_image, EditRequest, RegionMaskSet};
use crate::error::{Error, Result};
use crate::guidance::{gsn_update, guidance_schedule, EnergyConfig, GuidanceStep};
use crate::image::Image;
use crate::latent::LatentGrid;
use crate::mask::{Mask, ResamplePolicy, SoftMask};
use crate::schedule::{fdp, rgp_predict_x0, NoiseSchedule, ScheduleConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub schedule: ScheduleConfig,
    /// Final steps that blend without the mask.
    pub unmasked_tail: usize,
    pub blur_kernel: usize,
    pub sim_threshold: f64,
    /// Divide the averaged score map by its maximum before thresholding.
    pub sim_normalize: bool,
    pub seed: u64,
    pub backend: BackendSpec,
    pub guidance: EnergyConfig,
    /// Decode a preview every this many steps (0 disables previews).
    pub preview_every: usize,
    /// Run the source branch and inject its K/V into the target branch.
    pub kv_injection: bool,
    pub leak_proof: bool,
    pub degeneracy_guard: f64,
    /// Directory for per-step latent dumps.
    pub debug_dump: Option<PathBuf>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            unmasked_tail: 2,
            blur_kernel: 9,
            sim_threshold: 0.1,
            sim_normalize: true,
            seed: 0,
            backend: BackendSpec::default(),
            guidance: EnergyConfig::default(),
            preview_every: 4,
            kv_injection: true,
            leak_proof: true,
            degeneracy_guard: DEFAULT_DEGENERACY_GUARD,
            debug_dump: None,
        }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            schedule: ScheduleConfig::with_steps(steps),
            ..Self::default()
        }
    }

    pub fn steps(&self) -> usize {
        self.schedule.inference_steps
    }

    pub fn validate(&self) -> Result<()> {
        let steps = self.steps();
        if !(1 <= self.unmasked_tail && self.unmasked_tail < steps) {
            return Err(Error::Config(format!(
                "unmasked_tail must satisfy 1 <= tail < steps, got {} with {steps} steps",
                self.unmasked_tail
            )));
        }
        if self.blur_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "blur_kernel must be odd, got {}",
                self.blur_kernel
            )));
        }
        if !(self.sim_threshold > 0.0 && self.sim_threshold < 1.0) {
            return Err(Error::Config(format!(
                "sim_threshold must lie in (0, 1), got {}",
                self.sim_threshold
            )));
        }
        if !(self.degeneracy_guard > 0.0 && self.degeneracy_guard <= 1.0) {
            return Err(Error::Config("degeneracy_guard must lie in (0, 1]".into()));
        }
        if self.guidance.enabled {
            self.guidance.validate()?;
        }
        Ok(())
    }
}

/// Diagnostics recorded for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub alpha_bar: f64,
    pub guidance_repeats: usize,
    /// Energy before each guidance repeat.
    pub energies: Vec<f64>,
    pub guidance_aborted: bool,
    /// Leak-mask coverage of the pixel grid used at this step.
    pub leak_coverage: f64,
    /// Layers where the degeneracy guard disabled leak masking.
    pub leak_skipped_layers: usize,
    /// `m_sim` pixels used at this step.
    pub sim_pixels: usize,
    /// `m_sim` pixels extracted at this step, for the next one.
    pub next_sim_pixels: usize,
    pub masked_blend: bool,
    pub max_abs_delta: f64,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SamplerReport {
    pub nfe: usize,
    pub steps: Vec<StepLog>,
    pub latency_secs: f64,
    #[serde(skip)]
    pub output: Image,
    #[serde(skip)]
    pub output_latent: LatentGrid,
    /// Final region masks, including the last extracted `m_sim`.
    #[serde(skip)]
    pub masks: Option<RegionMaskSet>,
}

/// Read-only view of the loop state after a step has finished.
pub struct StepEvent<'a> {
    pub t: usize,
    pub steps: usize,
    /// Steps finished so far.
    pub done: usize,
    pub eps: &'a LatentGrid,
    pub z0_src: &'a LatentGrid,
    pub z0_man: &'a LatentGrid,
    pub z_t_src: Option<&'a LatentGrid>,
    pub z_t_man: &'a LatentGrid,
    pub z_t_tgt: &'a LatentGrid,
    pub z0_out: &'a LatentGrid,
    pub log: &'a StepLog,
    pub preview: Option<&'a Image>,
}

pub trait StepObserver {
    fn on_step(&mut self, event: &StepEvent<'_>);
}

impl<F: FnMut(&StepEvent<'_>)> StepObserver for F {
    fn on_step(&mut self, event: &StepEvent<'_>) {
        self(event)
    }
}

/// Blends the clean-latent estimates.
///
/// `keep` is `1 - m_new` at latent resolution, already blurred. For
/// `t <= unmasked_tail` the mask is ignored.
pub fn blend_step(
    z0_man: &LatentGrid,
    z0_tgt_hat: &LatentGrid,
    z0_man_hat: &LatentGrid,
    keep: &SoftMask,
    t: usize,
    unmasked_tail: usize,
) -> Result<LatentGrid> {
    z0_man.check_dims(z0_tgt_hat, "blend")?;
    z0_man.check_dims(z0_man_hat, "blend")?;
    let (c, h, w) = z0_man.dims();
    if keep.dims() != (h, w) {
        return Err(Error::Shape(format!(
            "blend mask is {:?}, latents are {h}x{w}",
            keep.dims()
        )));
    }
    let masked = t > unmasked_tail;
    let mut out = z0_man.clone();
    let plane = h * w;
    let (tg, mn) = (z0_tgt_hat.as_slice(), z0_man_hat.as_slice());
    for (i, o) in out.as_mut_slice().iter_mut().enumerate() {
        let d = tg[i] - mn[i];
        *o += if masked {
            d * keep.as_slice()[i % plane]
        } else {
            d
        };
    }
    debug_assert_eq!(out.len(), c * plane);
    Ok(out)
}

/// `blur(1 - m_new)` at latent resolution.
pub fn blend_mask(
    m_new: &Mask,
    latent_h: usize,
    latent_w: usize,
    kernel: usize,
) -> Result<SoftMask> {
    let keep = m_new
        .resample(latent_h, latent_w, ResamplePolicy::Nearest)
        .complement()
        .to_soft();
    keep.blur(kernel, kernel as f64 / 3.0)
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at_stage(name))
}

fn check_finite(name: &str, z: &LatentGrid) -> Result<()> {
    if z.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name.into()).at_stage(name))
    }
}

/// Runs an edit. See the module documentation for the loop.
pub fn run_edit(
    request: &EditRequest,
    cfg: &SamplerConfig,
    backend: &dyn Denoiser,
) -> Result<SamplerReport> {
    run_edit_observed(request, cfg, backend, &mut |_: &StepEvent<'_>| {})
}

pub fn run_edit_observed(
    request: &EditRequest,
    cfg: &SamplerConfig,
    backend: &dyn Denoiser,
    observer: &mut dyn StepObserver,
) -> Result<SamplerReport> {
    let started = Instant::now();
    stage("config", cfg.validate())?;
    let info = backend.info();
    stage("request", request.validate(info.latent_downscale))?;
    let sched = stage("schedule", NoiseSchedule::build(&cfg.schedule))?;
    let steps = sched.steps();

    let counter = CountingDenoiser::new(backend);
    let net: &dyn Denoiser = &counter;

    let mut masks = stage(
        "masks",
        derive_mask_set(&request.object_mask, &request.transform, None),
    )?;
    let manipulated = stage(
        "pixel manipulation",
        make_manipulated_image(&request.source, &request.object_mask, &request.transform),
    )?;
    let z0_src = stage("encode", net.encode(&request.source))?;
    let z0_man = stage("encode", net.encode(&manipulated))?;
    let (c, lh, lw) = z0_src.dims();
    let keep = stage(
        "blend mask",
        blend_mask(&masks.m_new, lh, lw, cfg.blur_kernel),
    )?;
    let cond = Conditioning::new(z0_src.clone());
    let dumper = cfg.debug_dump.as_ref().map(LatentDump::new);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z0_out = z0_man.clone();
    let mut sim = Mask::empty(masks.m_new.height(), masks.m_new.width());
    let mut logs = Vec::with_capacity(steps);

    for t in (1..=steps).rev() {
        let eps = LatentGrid::randn(c, lh, lw, &mut rng);
        masks = masks.with_sim(&sim);
        let z_t_man = stage("forward diffusion", fdp(&z0_man, &eps, t, &sched))?;
        let z_t_src = if cfg.kv_injection {
            Some(stage("forward diffusion", fdp(&z0_src, &eps, t, &sched))?)
        } else {
            None
        };
        let mut z_t_tgt = stage("forward diffusion", fdp(&z0_out, &eps, t, &sched))?;

        let plan = if cfg.guidance.enabled {
            guidance_schedule(t, steps, &cfg.guidance)
        } else {
            GuidanceStep {
                apply: false,
                repeats: 0,
            }
        };
        let mut log = StepLog {
            t,
            alpha_bar: sched.alpha_bar(t)?,
            guidance_repeats: plan.repeats,
            energies: Vec::new(),
            guidance_aborted: false,
            leak_coverage: 0.0,
            leak_skipped_layers: 0,
            sim_pixels: masks.m_sim.count(),
            next_sim_pixels: 0,
            masked_blend: t > cfg.unmasked_tail,
            max_abs_delta: 0.0,
            diagnostics: Vec::new(),
        };
        if plan.apply {
            let g = stage(
                "guidance",
                gsn_update(
                    net,
                    &cond,
                    &z_t_tgt,
                    &z_t_man,
                    &masks,
                    t,
                    &sched,
                    &cfg.guidance,
                    plan.repeats,
                ),
            )?;
            log.energies = g.energies;
            log.guidance_aborted = g.aborted.is_some();
            log.diagnostics.extend(g.diagnostics);
            log.diagnostics.extend(g.aborted);
            z_t_tgt = g.latents;
        }

        let man = stage(
            "manipulated branch",
            net.predict(&cond, &z_t_man, t, &sched, &AttentionDirectives::plain()),
        )?;
        let mut directives = match &z_t_src {
            Some(z) => {
                let src = stage(
                    "source branch",
                    net.predict(&cond, z, t, &sched, &AttentionDirectives::capture()),
                )?;
                AttentionDirectives::inject(src.capture.kv())
            }
            None => AttentionDirectives::plain(),
        }
        .with_score_tap();
        directives.degeneracy_guard = cfg.degeneracy_guard;
        if cfg.leak_proof {
            let leak = masks.leak_union();
            log.leak_coverage = leak.coverage();
            directives = directives.with_leak_mask(leak);
        }
        let tgt = stage(
            "target branch",
            net.predict(&cond, &z_t_tgt, t, &sched, &directives),
        )?;
        log.leak_skipped_layers = tgt.capture.skipped_leak_layers();

        let z0_man_hat = stage(
            "clean estimate",
            rgp_predict_x0(&z_t_man, &man.eps, t, &sched),
        )?;
        let z0_tgt_hat = stage(
            "clean estimate",
            rgp_predict_x0(&z_t_tgt, &tgt.eps, t, &sched),
        )?;
        check_finite("manipulated clean estimate", &z0_man_hat)?;
        check_finite("target clean estimate", &z0_tgt_hat)?;
        z0_out = stage(
            "blend",
            blend_step(
                &z0_man,
                &z0_tgt_hat,
                &z0_man_hat,
                &keep,
                t,
                cfg.unmasked_tail,
            ),
        )?;
        check_finite("output latents", &z0_out)?;
        log.max_abs_delta = z0_tgt_hat.sub(&z0_man_hat)?.max_abs();

        let extracted = stage(
            "similar-object extraction",
            extract_sim_mask(
                &tgt.capture.score_taps(),
                &masks,
                cfg.sim_threshold,
                cfg.sim_normalize,
            ),
        )?;
        sim = extracted.mask;
        log.next_sim_pixels = sim.count();

        if let Some(d) = &dumper {
            stage(
                "debug dump",
                d.write_step(t, &[("z0_out", &z0_out), ("z_t_tgt", &z_t_tgt)]),
            )?;
        }
        let done = steps - t + 1;
        let preview = if cfg.preview_every > 0 && done % cfg.preview_every == 0 && t > 1 {
            Some(stage("preview", net.decode(&z0_out))?)
        } else {
            None
        };
        observer.on_step(&StepEvent {
            t,
            steps,
            done,
            eps: &eps,
            z0_src: &z0_src,
            z0_man: &z0_man,
            z_t_src: z_t_src.as_ref(),
            z_t_man: &z_t_man,
            z_t_tgt: &z_t_tgt,
            z0_out: &z0_out,
            log: &log,
            preview: preview.as_ref(),
        });
        log::debug!("step {t}: nfe so far {}", counter.count());
        logs.push(log);
    }

    let output = stage("decode", net.decode(&z0_out))?;
    Ok(SamplerReport {
        nfe: counter.count(),
        steps: logs,
        latency_secs: started.elapsed().as_secs_f64(),
        output,
        output_latent: z0_out,
        masks: Some(masks.with_sim(&sim)),
    })
}

/// Forward count a run with `cfg` makes: three (or two without the source
/// branch) per step plus two per guidance repeat.
pub fn expected_nfe(cfg: &SamplerConfig) -> usize {
    let steps = cfg.steps();
    let per_step = if cfg.kv_injection { 3 } else { 2 };
    let guidance = if cfg.guidance.enabled {
        crate::guidance::total_repeats(steps, &cfg.guidance) * crate::guidance::FORWARDS_PER_REPEAT
    } else {
        0
    };
    per_step * steps + guidance
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::{ToyBackend, ToyConfig};
    use crate::edit::EditTransform;

    fn fixture() -> (Image, Mask) {
        let mut img = Image::filled(32, 32, [0.2, 0.5, 0.3]);
        let m = Mask::rect(32, 32, 8, 8, 8, 8);
        img.paint(&m, [0.9, 0.1, 0.1]);
        (img, m)
    }

    #[test]
    fn blend_examples() {
        let zm = LatentGrid::filled(1, 2, 2, 1.0);
        let tg = LatentGrid::from_vec(1, 2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let mh = LatentGrid::filled(1, 2, 2, 2.0);
        let hard = Mask::rect(2, 2, 0, 0, 1, 1).complement().to_soft();
        let out = blend_step(&zm, &tg, &mh, &hard, 5, 2).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 3.0, 4.0, 5.0]);
        let tail = blend_step(&zm, &tg, &mh, &hard, 1, 2).unwrap();
        assert_eq!(tail.as_slice(), &[2.0, 3.0, 4.0, 5.0]);
        let open = blend_step(
            &zm,
            &tg,
            &mh,
            &SoftMask::from_vec(2, 2, vec![1.0; 4]).unwrap(),
            5,
            2,
        )
        .unwrap();
        assert_eq!(open, tail);
        assert!(blend_step(&zm, &tg, &mh, &SoftMask::zeros(3, 3), 5, 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        let bad = SamplerConfig {
            unmasked_tail: 16,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SamplerConfig {
            blur_kernel: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn nfe_matches_expected_counts() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let (img, m) = fixture();
        let req = EditRequest::new(img, m, EditTransform::translate(8, 0));
        for steps in [8, 16] {
            let cfg = SamplerConfig::with_steps(steps);
            let report = run_edit(&req, &cfg, &backend).unwrap();
            assert_eq!(report.nfe, expected_nfe(&cfg));
        }
        let cfg = SamplerConfig::with_steps(16);
        assert_eq!(expected_nfe(&cfg), 64);
    }

    #[test]
    fn errors_carry_the_stage() {
        let backend = ToyBackend::new(ToyConfig::default()).unwrap();
        let (img, _) = fixture();
        let req = EditRequest::new(img, Mask::empty(32, 32), EditTransform::translate(8, 0));
        let err = run_edit(&req, &SamplerConfig::default(), &backend).unwrap_err();
        assert!(matches!(err, Error::Stage { .. }), "{err}");
    }
}

//! Checks any [`Denoiser`] against the behaviour the sampler relies on.

use serde::Serialize;

use super::{Conditioning, Denoiser};
use crate::attention::AttentionDirectives;
use crate::bench::psnr;
use crate::error::Result;
use crate::image::Image;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConformanceReport {
    pub checks: Vec<Check>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the contract checks on `image` at step `t`.
///
/// `psnr_floor` is the codec round-trip floor the backend declares for this image.
pub fn check_backend(
    backend: &dyn Denoiser,
    image: &Image,
    sched: &NoiseSchedule,
    t: usize,
    psnr_floor: f64,
) -> Result<ConformanceReport> {
    let info = backend.info();
    let mut checks = Vec::new();

    let z0 = backend.encode(image)?;
    let expected_dims = (
        info.latent_channels,
        image.height() / info.latent_downscale,
        image.width() / info.latent_downscale,
    );
    checks.push(Check {
        name: "latent shape",
        passed: z0.dims() == expected_dims,
        detail: format!("{:?} (expected {:?})", z0.dims(), expected_dims),
    });

    let decoded = backend.decode(&z0)?;
    let p = psnr(image, &decoded)?;
    checks.push(Check {
        name: "codec round trip",
        passed: p >= psnr_floor,
        detail: format!("{p:.2} dB (floor {psnr_floor} dB)"),
    });

    let cond = Conditioning::new(z0.clone());
    let z_t = z0.map(|v| 0.9 * v + 0.05);
    let directives = AttentionDirectives::capture().with_score_tap();
    let a = backend.predict(&cond, &z_t, t, sched, &directives)?;
    let b = backend.predict(&cond, &z_t, t, sched, &directives)?;
    checks.push(Check {
        name: "deterministic predict",
        passed: a.eps.bitwise_eq(&b.eps) && a.capture == b.capture && a.features == b.features,
        detail: String::new(),
    });

    checks.push(Check {
        name: "finite noise prediction",
        passed: a.eps.is_finite() && a.eps.same_dims(&z_t),
        detail: format!("{:?}", a.eps.dims()),
    });

    let (lh, lw) = (z0.height(), z0.width());
    let mut shape_ok = a.capture.layers.len() == info.layers.len();
    let mut shape_detail = Vec::new();
    for (cap, layer) in a.capture.layers.iter().zip(&info.layers) {
        let (h, w) = layer.grid(lh, lw);
        let n = h * w;
        let ok = (cap.height, cap.width) == (h, w)
            && cap
                .kv
                .as_ref()
                .is_none_or(|kv| kv.keys.rows() == n && kv.values.rows() == n)
            && (!layer.injectable || cap.kv.is_some());
        shape_ok &= ok;
        shape_detail.push(format!("{}:{h}x{w}", layer.name));
    }
    checks.push(Check {
        name: "capture shapes match layer metadata",
        passed: shape_ok,
        detail: shape_detail.join(" "),
    });

    let mut worst = 0.0f64;
    for tap in a.capture.score_taps() {
        for r in 0..tap.probs.rows() {
            let s: f64 = tap.probs.row(r).iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    checks.push(Check {
        name: "score rows are stochastic",
        passed: worst < 1e-6,
        detail: format!("max |row sum - 1| = {worst:.2e}"),
    });

    let injected = backend.predict(
        &cond,
        &z_t,
        t,
        sched,
        &AttentionDirectives::inject(a.capture.kv()),
    )?;
    let plain = backend.predict(&cond, &z_t, t, sched, &AttentionDirectives::plain())?;
    checks.push(Check {
        name: "self-injection reproduces the plain pass",
        passed: injected.eps.bitwise_eq(&plain.eps) && injected.features == plain.features,
        detail: String::new(),
    });

    let cot = a.features.clone();
    let g = backend.feature_vjp(&cond, &z_t, t, sched, &cot)?;
    checks.push(Check {
        name: "feature gradient shape",
        passed: g.same_dims(&z_t) && g.is_finite(),
        detail: format!("{:?}", g.dims()),
    });

    Ok(ConformanceReport { checks })
}

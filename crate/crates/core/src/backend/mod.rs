//! The denoiser contract the sampler runs against.
//!
//! A backend bundles a noise predictor with self-attention hooks, feature
//! taps for the guidance energy, and a latent codec. Two backends exist:
//! [`toy::ToyBackend`], a closed-form predictor used for verification, and
//! [`ldm::LdmAdapter`], the contract for a pretrained latent-diffusion UNet.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDirectives, KvPair, LeakOutcome, Matrix, ScoreTap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentGrid;
use crate::schedule::NoiseSchedule;

pub mod conformance;
pub mod ldm;
pub mod toy;

/// Static description of one self-attention layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub name: String,
    /// Token grid is the latent grid divided (rounding up) by this factor.
    pub downscale: usize,
    /// K/V of this layer are captured and injected.
    pub injectable: bool,
    /// Post-softmax scores are reported when a score tap is requested.
    pub score_tap: bool,
    /// Output features feed the guidance energy.
    pub feature_tap: bool,
}

impl LayerInfo {
    pub fn grid(&self, latent_height: usize, latent_width: usize) -> (usize, usize) {
        (
            latent_height.div_ceil(self.downscale),
            latent_width.div_ceil(self.downscale),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub latent_downscale: usize,
    pub latent_channels: usize,
    pub layers: Vec<LayerInfo>,
}

impl BackendInfo {
    pub fn injectable(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.injectable).collect()
    }
}

/// Per-job conditioning handed to every prediction.
///
/// The toy backend treats the source latent as the clean latent it believes
/// in; a pretrained backend ignores it.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub source_latent: LatentGrid,
}

impl Conditioning {
    pub fn new(source_latent: LatentGrid) -> Self {
        Self { source_latent }
    }
}

/// Output features of one tapped layer, `tokens × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub features: Matrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureMaps {
    pub maps: Vec<FeatureMap>,
}

impl FeatureMaps {
    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            maps: self
                .maps
                .iter()
                .map(|m| FeatureMap {
                    features: Matrix::zeros(m.features.rows(), m.features.cols()),
                    ..m.clone()
                })
                .collect(),
        }
    }
}

/// Everything recorded from one layer during a prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub kv: Option<KvPair>,
    pub scores: Option<Matrix>,
    pub leak: LeakOutcome,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionCapture {
    pub layers: Vec<LayerCapture>,
}

impl AttentionCapture {
    /// Captured K/V in layer order, ready for injection.
    pub fn kv(&self) -> Vec<Option<KvPair>> {
        self.layers.iter().map(|l| l.kv.clone()).collect()
    }

    pub fn score_taps(&self) -> Vec<ScoreTap> {
        self.layers
            .iter()
            .filter_map(|l| {
                l.scores.as_ref().map(|s| ScoreTap {
                    height: l.height,
                    width: l.width,
                    probs: s.clone(),
                })
            })
            .collect()
    }

    pub fn skipped_leak_layers(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.leak, LeakOutcome::Skipped { .. }))
            .count()
    }
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub eps: LatentGrid,
    pub capture: AttentionCapture,
    pub features: FeatureMaps,
}

/// A latent-diffusion denoiser with attention hooks.
///
/// Implementations are read-only after construction and shared across jobs;
/// every per-call state lives in the arguments and the returned values.
pub trait Denoiser: Send + Sync {
    fn info(&self) -> BackendInfo;

    fn encode(&self, image: &Image) -> Result<LatentGrid>;

    fn decode(&self, latent: &LatentGrid) -> Result<Image>;

    /// Predicts the noise in `z_t` at step `t`, applying `directives` to the
    /// self-attention layers.
    fn predict(
        &self,
        cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        directives: &AttentionDirectives,
    ) -> Result<Prediction>;

    /// Vector-Jacobian product of the plain-mode feature taps at `z_t`:
    /// returns `∂⟨features(z_t), cotangent⟩ / ∂z_t`.
    fn feature_vjp(
        &self,
        cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        cotangent: &FeatureMaps,
    ) -> Result<LatentGrid>;
}

/// Counts forward evaluations made through it.
///
/// Wraps a shared backend for the duration of one job; every `predict` call
/// increments the counter, nothing else does.
pub struct CountingDenoiser<'a> {
    inner: &'a dyn Denoiser,
    calls: AtomicUsize,
}

impl<'a> CountingDenoiser<'a> {
    pub fn new(inner: &'a dyn Denoiser) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Denoiser for CountingDenoiser<'_> {
    fn info(&self) -> BackendInfo {
        self.inner.info()
    }

    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        self.inner.encode(image)
    }

    fn decode(&self, latent: &LatentGrid) -> Result<Image> {
        self.inner.decode(latent)
    }

    fn predict(
        &self,
        cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        directives: &AttentionDirectives,
    ) -> Result<Prediction> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(cond, z_t, t, sched, directives)
    }

    fn feature_vjp(
        &self,
        cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        cotangent: &FeatureMaps,
    ) -> Result<LatentGrid> {
        self.inner.feature_vjp(cond, z_t, t, sched, cotangent)
    }
}

/// Backend selection as it appears in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case")]
pub enum BackendSpec {
    Toy(#[serde(default)] toy::ToyConfig),
    Ldm(ldm::LdmConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Toy(toy::ToyConfig::default())
    }
}

impl BackendSpec {
    /// Parses `"toy"` or `"ldm"`; the ldm weight path comes from `weights`.
    pub fn from_id(id: &str, weights: Option<std::path::PathBuf>) -> Result<Self> {
        match id {
            "toy" => Ok(BackendSpec::Toy(toy::ToyConfig::default())),
            "ldm" => Ok(BackendSpec::Ldm(ldm::LdmConfig {
                weights,
                ..Default::default()
            })),
            other => Err(Error::Config(format!(
                "unknown backend `{other}` (expected toy or ldm)"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            BackendSpec::Toy(_) => "toy",
            BackendSpec::Ldm(_) => "ldm",
        }
    }

    pub fn instantiate(&self) -> Result<Arc<dyn Denoiser>> {
        match self {
            BackendSpec::Toy(cfg) => Ok(Arc::new(toy::ToyBackend::new(cfg.clone())?)),
            BackendSpec::Ldm(cfg) => Ok(Arc::new(ldm::LdmAdapter::open(cfg)?)),
        }
    }
}

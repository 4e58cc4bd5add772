#![allow(dead_code)]

use std::sync::Mutex;

use anchor_edit::attention::{AttentionDirectives, AttentionMode};
use anchor_edit::backend::toy::{ToyBackend, ToyConfig};
use anchor_edit::backend::{BackendInfo, Conditioning, Denoiser, FeatureMaps, Prediction};
use anchor_edit::{Image, LatentGrid, Mask, NoiseSchedule, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Image made of 8×8 constant blocks, so the toy codec reproduces it exactly.
pub fn blocky_image(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::filled(h, w, [0.0; 3]);
    for by in 0..h / 8 {
        for bx in 0..w / 8 {
            let rgb = [0u8; 3].map(|_| rng.random_range(0..=255u8) as f64 / 255.0);
            for y in 0..8 {
                for x in 0..8 {
                    img.set_pixel(by * 8 + y, bx * 8 + x, rgb);
                }
            }
        }
    }
    img
}

/// 64×64 scene with a block-aligned 16×16 object at (16, 16).
pub fn scene() -> (Image, Mask) {
    let mut img = blocky_image(64, 64, 11);
    let object = Mask::rect(64, 64, 16, 16, 16, 16);
    img.paint(&object, [0.9, 0.15, 0.1]);
    (img, object)
}

pub fn toy() -> ToyBackend {
    ToyBackend::new(ToyConfig::default()).unwrap()
}

pub fn toy_mixed(mix: f64) -> ToyBackend {
    ToyBackend::new(ToyConfig {
        mix,
        ..ToyConfig::default()
    })
    .unwrap()
}

/// One predict call as seen by [`Recorder`].
#[derive(Debug, Clone)]
pub struct Call {
    pub t: usize,
    pub mode: AttentionMode,
    pub leak: Option<Mask>,
    pub injected: bool,
}

/// Records the directives of every predict call.
pub struct Recorder<D> {
    pub inner: D,
    pub calls: Mutex<Vec<Call>>,
}

impl<D: Denoiser> Recorder<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<Call> {
        self.calls.lock().unwrap().clone()
    }
}

impl<D: Denoiser> Denoiser for Recorder<D> {
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
        self.calls.lock().unwrap().push(Call {
            t,
            mode: directives.mode,
            leak: directives.leak_mask.clone(),
            injected: directives.injected_kv.is_some(),
        });
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

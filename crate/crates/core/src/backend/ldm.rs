//! Adapter contract for a pretrained latent-diffusion UNet (SD 1.5 layout).
//!
//! The adapter owns the pieces that are fixed by the method: the pixel to
//! latent factor of 8, the VAE latent scaling constant, the mapping from
//! inference step to training timestep, and which self-attention layers are
//! injected (all decoder self-attention layers) and tapped for the
//! similar-object map (the last three decoder blocks). The network itself is
//! supplied by an [`LdmRuntime`]. No runtime ships with this crate, so
//! [`LdmAdapter::open`] reports the backend as unavailable unless one is
//! attached with [`LdmAdapter::with_runtime`].

use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{BackendInfo, Conditioning, Denoiser, FeatureMaps, LayerInfo, Prediction};
use crate::attention::AttentionDirectives;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentGrid;
use crate::schedule::NoiseSchedule;

/// Environment variable consulted for the weight path when none is configured.
pub const WEIGHTS_ENV: &str = "ANCHOR_EDIT_LDM_WEIGHTS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdmConfig {
    pub weights: Option<PathBuf>,
    pub latent_scale: f64,
    pub latent_downscale: usize,
    pub latent_channels: usize,
}

impl Default for LdmConfig {
    fn default() -> Self {
        Self {
            weights: None,
            latent_scale: 0.18215,
            latent_downscale: 8,
            latent_channels: 4,
        }
    }
}

impl LdmConfig {
    pub fn resolved_weights(&self) -> Option<PathBuf> {
        self.weights
            .clone()
            .or_else(|| std::env::var_os(WEIGHTS_ENV).map(PathBuf::from))
    }
}

/// The network behind the adapter. Latents here are unscaled VAE latents and
/// timesteps are training-schedule indices.
pub trait LdmRuntime: Send + Sync {
    fn vae_encode(&self, image: &Image) -> Result<LatentGrid>;

    fn vae_decode(&self, latent: &LatentGrid) -> Result<Image>;

    /// One UNet call. Must honour `directives` on the layers listed by
    /// [`LdmAdapter::declared_layers`], in that order.
    fn unet(
        &self,
        z_t: &LatentGrid,
        timestep: usize,
        directives: &AttentionDirectives,
    ) -> Result<Prediction>;

    fn unet_feature_vjp(
        &self,
        z_t: &LatentGrid,
        timestep: usize,
        cotangent: &FeatureMaps,
    ) -> Result<LatentGrid>;
}

pub struct LdmAdapter {
    cfg: LdmConfig,
    runtime: Arc<dyn LdmRuntime>,
}

impl LdmAdapter {
    /// Opens the adapter from configuration alone. Always fails in this
    /// build: weights can be located, but no UNet runtime is compiled in.
    pub fn open(cfg: &LdmConfig) -> Result<Self> {
        match cfg.resolved_weights() {
            None => Err(Error::BackendUnavailable(format!(
                "no latent-diffusion weights configured (set `weights` or {WEIGHTS_ENV})"
            ))),
            Some(p) if !p.exists() => Err(Error::BackendUnavailable(format!(
                "latent-diffusion weights not found at {}",
                p.display()
            ))),
            Some(p) => Err(Error::BackendUnavailable(format!(
                "weights found at {} but no latent-diffusion runtime is linked; \
                 attach one with LdmAdapter::with_runtime",
                p.display()
            ))),
        }
    }

    pub fn with_runtime(cfg: LdmConfig, runtime: Arc<dyn LdmRuntime>) -> Result<Self> {
        if cfg.latent_scale.is_nan()
            || cfg.latent_scale <= 0.0
            || cfg.latent_downscale == 0
            || cfg.latent_channels == 0
        {
            return Err(Error::Config(
                "invalid latent-diffusion adapter configuration".into(),
            ));
        }
        Ok(Self { cfg, runtime })
    }

    /// Self-attention layers of the SD 1.5 decoder, coarse to fine.
    ///
    /// Decoder blocks 1–3 each hold three transformer blocks; every one of
    /// them is injected, and all of them are score taps because they make up
    /// the last three upsampling blocks.
    pub fn declared_layers() -> Vec<LayerInfo> {
        let mut layers = Vec::new();
        for (block, downscale) in [(1usize, 4usize), (2, 2), (3, 1)] {
            for attn in 0..3 {
                layers.push(LayerInfo {
                    name: format!("up_blocks.{block}.attentions.{attn}.transformer_blocks.0.attn1"),
                    downscale,
                    injectable: true,
                    score_tap: true,
                    feature_tap: block == 1,
                });
            }
        }
        layers
    }
}

impl Denoiser for LdmAdapter {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "ldm".into(),
            latent_downscale: self.cfg.latent_downscale,
            latent_channels: self.cfg.latent_channels,
            layers: Self::declared_layers(),
        }
    }

    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        image.check_divisible(self.cfg.latent_downscale)?;
        Ok(self.runtime.vae_encode(image)?.scale(self.cfg.latent_scale))
    }

    fn decode(&self, latent: &LatentGrid) -> Result<Image> {
        self.runtime
            .vae_decode(&latent.scale(1.0 / self.cfg.latent_scale))
    }

    fn predict(
        &self,
        _cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        directives: &AttentionDirectives,
    ) -> Result<Prediction> {
        directives.validate(&self.info().injectable())?;
        self.runtime.unet(z_t, sched.training_index(t)?, directives)
    }

    fn feature_vjp(
        &self,
        _cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        cotangent: &FeatureMaps,
    ) -> Result<LatentGrid> {
        self.runtime
            .unet_feature_vjp(z_t, sched.training_index(t)?, cotangent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::AttentionCapture;
    use std::sync::Mutex;

    #[test]
    fn open_without_runtime_is_unavailable() {
        let missing = LdmConfig {
            weights: Some("/nonexistent/sd15.safetensors".into()),
            ..Default::default()
        };
        assert!(matches!(
            LdmAdapter::open(&missing),
            Err(Error::BackendUnavailable(_))
        ));

        let dir = tempfile::tempdir().unwrap();
        let present = LdmConfig {
            weights: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let err = LdmAdapter::open(&present).err().unwrap();
        assert!(err.to_string().contains("no latent-diffusion runtime"));
    }

    #[test]
    fn declared_layers_follow_decoder_layout() {
        let layers = LdmAdapter::declared_layers();
        assert_eq!(layers.len(), 9);
        assert!(layers.iter().all(|l| l.injectable && l.score_tap));
        assert_eq!(
            layers.iter().map(|l| l.downscale).collect::<Vec<_>>(),
            vec![4, 4, 4, 2, 2, 2, 1, 1, 1]
        );
    }

    struct Recorder {
        timesteps: Mutex<Vec<usize>>,
    }

    impl LdmRuntime for Recorder {
        fn vae_encode(&self, image: &Image) -> Result<LatentGrid> {
            Ok(LatentGrid::filled(
                4,
                image.height() / 8,
                image.width() / 8,
                1.0,
            ))
        }

        fn vae_decode(&self, latent: &LatentGrid) -> Result<Image> {
            let v = latent.as_slice()[0];
            Ok(Image::filled(
                latent.height() * 8,
                latent.width() * 8,
                [v; 3],
            ))
        }

        fn unet(
            &self,
            z_t: &LatentGrid,
            timestep: usize,
            _: &AttentionDirectives,
        ) -> Result<Prediction> {
            self.timesteps.lock().unwrap().push(timestep);
            Ok(Prediction {
                eps: z_t.clone(),
                capture: AttentionCapture::default(),
                features: FeatureMaps::default(),
            })
        }

        fn unet_feature_vjp(
            &self,
            z_t: &LatentGrid,
            _: usize,
            _: &FeatureMaps,
        ) -> Result<LatentGrid> {
            Ok(LatentGrid::zeros(z_t.channels(), z_t.height(), z_t.width()))
        }
    }

    #[test]
    fn adapter_scales_latents_and_maps_timesteps() {
        let rt = Arc::new(Recorder {
            timesteps: Mutex::new(Vec::new()),
        });
        let adapter = LdmAdapter::with_runtime(LdmConfig::default(), rt.clone()).unwrap();
        let z = adapter.encode(&Image::filled(16, 16, [0.0; 3])).unwrap();
        assert_eq!(z.dims(), (4, 2, 2));
        assert_eq!(z.as_slice()[0], 0.18215);
        let img = adapter.decode(&z).unwrap();
        assert!((img.pixel(0, 0)[0] - 1.0).abs() < 1e-12);

        let sched = NoiseSchedule::build(&crate::schedule::ScheduleConfig::with_steps(16)).unwrap();
        let cond = Conditioning::new(z.clone());
        adapter
            .predict(&cond, &z, 16, &sched, &AttentionDirectives::plain())
            .unwrap();
        assert_eq!(*rt.timesteps.lock().unwrap(), vec![930]);
    }
}

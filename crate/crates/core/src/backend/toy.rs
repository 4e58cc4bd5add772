//! Closed-form verification backend.
//!
//! The toy denoiser believes the clean latent is a fixed `μ` (the encoded
//! source image), so its noise prediction is
//! `ε̂ = (z_t - sqrt(ᾱ_t)·μ) / sqrt(1 - ᾱ_t)` and the one-shot clean
//! prediction recovers `μ`. Two single-head self-attention layers with seeded
//! random projections run on pooled latent tokens at two resolutions. They
//! produce the feature taps, the K/V captures and the score taps, so every
//! attention directive is exercised end to end.
//!
//! With `mix > 0` the attention output also perturbs the clean prediction,
//! `ẑ_0 = μ + mix·r(z_t)`, which makes leak masking and injection visible in
//! the sampled output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    AttentionCapture, BackendInfo, Conditioning, Denoiser, FeatureMap, FeatureMaps, LayerCapture,
    LayerInfo, Prediction,
};
use crate::attention::{
    scaled_dot_product, scaled_dot_product_backward, AttentionDirectives, AttentionMode, KvPair,
    Matrix, SdpaForward,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::LatentGrid;
use crate::mask::ResamplePolicy;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub latent_downscale: usize,
    pub embed_dim: usize,
    /// Token pooling factor of each attention layer, relative to the latent grid.
    pub layer_pools: Vec<usize>,
    pub seed: u64,
    pub mix: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            latent_downscale: 8,
            embed_dim: 8,
            layer_pools: vec![1, 2],
            seed: 7,
            mix: 0.0,
        }
    }
}

struct ToyLayer {
    pool: usize,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    w_out: Matrix,
}

pub struct ToyBackend {
    cfg: ToyConfig,
    w_in: Matrix,
    layers: Vec<ToyLayer>,
}

const CHANNELS: usize = Image::CHANNELS;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let g = LatentGrid::randn(1, rows, cols, rng);
    Matrix::from_vec(rows, cols, g.into_vec())
        .expect("sizes agree")
        .scale(1.0 / (rows as f64).sqrt())
}

/// Intermediates of one layer's forward pass.
struct LayerForward {
    grid: (usize, usize),
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    sdpa: SdpaForward,
}

impl ToyBackend {
    pub fn new(cfg: ToyConfig) -> Result<Self> {
        if cfg.latent_downscale == 0 || cfg.embed_dim == 0 || cfg.layer_pools.is_empty() {
            return Err(Error::Config(
                "toy backend needs a positive downscale, embed dimension and at least one layer"
                    .into(),
            ));
        }
        if cfg.layer_pools.contains(&0) {
            return Err(Error::Config(
                "layer pooling factors must be positive".into(),
            ));
        }
        if !cfg.mix.is_finite() {
            return Err(Error::Config("mix must be finite".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let w_in = random_matrix(CHANNELS, d, &mut rng);
        let layers = cfg
            .layer_pools
            .iter()
            .map(|&pool| ToyLayer {
                pool,
                wq: random_matrix(d, d, &mut rng),
                wk: random_matrix(d, d, &mut rng),
                wv: random_matrix(d, d, &mut rng),
                w_out: random_matrix(d, CHANNELS, &mut rng),
            })
            .collect();
        Ok(Self { cfg, w_in, layers })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    fn check_latent(&self, z: &LatentGrid) -> Result<()> {
        if z.channels() != CHANNELS || z.height() == 0 || z.width() == 0 {
            return Err(Error::Shape(format!(
                "toy backend expects {CHANNELS}-channel latents, got {:?}",
                z.dims()
            )));
        }
        Ok(())
    }

    /// Average-pools `z` into `(h/p)·(w/p)` tokens of `channels` features.
    fn tokens(z: &LatentGrid, pool: usize) -> (Matrix, (usize, usize)) {
        let (c, h, w) = z.dims();
        let (th, tw) = (h.div_ceil(pool), w.div_ceil(pool));
        let mut m = Matrix::zeros(th * tw, c);
        for ty in 0..th {
            for tx in 0..tw {
                let ys = ty * pool..((ty + 1) * pool).min(h);
                let xs = tx * pool..((tx + 1) * pool).min(w);
                let n = (ys.len() * xs.len()) as f64;
                for ch in 0..c {
                    let mut s = 0.0;
                    for y in ys.clone() {
                        for x in xs.clone() {
                            s += z.get(ch, y, x);
                        }
                    }
                    m.set(ty * tw + tx, ch, s / n);
                }
            }
        }
        (m, (th, tw))
    }

    /// Adjoint of [`Self::tokens`]: spreads token gradients back over their cells.
    fn untokens(grad: &Matrix, pool: usize, dims: (usize, usize, usize), acc: &mut LatentGrid) {
        let (c, h, w) = dims;
        let tw = w.div_ceil(pool);
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = (y / pool, x / pool);
                let ny = ((ty + 1) * pool).min(h) - ty * pool;
                let nx = ((tx + 1) * pool).min(w) - tx * pool;
                let n = (ny * nx) as f64;
                for ch in 0..c {
                    let i = acc.index(ch, y, x);
                    acc.as_mut_slice()[i] += grad.get(ty * tw + tx, ch) / n;
                }
            }
        }
    }

    fn layer_forward(
        &self,
        idx: usize,
        z: &LatentGrid,
        directives: &AttentionDirectives,
    ) -> Result<LayerForward> {
        let layer = &self.layers[idx];
        let (tok, grid) = Self::tokens(z, layer.pool);
        let x = tok.matmul(&self.w_in);
        let q = x.matmul(&layer.wq);
        let (k, v) = match directives.injected(idx) {
            Some(kv) => {
                if kv.keys.rows() != x.rows() || kv.values.rows() != x.rows() {
                    return Err(Error::Shape(format!(
                        "injected K/V for layer {idx} has {} tokens, layer has {}",
                        kv.keys.rows(),
                        x.rows()
                    )));
                }
                (kv.keys.clone(), kv.values.clone())
            }
            None => (x.matmul(&layer.wk), x.matmul(&layer.wv)),
        };
        let key_mask = directives
            .leak_mask
            .as_ref()
            .map(|m| m.resample(grid.0, grid.1, ResamplePolicy::AnyOverlap));
        let sdpa = scaled_dot_product(
            &q,
            &k,
            &v,
            key_mask.as_ref().map(|m| m.as_slice()),
            directives.degeneracy_guard,
        )?;
        Ok(LayerForward {
            grid,
            x,
            q,
            k,
            v,
            sdpa,
        })
    }

    /// Attention residual projected back to latent channels, averaged over layers.
    fn residual(&self, forwards: &[LayerForward], dims: (usize, usize, usize)) -> LatentGrid {
        let (c, h, w) = dims;
        let mut r = LatentGrid::zeros(c, h, w);
        for (layer, f) in self.layers.iter().zip(forwards) {
            let out = f.sdpa.output.matmul(&layer.w_out);
            let tw = f.grid.1;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let i = r.index(ch, y, x);
                        r.as_mut_slice()[i] += out.get((y / layer.pool) * tw + x / layer.pool, ch)
                            / forwards.len() as f64;
                    }
                }
            }
        }
        r
    }
}

impl Denoiser for ToyBackend {
    fn info(&self) -> BackendInfo {
        BackendInfo {
            name: "toy".into(),
            latent_downscale: self.cfg.latent_downscale,
            latent_channels: CHANNELS,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerInfo {
                    name: format!("attn{i}"),
                    downscale: l.pool,
                    injectable: true,
                    score_tap: true,
                    feature_tap: true,
                })
                .collect(),
        }
    }

    /// Per-channel average pooling by the latent downscale factor.
    fn encode(&self, image: &Image) -> Result<LatentGrid> {
        let f = self.cfg.latent_downscale;
        image.check_divisible(f)?;
        let (h, w) = (image.height() / f, image.width() / f);
        let mut z = LatentGrid::zeros(CHANNELS, h, w);
        let n = (f * f) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; CHANNELS];
                for yy in y * f..(y + 1) * f {
                    for xx in x * f..(x + 1) * f {
                        let p = image.pixel(yy, xx);
                        for c in 0..CHANNELS {
                            acc[c] += p[c];
                        }
                    }
                }
                for (c, a) in acc.iter().enumerate() {
                    z.set(c, y, x, a / n);
                }
            }
        }
        Ok(z)
    }

    /// Nearest-neighbour upsampling, clamped to `[0, 1]`.
    fn decode(&self, latent: &LatentGrid) -> Result<Image> {
        self.check_latent(latent)?;
        let f = self.cfg.latent_downscale;
        let (h, w) = (latent.height() * f, latent.width() * f);
        let mut data = Vec::with_capacity(h * w * CHANNELS);
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    data.push(latent.get(c, y / f, x / f).clamp(0.0, 1.0));
                }
            }
        }
        Image::new(h, w, data)
    }

    fn predict(
        &self,
        cond: &Conditioning,
        z_t: &LatentGrid,
        t: usize,
        sched: &NoiseSchedule,
        directives: &AttentionDirectives,
    ) -> Result<Prediction> {
        self.check_latent(z_t)?;
        z_t.check_dims(&cond.source_latent, "toy prior")?;
        directives.validate(&vec![true; self.layers.len()])?;
        let ab = sched.alpha_bar(t)?;

        let forwards = (0..self.layers.len())
            .map(|i| self.layer_forward(i, z_t, directives))
            .collect::<Result<Vec<_>>>()?;

        let mut capture = AttentionCapture::default();
        let mut features = FeatureMaps::default();
        for (i, f) in forwards.iter().enumerate() {
            features.maps.push(FeatureMap {
                layer: i,
                height: f.grid.0,
                width: f.grid.1,
                features: f.sdpa.output.clone(),
            });
            capture.layers.push(LayerCapture {
                layer: i,
                height: f.grid.0,
                width: f.grid.1,
                kv: (directives.mode == AttentionMode::Capture).then(|| KvPair {
                    keys: f.k.clone(),
                    values: f.v.clone(),
                }),
                scores: directives.score_tap.then(|| f.sdpa.probs.clone()),
                leak: f.sdpa.leak,
            });
        }

        let eps = if ab >= 1.0 {
            LatentGrid::zeros(CHANNELS, z_t.height(), z_t.width())
        } else {
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let mu = &cond.source_latent;
            if self.cfg.mix == 0.0 {
                z_t.zip_with(mu, |z, m| (z - a * m) / b)?
            } else {
                let clean = mu.add(&self.residual(&forwards, z_t.dims()).scale(self.cfg.mix))?;
                z_t.zip_with(&clean, |z, m| (z - a * m) / b)?
            }
        };
        Ok(Prediction {
            eps,
            capture,
            features,
        })
    }

    fn feature_vjp(
        &self,
        _cond: &Conditioning,
        z_t: &LatentGrid,
        _t: usize,
        _sched: &NoiseSchedule,
        cotangent: &FeatureMaps,
    ) -> Result<LatentGrid> {
        self.check_latent(z_t)?;
        let plain = AttentionDirectives::plain();
        let mut grad = LatentGrid::zeros(CHANNELS, z_t.height(), z_t.width());
        for map in &cotangent.maps {
            let idx = map.layer;
            let layer = self
                .layers
                .get(idx)
                .ok_or_else(|| Error::Shape(format!("no feature layer {idx}")))?;
            let f = self.layer_forward(idx, z_t, &plain)?;
            if (map.features.rows(), map.features.cols())
                != (f.sdpa.output.rows(), f.sdpa.output.cols())
            {
                return Err(Error::Shape(format!(
                    "cotangent shape mismatch on layer {idx}"
                )));
            }
            let (dq, dk, dv) =
                scaled_dot_product_backward(&f.q, &f.k, &f.v, &f.sdpa.probs, &map.features);
            let mut dx = dq.matmul_t(&layer.wq);
            dx.add_assign(&dk.matmul_t(&layer.wk));
            dx.add_assign(&dv.matmul_t(&layer.wv));
            let d_tok = dx.matmul_t(&self.w_in);
            debug_assert_eq!(f.x.rows(), d_tok.rows());
            Self::untokens(&d_tok, layer.pool, z_t.dims(), &mut grad);
        }
        Ok(grad)
    }
}

//! Self-attention control: key/value capture and injection, leak-proof
//! masking of attention scores, and similar-object mask extraction.
//!
//! Leak-proof masking hides the keys of every region that carries object
//! information (`m_old ∪ m_new ∪ m_sim`) from the target branch. The masked
//! columns of `QKᵀ` are set to `-∞` before the softmax, so no query (and in
//! particular no query inside the vacated region) can read from them.

use serde::{Deserialize, Serialize};

use crate::edit::RegionMaskSet;
use crate::error::{Error, Result};
use crate::mask::{Mask, ResamplePolicy, SoftMask};

/// Default coverage at which leak masking is skipped for a layer.
pub const DEFAULT_DEGENERACY_GUARD: f64 = 0.95;

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                for (o, b) in out.row_mut(i).iter_mut().zip(orow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimensions");
        Matrix::from_fn(self.rows, other.rows, |i, j| {
            self.row(i)
                .iter()
                .zip(other.row(j))
                .map(|(a, b)| a * b)
                .sum()
        })
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimensions");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = other.row(k);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out.row_mut(i).iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// What a branch does with its self-attention keys and values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    #[default]
    Plain,
    /// Record K and V of every injectable layer.
    Capture,
    /// Replace K and V with previously captured ones.
    Inject,
}

/// Keys and values of one attention layer (`tokens × dim` each).
#[derive(Debug, Clone, PartialEq)]
pub struct KvPair {
    pub keys: Matrix,
    pub values: Matrix,
}

/// Per-call instructions for a backend's self-attention layers.
#[derive(Debug, Clone, Default)]
pub struct AttentionDirectives {
    pub mode: AttentionMode,
    /// One entry per layer, in layer order; `None` for layers that are not injected.
    pub injected_kv: Option<Vec<Option<KvPair>>>,
    /// Keys to hide, at any resolution; each layer resamples with any-overlap.
    pub leak_mask: Option<Mask>,
    /// Record post-softmax score matrices at tap layers.
    pub score_tap: bool,
    /// Leak masking is skipped on a layer when its coverage reaches this fraction.
    pub degeneracy_guard: f64,
}

impl AttentionDirectives {
    pub fn plain() -> Self {
        Self {
            degeneracy_guard: DEFAULT_DEGENERACY_GUARD,
            ..Default::default()
        }
    }

    pub fn capture() -> Self {
        Self {
            mode: AttentionMode::Capture,
            ..Self::plain()
        }
    }

    pub fn inject(kv: Vec<Option<KvPair>>) -> Self {
        Self {
            mode: AttentionMode::Inject,
            injected_kv: Some(kv),
            ..Self::plain()
        }
    }

    pub fn with_leak_mask(mut self, mask: Mask) -> Self {
        self.leak_mask = Some(mask);
        self
    }

    pub fn with_score_tap(mut self) -> Self {
        self.score_tap = true;
        self
    }

    /// The injected pair for `layer`, if injection is active there.
    pub fn injected(&self, layer: usize) -> Option<&KvPair> {
        match (self.mode, &self.injected_kv) {
            (AttentionMode::Inject, Some(kv)) => kv.get(layer).and_then(Option::as_ref),
            _ => None,
        }
    }

    /// Checks injection covers every layer flagged in `injectable`.
    pub fn validate(&self, injectable: &[bool]) -> Result<()> {
        if !(0.0..=1.0).contains(&self.degeneracy_guard) {
            return Err(Error::Config(format!(
                "degeneracy guard must lie in [0, 1], got {}",
                self.degeneracy_guard
            )));
        }
        if self.mode == AttentionMode::Inject {
            let kv = self
                .injected_kv
                .as_ref()
                .ok_or_else(|| Error::Config("inject mode without key/value pairs".into()))?;
            for (i, &inj) in injectable.iter().enumerate() {
                if inj && kv.get(i).and_then(Option::as_ref).is_none() {
                    return Err(Error::Config(format!(
                        "no injected keys/values for layer {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// What leak masking did on one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LeakOutcome {
    /// No leak mask was requested or it selected no keys.
    Inactive,
    Applied {
        masked: usize,
        keys: usize,
    },
    /// Coverage reached the degeneracy guard; scores were left untouched.
    Skipped {
        coverage: f64,
    },
}

/// Sets the masked key columns of a pre-softmax score matrix to `-∞`.
///
/// When the masked fraction of keys reaches `guard`, nothing is masked and
/// [`LeakOutcome::Skipped`] is returned instead.
pub fn apply_leakproof(scores: &mut Matrix, key_mask: &[bool], guard: f64) -> Result<LeakOutcome> {
    if key_mask.len() != scores.cols() {
        return Err(Error::Shape(format!(
            "leak mask has {} keys, scores have {}",
            key_mask.len(),
            scores.cols()
        )));
    }
    let masked = key_mask.iter().filter(|&&m| m).count();
    if masked == 0 {
        return Ok(LeakOutcome::Inactive);
    }
    let coverage = masked as f64 / key_mask.len() as f64;
    if coverage >= guard {
        log::debug!(
            "leak mask covers {:.1}% of keys, skipping",
            coverage * 100.0
        );
        return Ok(LeakOutcome::Skipped { coverage });
    }
    for r in 0..scores.rows() {
        for (v, &m) in scores.row_mut(r).iter_mut().zip(key_mask) {
            if m {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    Ok(LeakOutcome::Applied {
        masked,
        keys: key_mask.len(),
    })
}

/// Row-wise softmax. `-∞` entries get exactly zero weight; a row with no
/// finite entry becomes all zeros.
pub fn softmax_rows(scores: &Matrix) -> Matrix {
    let mut out = scores.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY {
                0.0
            } else {
                (*v - max).exp()
            };
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Forward pass of single-head scaled dot-product attention.
#[derive(Debug, Clone)]
pub struct SdpaForward {
    pub output: Matrix,
    /// Post-softmax weights, `queries × keys`.
    pub probs: Matrix,
    pub leak: LeakOutcome,
}

/// `Softmax(QKᵀ/√d [leak-masked]) · V`
pub fn scaled_dot_product(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    key_mask: Option<&[bool]>,
    guard: f64,
) -> Result<SdpaForward> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention shapes q {}x{}, k {}x{}, v {}x{}",
            q.rows(),
            q.cols(),
            k.rows(),
            k.cols(),
            v.rows(),
            v.cols()
        )));
    }
    let mut scores = q.matmul_t(k).scale(1.0 / (q.cols() as f64).sqrt());
    let leak = match key_mask {
        Some(m) => apply_leakproof(&mut scores, m, guard)?,
        None => LeakOutcome::Inactive,
    };
    let probs = softmax_rows(&scores);
    let output = probs.matmul(v);
    Ok(SdpaForward {
        output,
        probs,
        leak,
    })
}

/// Gradients of [`scaled_dot_product`] with respect to `q`, `k` and `v`.
pub fn scaled_dot_product_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    d_out: &Matrix,
) -> (Matrix, Matrix, Matrix) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let d_probs = d_out.matmul_t(v);
    let d_v = probs.t_matmul(d_out);
    let mut d_scores = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = d_probs.row(r);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for (c, ds) in d_scores.row_mut(r).iter_mut().enumerate() {
            *ds = p[c] * (dp[c] - inner) * scale;
        }
    }
    let d_q = d_scores.matmul(k);
    let d_k = d_scores.t_matmul(q);
    (d_q, d_k, d_v)
}

/// A captured post-softmax score matrix for a `height × width` token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTap {
    pub height: usize,
    pub width: usize,
    /// Row-stochastic, `(height·width) × (height·width)`, heads already averaged.
    pub probs: Matrix,
}

/// Result of similar-object extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMask {
    /// Averaged attention map at the finest tap resolution (normalised if requested).
    pub map: SoftMask,
    /// Binary mask at pixel resolution, disjoint from `m_old ∪ m_new`.
    pub mask: Mask,
}

/// Finds regions the object's queries attend to strongly.
///
/// For each tap the score rows belonging to `m_new` are averaged into a
/// spatial map; maps are brought to the finest tap resolution and averaged,
/// optionally divided by their maximum, thresholded strictly at `tau`, and
/// the object footprints are removed. With no usable tap the mask is empty.
pub fn extract_sim_mask(
    taps: &[ScoreTap],
    masks: &RegionMaskSet,
    tau: f64,
    normalize: bool,
) -> Result<SimMask> {
    let (ph, pw) = masks.dims();
    let Some(finest) = taps.iter().max_by_key(|t| t.height * t.width) else {
        return Ok(SimMask {
            map: SoftMask::zeros(1, 1),
            mask: Mask::empty(ph, pw),
        });
    };
    let (ch, cw) = (finest.height, finest.width);
    let mut acc = vec![0.0; ch * cw];
    let mut used = 0usize;
    for tap in taps {
        let n = tap.height * tap.width;
        if tap.probs.rows() != n || tap.probs.cols() != n {
            return Err(Error::Shape(format!(
                "score tap {}x{} has a {}x{} matrix",
                tap.height,
                tap.width,
                tap.probs.rows(),
                tap.probs.cols()
            )));
        }
        let mut rows = masks
            .m_new
            .resample(tap.height, tap.width, ResamplePolicy::Nearest);
        if rows.is_empty() {
            rows = masks
                .m_new
                .resample(tap.height, tap.width, ResamplePolicy::AnyOverlap);
        }
        let selected: Vec<usize> = rows
            .as_slice()
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect();
        if selected.is_empty() {
            continue;
        }
        let mut avg = vec![0.0; n];
        for &r in &selected {
            for (a, p) in avg.iter_mut().zip(tap.probs.row(r)) {
                *a += p;
            }
        }
        for a in &mut avg {
            *a /= selected.len() as f64;
        }
        let map = SoftMask::from_vec(tap.height, tap.width, avg)?.resample_nearest(ch, cw);
        for (a, v) in acc.iter_mut().zip(map.as_slice()) {
            *a += v;
        }
        used += 1;
    }
    if used == 0 {
        return Ok(SimMask {
            map: SoftMask::zeros(ch, cw),
            mask: Mask::empty(ph, pw),
        });
    }
    for a in &mut acc {
        *a /= used as f64;
    }
    let mut map = SoftMask::from_vec(ch, cw, acc)?;
    if normalize {
        map = map.normalized_by_max();
    }
    let mask = map
        .threshold(tau)
        .resample(ph, pw, ResamplePolicy::Nearest)
        .minus(&masks.object_union());
    Ok(SimMask { map, mask })
}

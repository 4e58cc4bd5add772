//! Binary and soft masks over 2-D grids.
//!
//! Masks are row-major. Pixel `(y, x)` lives at index `y * width + x`; `dx`
//! moves right and `dy` moves down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

/// Rule used when a binary mask is moved to another resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplePolicy {
    /// A target cell is set iff any source pixel it covers is set.
    AnyOverlap,
    /// The target cell takes the value of the source pixel under its centre.
    Nearest,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Axis-aligned rectangle `[y0, y0+h) × [x0, x0+w)`, clipped to the grid.
    pub fn rect(height: usize, width: usize, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self::from_fn(height, width, |y, x| {
            y >= y0 && y < y0 + h && x >= x0 && x < x0 + w
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Fraction of set cells.
    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    pub fn iter_set(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| (i / w, i % w))
    }

    fn combine(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        assert_eq!(self.dims(), other.dims(), "mask dimensions differ");
        Mask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Mask {
        self.combine(other, |a, b| a || b)
    }

    pub fn intersect(&self, other: &Mask) -> Mask {
        self.combine(other, |a, b| a && b)
    }

    /// `self ∧ ¬other`
    pub fn minus(&self, other: &Mask) -> Mask {
        self.combine(other, |a, b| a && !b)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.dims() == other.dims() && self.data.iter().zip(&other.data).all(|(&a, &b)| !(a && b))
    }

    /// Inclusive bounding box `(y_min, x_min, y_max, x_max)` of the set cells.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut it = self.iter_set();
        let (y, x) = it.next()?;
        Some(it.fold((y, x, y, x), |(y0, x0, y1, x1), (y, x)| {
            (y0.min(y), x0.min(x), y1.max(y), x1.max(x))
        }))
    }

    /// Translates set cells by `(dx, dy)`; cells leaving the frame are dropped.
    pub fn shift(&self, dx: i64, dy: i64) -> Mask {
        let mut out = Mask::empty(self.height, self.width);
        for (y, x) in self.iter_set() {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                out.set(ny as usize, nx as usize, true);
            }
        }
        out
    }

    /// Square dilation with Chebyshev radius `r`.
    pub fn dilate(&self, r: usize) -> Mask {
        if r == 0 {
            return self.clone();
        }
        let mut out = Mask::empty(self.height, self.width);
        for (y, x) in self.iter_set() {
            let (y0, y1) = (y.saturating_sub(r), (y + r).min(self.height - 1));
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(self.width - 1));
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    out.set(yy, xx, true);
                }
            }
        }
        out
    }

    pub fn resample(&self, height: usize, width: usize, policy: ResamplePolicy) -> Mask {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let (sh, sw) = (self.height, self.width);
        match policy {
            ResamplePolicy::AnyOverlap => Mask::from_fn(height, width, |y, x| {
                let (y0, y1) = (y * sh / height, ((y + 1) * sh).div_ceil(height));
                let (x0, x1) = (x * sw / width, ((x + 1) * sw).div_ceil(width));
                (y0..y1.max(y0 + 1)).any(|yy| (x0..x1.max(x0 + 1)).any(|xx| self.get(yy, xx)))
            }),
            ResamplePolicy::Nearest => Mask::from_fn(height, width, |y, x| {
                self.get(
                    (2 * y + 1) * sh / (2 * height),
                    (2 * x + 1) * sw / (2 * width),
                )
            }),
        }
    }

    pub fn to_soft(&self) -> SoftMask {
        SoftMask {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }
}

/// A real-valued grid, typically in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SoftMask {
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "map {height}x{width} needs {} cells, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `1 - v` for every cell.
    pub fn inverted(&self) -> SoftMask {
        SoftMask {
            data: self.data.iter().map(|&v| 1.0 - v).collect(),
            ..self.clone()
        }
    }

    /// Divides by the maximum; an all-zero map is returned unchanged.
    pub fn normalized_by_max(&self) -> SoftMask {
        let m = self.max();
        if m > 0.0 {
            SoftMask {
                data: self.data.iter().map(|&v| v / m).collect(),
                ..self.clone()
            }
        } else {
            self.clone()
        }
    }

    /// Cells strictly greater than `tau`.
    pub fn threshold(&self, tau: f64) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v > tau).collect(),
        }
    }

    /// Nearest-neighbour resampling.
    pub fn resample_nearest(&self, height: usize, width: usize) -> SoftMask {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let (sh, sw) = (self.height, self.width);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(self.get(
                    (2 * y + 1) * sh / (2 * height),
                    (2 * x + 1) * sw / (2 * width),
                ));
            }
        }
        SoftMask {
            height,
            width,
            data,
        }
    }

    /// Separable Gaussian blur with reflect (edge-excluding mirror) padding.
    ///
    /// Each output is `Σ w_k v_k / Σ w_k` over the window, so constant inputs
    /// are reproduced exactly.
    pub fn blur(&self, kernel: usize, sigma: f64) -> Result<SoftMask> {
        if kernel == 0 || kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "blur kernel must be odd and >= 1, got {kernel}"
            )));
        }
        if kernel == 1 {
            return Ok(self.clone());
        }
        if sigma.is_nan() || sigma <= 0.0 {
            return Err(Error::Config(format!(
                "blur sigma must be positive, got {sigma}"
            )));
        }
        let weights = gaussian_weights(kernel, sigma);
        let total: f64 = weights.iter().sum();
        let r = (kernel / 2) as i64;
        let (h, w) = (self.height, self.width);

        let mut horiz = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wk) in weights.iter().enumerate() {
                    let xx = reflect(x as i64 + k as i64 - r, w);
                    acc += wk * self.data[y * w + xx];
                }
                horiz[y * w + x] = acc / total;
            }
        }
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, wk) in weights.iter().enumerate() {
                    let yy = reflect(y as i64 + k as i64 - r, h);
                    acc += wk * horiz[yy * w + x];
                }
                out[y * w + x] = (acc / total).clamp(0.0, 1.0);
            }
        }
        Ok(SoftMask {
            height: h,
            width: w,
            data: out,
        })
    }
}

/// Gaussian blur of a binary mask with `σ = kernel / 3`.
pub fn blur_mask(m: &Mask, kernel: usize) -> Result<SoftMask> {
    m.to_soft().blur(kernel, kernel as f64 / 3.0)
}

/// Binarises a map in `[0, 1]`: cells strictly above `tau` are set.
pub fn threshold_map(a: &SoftMask, tau: f64) -> Result<Mask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {tau}"
        )));
    }
    Ok(a.threshold(tau))
}

/// Unnormalised Gaussian taps `exp(-k²/2σ²)` for `k ∈ [-r, r]`.
pub fn gaussian_weights(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as i64;
    (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Mirror index into `[0, n)` without repeating the edge sample.
fn reflect(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    (if m >= n as i64 { period - m } else { m }) as usize
}

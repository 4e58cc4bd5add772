//! Edit requests, region masks, and the pixel-manipulated image.
//!
//! An edit copies an object to a new place in pixel space before any
//! sampling happens. The regions involved are
//!
//! * `m_old`: the object at its original location,
//! * `m_new`: the object at its target location,
//! * `m_ipt = m_old ∧ ¬m_new`: the vacated area that must be inpainted,
//! * `m_sim`: other regions that look like the object (found from attention).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::{Mask, ResamplePolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    #[default]
    Move,
    Resize,
    Paste,
}

impl std::str::FromStr for EditKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "move" => Ok(EditKind::Move),
            "resize" => Ok(EditKind::Resize),
            "paste" => Ok(EditKind::Paste),
            other => Err(Error::InvalidEdit(format!("unknown task kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for EditKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EditKind::Move => "move",
            EditKind::Resize => "resize",
            EditKind::Paste => "paste",
        })
    }
}

/// Where the object goes: a pixel displacement, optionally with a scale about
/// the object's bounding-box centre, optionally taken from a reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTransform {
    pub kind: EditKind,
    pub dx: i64,
    pub dy: i64,
    pub scale: f64,
    pub reference: Option<Image>,
}

impl EditTransform {
    pub fn translate(dx: i64, dy: i64) -> Self {
        Self {
            kind: EditKind::Move,
            dx,
            dy,
            scale: 1.0,
            reference: None,
        }
    }

    pub fn resize(dx: i64, dy: i64, scale: f64) -> Self {
        Self {
            kind: EditKind::Resize,
            dx,
            dy,
            scale,
            reference: None,
        }
    }

    pub fn paste(reference: Image, dx: i64, dy: i64, scale: f64) -> Self {
        Self {
            kind: EditKind::Paste,
            dx,
            dy,
            scale,
            reference: Some(reference),
        }
    }

    /// Builds the transform for `kind`; `reference` is only used by paste.
    pub fn from_parts(
        kind: EditKind,
        dx: i64,
        dy: i64,
        scale: f64,
        reference: Option<Image>,
    ) -> Result<Self> {
        let t = match kind {
            EditKind::Move => Self {
                scale,
                ..Self::translate(dx, dy)
            },
            EditKind::Resize => Self::resize(dx, dy, scale),
            EditKind::Paste => Self::paste(
                reference.ok_or_else(|| {
                    Error::InvalidEdit("paste edits require a reference image".into())
                })?,
                dx,
                dy,
                scale,
            ),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidEdit(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.kind == EditKind::Move && self.scale != 1.0 {
            return Err(Error::InvalidEdit("move edits require scale = 1".into()));
        }
        if self.kind == EditKind::Paste && self.reference.is_none() {
            return Err(Error::InvalidEdit(
                "paste edits require a reference image".into(),
            ));
        }
        Ok(())
    }

    fn is_pure_shift(&self) -> bool {
        self.scale == 1.0
    }
}

/// Everything needed to run one edit.
#[derive(Debug, Clone)]
pub struct EditRequest {
    pub source: Image,
    /// The object's mask: in `source` for move/resize, in the reference image for paste.
    pub object_mask: Mask,
    pub transform: EditTransform,
}

impl EditRequest {
    pub fn new(source: Image, object_mask: Mask, transform: EditTransform) -> Self {
        Self {
            source,
            object_mask,
            transform,
        }
    }

    pub fn validate(&self, latent_downscale: usize) -> Result<()> {
        self.transform.validate()?;
        self.source.check_divisible(latent_downscale)?;
        if self.object_mask.dims() != self.source.dims() {
            return Err(Error::InvalidEdit(format!(
                "mask is {:?} but image is {:?}",
                self.object_mask.dims(),
                self.source.dims()
            )));
        }
        if let Some(r) = &self.transform.reference {
            if r.dims() != self.source.dims() {
                return Err(Error::InvalidEdit(format!(
                    "reference image is {:?} but source is {:?}",
                    r.dims(),
                    self.source.dims()
                )));
            }
        }
        Ok(())
    }
}

/// The four region masks at pixel resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMaskSet {
    pub m_old: Mask,
    pub m_new: Mask,
    pub m_sim: Mask,
    pub m_ipt: Mask,
}

/// A [`RegionMaskSet`] resampled to one grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledMasks {
    pub m_old: Mask,
    pub m_new: Mask,
    pub m_sim: Mask,
    pub m_ipt: Mask,
    pub leak: Mask,
}

impl RegionMaskSet {
    pub fn dims(&self) -> (usize, usize) {
        self.m_old.dims()
    }

    /// `m_old ∪ m_new ∪ m_sim`: the keys hidden from the target branch.
    pub fn leak_union(&self) -> Mask {
        self.m_old.union(&self.m_new).union(&self.m_sim)
    }

    /// `m_old ∪ m_new`
    pub fn object_union(&self) -> Mask {
        self.m_old.union(&self.m_new)
    }

    /// Replaces `m_sim`, removing any overlap with the object footprints.
    pub fn with_sim(&self, raw_sim: &Mask) -> RegionMaskSet {
        RegionMaskSet {
            m_sim: raw_sim.minus(&self.object_union()),
            ..self.clone()
        }
    }

    pub fn resampled(&self, height: usize, width: usize, policy: ResamplePolicy) -> ResampledMasks {
        let r = |m: &Mask| m.resample(height, width, policy);
        ResampledMasks {
            m_old: r(&self.m_old),
            m_new: r(&self.m_new),
            m_sim: r(&self.m_sim),
            m_ipt: r(&self.m_ipt),
            leak: r(&self.leak_union()),
        }
    }
}

/// Continuous source coordinate of a target pixel centre under the transform.
struct InverseMap {
    cy: f64,
    cx: f64,
    dy: f64,
    dx: f64,
    scale: f64,
}

impl InverseMap {
    fn new(object: &Mask, t: &EditTransform) -> Option<Self> {
        let (y0, x0, y1, x1) = object.bbox()?;
        Some(Self {
            cy: (y0 + y1 + 1) as f64 / 2.0,
            cx: (x0 + x1 + 1) as f64 / 2.0,
            dy: t.dy as f64,
            dx: t.dx as f64,
            scale: t.scale,
        })
    }

    fn source(&self, y: usize, x: usize) -> (f64, f64) {
        (
            self.cy + (y as f64 + 0.5 - self.cy - self.dy) / self.scale,
            self.cx + (x as f64 + 0.5 - self.cx - self.dx) / self.scale,
        )
    }
}

fn nearest_in(mask: &Mask, uy: f64, ux: f64) -> Option<(usize, usize)> {
    let (sy, sx) = (uy.floor(), ux.floor());
    if sy < 0.0 || sx < 0.0 {
        return None;
    }
    let (sy, sx) = (sy as usize, sx as usize);
    (sy < mask.height() && sx < mask.width() && mask.get(sy, sx)).then_some((sy, sx))
}

/// The object's footprint after the transform.
pub fn transform_mask(object: &Mask, t: &EditTransform) -> Mask {
    if t.is_pure_shift() {
        return object.shift(t.dx, t.dy);
    }
    let Some(map) = InverseMap::new(object, t) else {
        return Mask::empty(object.height(), object.width());
    };
    Mask::from_fn(object.height(), object.width(), |y, x| {
        let (uy, ux) = map.source(y, x);
        nearest_in(object, uy, ux).is_some()
    })
}

/// Builds the region masks for an edit. `raw_sim` may be empty or absent.
pub fn derive_mask_set(
    object_mask: &Mask,
    transform: &EditTransform,
    raw_sim: Option<&Mask>,
) -> Result<RegionMaskSet> {
    transform.validate()?;
    if object_mask.is_empty() {
        return Err(Error::InvalidEdit("object mask is empty".into()));
    }
    let m_new = transform_mask(object_mask, transform);
    if m_new.is_empty() {
        return Err(Error::InvalidEdit(
            "the transform moves the entire object out of frame".into(),
        ));
    }
    // a pasted object has no footprint in the source image
    let m_old = match transform.kind {
        EditKind::Paste => Mask::empty(object_mask.height(), object_mask.width()),
        _ => object_mask.clone(),
    };
    let m_ipt = m_old.minus(&m_new);
    let (h, w) = object_mask.dims();
    let sim = raw_sim
        .filter(|s| s.dims() == (h, w))
        .cloned()
        .unwrap_or_else(|| Mask::empty(h, w));
    let set = RegionMaskSet {
        m_sim: Mask::empty(h, w),
        m_old,
        m_new,
        m_ipt,
    };
    Ok(set.with_sim(&sim))
}

/// Masked bilinear sample: only object pixels contribute, weights renormalised.
fn sample_object(img: &Image, object: &Mask, uy: f64, ux: f64) -> Option<[f64; 3]> {
    let (fy, fx) = (uy - 0.5, ux - 0.5);
    let (y0, x0) = (fy.floor(), fx.floor());
    let (ty, tx) = (fy - y0, fx - x0);
    let mut acc = [0.0; 3];
    let mut wsum = 0.0;
    for (oy, wy) in [(0.0, 1.0 - ty), (1.0, ty)] {
        for (ox, wx) in [(0.0, 1.0 - tx), (1.0, tx)] {
            let (yy, xx) = (y0 + oy, x0 + ox);
            let w = wy * wx;
            if w <= 0.0 || yy < 0.0 || xx < 0.0 {
                continue;
            }
            let (yy, xx) = (yy as usize, xx as usize);
            if yy >= img.height() || xx >= img.width() || !object.get(yy, xx) {
                continue;
            }
            let p = img.pixel(yy, xx);
            for c in 0..3 {
                acc[c] += w * p[c];
            }
            wsum += w;
        }
    }
    (wsum > 0.0).then(|| acc.map(|v| v / wsum))
}

/// Creates the pixel-manipulated image: `source` with the (possibly rescaled)
/// object copied into `m_new`. Pixels outside `m_new` are never touched.
pub fn make_manipulated_image(
    source: &Image,
    object_mask: &Mask,
    transform: &EditTransform,
) -> Result<Image> {
    transform.validate()?;
    let object_image = match transform.kind {
        EditKind::Paste => transform
            .reference
            .as_ref()
            .ok_or_else(|| Error::InvalidEdit("paste edits require a reference image".into()))?,
        _ => source,
    };
    if object_image.dims() != source.dims() || object_mask.dims() != source.dims() {
        return Err(Error::InvalidEdit(
            "image, mask and reference dimensions differ".into(),
        ));
    }
    let m_new = transform_mask(object_mask, transform);
    let mut out = source.clone();
    if transform.is_pure_shift() {
        for (y, x) in m_new.iter_set() {
            let sy = (y as i64 - transform.dy) as usize;
            let sx = (x as i64 - transform.dx) as usize;
            out.set_pixel(y, x, object_image.pixel(sy, sx));
        }
        return Ok(out);
    }
    let Some(map) = InverseMap::new(object_mask, transform) else {
        return Ok(out);
    };
    for (y, x) in m_new.iter_set() {
        let (uy, ux) = map.source(y, x);
        if let Some(rgb) = sample_object(object_image, object_mask, uy, ux) {
            out.set_pixel(y, x, rgb);
        }
    }
    Ok(out)
}

//! Benchmark harness: manifests, region-split PSNR and report emission.
//!
//! A manifest is JSON:
//!
//! ```json
//! {
//!   "dataset": "toy",
//!   "entries": [
//!     {"id": "cup-01", "image": "cup.png", "mask": "cup_mask.png",
//!      "task": "move", "dx": 16, "dy": 0, "scale": 1.0, "reference": null}
//!   ]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Object
//! consistency compares the output with the pixel-manipulated image inside
//! `m_new`; background consistency compares the output with the source
//! outside `m_old ∪ m_new`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Denoiser;
use crate::edit::{
    derive_mask_set, make_manipulated_image, EditKind, EditRequest, EditTransform, RegionMaskSet,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::Mask;
use crate::sampler::{run_edit, SamplerConfig};

/// Reported PSNR for identical images or regions, in dB.
pub const PSNR_CAP: f64 = 99.0;

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Full-frame PSNR for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    region_psnr(a, b, &Mask::full(a.height(), a.width()))
}

/// PSNR over the pixels of `region`, all channels.
pub fn region_psnr(a: &Image, b: &Image, region: &Mask) -> Result<f64> {
    if a.dims() != b.dims() || region.dims() != a.dims() {
        return Err(Error::Shape(format!(
            "psnr operands {:?}, {:?} with region {:?}",
            a.dims(),
            b.dims(),
            region.dims()
        )));
    }
    if region.is_empty() {
        return Err(Error::EmptyRegion("psnr region has no pixels".into()));
    }
    let mut sum = 0.0;
    for (y, x) in region.iter_set() {
        let (p, q) = (a.pixel(y, x), b.pixel(y, x));
        sum += (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>();
    }
    Ok(psnr_from_mse(sum / (3 * region.count()) as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Regions {
    pub object: Mask,
    pub background: Mask,
}

/// Object region `m_new`; background everything outside `m_old ∪ m_new`.
pub fn split_regions(masks: &RegionMaskSet) -> Regions {
    Regions {
        object: masks.m_new.clone(),
        background: masks.object_union().complement(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    #[serde(default)]
    pub task: EditKind,
    #[serde(default)]
    pub dx: i64,
    #[serde(default)]
    pub dy: i64,
    #[serde(default = "unit_scale")]
    pub scale: f64,
    #[serde(default)]
    pub reference: Option<PathBuf>,
}

fn unit_scale() -> f64 {
    1.0
}

impl ManifestEntry {
    pub fn load_request(&self) -> Result<EditRequest> {
        let source = Image::load(&self.image)?;
        let mask = Mask::load(&self.mask)?;
        let reference = self.reference.as_ref().map(Image::load).transpose()?;
        let transform =
            EditTransform::from_parts(self.task, self.dx, self.dy, self.scale, reference)
                .map_err(|e| Error::Manifest(format!("entry `{}`: {e}", self.id)))?;
        Ok(EditRequest::new(source, mask, transform))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    #[serde(default)]
    pub dataset: String,
    pub entries: Vec<ManifestEntry>,
}

impl TaskManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: TaskManifest = serde_json::from_slice(&bytes)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            for p in [Some(&mut e.image), Some(&mut e.mask), e.reference.as_mut()]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// Ids are unique and every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if e.id.is_empty() || !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!(
                    "entry id `{}` is empty or repeated",
                    e.id
                )));
            }
            for p in [Some(&e.image), Some(&e.mask), e.reference.as_ref()]
                .into_iter()
                .flatten()
            {
                if !p.is_file() {
                    return Err(Error::Manifest(format!(
                        "entry `{}`: {} does not exist",
                        e.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Builds a manifest from a folder layout with one directory per entry
    /// holding `image.png`, `mask.png` and `diff.json` (`{"dx": .., "dy": ..}`).
    pub fn from_folder(dir: impl AsRef<Path>, dataset: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Diff {
            dx: i64,
            dy: i64,
        }
        let dir = dir.as_ref();
        let mut entries = Vec::new();
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|d| d.ok().map(|d| d.path()))
            .filter(|p| p.is_dir())
            .collect();
        subdirs.sort();
        for sub in subdirs {
            let diff_path = sub.join("diff.json");
            let diff: Diff = serde_json::from_slice(
                &fs::read(&diff_path).map_err(|e| Error::io(&diff_path, e))?,
            )?;
            entries.push(ManifestEntry {
                id: sub
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                image: sub.join("image.png"),
                mask: sub.join("mask.png"),
                task: EditKind::Move,
                dx: diff.dx,
                dy: diff.dy,
                scale: 1.0,
                reference: None,
            });
        }
        let m = TaskManifest {
            dataset: dataset.into(),
            entries,
        };
        m.validate()?;
        Ok(m)
    }
}

/// An external quality metric (perceptual distance, text-image score, ...).
///
/// Adapter failures are recorded per entry and never fail the run.
pub trait MetricAdapter: Send + Sync {
    fn name(&self) -> &str;

    fn score(&self, source: &Image, output: &Image, masks: &RegionMaskSet) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryResult {
    pub id: String,
    pub task: EditKind,
    pub object_psnr: Option<f64>,
    pub background_psnr: Option<f64>,
    pub nfe: Option<usize>,
    pub latency_secs: Option<f64>,
    #[serde(default)]
    pub adapters: BTreeMap<String, f64>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    pub entries: usize,
    pub failed: usize,
    pub object_psnr: Option<f64>,
    pub background_psnr: Option<f64>,
    pub nfe: Option<f64>,
    pub latency_secs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset: String,
    pub steps: usize,
    pub backend: String,
    pub entries: Vec<EntryResult>,
    pub aggregate: Aggregate,
    pub warnings: Vec<String>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    fn aggregate(entries: &[EntryResult]) -> Aggregate {
        Aggregate {
            entries: entries.len(),
            failed: entries.iter().filter(|e| e.error.is_some()).count(),
            object_psnr: mean(entries.iter().map(|e| e.object_psnr)),
            background_psnr: mean(entries.iter().map(|e| e.background_psnr)),
            nfe: mean(entries.iter().map(|e| e.nfe.map(|n| n as f64))),
            latency_secs: mean(entries.iter().map(|e| e.latency_secs)),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// One row per entry plus a final `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row<'a> {
            id: &'a str,
            task: String,
            object_psnr: Option<f64>,
            background_psnr: Option<f64>,
            nfe: Option<f64>,
            latency_secs: Option<f64>,
            error: Option<&'a str>,
        }
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(Row {
                id: &e.id,
                task: e.task.to_string(),
                object_psnr: e.object_psnr,
                background_psnr: e.background_psnr,
                nfe: e.nfe.map(|n| n as f64),
                latency_secs: e.latency_secs,
                error: e.error.as_deref(),
            })?;
        }
        let a = &self.aggregate;
        w.serialize(Row {
            id: "mean",
            task: String::new(),
            object_psnr: a.object_psnr,
            background_psnr: a.background_psnr,
            nfe: a.nfe,
            latency_secs: a.latency_secs,
            error: None,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryScores {
    pub object_psnr: f64,
    pub background_psnr: f64,
    pub adapters: BTreeMap<String, f64>,
    /// Adapter failures.
    pub notes: Vec<String>,
}

/// Scores a finished edit. The output is quantised to 8 bits first so the
/// numbers match what a saved PNG reproduces.
pub fn score_entry(
    request: &EditRequest,
    output: &Image,
    adapters: &[Box<dyn MetricAdapter>],
) -> Result<EntryScores> {
    let output = Image::from_rgb8(&output.to_rgb8());
    let masks = derive_mask_set(&request.object_mask, &request.transform, None)?;
    let manipulated =
        make_manipulated_image(&request.source, &request.object_mask, &request.transform)?;
    let regions = split_regions(&masks);
    let object = region_psnr(&output, &manipulated, &regions.object)?;
    let background = region_psnr(&output, &request.source, &regions.background)?;
    let mut scores = BTreeMap::new();
    let mut notes = Vec::new();
    for a in adapters {
        match a.score(&request.source, &output, &masks) {
            Ok(v) => {
                scores.insert(a.name().to_string(), v);
            }
            Err(e) => notes.push(format!("adapter {}: {e}", a.name())),
        }
    }
    Ok(EntryScores {
        object_psnr: object,
        background_psnr: background,
        adapters: scores,
        notes,
    })
}

fn run_entry(
    entry: &ManifestEntry,
    cfg: &SamplerConfig,
    backend: &dyn Denoiser,
    out: Option<&Path>,
    adapters: &[Box<dyn MetricAdapter>],
) -> EntryResult {
    let mut result = EntryResult {
        id: entry.id.clone(),
        task: entry.task,
        object_psnr: None,
        background_psnr: None,
        nfe: None,
        latency_secs: None,
        adapters: BTreeMap::new(),
        notes: Vec::new(),
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let request = entry.load_request()?;
        let report = run_edit(&request, cfg, backend)?;
        result.nfe = Some(report.nfe);
        result.latency_secs = Some(report.latency_secs);
        if let Some(dir) = out {
            report
                .output
                .save_png(dir.join(format!("{}.png", entry.id)))?;
        }
        let scores = score_entry(&request, &report.output, adapters)?;
        result.object_psnr = Some(scores.object_psnr);
        result.background_psnr = Some(scores.background_psnr);
        result.adapters = scores.adapters;
        result.notes = scores.notes;
        Ok(())
    })();
    if let Err(e) = outcome {
        log::warn!("entry {} failed: {e}", entry.id);
        result.error = Some(e.to_string());
    }
    result
}

/// Runs every entry (in parallel), then writes `report.json`, `report.csv`
/// and `<id>.png` per entry into `out` when given.
pub fn run_benchmark(
    manifest: &TaskManifest,
    cfg: &SamplerConfig,
    backend: &dyn Denoiser,
    out: Option<&Path>,
    adapters: &[Box<dyn MetricAdapter>],
) -> Result<MetricReport> {
    manifest.validate()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut warnings = Vec::new();
    if manifest.entries.is_empty() {
        log::warn!("manifest has no entries");
        warnings.push("manifest has no entries".to_string());
    }
    let mut entries: Vec<EntryResult> = manifest
        .entries
        .par_iter()
        .map(|e| run_entry(e, cfg, backend, out, adapters))
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let report = MetricReport {
        dataset: manifest.dataset.clone(),
        steps: cfg.steps(),
        backend: backend.info().name,
        aggregate: MetricReport::aggregate(&entries),
        entries,
        warnings,
    };
    if let Some(dir) = out {
        report.write_json(&dir.join("report.json"))?;
        report.write_csv(&dir.join("report.csv"))?;
    }
    Ok(report)
}

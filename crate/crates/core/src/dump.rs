//! Debug dumps of latent grids.
//!
//! Each dump is a pair of files: `<name>.bin` holds the values as
//! little-endian `f32` in C order (`channels × height × width`), and
//! `<name>.json` holds the header:
//!
//! ```json
//! {"dtype": "<f4", "order": "C", "shape": [4, 8, 8]}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentGrid;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub dtype: String,
    pub order: String,
    pub shape: Vec<usize>,
}

pub fn write_latent(dir: &Path, name: &str, z: &LatentGrid) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (c, h, w) = z.dims();
    let header = DumpHeader {
        dtype: "<f4".into(),
        order: "C".into(),
        shape: vec![c, h, w],
    };
    let bytes: Vec<u8> = z
        .as_slice()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    let bin = dir.join(format!("{name}.bin"));
    fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let json = dir.join(format!("{name}.json"));
    fs::write(&json, serde_json::to_vec(&header)?).map_err(|e| Error::io(&json, e))?;
    Ok(())
}

pub fn read_latent(dir: &Path, name: &str) -> Result<LatentGrid> {
    let json = dir.join(format!("{name}.json"));
    let header: DumpHeader =
        serde_json::from_slice(&fs::read(&json).map_err(|e| Error::io(&json, e))?)?;
    let [c, h, w] = header.shape[..] else {
        return Err(Error::Shape(format!(
            "dump header shape {:?} is not 3-d",
            header.shape
        )));
    };
    if header.dtype != "<f4" || header.order != "C" {
        return Err(Error::Shape(format!(
            "unsupported dump layout {} {}",
            header.dtype, header.order
        )));
    }
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    LatentGrid::from_vec(c, h, w, data)
}

/// Writes named latents per step into `dir/step_XXX_<name>.{bin,json}`.
pub struct LatentDump {
    dir: PathBuf,
}

impl LatentDump {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn write_step(&self, t: usize, grids: &[(&str, &LatentGrid)]) -> Result<()> {
        for (name, z) in grids {
            write_latent(&self.dir, &format!("step_{t:03}_{name}"), z)?;
        }
        Ok(())
    }
}

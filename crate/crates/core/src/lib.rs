//! Consistent object editing for latent diffusion models without inversion.
//!
//! An object is moved, resized or pasted in pixel space first; the
//! manipulated image then anchors a three-branch sampler that re-harmonises
//! the edit while a source branch supplies attention keys and values and a
//! leak mask keeps the target branch from copying the old object back.
//!
//! ```
//! use anchor_edit::{run_edit, EditRequest, EditTransform, Image, Mask, SamplerConfig};
//! use anchor_edit::backend::toy::{ToyBackend, ToyConfig};
//!
//! let mut img = Image::filled(32, 32, [0.2, 0.4, 0.6]);
//! let object = Mask::rect(32, 32, 8, 8, 8, 8);
//! img.paint(&object, [0.9, 0.1, 0.1]);
//!
//! let backend = ToyBackend::new(ToyConfig::default()).unwrap();
//! let request = EditRequest::new(img, object, EditTransform::translate(8, 0));
//! let report = run_edit(&request, &SamplerConfig::with_steps(16), &backend).unwrap();
//! assert_eq!(report.nfe, 64);
//! ```

pub mod attention;
pub mod backend;
pub mod bench;
pub mod config;
pub mod dump;
pub mod edit;
pub mod error;
pub mod guidance;
pub mod image;
pub mod latent;
pub mod mask;
pub mod sampler;
pub mod schedule;

pub use backend::{BackendSpec, Denoiser};
pub use edit::{EditKind, EditRequest, EditTransform, RegionMaskSet};
pub use error::{Error, Result};
pub use guidance::EnergyConfig;
pub use image::Image;
pub use latent::LatentGrid;
pub use mask::Mask;
pub use sampler::{run_edit, SamplerConfig, SamplerReport};
pub use schedule::{NoiseSchedule, ScheduleConfig};

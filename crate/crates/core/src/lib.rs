//! Weighted contrastive fine-tuning of a dual image/text encoder against
//! fixed breast-density prompts, with patient-aware cross-validation,
//! zero-shot evaluation and GradCAM saliency, all exercised on synthetic
//! density phantoms.

pub mod checkpoint;
pub mod curation;
pub mod density;
mod error;
pub mod evaluation;
pub mod grid;
pub mod image_io;
pub mod kv;
pub mod manifest;
pub mod model;
pub mod objective;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod saliency;
pub mod training;
pub mod util;

pub use error::{Error, Result};
pub use mammoclip_autodiff as autodiff;

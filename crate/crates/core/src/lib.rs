//! Diffusion-based synthetic data augmentation for image classification.
//!
//! The crate covers the whole loop at desk scale: a class-conditional
//! diffusion generator with an embedding-only training mode, classifier-gated
//! curation of generated images, balanced real/hybrid/synthetic training
//! scenarios, ensemble classifier training with early stopping, and top-k
//! evaluation reports.

pub mod archive;
pub mod curation;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod scenarios;
pub mod scoring;
pub mod seed;
pub mod split;
pub mod taxonomy;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use manifest::{ImageRecord, Manifest, Source, Split};
pub use taxonomy::ClassTaxonomy;

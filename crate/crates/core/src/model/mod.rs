//! Vision Transformer classifier with adapter injection and freezing.

pub mod checkpoint;
mod config;
mod vit;

pub use config::{AdapterSpec, AdapterVariant, ViTConfig};
pub use vit::{patchify, Bound, Model, ParamBreakdown, Parameter};

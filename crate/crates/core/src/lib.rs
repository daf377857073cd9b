//! Offline-to-online knowledge distillation for query-based video instance segmentation.

pub mod augment;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod mask;
pub mod nn;
pub mod offline_teacher;
pub mod pipeline;
pub mod qfa;
pub mod synthetic_video;
pub mod tracker;
pub mod vis_model;

pub use error::{OokdError, Result};

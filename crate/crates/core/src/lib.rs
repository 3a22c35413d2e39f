//! Closed-loop metamer exploration: Gram-matrix ICA axes over a convolutional
//! backbone, online pixel-space synthesis, adaptive ABX staircases, and
//! boundary analysis.

pub mod adaptive;
pub mod analysis;
pub mod backbone;
pub mod corpus;
mod container;
pub mod error;
pub mod features;
pub mod ica;
pub mod image;
pub mod observer;
pub mod pipeline;
pub mod service;
pub mod session;
pub mod simulate;
pub mod stimuli;
pub mod synthesis;

pub use backbone::{Backbone, BackboneConfig, FeatureMap, TapId};
pub use error::{Error, Result};
pub use image::ImageTensor;

//! Massive-activation toolkit for dual-stream diffusion transformers.
//!
//! * [`engine`]: a seeded miniature MMDiT with an Euler flow-matching
//!   sampler and per-(layer, timestep, stream) hooks.
//! * [`stats`]: per-sample channel means and top/bottom/random selection.
//! * [`disrupt`]: zero selected channels and measure output degradation.
//! * [`spatial`]: 2-means foreground masks from selected channels, plus
//!   segmentation metrics.
//! * [`transport`]: replace masked activations of a target run with those
//!   of a source run started from the same noise.
//! * [`io`]: the MADF activation dump, graymaps, JSON and CSV reports.

pub mod disrupt;
pub mod engine;
pub mod error;
pub mod io;
pub mod spatial;
pub mod stats;
pub mod tensor;
pub mod transport;

pub use error::{Error, Result};
pub use tensor::Matrix;

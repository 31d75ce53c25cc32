//! Satellite-image dehazing toolkit.
//!
//! The crate is organized around a hybrid windowed-attention U-Net
//! ([`network`]), a composite loss built from pixel, guided-filter, and
//! watershed terms ([`loss`]), the supporting raster operations
//! ([`imaging`], [`guided`], [`watershed`]), quality metrics ([`metrics`]),
//! and a dataset/training/ablation pipeline ([`data`], [`train`]).
//!
//! All numeric work is f64 and deterministic: the optional `parallel`
//! feature (rayon) only splits disjoint output slices, so results are
//! bitwise identical to the sequential fallback.

pub mod data;
pub mod error;
pub mod graph;
pub mod guided;
pub mod imaging;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod par;
pub mod train;
pub mod watershed;

#[doc(hidden)]
pub mod testutil;

pub use error::{Error, Result};
pub use imaging::{ImageBuffer, RangeTag};

//! Magnitude vectors of digital images and the edge detectors built from them.

pub mod analytic;
pub mod approx;
pub mod dataset;
pub mod edges;
pub mod error;
pub mod eval;
pub mod exact;
pub mod image;
pub mod learn;
pub mod metric;
pub mod topo;

pub use error::{Error, Result};
pub use exact::MagnitudeMap;
pub use image::{DigitalImage, PadMode};
pub use metric::{BaseMetric, MetricSpec};

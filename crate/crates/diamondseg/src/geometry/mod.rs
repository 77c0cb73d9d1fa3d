//! Contour and region geometry of predicted masks: connected components,
//! boundary tracing, polygon simplification, inter-region gap distances, and
//! per-frame derived features for growth monitoring.

mod components;
mod contour;
mod distance;
mod features;
mod shape;

pub use components::{connected_components, connected_components_binary, largest_component};
pub use contour::{chain_perimeter, douglas_peucker, polygon_area, polygon_perimeter, trace_contour};
pub use distance::{gap, region_boundary, squared_distance_transform, GapStats};
pub use features::{
    features_csv, fit_line, run_features, svg_area_chart, FeatureRow, FEATURES_CSV_HEADER,
};
pub use shape::{classify_component, classify_shape, ShapeClass, ShapeDecision, ShapeThresholds};

use thiserror::Error;

/// Pixel coordinate as (row, col).
pub type Pixel = (usize, usize);

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("no pixels of the requested region: {0}")]
    MissingRegion(&'static str),
    #[error("empty component")]
    EmptyComponent,
    #[error("contour is degenerate: {0}")]
    DegenerateContour(&'static str),
}

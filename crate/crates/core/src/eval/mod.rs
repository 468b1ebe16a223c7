//! Error metrics, multi-run aggregation, k-fold model selection and spatial
//! error maps.

mod cv;
mod heatmap;
mod metrics;

pub use cv::{cross_validate, CvEntry, CvResult};
pub use heatmap::{heatmap, Bounds, HeatmapGrid, EMPTY_CELL, EMPTY_PIXEL};
pub use metrics::{aggregate_runs, compute_metrics, Metrics, MetricsReport};

use crate::data::Dataset;
use crate::error::Result;
use crate::localizer::Localizer;

/// Single-run metrics of `model` on a labeled dataset.
pub fn evaluate(model: &Localizer, data: &Dataset) -> Result<MetricsReport> {
    let labels = data.labels()?;
    let preds: Vec<[f64; 2]> = model.predict(data)?.iter().map(|p| p.as_array()).collect();
    compute_metrics(&preds, &labels)
}

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Per-axis and Euclidean errors of one run, in meters.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub mae_x: f64,
    pub mae_y: f64,
    pub mae_d: f64,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_d: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 6] = ["mae_x", "mae_y", "mae_d", "rmse_x", "rmse_y", "rmse_d"];

    pub fn to_array(&self) -> [f64; 6] {
        [self.mae_x, self.mae_y, self.mae_d, self.rmse_x, self.rmse_y, self.rmse_d]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            mae_x: v[0],
            mae_y: v[1],
            mae_d: v[2],
            rmse_x: v[3],
            rmse_y: v[4],
            rmse_d: v[5],
        }
    }
}

/// Mean and population std over one or more runs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mean: Metrics,
    pub std: Metrics,
    pub runs: Vec<Metrics>,
}

impl MetricsReport {
    pub fn n_runs(&self) -> usize {
        self.runs.len()
    }

    pub fn csv_header() -> String {
        let mut h = String::from("label,n_runs");
        for n in Metrics::NAMES {
            write!(h, ",{n},{n}_std").unwrap();
        }
        h
    }

    pub fn csv_row(&self, label: &str) -> String {
        let mut row = format!("{label},{}", self.n_runs());
        for (m, s) in self.mean.to_array().iter().zip(self.std.to_array()) {
            write!(row, ",{m},{s}").unwrap();
        }
        row
    }

    /// Fixed-width table line: `mean ± std` per metric.
    pub fn table_row(&self, label: &str) -> String {
        let mut row = format!("{label:<24}");
        for (m, s) in self.mean.to_array().iter().zip(self.std.to_array()) {
            write!(row, " {m:>7.3} ± {s:<6.3}").unwrap();
        }
        row
    }

    pub fn table_header() -> String {
        let mut h = format!("{:<24}", "model");
        for n in Metrics::NAMES {
            write!(h, " {n:>16}").unwrap();
        }
        h
    }
}

/// Metrics of one run. `preds` and `labels` are `(x, y)` pairs in meters.
pub fn compute_metrics(preds: &[[f64; 2]], labels: &[[f64; 2]]) -> Result<MetricsReport> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if preds.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let n = preds.len() as f64;
    let mut acc = [0.0; 6];
    for (p, l) in preds.iter().zip(labels) {
        let (dx, dy) = (p[0] - l[0], p[1] - l[1]);
        acc[0] += dx.abs();
        acc[1] += dy.abs();
        acc[2] += dx.hypot(dy);
        acc[3] += dx * dx;
        acc[4] += dy * dy;
        acc[5] += dx * dx + dy * dy;
    }
    let m = Metrics {
        mae_x: acc[0] / n,
        mae_y: acc[1] / n,
        mae_d: acc[2] / n,
        rmse_x: (acc[3] / n).sqrt(),
        rmse_y: (acc[4] / n).sqrt(),
        rmse_d: (acc[5] / n).sqrt(),
    };
    Ok(MetricsReport {
        mean: m,
        std: Metrics::default(),
        runs: vec![m],
    })
}

/// Pools the runs of every report; mean and population std per metric.
pub fn aggregate_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let runs: Vec<Metrics> = reports.iter().flat_map(|r| r.runs.iter().copied()).collect();
    if runs.is_empty() {
        return Err(Error::Data("no runs to aggregate".into()));
    }
    let n = runs.len() as f64;
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for k in 0..6 {
        // deviations from the first run keep identical runs at exactly zero spread
        let first = runs[0].to_array()[k];
        let shift = runs.iter().map(|r| r.to_array()[k] - first).sum::<f64>() / n;
        mean[k] = first + shift;
        std[k] = (runs.iter().map(|r| (r.to_array()[k] - first - shift).powi(2)).sum::<f64>() / n).sqrt();
    }
    Ok(MetricsReport {
        mean: Metrics::from_array(mean),
        std: Metrics::from_array(std),
        runs,
    })
}

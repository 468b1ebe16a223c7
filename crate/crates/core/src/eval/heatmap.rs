use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// CSV cell text for a cell without samples.
pub const EMPTY_CELL: &str = "NA";
/// Graymap value of a cell without samples; sample cells use 0..=254.
pub const EMPTY_PIXEL: u8 = 255;

/// Axis-aligned area covered by the grid, in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub origin: [f64; 2],
    pub size: [f64; 2],
}

/// Mean distance error per cell, samples binned by their true position.
/// Row 0 is the lowest `y` band.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapGrid {
    pub origin: [f64; 2],
    pub cell: f64,
    pub rows: usize,
    pub cols: usize,
    /// Row-major mean error; `None` for empty cells.
    pub values: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Samples that fell outside the bounds.
    pub dropped: usize,
}

impl HeatmapGrid {
    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        self.values[row * self.cols + col]
    }

    pub fn count(&self, row: usize, col: usize) -> usize {
        self.counts[row * self.cols + col]
    }

    /// Count-weighted mean over non-empty cells.
    pub fn weighted_mean(&self) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (v, &c) in self.values.iter().zip(&self.counts) {
            if let Some(v) = v {
                s += v * c as f64;
                n += c;
            }
        }
        s / n as f64
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// CSV with the top row (largest `y`) first. Comment lines carry the
    /// geometry and optional receiver positions.
    pub fn to_csv(&self, receivers: &[[f64; 2]]) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "# origin_x={} origin_y={} cell={} rows={} cols={}",
            self.origin[0], self.origin[1], self.cell, self.rows, self.cols
        )
        .unwrap();
        if !receivers.is_empty() {
            let list: Vec<String> = receivers
                .iter()
                .enumerate()
                .map(|(i, r)| format!("R{}=({},{})", i + 1, r[0], r[1]))
                .collect();
            writeln!(out, "# receivers {}", list.join(" ")).unwrap();
        }
        for row in (0..self.rows).rev() {
            let cells: Vec<String> = (0..self.cols)
                .map(|c| match self.value(row, c) {
                    Some(v) => v.to_string(),
                    None => EMPTY_CELL.to_string(),
                })
                .collect();
            writeln!(out, "{}", cells.join(",")).unwrap();
        }
        out
    }

    /// Binary 8-bit graymap, top row first; 0 is zero error, 254 the largest
    /// cell error, 255 an empty cell.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        let max = self.max_value();
        for row in (0..self.rows).rev() {
            for c in 0..self.cols {
                out.push(match self.value(row, c) {
                    Some(v) if max > 0.0 => (254.0 * v / max).round() as u8,
                    Some(_) => 0,
                    None => EMPTY_PIXEL,
                });
            }
        }
        out
    }

    /// Sidecar text mapping gray levels back to meters.
    pub fn scale_text(&self) -> String {
        format!(
            "gray_min=0 meters=0\ngray_max=254 meters={}\nempty={EMPTY_PIXEL}\n",
            self.max_value()
        )
    }

    /// Writes `<stem>.csv`, `<stem>.pgm` and `<stem>.scale.txt`.
    pub fn write_all(&self, stem: impl AsRef<Path>, receivers: &[[f64; 2]]) -> Result<()> {
        let stem = stem.as_ref();
        let with = |ext: &str| {
            let mut p = stem.as_os_str().to_owned();
            p.push(ext);
            std::path::PathBuf::from(p)
        };
        for (path, bytes) in [
            (with(".csv"), self.to_csv(receivers).into_bytes()),
            (with(".pgm"), self.to_pgm()),
            (with(".scale.txt"), self.scale_text().into_bytes()),
        ] {
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Bins every sample by its true position into square cells of `cell`
/// meters. Without `bounds` the grid is aligned to multiples of `cell` and
/// covers all labels.
pub fn heatmap(preds: &[[f64; 2]], labels: &[[f64; 2]], cell: f64, bounds: Option<Bounds>) -> Result<HeatmapGrid> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    if !(cell > 0.0 && cell.is_finite()) {
        return Err(Error::Config(format!("cell size must be positive, got {cell}")));
    }
    if labels.is_empty() {
        return Err(Error::Data("no samples for the heatmap".into()));
    }
    let auto = bounds.is_none();
    let b = bounds.unwrap_or_else(|| {
        let lo = [0, 1].map(|a| (labels.iter().map(|l| l[a]).fold(f64::INFINITY, f64::min) / cell).floor() * cell);
        let hi = [0, 1].map(|a| labels.iter().map(|l| l[a]).fold(f64::NEG_INFINITY, f64::max));
        Bounds {
            origin: lo,
            size: [hi[0] - lo[0], hi[1] - lo[1]],
        }
    });
    let cols = ((b.size[0] / cell).floor() as usize + 1).max(1);
    let rows = ((b.size[1] / cell).floor() as usize + 1).max(1);
    let mut sums = vec![0.0; rows * cols];
    let mut counts = vec![0usize; rows * cols];
    let mut dropped = 0;
    for (p, l) in preds.iter().zip(labels) {
        let fx = (l[0] - b.origin[0]) / cell;
        let fy = (l[1] - b.origin[1]) / cell;
        let inside = auto
            || (l[0] >= b.origin[0]
                && l[1] >= b.origin[1]
                && l[0] <= b.origin[0] + b.size[0]
                && l[1] <= b.origin[1] + b.size[1]);
        if !inside {
            dropped += 1;
            continue;
        }
        let (c, r) = ((fx.max(0.0).floor() as usize).min(cols - 1), (fy.max(0.0).floor() as usize).min(rows - 1));
        sums[r * cols + c] += (p[0] - l[0]).hypot(p[1] - l[1]);
        counts[r * cols + c] += 1;
    }
    if dropped == labels.len() {
        return Err(Error::Data("every sample lies outside the heatmap bounds".into()));
    }
    if dropped > 0 {
        log::warn!("{dropped} samples outside the heatmap bounds were skipped");
    }
    let values = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok(HeatmapGrid {
        origin: b.origin,
        cell,
        rows,
        cols,
        values,
        counts,
        dropped,
    })
}

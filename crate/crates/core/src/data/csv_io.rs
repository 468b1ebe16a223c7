use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, FEATURE_COLUMNS, N_FEATURES};
use crate::error::{Error, Result};

/// Maps canonical columns onto the header names of a particular file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub features: [String; N_FEATURES],
    pub x: String,
    pub y: String,
    /// Set to false to ignore label columns even when present.
    pub labels: bool,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            features: FEATURE_COLUMNS.map(String::from),
            x: "x".into(),
            y: "y".into(),
            labels: true,
        }
    }
}

impl ColumnMapping {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("column mapping: {e}")))
    }

    pub fn without_labels() -> Self {
        Self {
            labels: false,
            ..Self::default()
        }
    }
}

/// Reads a dataset. Rows with a non-finite value are dropped and counted.
pub fn load_csv(path: impl AsRef<Path>, mapping: &ColumnMapping) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(std::io::BufReader::new(file));
    let headers = reader.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let mut feature_idx = [0usize; N_FEATURES];
    for (slot, name) in feature_idx.iter_mut().zip(&mapping.features) {
        *slot = find(name).ok_or_else(|| Error::MissingColumn(name.clone()))?;
    }
    let label_idx = if mapping.labels {
        match (find(&mapping.x), find(&mapping.y)) {
            (Some(x), Some(y)) => Some((x, y)),
            (None, None) => None,
            (Some(_), None) => return Err(Error::MissingColumn(mapping.y.clone())),
            (None, Some(_)) => return Err(Error::MissingColumn(mapping.x.clone())),
        }
    } else {
        None
    };

    let parse = |record: &csv::StringRecord, idx: usize, row: usize| -> Result<f64> {
        let cell = record.get(idx).unwrap_or("");
        cell.parse::<f64>().map_err(|e| Error::Parse {
            row,
            column: headers.get(idx).unwrap_or("?").to_string(),
            message: format!("`{cell}`: {e}"),
        })
    };

    let mut samples = Vec::new();
    let mut dropped = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let mut features = [0.0; N_FEATURES];
        for (f, &idx) in features.iter_mut().zip(&feature_idx) {
            *f = parse(&record, idx, row)?;
        }
        let label = match label_idx {
            Some((xi, yi)) => Some([parse(&record, xi, row)?, parse(&record, yi, row)?]),
            None => None,
        };
        let sample = Sample::new(features, label);
        if sample.is_finite() {
            samples.push(sample);
        } else {
            log::warn!("{}: dropping row {row} with a non-finite value", path.display());
            dropped += 1;
        }
    }
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} rows with non-finite values", path.display());
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, samples)
}

/// Writes the canonical schema. Values use the shortest round-trip decimal
/// representation, so reloading is bit-exact.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header: Vec<&str> = FEATURE_COLUMNS.to_vec();
    if dataset.is_labeled() {
        header.extend(["x", "y"]);
    }
    w.write_record(&header)?;
    for s in dataset.samples() {
        let mut row: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
        if let Some([x, y]) = s.label {
            row.push(x.to_string());
            row.push(y.to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, N_FEATURES};
use crate::error::{Error, Result};
use crate::nn::{stream, Rng};

/// Minimum tag-receiver distance used by the path-loss model.
const MIN_DISTANCE: f64 = 0.1;

/// Log-distance path loss scenario with log-normal shadowing. The tag walks
/// straight lines parallel to the x axis, alternating direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub name: String,
    /// Room width and depth in meters.
    pub room: [f64; 2],
    pub receivers: [[f64; 2]; 4],
    pub path_loss_exponent: f64,
    /// Received power at 1 m, dBm.
    pub p0_dbm: f64,
    pub shadowing_std_db: f64,
    /// Gain offsets of the x- and y-polarized lines, dB.
    pub polarization_gain_db: [f64; 2],
    /// Distance between neighbouring trajectory lines, meters.
    pub line_spacing: f64,
    /// Distance kept from the walls, meters.
    pub margin: f64,
    /// Tag speed, m/s.
    pub speed: f64,
    /// Time between readings, s.
    pub sample_interval: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::source_layout()
    }
}

impl SynthConfig {
    /// Receivers at the middle of each wall.
    pub fn source_layout() -> Self {
        Self {
            name: "source".into(),
            room: [10.0, 10.0],
            receivers: [[5.0, 0.5], [0.5, 5.0], [5.0, 9.5], [9.5, 5.0]],
            path_loss_exponent: 2.2,
            p0_dbm: -30.0,
            shadowing_std_db: 0.5,
            polarization_gain_db: [0.0, -3.0],
            line_spacing: 1.0,
            margin: 0.5,
            speed: 0.28,
            sample_interval: 0.25,
            seed: 1,
        }
    }

    /// Receivers pulled half a meter inward in a more cluttered room
    /// (steeper path loss).
    pub fn target_layout() -> Self {
        Self {
            name: "target".into(),
            receivers: [[5.0, 1.0], [1.0, 5.0], [5.0, 9.0], [9.0, 5.0]],
            path_loss_exponent: 4.0,
            seed: 2,
            ..Self::source_layout()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("synthetic config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |v: f64| v.is_finite();
        if !self.room.iter().all(|v| finite(*v) && *v > 0.0) {
            return Err(Error::Config("room extents must be positive".into()));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                if self.receivers[i] == self.receivers[j] {
                    return Err(Error::Config(format!("receivers {} and {} coincide", i + 1, j + 1)));
                }
            }
        }
        if !(self.line_spacing > 0.0) {
            return Err(Error::Config("line spacing must be positive".into()));
        }
        if !(self.shadowing_std_db >= 0.0) {
            return Err(Error::Config("shadowing std must be non-negative".into()));
        }
        if !(self.speed > 0.0 && self.sample_interval > 0.0) {
            return Err(Error::Config("speed and sample interval must be positive".into()));
        }
        if !(self.margin >= 0.0) || !finite(self.path_loss_exponent) || !finite(self.p0_dbm) {
            return Err(Error::Config("invalid margin, exponent or reference power".into()));
        }
        Ok(())
    }

    /// Tag positions along the trajectory.
    pub fn trajectory(&self) -> Vec<[f64; 2]> {
        let (x0, x1) = (self.margin, self.room[0] - self.margin);
        let (y0, y1) = (self.margin, self.room[1] - self.margin);
        if x1 <= x0 || y1 < y0 {
            return Vec::new();
        }
        let step = self.speed * self.sample_interval;
        let n_steps = ((x1 - x0) / step + 1e-9).floor() as usize;
        let n_lines = ((y1 - y0) / self.line_spacing + 1e-9).floor() as usize + 1;
        let mut points = Vec::with_capacity(n_lines * (n_steps + 1));
        for line in 0..n_lines {
            let y = y0 + line as f64 * self.line_spacing;
            for s in 0..=n_steps {
                let along = s as f64 * step;
                let x = if line % 2 == 0 { x0 + along } else { x1 - along };
                points.push([x, y]);
            }
        }
        points
    }

    /// Noise-free received power at each receiver and polarization.
    pub fn mean_power(&self, tag: [f64; 2]) -> [f64; N_FEATURES] {
        std::array::from_fn(|i| {
            let rx = self.receivers[i / 2];
            let d = (tag[0] - rx[0]).hypot(tag[1] - rx[1]).max(MIN_DISTANCE);
            self.p0_dbm - 10.0 * self.path_loss_exponent * d.log10() + self.polarization_gain_db[i % 2]
        })
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let path = cfg.trajectory();
    if path.is_empty() {
        return Err(Error::Data(format!(
            "scenario `{}` has a zero-length trajectory",
            cfg.name
        )));
    }
    let mut rng = Rng::keyed(cfg.seed, &[stream::SYNTH]);
    let samples = path
        .into_iter()
        .map(|tag| {
            let mut features = cfg.mean_power(tag);
            if cfg.shadowing_std_db > 0.0 {
                for f in &mut features {
                    *f += rng.normal(cfg.shadowing_std_db);
                }
            }
            Sample::new(features, Some(tag))
        })
        .collect();
    Dataset::new(cfg.name.clone(), samples)
}

//! Run configuration: a flat TOML key set plus the sensor roster.
//!
//! ```toml
//! seed = 42
//! knot_spacing = 0.08
//! time_offset_bound = 0.1
//! stages = ["BO1", "BO2", "BO3"]
//! truth = "truth.json"
//!
//! [[sensors]]
//! id = "imu0"
//! kind = "imu"
//! path = "imu0.csv"
//! rate = 400.0
//! gyro_noise = 0.002
//! accel_noise = 0.02
//!
//! [[sensors]]
//! id = "radar0"
//! kind = "radar"
//! path = "radar0.csv"
//! rate = 10.0
//! doppler_noise = 0.05
//! ```
//!
//! Relative paths are resolved against the directory of the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use radimu::estimator::{EstimatorConfig, Stage};
use radimu::init::{InitConfig, InitError};
use radimu::io::{read_imu_csv, read_radar_csv};
use radimu::models::{Dataset, ImuData, RadarData};
use radimu::pipeline::PipelineConfig;
use radimu::report::SensorKind;
use radimu::sim::SimConfig;
use radimu::solver::SolverOptions;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorConfig {
    pub id: String,
    pub kind: SensorKind,
    /// CSV file of the stream.
    pub path: PathBuf,
    /// Nominal sample or scan rate [Hz].
    pub rate: f64,
    /// IMU noise sigmas per sample [rad/s, m/s²].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gyro_noise: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accel_noise: Option<f64>,
    /// Radar Doppler noise sigma [m/s].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub doppler_noise: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads; all cores when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Spline knot spacing [s].
    pub knot_spacing: f64,
    /// Symmetric bound on every time offset [s].
    pub time_offset_bound: f64,
    pub stages: Vec<Stage>,
    /// Cauchy loss scale in standardized units.
    pub cauchy_scale: f64,
    pub robust_loss: bool,
    /// Sigma of the gauge-fixing center residuals.
    pub center_sigma: f64,
    /// Fail with the convergence exit code when a batch stage stops at the
    /// iteration limit.
    pub require_convergence: bool,
    /// Ground-truth report; enables the error table.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
    pub solver: SolverOptions,
    pub init: InitConfig,
    pub sensors: Vec<SensorConfig>,
    /// Scenario for `simulate`; the default scenario when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let est = EstimatorConfig::default();
        Self {
            seed: SimConfig::default().seed,
            output: None,
            threads: None,
            knot_spacing: est.knot_spacing,
            time_offset_bound: est.time_offset_bound,
            stages: est.stages,
            cauchy_scale: est.cauchy_scale.unwrap_or(1.0),
            robust_loss: est.cauchy_scale.is_some(),
            center_sigma: est.center_sigma,
            require_convergence: true,
            truth: None,
            solver: est.solver,
            init: InitConfig::default(),
            sensors: Vec::new(),
            simulation: None,
        }
    }
}

/// A config together with the directory its relative paths refer to.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub base: PathBuf,
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn truth_path(&self) -> Option<PathBuf> {
        self.config.truth.as_deref().map(|p| self.resolve(p))
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn pipeline(&self) -> PipelineConfig {
        let mut init = self.init.clone();
        init.ego_velocity.seed = self.seed;
        PipelineConfig {
            estimator: EstimatorConfig {
                knot_spacing: self.knot_spacing,
                time_offset_bound: self.time_offset_bound,
                cauchy_scale: self.robust_loss.then_some(self.cauchy_scale),
                center_sigma: self.center_sigma,
                stages: self.stages.clone(),
                solver: self.solver.clone(),
            },
            init,
        }
    }

    /// Checks everything that does not need the data files.
    pub fn validate(&self) -> Result<(), CliError> {
        positive("knot_spacing", self.knot_spacing)?;
        self.pipeline().estimator.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        let mut ids = BTreeSet::new();
        for s in &self.sensors {
            if !ids.insert(s.id.as_str()) {
                return Err(CliError::Config(format!("duplicate sensor id {}", s.id)));
            }
            positive(&format!("{}: rate", s.id), s.rate)?;
            match s.kind {
                SensorKind::Imu => {
                    if s.doppler_noise.is_some() {
                        return Err(CliError::Config(format!("{}: doppler_noise is a radar setting", s.id)));
                    }
                    let need = |name: &str, v: Option<f64>| match v {
                        Some(v) => positive(&format!("{}: {name}", s.id), v),
                        None => Err(CliError::Config(format!("{}: missing {name}", s.id))),
                    };
                    need("gyro_noise", s.gyro_noise)?;
                    need("accel_noise", s.accel_noise)?;
                }
                SensorKind::Radar => {
                    if s.gyro_noise.is_some() || s.accel_noise.is_some() {
                        return Err(CliError::Config(format!("{}: gyro/accel noise are IMU settings", s.id)));
                    }
                    match s.doppler_noise {
                        Some(v) => positive(&format!("{}: doppler_noise", s.id), v)?,
                        None => return Err(CliError::Config(format!("{}: missing doppler_noise", s.id))),
                    }
                }
            }
        }
        Ok(())
    }

    /// Validation for calibration: at least one sensor of each kind.
    pub fn validate_calibration(&self) -> Result<(), CliError> {
        self.validate()?;
        let count = |k: SensorKind| self.sensors.iter().filter(|s| s.kind == k).count();
        if count(SensorKind::Imu) == 0 {
            return Err(CliError::Data(InitError::NoImu.to_string()));
        }
        if count(SensorKind::Radar) == 0 {
            return Err(CliError::Data(InitError::NoRadar.to_string()));
        }
        Ok(())
    }
}

/// Relative deviation of a stream's median sampling interval from the
/// nominal rate.
fn rate_mismatch(times: impl Iterator<Item = f64>, rate: f64) -> Option<f64> {
    let t: Vec<f64> = times.collect();
    let mut dt: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    if dt.is_empty() {
        return None;
    }
    dt.sort_by(f64::total_cmp);
    let observed = 1.0 / dt[dt.len() / 2];
    let rel = (observed - rate).abs() / rate;
    (rel > 0.2).then_some(observed)
}

impl LoadedConfig {
    /// Reads every stream of the roster; IMUs first, then radars, each in
    /// roster order.
    pub fn load_dataset(&self) -> Result<Dataset, CliError> {
        let mut data = Dataset::default();
        for s in &self.config.sensors {
            let path = self.resolve(&s.path);
            if !path.is_file() {
                return Err(CliError::Data(format!("{}: data file {} not found", s.id, path.display())));
            }
            match s.kind {
                SensorKind::Imu => {
                    let samples = read_imu_csv(&path).map_err(|e| CliError::Data(e.to_string()))?;
                    if samples.is_empty() {
                        return Err(CliError::Data(format!("{}: no samples", s.id)));
                    }
                    if let Some(r) = rate_mismatch(samples.iter().map(|m| m.t), s.rate) {
                        log::warn!("{}: observed rate {r:.1} Hz, configured {} Hz", s.id, s.rate);
                    }
                    data.imus.push(ImuData {
                        name: s.id.clone(),
                        samples,
                        gyro_noise: s.gyro_noise.unwrap_or_default(),
                        accel_noise: s.accel_noise.unwrap_or_default(),
                    });
                }
                SensorKind::Radar => {
                    let targets = read_radar_csv(&path).map_err(|e| CliError::Data(e.to_string()))?;
                    if targets.is_empty() {
                        return Err(CliError::Data(format!("{}: no targets", s.id)));
                    }
                    let mut scan_times: Vec<f64> = targets.iter().map(|m| m.t).collect();
                    scan_times.dedup();
                    if let Some(r) = rate_mismatch(scan_times.into_iter(), s.rate) {
                        log::warn!("{}: observed scan rate {r:.1} Hz, configured {} Hz", s.id, s.rate);
                    }
                    data.radars.push(RadarData {
                        name: s.id.clone(),
                        targets,
                        doppler_noise: s.doppler_noise.unwrap_or_default(),
                    });
                }
            }
        }
        Ok(data)
    }

    /// IMU and radar ids in the order of [`Self::load_dataset`].
    pub fn sensor_ids(&self) -> (Vec<String>, Vec<String>) {
        let ids = |k: SensorKind| self.config.sensors.iter().filter(|s| s.kind == k).map(|s| s.id.clone()).collect();
        (ids(SensorKind::Imu), ids(SensorKind::Radar))
    }
}

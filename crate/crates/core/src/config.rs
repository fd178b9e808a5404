//! TOML run configuration for the simulate, fd, calibrate and gradcheck
//! commands, and the data pipeline that turns a calibration config plus a
//! data file into a [`CalibrationProblem`].

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationConfig, CalibrationProblem};
use crate::data_io;
use crate::error::{Error, Result};
use crate::geometry::{Rect, Vec2};
use crate::gradcheck::GradCheckSpec;
use crate::model::{ControlVector, ModelParams};
use crate::simulator::{step_count, Boundaries, Group, Scenario, Trajectory};

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|source| Error::Toml {
        path: path.to_path_buf(),
        source,
    })
}

fn default_corridor() -> Boundaries {
    Boundaries::CORRIDOR
}

/// Fundamental-diagram sampling: region of interest and sample times
/// `start, start + interval, …` up to the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub region: Rect,
    pub interval: f64,
    #[serde(default)]
    pub start: f64,
}

impl FdConfig {
    pub fn sample_times(&self, horizon: f64) -> Result<Vec<f64>> {
        if !(self.interval > 0.0) || self.start < 0.0 {
            return Err(Error::Config(
                "fd interval must be positive and start non-negative".into(),
            ));
        }
        let n = ((horizon - self.start) / self.interval + 1e-9).floor();
        if n < 0.0 {
            return Ok(Vec::new());
        }
        Ok((0..=n as usize)
            .map(|k| self.start + k as f64 * self.interval)
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub seed: u64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub params: ModelParams,
    pub domain: Rect,
    #[serde(default = "default_corridor")]
    pub boundaries: Boundaries,
    pub groups: Vec<Group>,
    /// Gap (m) separating lanes in the lane-count estimate; defaults to `d`.
    #[serde(default)]
    pub lane_gap: Option<f64>,
    #[serde(default)]
    pub fd: Option<FdConfig>,
}

impl SimulationConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: SimulationConfig = load_toml(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario(&self) -> Scenario {
        Scenario {
            domain: self.domain,
            boundaries: self.boundaries,
            groups: self.groups.clone(),
            diameter: self.params.diameter,
            seed: self.seed,
        }
    }

    pub fn lane_gap(&self) -> f64 {
        self.lane_gap.unwrap_or(self.params.diameter)
    }

    pub fn validate(&self) -> Result<()> {
        step_count(self.horizon, self.dt)?;
        self.params.validate()?;
        self.scenario().validate()?;
        if let Some(fd) = &self.fd {
            fd.sample_times(self.horizon)?;
            if !self.domain.contains_rect(&fd.region) || !fd.region.is_valid() {
                return Err(Error::Config(
                    "fd region must be a non-empty rectangle inside the domain".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// Whitespace archive rows (id, frame, x, y[, z]).
    #[default]
    Archive,
    /// CSV written by the trajectory export.
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialVelocity {
    /// Each agent starts at its group's desired velocity.
    #[default]
    Desired,
    /// Velocities of the data's first frame.
    Data,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub format: DataFormat,
    /// `"id,frame,x,y[,z]"` column indices (archive format).
    #[serde(default)]
    pub column_map: Option<String>,
    #[serde(default)]
    pub unit_scale: Option<f64>,
    #[serde(default)]
    pub frame_rate: Option<f64>,
    /// Window start (s, data clock).
    #[serde(default)]
    pub t0: f64,
    /// Averaging window for mean velocities; defaults to `[t0, t0 + T]`.
    #[serde(default)]
    pub velocity_window: Option<[f64; 2]>,
    #[serde(default)]
    pub initial_velocity: InitialVelocity,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            format: DataFormat::Archive,
            column_map: None,
            unit_scale: None,
            frame_rate: None,
            t0: 0.0,
            velocity_window: None,
            initial_velocity: InitialVelocity::Desired,
        }
    }
}

/// A walking direction class. Agents join the group whose direction best
/// matches their mean velocity; `desired` overrides the group mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataGroup {
    pub name: String,
    pub direction: Vec2,
    #[serde(default)]
    pub desired: Option<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationRunConfig {
    #[serde(default)]
    pub seed: u64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    /// Fixed model parameters; λ, A and R here are ignored in favor of `u0`.
    pub params: ModelParams,
    pub u0: ControlVector,
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub groups: Vec<DataGroup>,
}

/// Command-line replacements for config values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataOverrides {
    pub seed: Option<u64>,
    pub column_map: Option<String>,
    pub unit_scale: Option<f64>,
    pub frame_rate: Option<f64>,
    pub t0: Option<f64>,
    pub window: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub name: String,
    pub agents: usize,
    pub desired: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSummary {
    pub path: PathBuf,
    pub agents: usize,
    pub dropped: usize,
    pub agent_ids: Vec<i64>,
    pub groups: Vec<GroupSummary>,
}

impl CalibrationRunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        load_toml(path)
    }

    pub fn apply(&mut self, o: &DataOverrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(m) = &o.column_map {
            self.data.column_map = Some(m.clone());
        }
        if let Some(s) = o.unit_scale {
            self.data.unit_scale = Some(s);
        }
        if let Some(f) = o.frame_rate {
            self.data.frame_rate = Some(f);
        }
        if let Some(t) = o.t0 {
            self.data.t0 = t;
        }
        if let Some(w) = o.window {
            self.horizon = w;
        }
    }

    /// Calibration settings with the run's seed.
    pub fn calibration(&self) -> CalibrationConfig {
        CalibrationConfig {
            seed: self.seed,
            ..self.calibration.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        step_count(self.horizon, self.dt)?;
        self.params.validate()?;
        self.calibration().validate()?;
        if !self.u0.is_finite() {
            return Err(Error::Config("u0 must be finite".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::Config("at least one [[groups]] entry is required".into()));
        }
        if self.groups.iter().any(|g| !(g.direction.norm() > 0.0)) {
            return Err(Error::Config("group directions must be non-zero".into()));
        }
        Ok(())
    }

    /// Load and window the data, assign agents to groups, and assemble the
    /// calibration problem.
    pub fn prepare(&self, data_path: &Path) -> Result<(CalibrationProblem, DataSummary)> {
        self.validate()?;
        let t0 = self.data.t0;
        let window = self.data.velocity_window.unwrap_or([t0, t0 + self.horizon]);
        let (data, ids, dropped, mean) = match self.data.format {
            DataFormat::Archive => {
                let map = match &self.data.column_map {
                    Some(m) => m.parse()?,
                    None => return Err(Error::Config("archive data needs a column map".into())),
                };
                let scale = self
                    .data
                    .unit_scale
                    .ok_or_else(|| Error::Config("archive data needs a unit scale".into()))?;
                let rate = self
                    .data
                    .frame_rate
                    .ok_or_else(|| Error::Config("archive data needs a frame rate".into()))?;
                let archive = data_io::parse_archive(data_path, map, rate, scale)?;
                let r = data_io::resample(&archive, t0, self.horizon, self.dt, None)?;
                let mean: Vec<Option<Vec2>> = r
                    .agent_ids
                    .iter()
                    .map(|id| data_io::agent_mean_velocity(&archive, *id, (window[0], window[1])))
                    .collect();
                (r.trajectory, r.agent_ids, r.dropped, mean)
            }
            DataFormat::Trajectory => {
                let traj = data_io::read_trajectory(data_path)?;
                let (w, ids) = window_trajectory(&traj, t0, self.horizon, self.dt)?;
                let mean = trajectory_mean_velocities(&traj, window)?;
                (w, ids, 0, mean)
            }
        };
        if dropped > 0 {
            info!("{dropped} agents dropped for not covering the window");
        }
        let directions: Vec<Vec2> = self.groups.iter().map(|g| g.direction).collect();
        let v_class: Vec<Vec2> = mean
            .iter()
            .enumerate()
            .map(|(i, m)| m.unwrap_or(data.velocities[0][i]))
            .collect();
        let assign = data_io::classify_by_direction(&v_class, &directions);
        let mut groups = Vec::with_capacity(self.groups.len());
        for (g, spec) in self.groups.iter().enumerate() {
            let members: Vec<usize> = (0..assign.len()).filter(|&i| assign[i] == g).collect();
            let measured: Vec<Vec2> = members.iter().filter_map(|&i| mean[i]).collect();
            let desired = match spec.desired {
                Some(w) => w,
                None if !measured.is_empty() => measured.iter().fold(Vec2::ZERO, |s, v| s + *v) / measured.len() as f64,
                None if members.is_empty() => spec.direction,
                None => {
                    return Err(Error::Config(format!(
                        "group {}: no agent has enough frames to estimate a desired velocity",
                        spec.name
                    )))
                }
            };
            groups.push(GroupSummary {
                name: spec.name.clone(),
                agents: members.len(),
                desired,
            });
        }
        let desired: Vec<Vec2> = assign.iter().map(|&g| groups[g].desired).collect();
        let initial_velocities = match self.data.initial_velocity {
            InitialVelocity::Desired => desired.clone(),
            InitialVelocity::Data => data.velocities[0].clone(),
        };
        let problem = CalibrationProblem {
            data,
            desired,
            initial_velocities,
            params: self.params.with_control(self.u0),
        };
        problem.validate()?;
        let summary = DataSummary {
            path: data_path.to_path_buf(),
            agents: ids.len(),
            dropped,
            agent_ids: ids,
            groups,
        };
        Ok((problem, summary))
    }
}

/// Frames `[t0, t0 + T]` of a stored trajectory, which must share the
/// simulation step.
fn window_trajectory(traj: &Trajectory, t0: f64, horizon: f64, dt: f64) -> Result<(Trajectory, Vec<i64>)> {
    if (traj.dt - dt).abs() > 1e-12 * dt {
        return Err(Error::GridMismatch(format!(
            "data step {} differs from dt = {dt}",
            traj.dt
        )));
    }
    let first = (t0 / dt).round();
    if first < 0.0 || (first * dt - t0).abs() > 1e-9 {
        return Err(Error::GridMismatch(format!("t0 = {t0} is not on the data grid")));
    }
    let first = first as usize;
    let steps = step_count(horizon, dt)?;
    if first + steps >= traj.n_frames() {
        return Err(Error::NoCoverage { t0, t1: t0 + horizon });
    }
    let range = first..=first + steps;
    let w = Trajectory {
        dt,
        positions: traj.positions[range.clone()].to_vec(),
        velocities: traj.velocities[range].to_vec(),
    };
    Ok((w, (0..traj.n_agents() as i64).collect()))
}

fn trajectory_mean_velocities(traj: &Trajectory, window: [f64; 2]) -> Result<Vec<Option<Vec2>>> {
    let a = (window[0] / traj.dt).round().max(0.0) as usize;
    let b = ((window[1] / traj.dt).round() as usize).min(traj.steps());
    if b <= a {
        return Ok(vec![None; traj.n_agents()]);
    }
    let span = (b - a) as f64 * traj.dt;
    Ok((0..traj.n_agents())
        .map(|i| Some((traj.positions[b][i] - traj.positions[a][i]) / span))
        .collect())
}

pub fn load_gradcheck(path: &Path) -> Result<GradCheckSpec> {
    let spec: GradCheckSpec = load_toml(path)?;
    spec.validate()?;
    Ok(spec)
}

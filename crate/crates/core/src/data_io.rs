//! Pedestrian archive ingestion, resampling onto the simulation grid, and
//! CSV/JSON export.
//!
//! Archive files are whitespace-separated numeric rows. Which column holds the
//! agent id, frame index and coordinates is given by a [`ColumnMap`]; lines
//! starting with `#` and blank lines are skipped.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec2;
use crate::simulator::{step_count, Trajectory};

/// Tolerance (s) when checking that data covers a time window.
const COVER_EPS: f64 = 1e-9;

/// Column indices of `(id, frame, x, y[, z])` in an archive row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub id: usize,
    pub frame: usize,
    pub x: usize,
    pub y: usize,
    #[serde(default)]
    pub z: Option<usize>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            id: 0,
            frame: 1,
            x: 2,
            y: 3,
            z: None,
        }
    }
}

impl ColumnMap {
    fn width(&self) -> usize {
        [self.id, self.frame, self.x, self.y]
            .into_iter()
            .chain(self.z)
            .max()
            .unwrap_or(0)
            + 1
    }
}

impl FromStr for ColumnMap {
    type Err = Error;

    /// Parses `"id,frame,x,y"` or `"id,frame,x,y,z"`.
    fn from_str(s: &str) -> Result<Self> {
        let cols: Vec<usize> = s
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("column map {s:?}: {e}")))?;
        match cols[..] {
            [id, frame, x, y] => Ok(ColumnMap {
                id,
                frame,
                x,
                y,
                z: None,
            }),
            [id, frame, x, y, z] => Ok(ColumnMap {
                id,
                frame,
                x,
                y,
                z: Some(z),
            }),
            _ => Err(Error::Config(format!("column map {s:?} needs 4 or 5 indices"))),
        }
    }
}

/// Raw per-agent samples, keyed by archive id.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveTrajectory {
    pub frame_rate: f64,
    pub unit_scale: f64,
    /// Frame-sorted `(frame, position in m)` per agent id.
    pub agents: BTreeMap<i64, Vec<(i64, Vec2)>>,
}

impl ArchiveTrajectory {
    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn frame_time(&self, frame: i64) -> f64 {
        frame as f64 / self.frame_rate
    }
}

fn parse_integer(token: &str) -> Option<i64> {
    if let Ok(v) = token.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = token.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

pub fn parse_archive_str(text: &str, map: ColumnMap, frame_rate: f64, unit_scale: f64) -> Result<ArchiveTrajectory> {
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(Error::Config(format!("frame rate {frame_rate} must be positive")));
    }
    if !(unit_scale > 0.0 && unit_scale.is_finite()) {
        return Err(Error::Config(format!("unit scale {unit_scale} must be positive")));
    }
    let width = map.width();
    let mut agents: BTreeMap<i64, Vec<(i64, Vec2)>> = BTreeMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = trimmed.split_whitespace().collect();
        if tokens.len() < width {
            return Err(Error::Parse {
                line,
                message: format!("expected at least {width} columns, found {}", tokens.len()),
            });
        }
        let int = |c: usize, what: &str| {
            parse_integer(tokens[c]).ok_or_else(|| Error::Parse {
                line,
                message: format!("{what} {:?} is not an integer", tokens[c]),
            })
        };
        let float = |c: usize, what: &str| {
            tokens[c]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line,
                    message: format!("{what} {:?} is not a finite number", tokens[c]),
                })
        };
        let id = int(map.id, "id")?;
        let frame = int(map.frame, "frame")?;
        let x = float(map.x, "x")?;
        let y = float(map.y, "y")?;
        if let Some(z) = map.z {
            float(z, "z")?;
        }
        agents
            .entry(id)
            .or_default()
            .push((frame, Vec2::new(x * unit_scale, y * unit_scale)));
    }
    for (id, samples) in agents.iter_mut() {
        samples.sort_by_key(|s| s.0);
        if let Some(w) = samples.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateSample { id: *id, frame: w[0].0 });
        }
    }
    Ok(ArchiveTrajectory {
        frame_rate,
        unit_scale,
        agents,
    })
}

pub fn parse_archive(path: &Path, map: ColumnMap, frame_rate: f64, unit_scale: f64) -> Result<ArchiveTrajectory> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_archive_str(&text, map, frame_rate, unit_scale)
}

/// Data on the simulation grid plus the archive ids of its agents.
#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub trajectory: Trajectory,
    pub agent_ids: Vec<i64>,
    /// Selected agents dropped because they do not cover the window.
    pub dropped: usize,
}

fn interpolate(samples: &[(f64, Vec2)], t: f64) -> Vec2 {
    let k = samples.partition_point(|s| s.0 <= t);
    if k == 0 {
        return samples[0].1;
    }
    if k == samples.len() {
        return samples[k - 1].1;
    }
    let (t0, p0) = samples[k - 1];
    let (t1, p1) = samples[k];
    if t == t0 {
        return p0;
    }
    p0.lerp(p1, (t - t0) / (t1 - t0))
}

/// Linear interpolation of the archive onto `t0 + k·dt`, `k = 0..=K`.
///
/// Agents whose samples do not cover `[t0, t0 + T]` are dropped. Velocities
/// are central differences of the resampled positions (one-sided at the ends).
pub fn resample(
    data: &ArchiveTrajectory,
    t0: f64,
    horizon: f64,
    dt: f64,
    selection: Option<&[i64]>,
) -> Result<Resampled> {
    let steps = step_count(horizon, dt)?;
    let t_end = t0 + horizon;
    let mut kept: Vec<(i64, Vec<Vec2>)> = Vec::new();
    let mut dropped = 0;
    let ids: Vec<i64> = match selection {
        Some(sel) => sel.to_vec(),
        None => data.agents.keys().copied().collect(),
    };
    for id in ids {
        let Some(raw) = data.agents.get(&id) else {
            warn!("agent {id} not in data");
            dropped += 1;
            continue;
        };
        let samples: Vec<(f64, Vec2)> = raw.iter().map(|(f, p)| (data.frame_time(*f), *p)).collect();
        let covers = samples.first().is_some_and(|s| s.0 <= t0 + COVER_EPS)
            && samples.last().is_some_and(|s| s.0 >= t_end - COVER_EPS);
        if !covers {
            dropped += 1;
            continue;
        }
        let track = (0..=steps).map(|k| interpolate(&samples, t0 + k as f64 * dt)).collect();
        kept.push((id, track));
    }
    if kept.is_empty() {
        return Err(Error::NoCoverage { t0, t1: t_end });
    }
    let n = kept.len();
    let mut positions = vec![Vec::with_capacity(n); steps + 1];
    for (_, track) in &kept {
        for (k, p) in track.iter().enumerate() {
            positions[k].push(*p);
        }
    }
    let velocities = finite_difference_velocities(&positions, dt);
    Ok(Resampled {
        trajectory: Trajectory {
            dt,
            positions,
            velocities,
        },
        agent_ids: kept.into_iter().map(|(id, _)| id).collect(),
        dropped,
    })
}

fn finite_difference_velocities(positions: &[Vec<Vec2>], dt: f64) -> Vec<Vec<Vec2>> {
    let last = positions.len() - 1;
    (0..=last)
        .map(|k| {
            if last == 0 {
                return vec![Vec2::ZERO; positions[0].len()];
            }
            let (a, b, span) = match k {
                0 => (0, 1, dt),
                k if k == last => (last - 1, last, dt),
                k => (k - 1, k + 1, 2.0 * dt),
            };
            positions[a]
                .iter()
                .zip(&positions[b])
                .map(|(p, q)| (*q - *p) / span)
                .collect()
        })
        .collect()
}

/// Mean velocity of one agent over `[t0, t1]`: displacement over duration
/// between its first and last sample in the window.
pub fn agent_mean_velocity(data: &ArchiveTrajectory, id: i64, window: (f64, f64)) -> Option<Vec2> {
    let samples = data.agents.get(&id)?;
    let inside: Vec<(f64, Vec2)> = samples
        .iter()
        .map(|(f, p)| (data.frame_time(*f), *p))
        .filter(|(t, _)| *t >= window.0 - COVER_EPS && *t <= window.1 + COVER_EPS)
        .collect();
    if inside.len() < 2 {
        return None;
    }
    let (ta, pa) = inside[0];
    let (tb, pb) = inside[inside.len() - 1];
    Some((pb - pa) / (tb - ta))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanVelocities {
    /// One entry per group; `None` if no agent of the group had enough frames.
    pub per_group: Vec<Option<Vec2>>,
    pub skipped: Vec<i64>,
}

/// Average of per-agent mean velocities within each group of agent ids.
pub fn estimate_mean_velocity(data: &ArchiveTrajectory, window: (f64, f64), groups: &[Vec<i64>]) -> MeanVelocities {
    let mut skipped = Vec::new();
    let per_group = groups
        .iter()
        .map(|ids| {
            let mut sum = Vec2::ZERO;
            let mut count = 0usize;
            for &id in ids {
                match agent_mean_velocity(data, id, window) {
                    Some(v) => {
                        sum += v;
                        count += 1;
                    }
                    None => {
                        warn!("agent {id}: fewer than 2 frames in window, skipped");
                        skipped.push(id);
                    }
                }
            }
            (count > 0).then(|| sum / count as f64)
        })
        .collect();
    MeanVelocities { per_group, skipped }
}

/// Index of the direction best aligned with each velocity (largest cosine).
pub fn classify_by_direction(velocities: &[Vec2], directions: &[Vec2]) -> Vec<usize> {
    velocities
        .iter()
        .map(|v| {
            (0..directions.len())
                .max_by(|&a, &b| {
                    let ca = v.dot(directions[a]) / directions[a].norm();
                    let cb = v.dot(directions[b]) / directions[b].norm();
                    ca.total_cmp(&cb)
                })
                .unwrap_or(0)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TrajectoryRow {
    t: f64,
    agent: usize,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
}

/// Writes `t,agent,x,y,vx,vy` rows, frame-major. Floats use shortest
/// round-trip formatting, so reading back is exact.
pub fn export_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    w.write_record(["t", "agent", "x", "y", "vx", "vy"])
        .map_err(|e| Error::csv(path, e))?;
    for k in 0..traj.n_frames() {
        let t = traj.time(k);
        for (i, (p, v)) in traj.positions[k].iter().zip(&traj.velocities[k]).enumerate() {
            w.serialize(TrajectoryRow {
                t,
                agent: i,
                x: p.x,
                y: p.y,
                vx: v.x,
                vy: v.y,
            })
            .map_err(|e| Error::csv(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Inverse of [`export_trajectory`]. The step is recovered from the first two
/// distinct time stamps.
pub fn read_trajectory(path: &Path) -> Result<Trajectory> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let mut times: Vec<f64> = Vec::new();
    let mut frames: Vec<Vec<(Vec2, Vec2)>> = Vec::new();
    for (k, row) in r.deserialize::<TrajectoryRow>().enumerate() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        if times.last() != Some(&row.t) {
            times.push(row.t);
            frames.push(Vec::new());
        }
        let frame = frames.last_mut().expect("frame pushed above");
        if row.agent != frame.len() {
            return Err(Error::Parse {
                line: k + 2,
                message: format!("agent {} out of order (expected {})", row.agent, frame.len()),
            });
        }
        frame.push((Vec2::new(row.x, row.y), Vec2::new(row.vx, row.vy)));
    }
    if frames.is_empty() {
        return Err(Error::Config(format!("{}: no trajectory rows", path.display())));
    }
    let dt = if times.len() > 1 { times[1] - times[0] } else { 0.0 };
    let (positions, velocities) = frames.into_iter().map(|f| f.into_iter().unzip()).unzip();
    let traj = Trajectory {
        dt,
        positions,
        velocities,
    };
    if times.len() > 1 {
        traj.validate()?;
    }
    Ok(traj)
}

/// Generic record export; header from the record's field names.
pub fn export_csv<S: Serialize>(records: &[S], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn export_json<S: Serialize + ?Sized>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_map_parsing() {
        let m: ColumnMap = "0,1,2,3,4".parse().unwrap();
        assert_eq!(m.z, Some(4));
        assert!("0,1,2".parse::<ColumnMap>().is_err());
        assert!("0,a,2,3".parse::<ColumnMap>().is_err());
    }

    #[test]
    fn parse_scales_and_ignores_z() {
        let a = parse_archive_str("12 345 123.4 210.0 170.0\n", "0,1,2,3,4".parse().unwrap(), 16.0, 0.01).unwrap();
        let (f, p) = a.agents[&12][0];
        assert_eq!(f, 345);
        assert!((p.x - 1.234).abs() < 1e-12 && (p.y - 2.1).abs() < 1e-12);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let err = parse_archive_str("1 2 abc 4\n", ColumnMap::default(), 16.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_archive_str("# header\n\n1 2 3\n", ColumnMap::default(), 16.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }));
        let err = parse_archive_str("1 2 0 0\n1 2 1 1\n", ColumnMap::default(), 16.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::DuplicateSample { id: 1, frame: 2 }));
    }

    #[test]
    fn empty_file_is_empty_set() {
        let a = parse_archive_str("", ColumnMap::default(), 16.0, 1.0).unwrap();
        assert!(a.is_empty());
    }

    #[test]
    fn frames_are_sorted() {
        let a = parse_archive_str("1 3 3 0\n1 1 1 0\n1 2 2 0\n", ColumnMap::default(), 1.0, 1.0).unwrap();
        let frames: Vec<i64> = a.agents[&1].iter().map(|s| s.0).collect();
        assert_eq!(frames, [1, 2, 3]);
    }

    #[test]
    fn linear_resampling() {
        let a = parse_archive_str("7 0 0 0\n7 1 1 0\n", ColumnMap::default(), 1.0, 1.0).unwrap();
        let r = resample(&a, 0.0, 1.0, 0.25, None).unwrap();
        assert_eq!(r.trajectory.n_frames(), 5);
        for k in 0..5 {
            let p = r.trajectory.positions[k][0];
            assert!((p.x - 0.25 * k as f64).abs() < 1e-15 && p.y == 0.0);
            assert!((r.trajectory.velocities[k][0].x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_covering_agents_dropped() {
        let a = parse_archive_str(
            "1 0 0 0\n1 10 1 0\n2 3 0 1\n2 10 1 1\n",
            ColumnMap::default(),
            10.0,
            1.0,
        )
        .unwrap();
        let r = resample(&a, 0.0, 1.0, 0.1, None).unwrap();
        assert_eq!(r.agent_ids, [1]);
        assert_eq!(r.dropped, 1);
        assert!(matches!(
            resample(&a, 0.0, 2.0, 0.1, None),
            Err(Error::NoCoverage { .. })
        ));
    }

    #[test]
    fn mean_velocity_of_straight_and_stationary_agents() {
        let mut text = String::new();
        for f in 0..17 {
            text += &format!("1 {f} {} 0\n2 {f} 3 4\n", 0.7 * f as f64 / 16.0);
        }
        let a = parse_archive_str(&text, ColumnMap::default(), 16.0, 1.0).unwrap();
        let m = estimate_mean_velocity(&a, (0.0, 1.0), &[vec![1], vec![2], vec![3]]);
        let v = m.per_group[0].unwrap();
        assert!((v.x - 0.7).abs() < 1e-12 && v.y.abs() < 1e-12);
        assert_eq!(m.per_group[1], Some(Vec2::ZERO));
        assert_eq!(m.per_group[2], None);
        assert_eq!(m.skipped, [3]);
    }

    #[test]
    fn classification() {
        let dirs = [Vec2::new(1.0, 0.0), Vec2::new(-1.0, 0.0)];
        let v = [Vec2::new(0.6, 0.2), Vec2::new(-0.1, -0.5), Vec2::new(-0.7, 0.1)];
        assert_eq!(classify_by_direction(&v, &dirs), [0, 1, 1]);
    }
}

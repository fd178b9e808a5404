//! Voronoi-based density and fundamental diagrams.
//!
//! The cell of generator `p_i` inside a rectangle `Ω` is `Ω` intersected with
//! the half-planes `{q : ‖q − p_i‖ ≤ ‖q − p_j‖}` over the other generators.
//! Each cell is built by successive convex clipping, visiting the other
//! generators nearest first and stopping once no remaining bisector can reach
//! the cell. Local density at a point is the reciprocal area of the cell that
//! contains it.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Rect, Vec2};
use crate::simulator::Trajectory;

/// Relative tolerance for point-in-polygon tests and degeneracy checks.
const GEOM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoronoiCell {
    pub owner: usize,
    /// Counterclockwise vertices; empty if the cell misses the region.
    pub polygon: Vec<Vec2>,
    pub area: f64,
}

impl VoronoiCell {
    pub fn contains(&self, q: Vec2) -> bool {
        polygon_contains(&self.polygon, q)
    }
}

/// Signed shoelace area (positive for counterclockwise vertex order).
pub fn polygon_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for k in 0..n {
        twice += poly[k].cross(poly[(k + 1) % n]);
    }
    0.5 * twice
}

fn polygon_scale(poly: &[Vec2]) -> f64 {
    poly.iter().map(|v| v.x.abs().max(v.y.abs())).fold(1.0, f64::max)
}

/// Point-in-convex-polygon test for counterclockwise polygons, boundary
/// inclusive.
pub fn polygon_contains(poly: &[Vec2], q: Vec2) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let scale = polygon_scale(poly).max(q.x.abs()).max(q.y.abs());
    let tol = GEOM_EPS * scale * scale;
    (0..n).all(|k| {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        (b - a).cross(q - a) >= -tol
    })
}

/// Keep the part of a convex polygon where `normal·q ≤ offset`.
pub fn clip_half_plane(poly: &[Vec2], normal: Vec2, offset: f64) -> Vec<Vec2> {
    clip_with(
        poly,
        |q| normal.dot(q) - offset,
        |a, b, da, db| a.lerp(b, da / (da - db)),
    )
}

fn clip_with<F, I>(poly: &[Vec2], signed: F, intersect: I) -> Vec<Vec2>
where
    F: Fn(Vec2) -> f64,
    I: Fn(Vec2, Vec2, f64, f64) -> Vec2,
{
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 1);
    for k in 0..n {
        let a = poly[k];
        let b = poly[(k + 1) % n];
        let (da, db) = (signed(a), signed(b));
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            out.push(intersect(a, b, da, db));
        }
    }
    dedup_ring(out)
}

fn dedup_ring(mut poly: Vec<Vec2>) -> Vec<Vec2> {
    let scale = polygon_scale(&poly);
    let tol = 1e-14 * scale;
    poly.dedup_by(|b, a| (*a - *b).norm() <= tol);
    while poly.len() > 1 && (poly[0] - poly[poly.len() - 1]).norm() <= tol {
        poly.pop();
    }
    if poly.len() < 3 {
        poly.clear();
    }
    poly
}

/// Clip a convex polygon to a rectangle. Intersections with the rectangle's
/// edges are snapped onto the edge line, so clipping twice is a no-op.
pub fn clip_to_rect(poly: &[Vec2], rect: &Rect) -> Vec<Vec2> {
    let mut out = poly.to_vec();
    for (axis, bound, upper) in [
        (0, rect.x_min, false),
        (0, rect.x_max, true),
        (1, rect.y_min, false),
        (1, rect.y_max, true),
    ] {
        if out.is_empty() {
            break;
        }
        let signed = |q: Vec2| {
            if upper {
                q.get(axis) - bound
            } else {
                bound - q.get(axis)
            }
        };
        out = clip_with(&out, signed, |a, b, da, db| {
            let mut p = a.lerp(b, da / (da - db));
            p.set(axis, bound);
            p
        });
    }
    out
}

fn check_generators(points: &[Vec2]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::DegenerateGeometry("no generators".into()));
    }
    if let Some(k) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::DegenerateGeometry(format!("generator {k} is not finite")));
    }
    let scale = polygon_scale(points);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if (points[i] - points[j]).norm() <= GEOM_EPS * scale {
                return Err(Error::DegenerateGeometry(format!("generators {i} and {j} coincide")));
            }
        }
    }
    if points.len() >= 3 {
        let base = points[0];
        let dir = points[1] - base;
        let collinear = points[2..].iter().all(|p| {
            let off = *p - base;
            dir.cross(off).abs() <= GEOM_EPS * dir.norm() * off.norm()
        });
        if collinear {
            return Err(Error::DegenerateGeometry("all generators are collinear".into()));
        }
    }
    Ok(())
}

/// Voronoi cells of `points` clipped to `region`, one per point in input
/// order. Cells of generators far outside the region may be empty.
pub fn bounded_voronoi(points: &[Vec2], region: &Rect) -> Result<Vec<VoronoiCell>> {
    if !region.is_valid() {
        return Err(Error::DegenerateGeometry("clip region has no area".into()));
    }
    check_generators(points)?;
    let base: Vec<Vec2> = region.corners().to_vec();
    let mut order: Vec<usize> = Vec::with_capacity(points.len());
    let cells = (0..points.len())
        .map(|i| {
            let p = points[i];
            order.clear();
            order.extend((0..points.len()).filter(|&j| j != i));
            order.sort_by(|&a, &b| (points[a] - p).norm_sq().total_cmp(&(points[b] - p).norm_sq()));
            let mut poly = base.clone();
            let mut reach = max_distance(&poly, p);
            for &j in &order {
                let q = points[j];
                let dist = (q - p).norm();
                // A bisector cuts the cell only if some vertex is closer to q,
                // which needs ‖q − p‖ < 2 max_v ‖v − p‖.
                if dist >= 2.0 * reach {
                    break;
                }
                let normal = q - p;
                let offset = normal.dot((p + q) * 0.5);
                poly = clip_half_plane(&poly, normal, offset);
                if poly.is_empty() {
                    break;
                }
                reach = max_distance(&poly, p);
            }
            let area = polygon_area(&poly).max(0.0);
            VoronoiCell {
                owner: i,
                polygon: poly,
                area,
            }
        })
        .collect();
    Ok(cells)
}

fn max_distance(poly: &[Vec2], p: Vec2) -> f64 {
    poly.iter().map(|v| (*v - p).norm()).fold(0.0, f64::max)
}

/// Index into `cells` of the first cell containing `q`.
pub fn locate(cells: &[VoronoiCell], q: Vec2) -> Option<usize> {
    cells.iter().position(|c| c.area > 0.0 && c.contains(q))
}

/// `1/area` of the containing cell, 0 outside every cell.
pub fn density_at(cells: &[VoronoiCell], q: Vec2) -> f64 {
    locate(cells, q).map_or(0.0, |k| 1.0 / cells[k].area)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdSample {
    pub t: f64,
    pub agent: usize,
    pub density: f64,
    pub speed: f64,
}

/// A sample time that produced no samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdWarning {
    pub t: f64,
    pub agents_in_region: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FundamentalDiagram {
    pub samples: Vec<FdSample>,
    pub warnings: Vec<FdWarning>,
}

impl FundamentalDiagram {
    pub fn correlation(&self) -> Option<f64> {
        let d: Vec<f64> = self.samples.iter().map(|s| s.density).collect();
        let v: Vec<f64> = self.samples.iter().map(|s| s.speed).collect();
        pearson(&d, &v)
    }
}

/// Cells of one trajectory frame, all agents acting as generators.
pub fn frame_cells(traj: &Trajectory, k: usize, region: &Rect) -> Result<Vec<VoronoiCell>> {
    bounded_voronoi(&traj.positions[k], region)
}

/// Density/speed samples of the agents inside `region` at each sample time.
///
/// Times are rounded to the nearest grid frame. Frames with fewer than three
/// agents in the region, or with a degenerate generator set, yield a warning
/// record instead of samples.
pub fn fundamental_diagram(traj: &Trajectory, region: &Rect, sample_times: &[f64]) -> Result<FundamentalDiagram> {
    if !region.is_valid() {
        return Err(Error::DegenerateGeometry("region has no area".into()));
    }
    let mut fd = FundamentalDiagram::default();
    for &t in sample_times {
        let k = (t / traj.dt).round();
        if !(k >= 0.0) || k as usize >= traj.n_frames() {
            return Err(Error::Config(format!("sample time {t} s outside the trajectory")));
        }
        let k = k as usize;
        let time = traj.time(k);
        let positions = &traj.positions[k];
        let inside: Vec<usize> = (0..positions.len())
            .filter(|&i| region.contains(positions[i]))
            .collect();
        if inside.len() < 3 {
            warn!("t = {time}: {} agents in region, skipping", inside.len());
            fd.warnings.push(FdWarning {
                t: time,
                agents_in_region: inside.len(),
                reason: "fewer than 3 agents in region".into(),
            });
            continue;
        }
        let cells = match bounded_voronoi(positions, region) {
            Ok(c) => c,
            Err(Error::DegenerateGeometry(msg)) => {
                warn!("t = {time}: {msg}, skipping");
                fd.warnings.push(FdWarning {
                    t: time,
                    agents_in_region: inside.len(),
                    reason: msg,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        for i in inside {
            if cells[i].area > 0.0 {
                fd.samples.push(FdSample {
                    t: time,
                    agent: i,
                    density: 1.0 / cells[i].area,
                    speed: traj.velocities[k][i].norm(),
                });
            }
        }
    }
    Ok(fd)
}

/// Pearson correlation coefficient; `None` for fewer than two samples or a
/// constant series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len().min(ys.len());
    if n < 2 {
        return None;
    }
    let mx = xs[..n].iter().sum::<f64>() / n as f64;
    let my = ys[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let dx = xs[k] - mx;
        let dy = ys[k] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region() -> Rect {
        Rect::new(-2.0, 2.0, 0.0, 4.0)
    }

    #[test]
    fn two_symmetric_points_split_the_region() {
        let cells = bounded_voronoi(&[Vec2::new(-1.0, 2.0), Vec2::new(1.0, 2.0)], &region()).unwrap();
        assert!((cells[0].area - 8.0).abs() < 1e-12);
        assert!((cells[1].area - 8.0).abs() < 1e-12);
        assert!((density_at(&cells, Vec2::new(-0.5, 1.0)) - 2.0 / 16.0).abs() < 1e-15);
        assert!((density_at(&cells, Vec2::new(1.5, 3.0)) - 2.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn outside_query_has_zero_density() {
        let pts = [Vec2::new(-1.0, 1.0), Vec2::new(1.0, 1.5), Vec2::new(0.0, 3.0)];
        let cells = bounded_voronoi(&pts, &region()).unwrap();
        assert_eq!(density_at(&cells, Vec2::new(5.0, 1.0)), 0.0);
        assert_eq!(density_at(&cells, Vec2::new(0.0, -0.1)), 0.0);
    }

    #[test]
    fn degenerate_generators_rejected() {
        let dup = [Vec2::new(0.0, 1.0), Vec2::new(0.0, 1.0), Vec2::new(1.0, 2.0)];
        assert!(matches!(
            bounded_voronoi(&dup, &region()),
            Err(Error::DegenerateGeometry(_))
        ));
        let line = [Vec2::new(0.0, 1.0), Vec2::new(0.5, 1.5), Vec2::new(1.0, 2.0)];
        assert!(matches!(
            bounded_voronoi(&line, &region()),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn generator_outside_region_may_have_empty_cell() {
        let pts = [
            Vec2::new(-1.0, 1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.0, 3.0),
            Vec2::new(30.0, 2.0),
        ];
        let cells = bounded_voronoi(&pts, &region()).unwrap();
        assert!(cells[3].polygon.is_empty());
        assert_eq!(cells[3].area, 0.0);
        let total: f64 = cells.iter().map(|c| c.area).sum();
        assert!((total - 16.0).abs() < 1e-12);
    }

    #[test]
    fn cells_are_ccw_and_convex() {
        let pts = [
            Vec2::new(-1.3, 0.4),
            Vec2::new(1.1, 1.7),
            Vec2::new(0.2, 3.1),
            Vec2::new(-0.4, 2.0),
            Vec2::new(1.7, 0.2),
        ];
        for cell in bounded_voronoi(&pts, &region()).unwrap() {
            let p = &cell.polygon;
            for k in 0..p.len() {
                let a = p[k];
                let b = p[(k + 1) % p.len()];
                let c = p[(k + 2) % p.len()];
                assert!((b - a).cross(c - b) >= -1e-12);
            }
            assert!(cell.contains(pts[cell.owner]));
        }
    }

    #[test]
    fn rect_clip_is_idempotent() {
        let poly = vec![
            Vec2::new(-3.0, 1.0),
            Vec2::new(1.0, -1.0),
            Vec2::new(2.5, 2.0),
            Vec2::new(0.0, 5.0),
        ];
        let once = clip_to_rect(&poly, &region());
        let twice = clip_to_rect(&once, &region());
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.iter().zip(&twice) {
            assert!((*a - *b).norm() <= 1e-12);
        }
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(pearson(&[1.0], &[1.0]), None);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 2.0]), None);
    }

    #[test]
    fn sparse_frame_yields_warning() {
        let traj = Trajectory::new(
            0.1,
            vec![Vec2::new(0.0, 1.0), Vec2::new(0.5, 2.0), Vec2::new(9.0, 1.0)],
            vec![Vec2::new(0.7, 0.0); 3],
        );
        let fd = fundamental_diagram(&traj, &region(), &[0.0]).unwrap();
        assert!(fd.samples.is_empty());
        assert_eq!(fd.warnings.len(), 1);
        assert_eq!(fd.warnings[0].agents_in_region, 2);
    }

    #[test]
    fn free_group_speeds_equal_desired() {
        let w = Vec2::new(0.7, 0.0);
        let pts = vec![
            Vec2::new(-1.0, 1.0),
            Vec2::new(0.5, 0.5),
            Vec2::new(1.0, 3.0),
            Vec2::new(-0.2, 2.2),
        ];
        let traj = Trajectory::new(0.1, pts, vec![w; 4]);
        let fd = fundamental_diagram(&traj, &region(), &[0.0]).unwrap();
        assert_eq!(fd.samples.len(), 4);
        assert!(fd
            .samples
            .iter()
            .all(|s| (s.speed - 0.7).abs() < 1e-15 && s.density > 0.0));
    }
}

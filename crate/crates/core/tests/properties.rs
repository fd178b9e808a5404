use proptest::prelude::*;

use crowdcal::calibration::{cost_functional, descent_step, partition_batches, CalibrationConfig};
use crowdcal::density::{bounded_voronoi, clip_to_rect, locate};
use crowdcal::model::{rotation_matrix, AdmissibleBox};
use crowdcal::simulator::{enforce_boundaries, init_scenario, Boundaries, Group, Trajectory};
use crowdcal::{ControlVector, Rect, Scenario, Vec2};

fn vec2(range: f64) -> impl Strategy<Value = Vec2> {
    (-range..range, -range..range).prop_map(|(x, y)| Vec2::new(x, y))
}

fn region() -> Rect {
    Rect::new(-2.0, 2.0, 0.0, 4.0)
}

fn points_in_region(max: usize) -> impl Strategy<Value = Vec<Vec2>> {
    prop::collection::vec((-2.0f64..2.0, 0.0f64..4.0).prop_map(|(x, y)| Vec2::new(x, y)), 3..max)
}

proptest! {
    #[test]
    fn rotation_preserves_norm(vi in vec2(3.0), vj in vec2(3.0), z in vec2(10.0), lambda in -1.0f64..1.0) {
        let m = rotation_matrix(vi, vj, lambda);
        prop_assert!((m.mul_vec(z).norm() - z.norm()).abs() <= 1e-12);
    }

    #[test]
    fn cells_partition_region(pts in points_in_region(40)) {
        if let Ok(cells) = bounded_voronoi(&pts, &region()) {
            let total: f64 = cells.iter().map(|c| c.area).sum();
            prop_assert!((total - region().area()).abs() <= 1e-9 * region().area());
        }
    }

    #[test]
    fn containing_cell_owns_nearest_generator(pts in points_in_region(30), qs in prop::collection::vec((-2.0f64..2.0, 0.0f64..4.0), 50)) {
        if let Ok(cells) = bounded_voronoi(&pts, &region()) {
            for (x, y) in qs {
                let q = Vec2::new(x, y);
                let best = pts.iter().map(|p| (*p - q).norm()).fold(f64::INFINITY, f64::min);
                let k = locate(&cells, q).expect("query inside region");
                prop_assert!((pts[k] - q).norm() <= best + 1e-9);
            }
        }
    }

    #[test]
    fn clipping_cells_again_is_a_no_op(pts in points_in_region(30)) {
        if let Ok(cells) = bounded_voronoi(&pts, &region()) {
            for c in cells.iter().filter(|c| !c.polygon.is_empty()) {
                let again = clip_to_rect(&c.polygon, &region());
                prop_assert_eq!(again.len(), c.polygon.len());
                for (a, b) in again.iter().zip(&c.polygon) {
                    prop_assert!((*a - *b).norm() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn projection_lands_in_box_and_is_idempotent(u in prop::array::uniform3(-200.0f64..200.0)) {
        let b = AdmissibleBox::default();
        let p = b.project(ControlVector::from_array(u));
        prop_assert!(b.contains(p));
        prop_assert_eq!(b.project(p), p);
    }

    #[test]
    fn descent_step_stays_admissible(g in prop::array::uniform3(-1.0f64..1.0)) {
        let b = AdmissibleBox::default();
        let u = descent_step(ControlVector::new(0.0, 0.0, 40.0), g, [20.0, 4000.0, 4000.0], &b);
        prop_assert!(b.contains(u));
    }

    #[test]
    fn batches_tile_the_grid(steps in 1usize..500, len in 1usize..50) {
        let parts = partition_batches(steps, len);
        prop_assert_eq!(parts[0].start, 0);
        prop_assert_eq!(parts.last().unwrap().end, steps);
        for w in parts.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
    }

    #[test]
    fn boundaries_keep_agents_in_domain(p in prop::collection::vec((vec2(8.0), vec2(2.0)), 1..20)) {
        let scenario = Scenario {
            domain: Rect::new(-6.0, 6.0, 0.0, 4.2),
            boundaries: Boundaries::CORRIDOR,
            groups: vec![Group { name: "g".into(), count: p.len(), desired: Vec2::new(0.7, 0.0), spawn: None, boundaries: None }],
            diameter: 0.4,
            seed: 0,
        };
        // Start inside, take one small free step, then apply the rules.
        let dt = 0.00625;
        let mut pos: Vec<Vec2> = p.iter().map(|(x, _)| Vec2::new(x.x.clamp(-6.0, 6.0), (x.y + 8.0) * 4.2 / 16.0)).collect();
        let mut vel: Vec<Vec2> = p.iter().map(|(_, v)| *v).collect();
        for (x, v) in pos.iter_mut().zip(&vel) {
            *x += *v * dt;
        }
        enforce_boundaries(&mut pos, &mut vel, &scenario, dt);
        for x in &pos {
            prop_assert!(scenario.domain.contains(*x), "{x:?} outside");
        }
    }

    #[test]
    fn cost_is_nonnegative_and_zero_on_data(xs in prop::collection::vec(vec2(5.0), 1..6), shift in vec2(1.0)) {
        let n = xs.len();
        let data = Trajectory::new(0.1, xs.clone(), vec![Vec2::ZERO; n]);
        let mut data2 = data.clone();
        data2.push(xs.clone(), vec![Vec2::ZERO; n]);
        let mut moved = data2.clone();
        for p in moved.positions[1].iter_mut() {
            *p += shift;
        }
        let cfg = CalibrationConfig::archive_defaults(0.1);
        let u = ControlVector::default();
        prop_assert_eq!(cost_functional(&data2, &data2, u, &cfg).unwrap(), 0.0);
        prop_assert!(cost_functional(&moved, &data2, u, &cfg).unwrap() >= 0.0);
    }
}

#[test]
fn spawned_agents_respect_separation() {
    let scenario = Scenario {
        domain: Rect::new(-6.0, 6.0, 0.0, 4.2),
        boundaries: Boundaries::CORRIDOR,
        groups: vec![
            Group {
                name: "blue".into(),
                count: 40,
                desired: Vec2::new(0.7, 0.0),
                spawn: None,
                boundaries: None,
            },
            Group {
                name: "red".into(),
                count: 40,
                desired: Vec2::new(-0.7, 0.0),
                spawn: None,
                boundaries: None,
            },
        ],
        diameter: 0.2,
        seed: 9,
    };
    let (x, v) = init_scenario(&scenario).unwrap();
    for i in 0..x.len() {
        assert!(scenario.domain.contains(x[i]));
        assert_eq!(
            v[i],
            if i < 40 {
                Vec2::new(0.7, 0.0)
            } else {
                Vec2::new(-0.7, 0.0)
            }
        );
        for j in (i + 1)..x.len() {
            assert!((x[i] - x[j]).norm() >= 0.2);
        }
    }
}

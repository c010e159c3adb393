use std::collections::{HashSet, VecDeque};

use airside::geometry::{normalize_angle, Footprint, Polygon, Pose2D, ReferencePath, Vec2};
use airside::spline::{check_recoverable, KinodynamicLimits, OptimizationWeights, World};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ARC: f64 = 0.5;

fn limits() -> KinodynamicLimits {
    KinodynamicLimits {
        v_max: 2.0,
        a_max: 1.5,
        curvature_max: 0.25,
        lateral_a_max: 2.0,
    }
}

fn fp() -> Footprint {
    Footprint::new(2.0, 1.0, 0.0).unwrap()
}

fn path() -> ReferencePath {
    ReferencePath::straight(Vec2::new(0.0, 0.0), Vec2::new(100.0, 0.0)).unwrap()
}

fn corridor(top: f64) -> World {
    World::new(vec![
        Polygon::aabb(Vec2::new(-5.0, top), Vec2::new(105.0, top + 1.0)).unwrap(),
        Polygon::aabb(Vec2::new(-5.0, -5.0), Vec2::new(105.0, -4.0)).unwrap(),
    ])
}

fn advance(p: &Pose2D, kappa: f64, len: f64) -> Pose2D {
    let th = p.heading();
    if kappa == 0.0 {
        return Pose2D::new(p.x + len * th.cos(), p.y + len * th.sin(), th);
    }
    let th2 = th + kappa * len;
    Pose2D::new(
        p.x + (th2.sin() - th.sin()) / kappa,
        p.y - (th2.cos() - th.cos()) / kappa,
        th2,
    )
}

/// Breadth-first search over forward constant-curvature arcs. True when a
/// collision-free chain reaches the path line nearly aligned with it.
fn lattice_recoverable(start: &Pose2D, world: &World, margin: f64) -> bool {
    let k = limits().curvature_max;
    let kappas = [-k, -k / 2.0, 0.0, k / 2.0, k];
    let key = |p: &Pose2D| {
        (
            (p.x / 0.1).round() as i64,
            (p.y / 0.1).round() as i64,
            (normalize_angle(p.heading()) / 0.05).round() as i64,
        )
    };
    let mut seen = HashSet::from([key(start)]);
    let mut queue = VecDeque::from([*start]);
    while let Some(p) = queue.pop_front() {
        if p.y.abs() <= 0.15 && normalize_angle(p.heading()).abs() <= 0.1 {
            return true;
        }
        'arcs: for &kappa in &kappas {
            for step in 1..=5 {
                let q = advance(&p, kappa, ARC * step as f64 / 5.0);
                if world.clearance(&q, &fp(), margin + 1.0) < margin {
                    continue 'arcs;
                }
            }
            let q = advance(&p, kappa, ARC);
            if (q.x - start.x).abs() > 20.0 {
                continue;
            }
            if seen.insert(key(&q)) {
                queue.push_back(q);
            }
        }
    }
    false
}

#[test]
fn poses_near_the_path_are_recoverable() {
    let w = OptimizationWeights::default();
    let world = corridor(4.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..25 {
        let pose = Pose2D::new(
            rng.random_range(10.0..80.0),
            rng.random_range(-0.5..0.5),
            rng.random_range(-0.2..0.2),
        );
        assert!(lattice_recoverable(&pose, &world, w.clearance_margin), "{pose:?}");
        assert!(
            check_recoverable(&pose, &path(), &world, &fp(), &limits(), &w),
            "{pose:?}"
        );
    }
}

#[test]
fn facing_a_close_wall_is_not_recoverable() {
    let w = OptimizationWeights::default();
    let world = corridor(3.0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..25 {
        // heading away from the path with the wall nearer than the turn radius
        let pose = Pose2D::new(
            rng.random_range(10.0..80.0),
            1.0,
            std::f64::consts::FRAC_PI_2 + rng.random_range(-0.3..0.3),
        );
        assert!(world.clearance(&pose, &fp(), 1.0) >= w.clearance_margin);
        assert!(!lattice_recoverable(&pose, &world, w.clearance_margin), "{pose:?}");
        assert!(
            !check_recoverable(&pose, &path(), &world, &fp(), &limits(), &w),
            "{pose:?}"
        );
    }
}

#[test]
fn small_lateral_offset_is_recoverable() {
    let w = OptimizationWeights::default();
    let world = corridor(4.0);
    let pose = Pose2D::new(20.0, 0.3, 0.0);
    assert!(lattice_recoverable(&pose, &world, w.clearance_margin));
    assert!(check_recoverable(&pose, &path(), &world, &fp(), &limits(), &w));
}

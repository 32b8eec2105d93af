use panicle_core::synth::{sample_model, PanicleModel, Solid};
use panicle_core::traits::{trace_main_path, LengthParams};
use panicle_core::{seeded_rng, PointCloud, Vec3};
use rand::Rng;
use std::f64::consts::PI;

fn open_cylinder(height: f64, radius: f64, n: usize, seed: u64) -> PointCloud {
    let mut rng = seeded_rng(seed);
    let pts = (0..n)
        .map(|_| {
            let z = rng.random::<f64>() * height;
            let phi = rng.random::<f64>() * 2.0 * PI;
            Vec3::new(radius * phi.cos(), radius * phi.sin(), z)
        })
        .collect();
    PointCloud::new(pts).unwrap()
}

fn dist_to_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

#[test]
fn straight_cylinder_length() {
    for (seed, (h, r)) in [(10.0, 0.4), (4.0, 0.2), (25.0, 0.6)].into_iter().enumerate() {
        let cloud = open_cylinder(h, r, 8000, seed as u64);
        let trace = trace_main_path(&cloud, &LengthParams::default()).unwrap();
        let err = (trace.curve_length - h).abs() / h;
        assert!(
            err < 0.05,
            "height {h}: length {} ({:.2}%)",
            trace.curve_length,
            err * 100.0
        );
        assert!(!trace.path.low_confidence);
    }
}

#[test]
fn y_tube_main_path_skips_branch() {
    let mut rng = seeded_rng(99);
    for case in 0..10 {
        let stem = 10.0;
        let a = Vec3::zeros();
        let b = Vec3::new(0.0, 0.0, stem);
        let junction = b * rng.random_range(0.4..0.6);
        let theta = rng.random_range(70f64..110.0).to_radians();
        let phi = rng.random::<f64>() * 2.0 * PI;
        let dir = Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos());
        // Long enough that one stem half plus the branch beats the whole stem.
        let branch_len = stem * rng.random_range(0.65..0.8);
        let model = PanicleModel {
            rachis: vec![a, b],
            solids: vec![
                Solid::Capsule { a, b, radius: 0.12 },
                Solid::Capsule {
                    a: junction,
                    b: junction + dir * branch_len,
                    radius: 0.08,
                },
            ],
        };
        let cloud = sample_model(&model, 400.0, 0.0, case).unwrap();
        let trace = trace_main_path(&cloud, &LengthParams::default()).unwrap();
        assert!(
            !trace.path.low_confidence,
            "case {case}: turn {}",
            trace.path.max_turn_deg
        );
        let worst = trace
            .curve_points
            .iter()
            .map(|p| dist_to_segment(p, &(a - Vec3::z()), &(b + Vec3::z())))
            .fold(0.0, f64::max);
        assert!(worst < 0.3, "case {case}: path strays {worst} from the stem");
        assert!(
            (trace.curve_length - stem).abs() / stem < 0.1,
            "case {case}: {}",
            trace.curve_length
        );
    }
}

use panicle_core::cloud_ops::calibrate;
use panicle_core::synth::{gen_scene, random_rotation};
use panicle_core::traits::{measure_length, panicle_volume, LengthParams, DEFAULT_VOXEL};
use panicle_core::{seeded_rng, Vec3};
use rand::Rng;

#[test]
fn length_and_volume_survive_rigid_motion_and_scaling() {
    let scene = gen_scene(7).unwrap();
    let params = LengthParams::default();
    let mut rng = seeded_rng(17);
    let mut results = Vec::new();
    for s in [1.0, 1.0, 1.0, 0.1, 10.0] {
        let rot = random_rotation(&mut rng);
        let t = Vec3::from_fn(|_, _| rng.random_range(-3.0..3.0));
        let panicle = scene.panicle.transformed(rot.matrix(), &t, s);
        let label = scene.label.transformed(rot.matrix(), &t, s);
        let calib = calibrate(&label, 7.5).unwrap();
        let l = measure_length(&panicle, &calib, &params).unwrap().l_cm;
        let v = panicle_volume(&panicle, &calib, DEFAULT_VOXEL).unwrap();
        results.push((l, v.num_voxels));
    }
    let (l0, n0) = results[0];
    for (l, n) in &results[1..] {
        assert!((l - l0).abs() / l0 < 1e-6, "{results:?}");
        assert_eq!(*n, n0, "{results:?}");
    }
}

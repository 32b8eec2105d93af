//! Synthetic scenes with known answers.
//!
//! Panicles are built from a rachis tube along an interpolating spline,
//! straight branch tubes and ellipsoidal grains. All generator inputs are in
//! centimeters; [`gen_scene`] places a panicle and a label into a scene with an
//! arbitrary rigid pose and unit scale, the way a reconstruction would.
//!
//! Self-intersections between branches and grains are not checked. The
//! occupied-volume oracle counts overlapping solids once.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::grid::DensityGrid;
use crate::kdtree::KdTree;
use crate::traits::{polyline_length, SmoothingSpline};
use crate::{seeded_rng, Rng};
use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::f64::consts::PI;

pub const LABEL_LENGTH_CM: f64 = 7.5;
/// Voxel pitch of the volume oracle, in cm.
pub const ORACLE_PITCH_CM: f64 = 0.02;
const RACHIS_SAMPLES: usize = 4000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPanicleSpec {
    /// Rachis control points, base first.
    pub rachis: Vec<[f64; 3]>,
    pub rachis_radius: f64,
    pub n_branches: usize,
    /// Branch length range as fractions of the rachis length.
    pub branch_length_frac: [f64; 2],
    /// Angle between branch and rachis tangent.
    pub branch_angle_deg: [f64; 2],
    /// Range of rachis arc-length fractions where branches attach.
    pub branch_stations: [f64; 2],
    pub branch_radius: f64,
    pub grain_semi_axes: [f64; 3],
    /// Distance between grains along a branch.
    pub grain_spacing: f64,
    /// Surface points per cm².
    pub density: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthPanicleSpec {
    /// Straight rachis along +z with default morphology.
    pub fn straight(length_cm: f64, n_branches: usize, seed: u64) -> Self {
        Self {
            rachis: vec![[0.0; 3], [0.0, 0.0, length_cm]],
            ..Self::base(n_branches, seed)
        }
    }

    fn base(n_branches: usize, seed: u64) -> Self {
        Self {
            rachis: Vec::new(),
            rachis_radius: 0.12,
            n_branches,
            branch_length_frac: [0.15, 0.35],
            branch_angle_deg: [70.0, 85.0],
            branch_stations: [0.15, 0.9],
            branch_radius: 0.06,
            grain_semi_axes: [0.35, 0.15, 0.1],
            grain_spacing: 0.7,
            density: 400.0,
            noise_sigma: 0.01,
            seed,
        }
    }

    /// Randomized spec: 15 to 28 cm rachis bent through up to 60 degrees,
    /// with 6 to 12 branches.
    pub fn random(seed: u64) -> Self {
        let mut rng = seeded_rng(seed ^ 0x5_eed0_f9a4_1c1e);
        let length = rng.random_range(15.0..28.0);
        let bend: f64 = rng.random_range(0.0..60f64.to_radians());
        let n_ctrl = 6;
        let rachis = (0..n_ctrl)
            .map(|i| {
                let s = i as f64 / (n_ctrl - 1) as f64;
                let (x, z) = if bend < 1e-6 {
                    (0.0, s * length)
                } else {
                    let r = length / bend;
                    (r * (1.0 - (s * bend).cos()), r * (s * bend).sin())
                };
                let wobble = if i == 0 { 0.0 } else { 0.3 };
                [
                    x + wobble * (rng.random::<f64>() - 0.5),
                    wobble * (rng.random::<f64>() - 0.5),
                    z,
                ]
            })
            .collect();
        Self {
            rachis,
            ..Self::base(rng.random_range(6..=12), seed)
        }
    }

    fn validate(&self) -> Result<()> {
        if self.rachis.len() < 2 {
            return Err(Error::InvalidInput("rachis needs at least 2 control points".into()));
        }
        let positive = [
            self.rachis_radius,
            self.branch_radius,
            self.grain_spacing,
            self.density,
            self.grain_semi_axes[0],
            self.grain_semi_axes[1],
            self.grain_semi_axes[2],
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput(
                "panicle sizes and densities must be positive".into(),
            ));
        }
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        if !ordered(self.branch_length_frac) || !ordered(self.branch_angle_deg) || !ordered(self.branch_stations) {
            return Err(Error::InvalidInput(
                "spec ranges must be ordered and nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rachis_arc_length_cm: f64,
    pub occupied_volume_cm3: f64,
    pub label_length_cm: f64,
}

/// Solid primitives a panicle is made of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solid {
    /// Points within `radius` of the segment `a`-`b`.
    Capsule { a: Vec3, b: Vec3, radius: f64 },
    /// Columns of `axes` are the unit directions of `semi`.
    Ellipsoid {
        center: Vec3,
        axes: Matrix3<f64>,
        semi: [f64; 3],
    },
}

impl Solid {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.contains_with_slack(p, 0.0)
    }

    /// Like [`Solid::contains`] with the boundary pulled in by a relative `slack`.
    fn contains_with_slack(&self, p: &Vec3, slack: f64) -> bool {
        match self {
            Solid::Capsule { a, b, radius } => {
                let d = b - a;
                let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
                (p - (a + d * t)).norm_squared() <= radius * radius * (1.0 - slack)
            }
            Solid::Ellipsoid { center, axes, semi } => {
                let l = axes.transpose() * (p - center);
                (0..3).map(|i| (l[i] / semi[i]).powi(2)).sum::<f64>() <= 1.0 - slack
            }
        }
    }

    fn bounds(&self) -> (Vec3, Vec3) {
        match self {
            Solid::Capsule { a, b, radius } => {
                let r = Vec3::from_element(*radius);
                (a.inf(b) - r, a.sup(b) + r)
            }
            Solid::Ellipsoid { center, axes, semi } => {
                let half = Vec3::from_fn(|i, _| (0..3).map(|j| (axes[(i, j)] * semi[j]).powi(2)).sum::<f64>().sqrt());
                (center - half, center + half)
            }
        }
    }

    /// Lateral surface area, end caps excluded for capsules.
    fn area(&self) -> f64 {
        match self {
            Solid::Capsule { a, b, radius } => 2.0 * PI * radius * (b - a).norm(),
            Solid::Ellipsoid { semi, .. } => {
                // Knud Thomsen's approximation.
                let p = 1.6075;
                let [a, b, c] = semi.map(|s| s.powf(p));
                4.0 * PI * ((a * b + a * c + b * c) / 3.0).powf(1.0 / p)
            }
        }
    }

    fn sample_surface(&self, rng: &mut Rng) -> Vec3 {
        match self {
            Solid::Capsule { a, b, radius } => {
                let (u, v) = perpendicular_basis(&(b - a));
                let t: f64 = rng.random();
                let phi = rng.random::<f64>() * 2.0 * PI;
                a + (b - a) * t + (u * phi.cos() + v * phi.sin()) * *radius
            }
            Solid::Ellipsoid { center, axes, semi } => {
                let d = random_unit(rng);
                center + axes * Vec3::new(d.x * semi[0], d.y * semi[1], d.z * semi[2])
            }
        }
    }
}

fn perpendicular_basis(d: &Vec3) -> (Vec3, Vec3) {
    let d = d.normalize();
    let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = d.cross(&helper).normalize();
    (u, d.cross(&u))
}

fn random_unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| normal(rng));
        if let Some(u) = v.try_normalize(1e-9) {
            return u;
        }
    }
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian(rng: &mut Rng, sigma: f64) -> Vec3 {
    Vec3::from_fn(|_, _| sigma * normal(rng))
}

/// Generated panicle geometry before surface sampling.
#[derive(Debug, Clone)]
pub struct PanicleModel {
    /// Dense polyline of the rachis centerline.
    pub rachis: Vec<Vec3>,
    pub solids: Vec<Solid>,
}

pub fn build_panicle_model(spec: &SynthPanicleSpec) -> Result<PanicleModel> {
    spec.validate()?;
    let ctrl: Vec<Vec3> = spec.rachis.iter().map(|&p| Vec3::from(p)).collect();
    let spline = SmoothingSpline::fit(&ctrl, 0.0)?;
    let line: Vec<Vec3> = (0..=RACHIS_SAMPLES)
        .map(|i| spline.eval(i as f64 / RACHIS_SAMPLES as f64))
        .collect();
    let mut cum = vec![0.0];
    for w in line.windows(2) {
        cum.push(cum.last().unwrap() + (w[1] - w[0]).norm());
    }
    let length = *cum.last().unwrap();

    let mut solids = Vec::new();
    // Coarser chain for the tube itself; its vertices lie on the dense line.
    let step = 10;
    for i in (0..RACHIS_SAMPLES).step_by(step) {
        solids.push(Solid::Capsule {
            a: line[i],
            b: line[(i + step).min(RACHIS_SAMPLES)],
            radius: spec.rachis_radius,
        });
    }

    let mut rng = seeded_rng(spec.seed);
    let at_arc = |s: f64| -> (Vec3, Vec3) {
        let i = cum.partition_point(|&c| c < s).clamp(1, line.len() - 1);
        (line[i], (line[i] - line[i - 1]).normalize())
    };
    let [g0, g1, g2] = spec.grain_semi_axes;
    for b in 0..spec.n_branches {
        // Stations spread evenly with jitter, so branches do not pile up.
        let frac = if spec.n_branches == 1 {
            0.5
        } else {
            b as f64 / (spec.n_branches - 1) as f64
        };
        let jitter = (rng.random::<f64>() - 0.5) * 0.5 / spec.n_branches.max(1) as f64;
        let station = spec.branch_stations[0]
            + (spec.branch_stations[1] - spec.branch_stations[0]) * (frac + jitter).clamp(0.0, 1.0);
        let (root, tangent) = at_arc(station * length);
        let (u, v) = perpendicular_basis(&tangent);
        let phi = rng.random::<f64>() * 2.0 * PI;
        let side = u * phi.cos() + v * phi.sin();
        let theta = rng
            .random_range(spec.branch_angle_deg[0]..=spec.branch_angle_deg[1])
            .to_radians();
        let dir = tangent * theta.cos() + side * theta.sin();
        let blen = length * rng.random_range(spec.branch_length_frac[0]..=spec.branch_length_frac[1]);
        let tip = root + dir * blen;
        solids.push(Solid::Capsule {
            a: root,
            b: tip,
            radius: spec.branch_radius,
        });

        let (bu, bv) = perpendicular_basis(&dir);
        let mut s = 0.25 * blen;
        let mut k = 0;
        while s <= blen {
            let around = k as f64 * 2.0 * PI / 3.0 + rng.random::<f64>() * 0.5;
            let out = bu * around.cos() + bv * around.sin();
            let tilt = 20f64.to_radians();
            let long = (dir * tilt.cos() + out * tilt.sin()).normalize();
            let third = long.cross(&out).normalize();
            let second = third.cross(&long);
            let center = root + dir * s + out * (spec.branch_radius + 0.8 * g1);
            solids.push(Solid::Ellipsoid {
                center,
                axes: Matrix3::from_columns(&[long, second, third]),
                semi: [g0, g1, g2],
            });
            s += spec.grain_spacing;
            k += 1;
        }
    }
    Ok(PanicleModel { rachis: line, solids })
}

/// Surface points of every solid at `density` per cm², with Gaussian noise.
/// Points buried inside another solid are dropped.
pub fn sample_model(model: &PanicleModel, density: f64, noise_sigma: f64, seed: u64) -> Result<PointCloud> {
    let mut rng = seeded_rng(seed);
    let bounds: Vec<(Vec3, Vec3)> = model.solids.iter().map(Solid::bounds).collect();
    let buried = |p: &Vec3, own: usize| {
        model.solids.iter().zip(&bounds).enumerate().any(|(j, (s, (lo, hi)))| {
            j != own && (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) && s.contains_with_slack(p, 1e-9)
        })
    };
    let mut pts = Vec::new();
    for (i, solid) in model.solids.iter().enumerate() {
        let n = (solid.area() * density).round() as usize;
        for _ in 0..n {
            let p = solid.sample_surface(&mut rng);
            if !buried(&p, i) {
                pts.push(p + gaussian(&mut rng, noise_sigma));
            }
        }
    }
    PointCloud::new(pts)
}

/// Volume of the union of solids by counting voxel centers inside any of them.
pub fn occupied_volume(solids: &[Solid], pitch: f64) -> Result<f64> {
    if !(pitch > 0.0) {
        return Err(Error::InvalidInput(format!(
            "oracle pitch must be positive, got {pitch}"
        )));
    }
    let mut cells: HashSet<[i32; 3]> = HashSet::new();
    for solid in solids {
        let (lo, hi) = solid.bounds();
        let lo = lo.map(|c| (c / pitch - 0.5).floor() as i32);
        let hi = hi.map(|c| (c / pitch - 0.5).ceil() as i32);
        for i in lo.x..=hi.x {
            for j in lo.y..=hi.y {
                for k in lo.z..=hi.z {
                    let c = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * pitch;
                    if solid.contains(&c) {
                        cells.insert([i, j, k]);
                    }
                }
            }
        }
    }
    Ok(cells.len() as f64 * pitch.powi(3))
}

/// Panicle cloud in cm and its ground truth.
pub fn gen_panicle(spec: &SynthPanicleSpec) -> Result<(PointCloud, GroundTruth)> {
    let model = build_panicle_model(spec)?;
    let cloud = sample_model(&model, spec.density, spec.noise_sigma, spec.seed.wrapping_add(1))?;
    let truth = GroundTruth {
        rachis_arc_length_cm: polyline_length(&model.rachis),
        occupied_volume_cm3: occupied_volume(&model.solids, ORACLE_PITCH_CM)?,
        label_length_cm: LABEL_LENGTH_CM,
    };
    Ok((cloud, truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub length_cm: f64,
    pub width_cm: f64,
    pub thickness_cm: f64,
    /// Points per cm² on each face.
    pub density: f64,
    pub noise_sigma: f64,
}

impl Default for LabelSpec {
    fn default() -> Self {
        Self {
            length_cm: LABEL_LENGTH_CM,
            width_cm: 2.5,
            thickness_cm: 0.02,
            density: 600.0,
            noise_sigma: 0.0,
        }
    }
}

/// Points on the two large faces of a plate centered at the origin with its
/// length along x, moved by `pose` and perturbed by Gaussian noise.
pub fn gen_label(spec: &LabelSpec, pose: &Isometry3<f64>, seed: u64) -> Result<PointCloud> {
    let dims = [spec.length_cm, spec.width_cm, spec.thickness_cm, spec.density];
    if dims.iter().any(|v| !(*v > 0.0) || !v.is_finite()) || !(spec.noise_sigma >= 0.0) {
        return Err(Error::InvalidInput("label dimensions must be positive".into()));
    }
    let mut rng = seeded_rng(seed);
    let n = (spec.length_cm * spec.width_cm * spec.density).round() as usize;
    let mut pts = Vec::with_capacity(2 * n);
    for face in [-0.5, 0.5] {
        for _ in 0..n {
            let local = Vec3::new(
                (rng.random::<f64>() - 0.5) * spec.length_cm,
                (rng.random::<f64>() - 0.5) * spec.width_cm,
                face * spec.thickness_cm,
            );
            pts.push(pose * nalgebra::Point3::from(local) + gaussian(&mut rng, spec.noise_sigma));
        }
    }
    PointCloud::new(pts.into_iter().map(|p| p.coords).collect())
}

pub fn random_rotation(rng: &mut Rng) -> Rotation3<f64> {
    let q = nalgebra::Quaternion::new(normal(rng), normal(rng), normal(rng), normal(rng));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

pub fn random_pose(rng: &mut Rng, max_offset: f64) -> Isometry3<f64> {
    let t = Vec3::from_fn(|_, _| rng.random_range(-max_offset..=max_offset));
    Isometry3::from_parts(Translation3::from(t), random_rotation(rng).into())
}

/// A panicle and label placed into one reconstruction-like scene.
#[derive(Debug, Clone)]
pub struct SynthScene {
    /// Panicle and label together, in scene units.
    pub cloud: PointCloud,
    pub panicle: PointCloud,
    pub label: PointCloud,
    pub truth: GroundTruth,
    /// Scene units per cm.
    pub scene_scale: f64,
    pub spec: SynthPanicleSpec,
}

/// Random spec, random scene pose and a scene scale between 0.02 and 0.2
/// units per cm. The label sits 4 cm clear of the panicle's bounding box.
pub fn gen_scene(seed: u64) -> Result<SynthScene> {
    gen_scene_from_spec(SynthPanicleSpec::random(seed), seed)
}

pub fn gen_scene_from_spec(spec: SynthPanicleSpec, seed: u64) -> Result<SynthScene> {
    let mut rng = seeded_rng(seed ^ 0x00ab_cdef_1234_5678);
    let (panicle_cm, truth) = gen_panicle(&spec)?;
    let bounds = panicle_cm
        .aabb()
        .ok_or_else(|| Error::Empty("generated panicle".into()))?;
    let label_spec = LabelSpec {
        noise_sigma: spec.noise_sigma,
        ..LabelSpec::default()
    };
    let center = Vec3::new(
        bounds.min.x - 4.0 - label_spec.length_cm / 2.0,
        (bounds.min.y + bounds.max.y) / 2.0,
        (bounds.min.z + bounds.max.z) / 2.0,
    );
    // Upright plate facing the camera side, with a small random tilt.
    let tilt = Rotation3::from_euler_angles(
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.3..0.3),
    );
    let facing = Rotation3::from_euler_angles(PI / 2.0, 0.0, PI / 2.0);
    let label_pose = Isometry3::from_parts(Translation3::from(center), (tilt * facing).into());
    let label_cm = gen_label(&label_spec, &label_pose, seed.wrapping_add(2))?;

    let scale = 10f64.powf(rng.random_range(-1.7..-0.7));
    let pose = random_pose(&mut rng, 1.0);
    let place = |c: &PointCloud| -> PointCloud {
        c.transformed(
            pose.rotation.to_rotation_matrix().matrix(),
            &pose.translation.vector,
            scale,
        )
    };
    let panicle = place(&panicle_cm);
    let label = place(&label_cm);
    let cloud = PointCloud::concat(&[&panicle, &label]);
    Ok(SynthScene {
        cloud,
        panicle,
        label,
        truth,
        scene_scale: scale,
        spec,
    })
}

/// Analytic shapes for density grids. Density is positive inside.
#[derive(Debug, Clone, PartialEq)]
pub enum GridShape {
    Sphere {
        center: Vec3,
        radius: f64,
    },
    Box {
        center: Vec3,
        half_extents: Vec3,
    },
    /// Shell of half-width `shell` around the surface samples of a panicle.
    Panicle {
        spec: Box<SynthPanicleSpec>,
        shell: f64,
    },
}

pub fn gen_density_grid(shape: &GridShape, dims: [usize; 3], origin: Vec3, spacing: [f64; 3]) -> Result<DensityGrid> {
    match shape {
        GridShape::Sphere { center, radius } => {
            DensityGrid::from_fn(dims, origin, spacing, |p| radius - (p - center).norm())
        }
        GridShape::Box { center, half_extents } => DensityGrid::from_fn(dims, origin, spacing, |p| {
            let q = (p - center).abs() - half_extents;
            let outside = q.sup(&Vec3::zeros()).norm();
            let inside = q.max().min(0.0);
            -(outside + inside)
        }),
        GridShape::Panicle { spec, shell } => {
            let model = build_panicle_model(spec)?;
            let cloud = sample_model(&model, spec.density, 0.0, spec.seed.wrapping_add(1))?;
            let tree = KdTree::from_cloud(&cloud);
            DensityGrid::from_fn(dims, origin, spacing, |p| {
                let d2 = tree.knn_with_dist2(&p, 1).first().map_or(f64::INFINITY, |x| x.1);
                shell - d2.sqrt()
            })
        }
    }
}

//! Scene-center estimation from camera poses and view filtering by aim angle.
//!
//! The scene center is the least-squares point closest to every viewing ray:
//! it solves `Σ (I - d dᵀ) c = Σ (I - d dᵀ) p` over poses `(p, d)`.

use crate::error::{Error, Result};
use crate::geom::{CameraPose, Vec3};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULT_MAX_ANGLE_DEG: f64 = 20.0;

/// Absolute slack on the angle comparison, in degrees. Absorbs `atan2`
/// rounding so a view constructed at exactly the threshold stays kept.
const ANGLE_SLACK_DEG: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    poses: Vec<CameraPose>,
    image_ids: Vec<String>,
}

impl ViewSet {
    pub fn new(poses: Vec<CameraPose>, image_ids: Vec<String>) -> Result<Self> {
        if poses.len() != image_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} poses but {} image ids",
                poses.len(),
                image_ids.len()
            )));
        }
        Ok(Self { poses, image_ids })
    }

    /// Ids default to the pose index.
    pub fn from_poses(poses: Vec<CameraPose>) -> Self {
        let image_ids = (0..poses.len()).map(|i| i.to_string()).collect();
        Self { poses, image_ids }
    }

    pub fn poses(&self) -> &[CameraPose] {
        &self.poses
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Parses the pose JSON array. Each record carries either
    /// `position` + `view_dir`, or a 4x4 row-major camera-to-world `transform`.
    pub fn from_json(text: &str) -> Result<Self> {
        let records: Vec<PoseRecord> = serde_json::from_str(text)?;
        let mut poses = Vec::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        for (i, r) in records.into_iter().enumerate() {
            let pose = match (r.position, r.view_dir, r.transform) {
                (Some(p), Some(d), None) => CameraPose::new(Vec3::from(p), Vec3::from(d))?,
                (None, None, Some(m)) => CameraPose::from_camera_to_world(&m)?,
                _ => {
                    return Err(Error::InvalidInput(format!(
                        "pose record {i} needs either position+view_dir or transform"
                    )))
                }
            };
            poses.push(pose);
            ids.push(r.image_id.unwrap_or_else(|| i.to_string()));
        }
        Ok(Self { poses, image_ids: ids })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let records: Vec<PoseRecord> = self
            .poses
            .iter()
            .zip(&self.image_ids)
            .map(|(p, id)| PoseRecord {
                image_id: Some(id.clone()),
                position: Some(p.position().into()),
                view_dir: Some(p.view_dir().into()),
                transform: None,
            })
            .collect();
        Ok(serde_json::to_string_pretty(&records)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view_dir: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transform: Option<[[f64; 4]; 4]>,
}

/// Least-squares intersection of the viewing rays.
pub fn scene_center(views: &ViewSet) -> Result<Vec3> {
    if views.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "scene center needs at least 2 poses, got {}",
            views.len()
        )));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for pose in views.poses() {
        let d = pose.view_dir();
        let proj = Matrix3::identity() - d * d.transpose();
        a += proj;
        b += proj * pose.position();
    }
    // All-parallel rays leave `a` with a null direction.
    let eig = a.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 1e-9 * max {
        return Err(Error::DegenerateGeometry(
            "viewing rays are parallel; scene center is undefined".into(),
        ));
    }
    let inv = a
        .try_inverse()
        .ok_or_else(|| Error::DegenerateGeometry("singular ray system".into()))?;
    Ok(inv * b)
}

/// Angle in degrees between the view direction and the ray toward `center`.
/// A camera sitting on the center has angle 0.
pub fn aim_angle_deg(pose: &CameraPose, center: &Vec3) -> f64 {
    let to_center = center - pose.position();
    if to_center.norm() <= 1e-12 {
        return 0.0;
    }
    let d = pose.view_dir();
    d.cross(&to_center).norm().atan2(d.dot(&to_center)).to_degrees()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViewFilterResult {
    pub center: [f64; 3],
    pub kept: Vec<String>,
    pub removed: Vec<String>,
    pub angles_deg: Vec<f64>,
}

/// Keeps views whose aim deviates from `center` by at most `max_angle_deg`.
pub fn filter_views(views: &ViewSet, center: &Vec3, max_angle_deg: f64) -> Result<Vec<String>> {
    Ok(filter_views_detailed(views, center, max_angle_deg)?.kept)
}

pub fn filter_views_detailed(views: &ViewSet, center: &Vec3, max_angle_deg: f64) -> Result<ViewFilterResult> {
    if !(max_angle_deg > 0.0 && max_angle_deg < 180.0) {
        return Err(Error::InvalidInput(format!(
            "max angle must lie in (0, 180) degrees, got {max_angle_deg}"
        )));
    }
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    let mut angles = Vec::with_capacity(views.len());
    for (pose, id) in views.poses().iter().zip(views.image_ids()) {
        let angle = aim_angle_deg(pose, center);
        angles.push(angle);
        if angle <= max_angle_deg + ANGLE_SLACK_DEG {
            kept.push(id.clone());
        } else {
            removed.push(id.clone());
        }
    }
    Ok(ViewFilterResult {
        center: (*center).into(),
        kept,
        removed,
        angles_deg: angles,
    })
}

/// The two steps together: estimate the center, then filter.
pub fn filter_view_set(views: &ViewSet, max_angle_deg: f64) -> Result<ViewFilterResult> {
    let center = scene_center(views)?;
    filter_views_detailed(views, &center, max_angle_deg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;

    fn aimed_ring(n: usize, radius: f64, center: Vec3) -> ViewSet {
        let poses = (0..n)
            .map(|i| {
                let t = i as f64 * std::f64::consts::TAU / n as f64;
                let p = center + Vec3::new(radius * t.cos(), radius * t.sin(), 0.3 * radius);
                CameraPose::new(p, center - p).unwrap()
            })
            .collect();
        ViewSet::from_poses(poses)
    }

    #[test]
    fn ring_aimed_at_origin() {
        let c = scene_center(&aimed_ring(4, 2.0, Vec3::zeros())).unwrap();
        assert!(c.norm() < 1e-9);
    }

    /// Closed form for two rays: midpoint of the common perpendicular.
    fn two_ray_midpoint(p1: Vec3, d1: Vec3, p2: Vec3, d2: Vec3) -> Vec3 {
        let w = p1 - p2;
        let (a, b, c) = (d1.dot(&d1), d1.dot(&d2), d2.dot(&d2));
        let (d, e) = (d1.dot(&w), d2.dot(&w));
        let den = a * c - b * b;
        let s = (b * e - c * d) / den;
        let t = (a * e - b * d) / den;
        ((p1 + d1 * s) + (p2 + d2 * t)) / 2.0
    }

    #[test]
    fn skew_rays_meet_at_common_perpendicular_midpoint() {
        let (p1, d1) = (Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0));
        let (p2, d2) = (Vec3::new(0.0, -1.0, 2.0), Vec3::new(0.3, 1.0, 0.1).normalize());
        let views = ViewSet::from_poses(vec![CameraPose::new(p1, d1).unwrap(), CameraPose::new(p2, d2).unwrap()]);
        let c = scene_center(&views).unwrap();
        assert!((c - two_ray_midpoint(p1, d1, p2, d2)).norm() < 1e-9);
    }

    #[test]
    fn parallel_rays_are_degenerate() {
        let poses = (0..5)
            .map(|i| CameraPose::new(Vec3::new(0.0, i as f64, 0.0), Vec3::x()).unwrap())
            .collect();
        assert!(matches!(
            scene_center(&ViewSet::from_poses(poses)),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn single_pose_is_rejected() {
        let v = ViewSet::from_poses(vec![CameraPose::new(Vec3::zeros(), Vec3::x()).unwrap()]);
        assert!(scene_center(&v).is_err());
    }

    #[test]
    fn aim_and_off_aim() {
        let on = CameraPose::new(Vec3::new(1.0, 0.0, 0.0), -Vec3::x()).unwrap();
        let off = CameraPose::new(Vec3::new(1.0, 0.0, 0.0), Vec3::y()).unwrap();
        let at = CameraPose::new(Vec3::zeros(), Vec3::y()).unwrap();
        let views = ViewSet::new(vec![on, off, at], vec!["on".into(), "off".into(), "at".into()]).unwrap();
        let kept = filter_views(&views, &Vec3::zeros(), DEFAULT_MAX_ANGLE_DEG).unwrap();
        assert_eq!(kept, vec!["on".to_string(), "at".to_string()]);
    }

    #[test]
    fn boundary_angle_is_kept() {
        let d = Rotation3::from_axis_angle(&Vec3::z_axis(), 20f64.to_radians()) * -Vec3::x();
        let pose = CameraPose::new(Vec3::x(), d).unwrap();
        let views = ViewSet::from_poses(vec![pose]);
        assert_eq!(filter_views(&views, &Vec3::zeros(), 20.0).unwrap().len(), 1);
        assert_eq!(filter_views(&views, &Vec3::zeros(), 19.99).unwrap().len(), 0);
    }

    #[test]
    fn ring_with_half_tilted() {
        let center = Vec3::new(0.5, -0.2, 1.0);
        let mut poses = Vec::new();
        for i in 0..36 {
            let t = i as f64 * std::f64::consts::TAU / 36.0;
            let p = center + Vec3::new(3.0 * t.cos(), 3.0 * t.sin(), 0.5);
            let aim = (center - p).normalize();
            let dir = if i % 2 == 0 {
                aim
            } else {
                let axis = Unit::new_normalize(aim.cross(&Vec3::z()));
                Rotation3::from_axis_angle(&axis, 25f64.to_radians()) * aim
            };
            poses.push(CameraPose::new(p, dir).unwrap());
        }
        let views = ViewSet::from_poses(poses);
        let kept = filter_views(&views, &center, 20.0).unwrap();
        let expected: Vec<String> = (0..36).step_by(2).map(|i| i.to_string()).collect();
        assert_eq!(kept, expected);
    }

    #[test]
    fn invalid_angle() {
        let v = aimed_ring(4, 1.0, Vec3::zeros());
        assert!(filter_views(&v, &Vec3::zeros(), 0.0).is_err());
        assert!(filter_views(&v, &Vec3::zeros(), 180.0).is_err());
    }

    #[test]
    fn json_forms() {
        let text = r#"[
            {"image_id": "a", "position": [1, 0, 0], "view_dir": [-2, 0, 0]},
            {"transform": [[1,0,0,0],[0,1,0,0],[0,0,1,5],[0,0,0,1]]}
        ]"#;
        let v = ViewSet::from_json(text).unwrap();
        assert_eq!(v.image_ids(), &["a".to_string(), "1".to_string()]);
        assert_eq!(v.poses()[0].view_dir(), -Vec3::x());
        assert_eq!(v.poses()[1].view_dir(), -Vec3::z());
        let back = ViewSet::from_json(&v.to_json().unwrap()).unwrap();
        assert_eq!(back, v);
        assert!(ViewSet::from_json(r#"[{"position": [0,0,0]}]"#).is_err());
        assert!(ViewSet::from_json(r#"[{"position": [0,0,0], "view_dir": [1,0,0], "fov": 2}]"#).is_err());
    }

    fn arb_views() -> impl Strategy<Value = ViewSet> {
        prop::collection::vec(
            (prop::array::uniform3(-5.0f64..5.0), prop::array::uniform3(-1.0f64..1.0)),
            3..12,
        )
        .prop_filter_map("degenerate pose", |recs| {
            let poses: Option<Vec<_>> = recs
                .into_iter()
                .map(|(p, d)| CameraPose::new(Vec3::from(p), Vec3::from(d)).ok())
                .collect();
            poses.map(ViewSet::from_poses)
        })
    }

    proptest! {
        #[test]
        fn center_is_rigidly_equivariant(views in arb_views(),
                                         angles in prop::array::uniform3(-3.0f64..3.0),
                                         shift in prop::array::uniform3(-10.0f64..10.0)) {
            // Skip nearly-parallel bundles whose center is ill-conditioned.
            let mut a = Matrix3::zeros();
            for p in views.poses() {
                a += Matrix3::identity() - p.view_dir() * p.view_dir().transpose();
            }
            prop_assume!(a.symmetric_eigen().eigenvalues.min() > 0.05 * views.len() as f64);
            let c = scene_center(&views).unwrap();
            let rot = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            let t = Vec3::from(shift);
            let moved = ViewSet::from_poses(views.poses().iter().map(|p| {
                CameraPose::new(rot * p.position() + t, rot * p.view_dir()).unwrap()
            }).collect());
            let c2 = scene_center(&moved).unwrap();
            let scale = 1.0 + c.norm();
            prop_assert!((c2 - (rot * c + t)).norm() < 1e-9 * scale,
                "{c2:?} vs {:?}", rot * c + t);
        }

        #[test]
        fn filter_is_monotone_and_idempotent(views in arb_views(), a in 1.0f64..90.0, b in 1.0f64..90.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let center = Vec3::new(0.1, 0.2, 0.3);
            let k_lo = filter_views(&views, &center, lo).unwrap();
            let k_hi = filter_views(&views, &center, hi).unwrap();
            prop_assert!(k_lo.iter().all(|id| k_hi.contains(id)));
            prop_assert!(k_hi.len() <= views.len());

            let kept_set: Vec<usize> = views.image_ids().iter().enumerate()
                .filter(|(_, id)| k_lo.contains(id)).map(|(i, _)| i).collect();
            let sub = ViewSet::new(
                kept_set.iter().map(|&i| views.poses()[i]).collect(),
                kept_set.iter().map(|&i| views.image_ids()[i].clone()).collect(),
            ).unwrap();
            prop_assert_eq!(filter_views(&sub, &center, lo).unwrap(), k_lo);
        }
    }
}

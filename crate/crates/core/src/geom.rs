//! Shared geometric value types.
//!
//! Everything here is immutable after construction: the constructors check the
//! invariants once, and downstream code relies on them without re-validating.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

/// A point or direction in scene units.
pub type Vec3 = Vector3<f64>;

const NORMAL_TOLERANCE: f64 = 1e-6;

/// Point positions with optional per-point normals and colors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Option<Vec<Vec3>>,
    colors: Option<Vec<[u8; 3]>>,
}

impl PointCloud {
    /// Builds a position-only cloud. Fails on non-finite coordinates.
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        Self::with_attributes(points, None, None)
    }

    pub fn with_attributes(
        points: Vec<Vec3>,
        normals: Option<Vec<Vec3>>,
        colors: Option<Vec<[u8; 3]>>,
    ) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !is_finite(p)) {
            return Err(Error::InvalidInput(format!("point {i} has non-finite coordinates")));
        }
        if let Some(n) = &normals {
            if n.len() != points.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} normals for {} points",
                    n.len(),
                    points.len()
                )));
            }
            if let Some(i) = n
                .iter()
                .position(|v| !is_finite(v) || (v.norm() - 1.0).abs() > NORMAL_TOLERANCE)
            {
                return Err(Error::InvalidInput(format!("normal {i} is not unit length")));
            }
        }
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} colors for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        Ok(Self {
            points,
            normals,
            colors,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vec3]> {
        self.normals.as_deref()
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    /// Replaces the normals, keeping positions and colors.
    pub fn with_normals(self, normals: Vec<Vec3>) -> Result<Self> {
        Self::with_attributes(self.points, Some(normals), self.colors)
    }

    /// Cloud made of the points at `indices`, attributes carried along.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|n| indices.iter().map(|&i| n[i]).collect()),
            colors: self.colors.as_ref().map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    /// Concatenates clouds. Attributes survive only if every input has them.
    pub fn concat(clouds: &[&PointCloud]) -> PointCloud {
        let points = clouds.iter().flat_map(|c| c.points.iter().copied()).collect();
        let normals = if clouds.iter().all(|c| c.normals.is_some()) {
            Some(
                clouds
                    .iter()
                    .flat_map(|c| c.normals.as_ref().unwrap().iter().copied())
                    .collect(),
            )
        } else {
            None
        };
        let colors = if clouds.iter().all(|c| c.colors.is_some()) {
            Some(
                clouds
                    .iter()
                    .flat_map(|c| c.colors.as_ref().unwrap().iter().copied())
                    .collect(),
            )
        } else {
            None
        };
        PointCloud {
            points,
            normals,
            colors,
        }
    }

    /// Applies `p -> scale * R p + t` to positions and `n -> R n` to normals.
    pub fn transformed(&self, rotation: &Matrix3<f64>, translation: &Vec3, scale: f64) -> Self {
        PointCloud {
            points: self.points.iter().map(|p| rotation * p * scale + translation).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|n| n.iter().map(|v| (rotation * v).normalize()).collect()),
            colors: self.colors.clone(),
        }
    }

    pub fn aabb(&self) -> Option<Aabb> {
        Aabb::from_points(&self.points)
    }

    pub fn centroid(&self) -> Option<Vec3> {
        if self.points.is_empty() {
            return None;
        }
        let sum: Vec3 = self.points.iter().sum();
        Some(sum / self.points.len() as f64)
    }
}

fn is_finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// Axis-aligned bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn from_points(points: &[Vec3]) -> Option<Self> {
        let first = points.first()?;
        let mut min = *first;
        let mut max = *first;
        for p in &points[1..] {
            min = min.inf(p);
            max = max.sup(p);
        }
        Some(Self { min, max })
    }

    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }
}

/// Camera position and unit viewing direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    position: Vec3,
    view_dir: Vec3,
}

impl CameraPose {
    /// The viewing direction is normalized; a zero or non-finite one is rejected.
    pub fn new(position: Vec3, view_dir: Vec3) -> Result<Self> {
        let n = view_dir.norm();
        if !is_finite(&position) || !n.is_finite() || n < 1e-12 {
            return Err(Error::InvalidInput(
                "camera pose needs a finite position and a nonzero view direction".into(),
            ));
        }
        Ok(Self {
            position,
            view_dir: view_dir / n,
        })
    }

    /// Camera-to-world 4x4 matrix (row-major) with the camera looking down its
    /// local -z axis, so the view direction is minus the third rotation column.
    pub fn from_camera_to_world(m: &[[f64; 4]; 4]) -> Result<Self> {
        let position = Vec3::new(m[0][3], m[1][3], m[2][3]);
        let third = Vec3::new(m[0][2], m[1][2], m[2][2]);
        Self::new(position, -third)
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }

    pub fn view_dir(&self) -> Vec3 {
        self.view_dir
    }
}

/// Oriented box with orthonormal axes and half extents sorted descending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBoundingBox {
    pub center: Vec3,
    pub axes: [Vec3; 3],
    pub half_extents: [f64; 3],
}

impl OrientedBoundingBox {
    /// The three distinct face areas, largest first: (axes 0-1, axes 0-2, axes 1-2).
    pub fn face_areas(&self) -> [f64; 3] {
        let [a, b, c] = self.half_extents;
        [4.0 * a * b, 4.0 * a * c, 4.0 * b * c]
    }

    /// Box coordinates of `p` along each axis, relative to the center.
    pub fn local(&self, p: &Vec3) -> Vec3 {
        let d = p - self.center;
        Vec3::new(d.dot(&self.axes[0]), d.dot(&self.axes[1]), d.dot(&self.axes[2]))
    }

    pub fn contains(&self, p: &Vec3, slack: f64) -> bool {
        let l = self.local(p);
        (0..3).all(|i| l[i].abs() <= self.half_extents[i] + slack)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_points() {
        assert!(PointCloud::new(vec![Vec3::new(0.0, f64::NAN, 0.0)]).is_err());
    }

    #[test]
    fn rejects_mismatched_attributes() {
        let pts = vec![Vec3::zeros(), Vec3::x()];
        assert!(PointCloud::with_attributes(pts.clone(), Some(vec![Vec3::z()]), None).is_err());
        assert!(PointCloud::with_attributes(pts, None, Some(vec![[0, 0, 0]])).is_err());
    }

    #[test]
    fn rejects_non_unit_normals() {
        let r = PointCloud::with_attributes(vec![Vec3::zeros()], Some(vec![Vec3::new(0.0, 0.0, 2.0)]), None);
        assert!(r.is_err());
    }

    #[test]
    fn pose_normalizes_direction() {
        let p = CameraPose::new(Vec3::zeros(), Vec3::new(0.0, 3.0, 4.0)).unwrap();
        assert!((p.view_dir().norm() - 1.0).abs() < 1e-12);
        assert!(CameraPose::new(Vec3::zeros(), Vec3::zeros()).is_err());
    }

    #[test]
    fn camera_to_world_convention() {
        // Identity rotation: camera looks down world -z.
        let m = [
            [1.0, 0.0, 0.0, 1.0],
            [0.0, 1.0, 0.0, 2.0],
            [0.0, 0.0, 1.0, 3.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let p = CameraPose::from_camera_to_world(&m).unwrap();
        assert_eq!(p.position(), Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(p.view_dir(), Vec3::new(0.0, 0.0, -1.0));
    }
}

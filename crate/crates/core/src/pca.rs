//! Covariance eigen-analysis and normal estimation.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::kdtree::KdTree;
use nalgebra::{Matrix3, SymmetricEigen};

/// Eigen-decomposition of a point covariance, largest eigenvalue first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pca {
    pub centroid: Vec3,
    pub eigenvalues: [f64; 3],
    /// Orthonormal, right-handed, paired with `eigenvalues`.
    pub eigenvectors: [Vec3; 3],
}

impl Pca {
    /// λ3 / (λ1 + λ2 + λ3); zero for a perfectly flat cloud.
    pub fn planarity(&self) -> f64 {
        let sum: f64 = self.eigenvalues.iter().sum();
        if sum > 0.0 {
            self.eigenvalues[2] / sum
        } else {
            0.0
        }
    }
}

/// Population covariance (divides by n) and centroid.
pub fn covariance(points: &[Vec3]) -> (Vec3, Matrix3<f64>) {
    let n = points.len() as f64;
    let centroid: Vec3 = points.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    (centroid, cov / n)
}

/// Symmetric 3x3 eigen-decomposition sorted descending, negatives clamped to 0.
pub fn sorted_eigen(m: &Matrix3<f64>) -> ([f64; 3], [Vec3; 3]) {
    let eig = SymmetricEigen::new(*m);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = idx.map(|i| eig.eigenvalues[i].max(0.0));
    let v0: Vec3 = eig.eigenvectors.column(idx[0]).into_owned().normalize();
    let v1: Vec3 = eig.eigenvectors.column(idx[1]).into_owned();
    // Re-orthogonalize and force a right-handed frame.
    let v1 = (v1 - v0 * v0.dot(&v1)).normalize();
    let v2 = v0.cross(&v1);
    (vals, [v0, v1, v2])
}

pub fn pca_points(points: &[Vec3]) -> Result<Pca> {
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "PCA needs at least 3 points, got {}",
            points.len()
        )));
    }
    let (centroid, cov) = covariance(points);
    let (eigenvalues, eigenvectors) = sorted_eigen(&cov);
    Ok(Pca {
        centroid,
        eigenvalues,
        eigenvectors,
    })
}

pub fn pca_eigen(cloud: &PointCloud) -> Result<Pca> {
    pca_points(cloud.points())
}

/// Relative threshold under which a neighborhood has no usable second axis.
const RANK_TOLERANCE: f64 = 1e-12;

/// Per-point normals from the smallest-eigenvalue direction of the k-neighborhood
/// covariance (the point itself included), oriented away from the neighborhood
/// centroid.
pub fn estimate_normals(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    let normals = normals_for_points(cloud.points(), k)?;
    cloud.clone().with_normals(normals)
}

pub fn normals_for_points(points: &[Vec3], k: usize) -> Result<Vec<Vec3>> {
    if k < 3 {
        return Err(Error::InvalidInput(format!("normal estimation needs k >= 3, got {k}")));
    }
    if points.len() < k {
        return Err(Error::InvalidInput(format!(
            "cloud of {} points is smaller than k = {k}",
            points.len()
        )));
    }
    let tree = KdTree::new(points);
    let mut neighborhood = Vec::with_capacity(k);
    let mut normals = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        neighborhood.clear();
        neighborhood.extend(tree.knn(p, k).into_iter().map(|j| points[j]));
        let (centroid, cov) = covariance(&neighborhood);
        let (vals, vecs) = sorted_eigen(&cov);
        if !(vals[0] > 0.0) || vals[1] <= RANK_TOLERANCE * vals[0] {
            return Err(Error::ZeroVariance { index: i });
        }
        let mut n = vecs[2];
        if n.dot(&(p - centroid)) < 0.0 {
            n = -n;
        }
        normals.push(n);
    }
    Ok(normals)
}

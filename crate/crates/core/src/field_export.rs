//! Isosurface extraction from density grids and area-weighted surface
//! sampling into point clouds.

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::grid::DensityGrid;
use crate::mc_tables::{EDGE_TABLE, TRI_TABLE};
use rand::Rng;
use std::collections::{HashMap, HashSet};

/// Triangles with area below this (relative to the squared grid spacing) are dropped.
const DEGENERATE_AREA: f64 = 1e-14;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidInput(format!(
                "triangle {t:?} references a vertex beyond {n}"
            )));
        }
        Ok(Self { vertices, triangles })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[u32; 3]] {
        &self.triangles
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.corners(t);
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i as usize])
    }

    /// Undirected edges with the number of triangles using each.
    pub fn edge_usage(&self) -> HashMap<(u32, u32), usize> {
        let mut usage = HashMap::new();
        for t in &self.triangles {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                *usage.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        usage
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_usage().values().all(|&c| c == 2)
    }

    /// V − E + F over the referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let used: HashSet<u32> = self.triangles.iter().flatten().copied().collect();
        used.len() as i64 - self.edge_usage().len() as i64 + self.triangles.len() as i64
    }
}

/// Cube corners as lattice offsets, in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Each cube edge as (lower corner offset, axis).
const EDGES: [([usize; 3], usize); 12] = [
    ([0, 0, 0], 0),
    ([1, 0, 0], 1),
    ([0, 1, 0], 0),
    ([0, 0, 0], 1),
    ([0, 0, 1], 0),
    ([1, 0, 1], 1),
    ([0, 1, 1], 0),
    ([0, 0, 1], 1),
    ([0, 0, 0], 2),
    ([1, 0, 0], 2),
    ([1, 1, 0], 2),
    ([0, 1, 0], 2),
];

/// Marching cubes with linear edge interpolation. A corner counts as inside
/// when its value is below `iso`; vertices on shared edges are merged.
pub fn marching_cubes(grid: &DensityGrid, iso: f64) -> Result<TriangleMesh> {
    if !iso.is_finite() {
        return Err(Error::InvalidInput(format!("iso level {iso} is not finite")));
    }
    let [nx, ny, nz] = grid.dims();
    let min_area = DEGENERATE_AREA * grid.min_spacing().powi(2);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    let mut edge_vertex: HashMap<usize, u32> = HashMap::new();

    let mut vertex_on = |i: usize, j: usize, k: usize, e: usize, vertices: &mut Vec<Vec3>| -> u32 {
        let (off, axis) = EDGES[e];
        let a = [i + off[0], j + off[1], k + off[2]];
        let key = 3 * grid.index(a[0], a[1], a[2]) + axis;
        *edge_vertex.entry(key).or_insert_with(|| {
            let mut b = a;
            b[axis] += 1;
            let va = grid.value(a[0], a[1], a[2]);
            let vb = grid.value(b[0], b[1], b[2]);
            let t = (iso - va) / (vb - va);
            let pa = grid.position(a[0], a[1], a[2]);
            let pb = grid.position(b[0], b[1], b[2]);
            vertices.push(pa + (pb - pa) * t);
            (vertices.len() - 1) as u32
        })
    };

    for i in 0..nx - 1 {
        for j in 0..ny - 1 {
            for k in 0..nz - 1 {
                let mut case = 0usize;
                for (c, off) in CORNERS.iter().enumerate() {
                    if grid.value(i + off[0], j + off[1], k + off[2]) < iso {
                        case |= 1 << c;
                    }
                }
                if EDGE_TABLE[case] == 0 {
                    continue;
                }
                for tri in TRI_TABLE[case].chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [0, 1, 2].map(|m| vertex_on(i, j, k, tri[m] as usize, &mut vertices));
                    let [a, b, c] = t.map(|v| vertices[v as usize]);
                    if (b - a).cross(&(c - a)).norm() / 2.0 > min_area {
                        triangles.push(t);
                    }
                }
            }
        }
    }
    Ok(TriangleMesh { vertices, triangles })
}

/// Draws `round(area · points_per_unit_area)` points, each on a triangle chosen
/// with probability proportional to its area, uniformly within it.
pub fn sample_mesh(mesh: &TriangleMesh, points_per_unit_area: f64, seed: u64) -> Result<PointCloud> {
    if !(points_per_unit_area > 0.0) || !points_per_unit_area.is_finite() {
        return Err(Error::InvalidInput(format!(
            "sampling density must be positive, got {points_per_unit_area}"
        )));
    }
    if mesh.is_empty() {
        return Ok(PointCloud::empty());
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cdf.push(total);
    }
    let n = (total * points_per_unit_area).round() as usize;
    let mut rng = crate::seeded_rng(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u = rng.random::<f64>() * total;
        let t = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
        let [a, b, c] = mesh.corners(t);
        let s = rng.random::<f64>().sqrt();
        let r = rng.random::<f64>();
        points.push(a * (1.0 - s) + b * (s * (1.0 - r)) + c * (s * r));
    }
    PointCloud::new(points)
}

/// Otsu threshold over a 256-bin histogram of the grid values.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    const BINS: usize = 256;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if values.is_empty() || !(hi > lo) {
        return values.first().copied().unwrap_or(0.0);
    }
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(b, &c)| b as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0);
    for (b, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += b as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1).powi(2);
        if between > best {
            best = between;
            best_bin = b;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

/// Marching cubes then surface sampling; `iso = None` picks the Otsu threshold.
pub fn export_cloud(grid: &DensityGrid, iso: Option<f64>, points_per_unit_area: f64, seed: u64) -> Result<PointCloud> {
    let iso = iso.unwrap_or_else(|| otsu_threshold(grid.values()));
    let mesh = marching_cubes(grid, iso)?;
    sample_mesh(&mesh, points_per_unit_area, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(n: usize, radius: f64) -> DensityGrid {
        let spacing = 2.0 / (n - 1) as f64;
        DensityGrid::from_fn([n; 3], Vec3::from_element(-1.0), [spacing; 3], |p| radius - p.norm()).unwrap()
    }

    #[test]
    fn constant_grid_is_empty() {
        let g = DensityGrid::new([4, 4, 4], Vec3::zeros(), [1.0; 3], vec![2.0; 64]).unwrap();
        assert!(marching_cubes(&g, 1.0).unwrap().is_empty());
        assert!(marching_cubes(&g, 3.0).unwrap().is_empty());
        assert!(export_cloud(&g, Some(1.0), 10.0, 0).unwrap().is_empty());
        assert!(marching_cubes(&g, f64::NAN).is_err());
    }

    #[test]
    fn single_hot_corner_gives_octahedron() {
        let mut values = vec![0.0; 27];
        values[13] = 1.0;
        let g = DensityGrid::new([3, 3, 3], Vec3::zeros(), [2.0; 3], values).unwrap();
        let mesh = marching_cubes(&g, 0.5).unwrap();
        assert_eq!(mesh.vertices().len(), 6);
        assert_eq!(mesh.triangles().len(), 8);
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        let c = Vec3::new(2.0, 2.0, 2.0);
        for v in mesh.vertices() {
            assert!(((v - c).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_is_closed_and_accurate() {
        let g = sphere_grid(32, 0.7);
        let mesh = marching_cubes(&g, 0.0).unwrap();
        assert!(mesh.is_watertight());
        assert_eq!(mesh.euler_characteristic(), 2);
        let mean: f64 =
            mesh.vertices().iter().map(|v| (v.norm() - 0.7).abs()).sum::<f64>() / mesh.vertices().len() as f64;
        assert!(mean < g.spacing()[0], "mean radial error {mean}");
    }

    #[test]
    fn box_extents() {
        let half = Vec3::new(0.6, 0.35, 0.2);
        let g = DensityGrid::from_fn([41; 3], Vec3::from_element(-1.0), [0.05; 3], |p| {
            let q = p.abs() - half;
            let outside = q.sup(&Vec3::zeros()).norm();
            let inside = q.max().min(0.0);
            -(outside + inside)
        })
        .unwrap();
        let cloud = export_cloud(&g, Some(0.0), 2000.0, 4).unwrap();
        let bb = cloud.aabb().unwrap();
        for a in 0..3 {
            assert!((bb.max[a] - half[a]).abs() <= 0.05);
            assert!((bb.min[a] + half[a]).abs() <= 0.05);
        }
    }

    #[test]
    fn sampling_counts_and_containment() {
        let mesh = TriangleMesh::new(
            vec![Vec3::zeros(), Vec3::new(2.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0)],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let cloud = sample_mesh(&mesh, 1000.0, 1).unwrap();
        assert_eq!(cloud.len(), 1000);
        for p in cloud.points() {
            assert!(p.x >= 0.0 && p.y >= 0.0 && p.x / 2.0 + p.y <= 1.0 + 1e-12 && p.z == 0.0);
        }
        assert_eq!(cloud, sample_mesh(&mesh, 1000.0, 1).unwrap());
        assert!(sample_mesh(&mesh, 0.0, 1).is_err());
        assert!(sample_mesh(&TriangleMesh::default(), 5.0, 1).unwrap().is_empty());
    }

    #[test]
    fn area_ratio_three_to_one() {
        let mesh = TriangleMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::new(3.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(10.0, 0.0, 0.0),
                Vec3::new(11.0, 0.0, 0.0),
                Vec3::new(10.0, 2.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        )
        .unwrap();
        let cloud = sample_mesh(&mesh, 1000.0, 8).unwrap();
        let n = cloud.len() as f64;
        let first = cloud.points().iter().filter(|p| p.x < 5.0).count() as f64;
        let sd = (n * 0.75 * 0.25).sqrt();
        assert!((first - 0.75 * n).abs() < 3.0 * sd, "{first} of {n}");
    }

    #[test]
    fn samples_lie_on_their_planes() {
        let g = sphere_grid(16, 0.6);
        let mesh = marching_cubes(&g, 0.0).unwrap();
        let cloud = sample_mesh(&mesh, 500.0, 3).unwrap();
        let planes: Vec<_> = mesh
            .triangles()
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| mesh.vertices()[i as usize]);
                (a, b, c, (b - a).cross(&(c - a)).normalize())
            })
            .collect();
        for p in cloud.points().iter().take(200) {
            let on = planes.iter().any(|(a, b, c, n)| {
                let d = n.dot(&(p - a)).abs();
                let inside = [(a, b), (b, c), (c, a)]
                    .iter()
                    .all(|(u, v)| n.dot(&(*v - *u).cross(&(p - *u))) >= -1e-9);
                d < 1e-6 && inside
            });
            assert!(on);
        }
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![0.0; 500];
        v.extend(vec![10.0; 300]);
        let t = otsu_threshold(&v);
        assert!(t > 0.0 && t <= 10.0);
        assert_eq!(otsu_threshold(&[3.0, 3.0]), 3.0);
    }
}

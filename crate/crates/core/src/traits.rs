//! Panicle traits: skeleton length and voxel volume.
//!
//! Length runs in four steps. The downsampled panicle is contracted onto its
//! curve skeleton by iterated Laplacian smoothing with point anchors
//! ([`lbc_contract`]). Farthest-point nodes are then joined into a spanning
//! tree ([`build_skeleton`]). The rachis is picked as the longest leaf-to-leaf
//! path with no sharp turn at several tangent scales ([`main_path`]).
//! Finally a smoothing spline through that path gives the arc length
//! ([`SmoothingSpline`]).
//!
//! Both traits work in label coordinates normalized to label length 1
//! ([`normalized_points`]). That makes every step, including the downsample
//! grid and the voxel grid, independent of the scene pose and scale.

use crate::cloud_ops::{voxel_downsample, Calibration};
use crate::error::{Error, Result};
use crate::geom::{Aabb, PointCloud, Vec3};
use crate::kdtree::KdTree;
use crate::pca::{covariance, sorted_eigen};
use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};
use nalgebra::{DMatrix, DVector};
use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};
use std::collections::{HashSet, VecDeque};

pub const DEFAULT_THETA_MAX_DEG: f64 = 60.0;
pub const DEFAULT_TANGENT_SCALES: [usize; 2] = [1, 3];
pub const DEFAULT_VOXEL: f64 = 0.01;
pub const DEFAULT_SMOOTHING: f64 = 1e-3;
pub const DEFAULT_DOWNSAMPLE_FRAC: f64 = 0.005;
pub const DEFAULT_NODE_SPACING_FRAC: f64 = 0.02;

// ---------------------------------------------------------------------------
// Laplacian contraction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbcParams {
    pub k_neighbors: usize,
    pub w_l_init: f64,
    pub w_h_init: f64,
    pub s_l: f64,
    pub max_iters: usize,
    pub converge_ratio: f64,
    /// Upper bound on the contraction weight.
    pub w_l_max: f64,
    /// Upper bound on any attraction weight.
    pub w_h_max: f64,
}

impl Default for LbcParams {
    fn default() -> Self {
        Self {
            k_neighbors: 16,
            w_l_init: 1.0,
            w_h_init: 1.0,
            s_l: 3.0,
            max_iters: 20,
            converge_ratio: 0.01,
            w_l_max: 2048.0,
            w_h_max: 1e4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Contraction {
    pub cloud: PointCloud,
    pub iterations: usize,
    /// Total neighborhood extent after each iteration, starting with the input.
    pub history: Vec<f64>,
    pub converged: bool,
}

/// Symmetrized k-NN adjacency, self excluded, each list sorted.
pub fn knn_graph(points: &[Vec3], k: usize) -> Vec<Vec<usize>> {
    let tree = KdTree::new(points);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (i, p) in points.iter().enumerate() {
        for j in tree.knn(p, k + 1) {
            if j != i {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Connected-component id per vertex, ids in order of first appearance.
pub fn components(adj: &[Vec<usize>]) -> Vec<usize> {
    let mut uf = UnionFind::<usize>::new(adj.len());
    for (i, list) in adj.iter().enumerate() {
        for &j in list {
            uf.union(i, j);
        }
    }
    let mut ids = vec![usize::MAX; adj.len()];
    let mut root_id = std::collections::HashMap::new();
    for (i, id) in ids.iter_mut().enumerate() {
        let next = root_id.len();
        *id = *root_id.entry(uf.find(i)).or_insert(next);
    }
    ids
}

/// Square root of the two leading neighborhood eigenvalues' geometric mean:
/// an area-like extent that vanishes once the ring collapses onto a curve.
fn ring_extent(points: &[Vec3], ring: &[usize]) -> f64 {
    let pts: Vec<Vec3> = ring.iter().map(|&j| points[j]).collect();
    let (_, cov) = covariance(&pts);
    let (vals, _) = sorted_eigen(&cov);
    (vals[0].max(0.0) * vals[1].max(0.0)).sqrt().sqrt()
}

/// Contracts `cloud` toward its curve skeleton.
///
/// Each iteration solves, in the least-squares sense,
/// `[w_L L; W_H] P' = [0; W_H P]` with `L = I - D^-1 W` the random-walk
/// Laplacian of the k-NN graph. Gaussian edge weights are taken from the input
/// positions and kept: recomputing them each iteration turns the smoothing
/// into mean-shift, which gathers a tube surface into strands that then lock
/// in place instead of reaching the axis. Results are clamped to the previous
/// bounding box so the box can only shrink.
pub fn lbc_contract(cloud: &PointCloud, params: &LbcParams) -> Result<Contraction> {
    let n = cloud.len();
    let k = params.k_neighbors;
    if k == 0 || n < k + 1 {
        return Err(Error::InvalidInput(format!(
            "contraction needs at least {} points, got {n}",
            k + 1
        )));
    }
    if !(params.s_l > 0.0 && params.w_l_init > 0.0 && params.w_h_init > 0.0) {
        return Err(Error::InvalidInput("contraction weights must be positive".into()));
    }
    let adj = knn_graph(cloud.points(), k);
    let n_comp = components(&adj).into_iter().max().map_or(0, |m| m + 1);
    if n_comp > 1 {
        return Err(Error::Disconnected { components: n_comp });
    }

    // Extent rings stay the original neighborhoods, self included.
    let rings: Vec<Vec<usize>> = adj
        .iter()
        .enumerate()
        .map(|(i, list)| {
            let mut r = list.clone();
            r.push(i);
            r
        })
        .collect();

    let mut pos: Vec<Vec3> = cloud.points().to_vec();
    let s0: Vec<f64> = rings.iter().map(|r| ring_extent(&pos, r)).collect();
    let total0: f64 = s0.iter().map(|s| s * s).sum();
    let mut history = vec![total0];
    let diag = Aabb::from_points(&pos).map_or(0.0, |b| b.diagonal());
    if total0 <= 1e-24 * n as f64 * diag.powi(4) {
        // Already a curve.
        return Ok(Contraction {
            cloud: cloud.clone(),
            iterations: 0,
            history,
            converged: true,
        });
    }
    let s_floor = 1e-6 * mean(&s0).max(f64::MIN_POSITIVE);

    // Lower triangle of L^T L. Duplicate entries are summed on assembly.
    let mut ltl: Vec<Triplet<usize, usize, f64>> = Vec::new();
    for row in laplacian_rows(&pos, &adj) {
        for &(a, va) in &row {
            for &(b, vb) in &row {
                if a >= b {
                    ltl.push(Triplet::new(a, b, va * vb));
                }
            }
        }
    }

    let mut w_l = params.w_l_init;
    let mut w_h = vec![params.w_h_init; n];
    let mut s_prev = total0;
    let mut symbolic: Option<SymbolicLlt<usize>> = None;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < params.max_iters {
        let mut trips = ltl.clone();
        let w2 = w_l * w_l;
        trips.iter_mut().for_each(|t| t.val *= w2);
        for (i, w) in w_h.iter().enumerate() {
            trips.push(Triplet::new(i, i, w * w));
        }
        let a = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trips)
            .map_err(|e| Error::InvalidInput(format!("system assembly failed: {e:?}")))?;
        let sym = match &symbolic {
            Some(s) => s.clone(),
            None => {
                let s = SymbolicLlt::try_new(a.symbolic(), Side::Lower)
                    .map_err(|e| Error::InvalidInput(format!("symbolic factorization: {e:?}")))?;
                symbolic = Some(s.clone());
                s
            }
        };
        let llt = Llt::try_new_with_symbolic(sym, a.as_ref(), Side::Lower)
            .map_err(|e| Error::DegenerateGeometry(format!("contraction solve failed: {e:?}")))?;
        let rhs = Mat::<f64>::from_fn(n, 3, |i, c| w_h[i] * w_h[i] * pos[i][c]);
        let sol = llt.solve(&rhs);

        let bounds = Aabb::from_points(&pos).expect("nonempty");
        for (i, p) in pos.iter_mut().enumerate() {
            for c in 0..3 {
                let v = sol[(i, c)];
                p[c] = if v.is_finite() {
                    v.clamp(bounds.min[c], bounds.max[c])
                } else {
                    p[c]
                };
            }
        }
        iterations += 1;

        let s: Vec<f64> = rings.iter().map(|r| ring_extent(&pos, r).max(s_floor)).collect();
        let total: f64 = s.iter().map(|x| x * x).sum();
        history.push(total);
        log::trace!("contraction iter {iterations}: extent {total:.4e}, w_L {w_l:.1}");
        if (1.0 - total / s_prev).abs() < params.converge_ratio || total / total0 < 1e-6 {
            converged = true;
            break;
        }
        s_prev = total;
        for (i, w) in w_h.iter_mut().enumerate() {
            *w = (params.w_h_init * s0[i].max(s_floor) / s[i]).min(params.w_h_max);
        }
        w_l = (w_l * params.s_l).min(params.w_l_max);
    }

    let out = PointCloud::new(pos)?;
    Ok(Contraction {
        cloud: out,
        iterations,
        history,
        converged,
    })
}

/// Rows of `I - D^-1 W` as sparse `(column, value)` lists.
fn laplacian_rows(pos: &[Vec3], adj: &[Vec<usize>]) -> Vec<Vec<(usize, f64)>> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, list) in adj.iter().enumerate() {
        for &j in list {
            sum += (pos[i] - pos[j]).norm_squared();
            count += 1;
        }
    }
    let h2 = if count > 0 { sum / count as f64 } else { 0.0 };
    adj.iter()
        .enumerate()
        .map(|(i, list)| {
            let w: Vec<f64> = list
                .iter()
                .map(|&j| {
                    if h2 > 1e-300 {
                        (-(pos[i] - pos[j]).norm_squared() / h2).exp()
                    } else {
                        1.0
                    }
                })
                .collect();
            let total: f64 = w.iter().sum();
            let mut row = Vec::with_capacity(list.len() + 1);
            row.push((i, 1.0));
            if total > 0.0 {
                for (&j, wj) in list.iter().zip(&w) {
                    row.push((j, -wj / total));
                }
            }
            row
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

// ---------------------------------------------------------------------------
// Skeleton graph

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonGraph {
    pub nodes: Vec<Vec3>,
    /// Undirected edges `(a, b)` with `a < b`.
    pub edges: Vec<(usize, usize)>,
    /// Points attributed to each node.
    pub node_weights: Vec<usize>,
    /// Node index of every input point.
    pub assignment: Vec<usize>,
}

impl SkeletonGraph {
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency().iter().map(Vec::len).collect()
    }

    pub fn leaves(&self) -> Vec<usize> {
        self.degrees()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 1)
            .map(|(i, _)| i)
            .collect()
    }

    /// Moves every node to the centroid of the points it was built from,
    /// taken at their positions in `original`. Contraction drags thin parts
    /// toward heavy neighbors; the pre-contraction points undo that drift.
    pub fn recenter(&mut self, original: &[Vec3]) -> Result<()> {
        if original.len() != self.assignment.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points for {} assignments",
                original.len(),
                self.assignment.len()
            )));
        }
        let mut sums = vec![Vec3::zeros(); self.nodes.len()];
        for (p, &a) in original.iter().zip(&self.assignment) {
            sums[a] += p;
        }
        for ((node, s), &w) in self.nodes.iter_mut().zip(&sums).zip(&self.node_weights) {
            if w > 0 {
                *node = s / w as f64;
            }
        }
        Ok(())
    }

    /// Rebuilds the edges from neighborhoods of the uncontracted points.
    ///
    /// Contraction can fuse a curve into a nearby one, which the contracted
    /// neighborhoods then inherit. The original surface keeps them apart.
    pub fn relink(&mut self, original: &[Vec3], k: usize) -> Result<()> {
        if original.len() != self.assignment.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points for {} assignments",
                original.len(),
                self.assignment.len()
            )));
        }
        self.edges = link_nodes(original, &self.assignment, &self.nodes, k);
        Ok(())
    }

    pub fn is_tree(&self) -> bool {
        let n = self.nodes.len();
        n >= 1 && self.edges.len() == n - 1 && components(&self.adjacency()).iter().all(|&c| c == 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkeletonParams {
    /// Node spacing as a fraction of the bounding-box diagonal.
    pub spacing_frac: f64,
    /// Neighbors per point used to link nodes.
    pub k_neighbors: usize,
}

impl Default for SkeletonParams {
    fn default() -> Self {
        Self {
            spacing_frac: DEFAULT_NODE_SPACING_FRAC,
            k_neighbors: 8,
        }
    }
}

/// Farthest-point nodes joined by a Euclidean minimum spanning tree.
///
/// Nodes sit at the centroid of the points assigned to them. Candidate edges
/// come from k-NN pairs that straddle two nodes. If those leave several
/// components the forest is completed with the shortest node-to-node links.
pub fn build_skeleton(cloud: &PointCloud, params: &SkeletonParams) -> Result<SkeletonGraph> {
    if cloud.is_empty() {
        return Err(Error::Empty("skeleton input cloud".into()));
    }
    let pts = cloud.points();
    let diag = cloud.aabb().map_or(0.0, |b| b.diagonal());
    let h = params.spacing_frac * diag;

    let mut samples = vec![0usize];
    let mut dist: Vec<f64> = pts.iter().map(|p| (p - pts[0]).norm()).collect();
    if h > 0.0 {
        loop {
            let (far, d) = dist
                .iter()
                .enumerate()
                .fold((0, -1.0), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
            if d < h {
                break;
            }
            samples.push(far);
            let q = pts[far];
            for (di, p) in dist.iter_mut().zip(pts) {
                *di = di.min((p - q).norm());
            }
        }
    }

    let seeds: Vec<Vec3> = samples.iter().map(|&i| pts[i]).collect();
    let seed_tree = KdTree::new(&seeds);
    let assignment: Vec<usize> = pts.iter().map(|p| seed_tree.knn(p, 1)[0]).collect();
    let m = seeds.len();
    let mut sums = vec![Vec3::zeros(); m];
    let mut weights = vec![0usize; m];
    for (p, &a) in pts.iter().zip(&assignment) {
        sums[a] += p;
        weights[a] += 1;
    }
    let nodes: Vec<Vec3> = sums
        .iter()
        .zip(&weights)
        .zip(&seeds)
        .map(|((s, &w), seed)| if w > 0 { s / w as f64 } else { *seed })
        .collect();

    let edges = link_nodes(pts, &assignment, &nodes, params.k_neighbors);
    Ok(SkeletonGraph {
        nodes,
        edges,
        node_weights: weights,
        assignment,
    })
}

/// Spanning tree over nodes whose points are kNN neighbors, weighted by node
/// distance. Components left over are joined by their closest node pairs.
fn link_nodes(pts: &[Vec3], assignment: &[usize], nodes: &[Vec3], k: usize) -> Vec<(usize, usize)> {
    let m = nodes.len();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    if m > 1 {
        let tree = KdTree::new(pts);
        let mut seen = HashSet::new();
        for (i, p) in pts.iter().enumerate() {
            for j in tree.knn(p, k + 1) {
                let (a, b) = (assignment[i], assignment[j]);
                if a != b {
                    let key = (a.min(b), a.max(b));
                    if seen.insert(key) {
                        candidates.push(((nodes[a] - nodes[b]).norm(), key.0, key.1));
                    }
                }
            }
        }
    }
    let mut uf = UnionFind::<usize>::new(m);
    let mut edges = kruskal(&mut candidates, &mut uf);
    if edges.len() + 1 < m {
        let mut all: Vec<(f64, usize, usize)> = Vec::new();
        for a in 0..m {
            for b in a + 1..m {
                if !uf.equiv(a, b) {
                    all.push(((nodes[a] - nodes[b]).norm(), a, b));
                }
            }
        }
        edges.extend(kruskal(&mut all, &mut uf));
    }
    edges.sort_unstable();
    edges
}

fn kruskal(candidates: &mut [(f64, usize, usize)], uf: &mut UnionFind<usize>) -> Vec<(usize, usize)> {
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    candidates
        .iter()
        .filter(|&&(_, a, b)| uf.union(a, b))
        .map(|&(_, a, b)| (a, b))
        .collect()
}

// ---------------------------------------------------------------------------
// Main path

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub theta_max_deg: f64,
    /// Tangent scales in edges.
    pub tangent_scales: Vec<usize>,
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            theta_max_deg: DEFAULT_THETA_MAX_DEG,
            tangent_scales: DEFAULT_TANGENT_SCALES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MainPath {
    /// Node indices from one end to the other.
    pub nodes: Vec<usize>,
    /// Polyline length through the nodes.
    pub arc_length_scene: f64,
    /// Set when no leaf-to-leaf path passed the turning-angle gate.
    pub low_confidence: bool,
    /// Largest turning angle along the chosen path over all scales.
    pub max_turn_deg: f64,
}

/// Turning angle at every interior vertex of a polyline, in degrees.
///
/// At scale `m` the incoming tangent runs from vertex `i - m` to `i` and the
/// outgoing one from `i` to `i + m`, with indices clamped to the ends.
pub fn turning_angles_deg(points: &[Vec3], scale: usize) -> Vec<f64> {
    let n = points.len();
    if n < 3 || scale == 0 {
        return Vec::new();
    }
    (1..n - 1)
        .map(|i| {
            angle_deg(
                &(points[i] - points[i.saturating_sub(scale)]),
                &(points[(i + scale).min(n - 1)] - points[i]),
            )
        })
        .collect()
}

/// Turning angles across gaps left by dropped vertices.
///
/// For a gap between vertices `k` and `k + 1` the incoming tangent ends at `k`
/// and the outgoing one starts at `k + 1`, so the bridging chord does not
/// round off a corner hidden in the gap.
pub fn gap_turns_deg(points: &[Vec3], gaps: &[usize], scale: usize) -> Vec<f64> {
    let n = points.len();
    if scale == 0 {
        return Vec::new();
    }
    gaps.iter()
        .filter(|&&k| k + 1 < n)
        .map(|&k| {
            angle_deg(
                &(points[k] - points[k.saturating_sub(scale)]),
                &(points[(k + 1 + scale).min(n - 1)] - points[k + 1]),
            )
        })
        .collect()
}

fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

pub fn polyline_length(points: &[Vec3]) -> f64 {
    points.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
}

/// Longest leaf-to-leaf path with every turning angle within the gate.
///
/// When every path has a sharp turn somewhere, the longest path overall is
/// returned with `low_confidence` set.
pub fn main_path(skel: &SkeletonGraph, params: &PathParams) -> Result<MainPath> {
    let n = skel.nodes.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "main path needs at least 2 nodes, got {n}"
        )));
    }
    if !skel.is_tree() {
        return Err(Error::InvalidInput("skeleton graph is not a tree".into()));
    }
    let leaves = skel.leaves();
    if leaves.len() < 2 {
        return Err(Error::InvalidInput(format!("skeleton has {} leaves", leaves.len())));
    }
    let adj = skel.adjacency();
    let degree = skel.degrees();

    // (length, path, max turn) of the best gated and the best ungated path.
    let mut best_ok: Option<(f64, Vec<usize>, f64)> = None;
    let mut best_any: Option<(f64, Vec<usize>, f64)> = None;
    for (li, &src) in leaves.iter().enumerate() {
        let parent = bfs_parents(&adj, src);
        for &dst in &leaves[li + 1..] {
            let mut path = vec![dst];
            let mut cur = dst;
            while cur != src {
                cur = parent[cur];
                path.push(cur);
            }
            path.reverse();
            let shape = shape_nodes(&path, &degree);
            let pts: Vec<Vec3> = shape.iter().map(|&i| skel.nodes[i]).collect();
            let gaps: Vec<usize> = (0..shape.len().saturating_sub(1))
                .filter(|&k| !skel_adjacent(&adj, shape[k], shape[k + 1]))
                .collect();
            let len = polyline_length(&pts);
            let turn = params
                .tangent_scales
                .iter()
                .flat_map(|&s| {
                    turning_angles_deg(&pts, s)
                        .into_iter()
                        .chain(gap_turns_deg(&pts, &gaps, s))
                })
                .fold(0.0, f64::max);
            if turn <= params.theta_max_deg && best_ok.as_ref().is_none_or(|b| len > b.0) {
                best_ok = Some((len, path.clone(), turn));
            }
            if best_any.as_ref().is_none_or(|b| len > b.0) {
                best_any = Some((len, path, turn));
            }
        }
    }
    let (low_confidence, (len, nodes, turn)) = match best_ok {
        Some(b) => (false, b),
        None => (true, best_any.expect("at least one leaf pair")),
    };
    if !(len > 0.0) {
        return Err(Error::DegenerateGeometry("main path has zero length".into()));
    }
    Ok(MainPath {
        nodes,
        arc_length_scene: len,
        low_confidence,
        max_turn_deg: turn,
    })
}

/// Path nodes that carry shape information.
///
/// A junction node is placed among points from every branch it joins, so it
/// sits off the line of the path passing through it. Interior junctions are
/// dropped and their neighbors bridge the gap.
pub fn shape_nodes(path: &[usize], degree: &[usize]) -> Vec<usize> {
    let last = path.len().saturating_sub(1);
    path.iter()
        .enumerate()
        .filter(|&(k, &i)| k == 0 || k == last || degree[i] < 3)
        .map(|(_, &i)| i)
        .collect()
}

fn skel_adjacent(adj: &[Vec<usize>], a: usize, b: usize) -> bool {
    adj[a].contains(&b)
}

fn bfs_parents(adj: &[Vec<usize>], src: usize) -> Vec<usize> {
    let mut parent = vec![usize::MAX; adj.len()];
    parent[src] = src;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if parent[v] == usize::MAX {
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    parent
}

// ---------------------------------------------------------------------------
// Smoothing spline

/// Cubic smoothing spline through 3D points, parameterized by chord length.
///
/// Minimizes `sum |y_i - f(t_i)|^2 + lambda * integral |f''|^2` after scaling
/// the data by its bounding diagonal, with `t` the chord length of the scaled
/// data. That makes `lambda` dimensionless. `lambda = 0` gives the natural
/// interpolating spline.
#[derive(Debug, Clone)]
pub struct SmoothingSpline {
    knots: Vec<f64>,
    values: Vec<Vec3>,
    /// Second derivatives at the knots, zero at both ends.
    second: Vec<Vec3>,
    scale: f64,
}

impl SmoothingSpline {
    pub fn fit(points: &[Vec3], lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!(
                "smoothing weight must be >= 0, got {lambda}"
            )));
        }
        let scale = Aabb::from_points(points).map_or(0.0, |b| b.diagonal());
        if points.len() < 2 || !(scale > 0.0) {
            return Err(Error::DegenerateGeometry("spline needs two distinct points".into()));
        }
        // Drop repeated points, which would give zero-length knot intervals.
        let mut ys: Vec<Vec3> = Vec::with_capacity(points.len());
        for p in points {
            let q = p / scale;
            if ys.last().is_none_or(|l: &Vec3| (q - l).norm() > 1e-12) {
                ys.push(q);
            }
        }
        let n = ys.len();
        let mut knots = vec![0.0; n];
        for i in 1..n {
            knots[i] = knots[i - 1] + (ys[i] - ys[i - 1]).norm();
        }
        if n == 2 {
            return Ok(Self {
                knots,
                values: ys,
                second: vec![Vec3::zeros(); 2],
                scale,
            });
        }
        let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
        let m = n - 2;
        // Q is n x (n-2), R is (n-2) x (n-2) tridiagonal.
        let mut q = DMatrix::<f64>::zeros(n, m);
        let mut r = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            q[(j, j)] = 1.0 / h[j];
            q[(j + 1, j)] = -1.0 / h[j] - 1.0 / h[j + 1];
            q[(j + 2, j)] = 1.0 / h[j + 1];
            r[(j, j)] = (h[j] + h[j + 1]) / 3.0;
            if j + 1 < m {
                r[(j, j + 1)] = h[j + 1] / 6.0;
                r[(j + 1, j)] = h[j + 1] / 6.0;
            }
        }
        let system = &r + lambda * q.transpose() * &q;
        let chol = system
            .cholesky()
            .ok_or_else(|| Error::DegenerateGeometry("spline system is not positive definite".into()))?;
        let mut values = ys.clone();
        let mut second = vec![Vec3::zeros(); n];
        for c in 0..3 {
            let y = DVector::from_iterator(n, ys.iter().map(|p| p[c]));
            let gamma = chol.solve(&(q.transpose() * &y));
            let f = &y - lambda * (&q * &gamma);
            for i in 0..n {
                values[i][c] = f[i];
            }
            for j in 0..m {
                second[j + 1][c] = gamma[j];
            }
        }
        Ok(Self {
            knots,
            values,
            second,
            scale,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Curve point at fraction `u` of the parameter range, clamped to `[0, 1]`.
    pub fn eval(&self, u: f64) -> Vec3 {
        let t = u.clamp(0.0, 1.0) * self.knots[self.knots.len() - 1];
        let i = self.knots.partition_point(|&k| k <= t).clamp(1, self.knots.len() - 1) - 1;
        self.eval_segment(i, t) * self.scale
    }

    fn eval_segment(&self, i: usize, t: f64) -> Vec3 {
        let (t0, t1) = (self.knots[i], self.knots[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t - t0, t1 - t);
        (self.values[i + 1] * a + self.values[i] * b) / h
            - (self.second[i + 1] * (1.0 + a / h) + self.second[i] * (1.0 + b / h)) * (a * b / 6.0)
    }

    /// Length of the polyline through `samples_per_segment` points per knot interval.
    pub fn arc_length(&self, samples_per_segment: usize) -> f64 {
        let s = samples_per_segment.max(1);
        let mut total = 0.0;
        for i in 0..self.knots.len() - 1 {
            let (t0, t1) = (self.knots[i], self.knots[i + 1]);
            let mut prev = self.eval_segment(i, t0);
            for j in 1..=s {
                let p = self.eval_segment(i, t0 + (t1 - t0) * j as f64 / s as f64);
                total += (p - prev).norm();
                prev = p;
            }
        }
        total * self.scale
    }
}

/// Smoothed arc length through ordered points, 100 samples per segment.
pub fn curve_length(points: &[Vec3], lambda: f64) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidInput("curve length needs at least 2 points".into()));
    }
    if points.len() == 2 {
        return Ok((points[1] - points[0]).norm());
    }
    Ok(SmoothingSpline::fit(points, lambda)?.arc_length(100))
}

/// Arc length of the smoothing spline through the path's nodes.
pub fn fit_curve_length(path: &MainPath, skel: &SkeletonGraph) -> Result<f64> {
    let pts: Vec<Vec3> = shape_nodes(&path.nodes, &skel.degrees())
        .iter()
        .map(|&i| skel.nodes[i])
        .collect();
    curve_length(&pts, DEFAULT_SMOOTHING)
}

// ---------------------------------------------------------------------------
// Calibrated traits

/// Physical length in cm from a scene-unit length.
pub fn panicle_length(l1: f64, calib: &Calibration) -> f64 {
    l1 * calib.real_length_cm / calib.x1
}

/// Panicle points in label coordinates, scaled so the label has length 1.
///
/// Each label axis is signed so the panicle centroid has a nonnegative
/// coordinate, which removes the sign ambiguity of the fitted frame. Without
/// a frame the world axes are used.
pub fn normalized_points(cloud: &PointCloud, calib: &Calibration) -> Vec<Vec3> {
    let f = calib.normalize_factor;
    let Some(frame) = calib.frame else {
        return cloud.points().iter().map(|p| p * f).collect();
    };
    let center = Vec3::from(frame.center);
    let mut axes = frame.axes.map(Vec3::from);
    if let Some(c) = cloud.centroid() {
        for a in &mut axes {
            if (c - center).dot(a) < 0.0 {
                *a = -*a;
            }
        }
    }
    cloud
        .points()
        .iter()
        .map(|p| {
            let d = p - center;
            Vec3::new(d.dot(&axes[0]), d.dot(&axes[1]), d.dot(&axes[2])) * f
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub num_voxels: usize,
    pub volume_cm3: f64,
}

/// Occupied voxel count in normalized label units and the matching volume.
///
/// Only voxels holding at least one point count; enclosed cavities are not filled.
pub fn panicle_volume(cloud: &PointCloud, calib: &Calibration, voxel: f64) -> Result<VolumeResult> {
    if cloud.is_empty() {
        return Err(Error::Empty("panicle cloud".into()));
    }
    if !(voxel > 0.0) || !voxel.is_finite() {
        return Err(Error::InvalidInput(format!("voxel edge must be positive, got {voxel}")));
    }
    let cells: HashSet<[i64; 3]> = normalized_points(cloud, calib)
        .iter()
        .map(|p| [0, 1, 2].map(|a| (p[a] / voxel).floor() as i64))
        .collect();
    Ok(volume_from_count(cells.len(), voxel, calib.real_length_cm))
}

pub fn volume_from_count(num_voxels: usize, voxel: f64, real_length_cm: f64) -> VolumeResult {
    VolumeResult {
        num_voxels,
        // Dividing by the cells per unit keeps decimal voxel edges exact:
        // 1000 voxels of 0.01 at 7.5 cm give exactly 0.421875.
        volume_cm3: num_voxels as f64 * real_length_cm.powi(3) / (1.0 / voxel).powi(3),
    }
}

// ---------------------------------------------------------------------------
// Length pipeline

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthParams {
    /// Downsample leaf as a fraction of the bounding diagonal.
    pub downsample_frac: f64,
    pub lbc: LbcParams,
    pub skeleton: SkeletonParams,
    pub path: PathParams,
    pub smoothing: f64,
    /// Move skeleton nodes back to the centroid of their uncontracted points.
    pub recenter: bool,
    /// Extend both path ends to the farthest original point of the end node.
    pub extend_tips: bool,
}

impl Default for LengthParams {
    fn default() -> Self {
        Self {
            downsample_frac: DEFAULT_DOWNSAMPLE_FRAC,
            lbc: LbcParams::default(),
            skeleton: SkeletonParams::default(),
            path: PathParams::default(),
            smoothing: DEFAULT_SMOOTHING,
            recenter: true,
            extend_tips: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthResult {
    pub l_cm: f64,
    /// Curve length in scene units.
    pub l1: f64,
    pub x1: f64,
    pub path_nodes: usize,
    pub skeleton_nodes: usize,
    pub low_confidence: bool,
    pub lbc_iterations: usize,
    pub lbc_converged: bool,
    pub warnings: Vec<String>,
}

/// Skeleton, main path and fitted curve of one cloud, in its own units.
#[derive(Debug, Clone)]
pub struct Trace {
    pub skeleton: SkeletonGraph,
    pub path: MainPath,
    /// Shape vertices of the path, tips included, that the curve is fitted to.
    pub curve_points: Vec<Vec3>,
    pub curve_length: f64,
    pub lbc_iterations: usize,
    pub lbc_converged: bool,
    pub warnings: Vec<String>,
}

/// Downsample, contract, skeletonize and pick the main path of a cloud.
pub fn trace_main_path(cloud: &PointCloud, params: &LengthParams) -> Result<Trace> {
    if cloud.is_empty() {
        return Err(Error::Empty("panicle cloud".into()));
    }
    let mut warnings = Vec::new();
    let diag = cloud.aabb().map_or(0.0, |b| b.diagonal());
    if !(diag > 0.0) {
        return Err(Error::DegenerateGeometry("panicle cloud has zero extent".into()));
    }
    let mut down = voxel_downsample(cloud, params.downsample_frac * diag)?;

    // Stray fragments would make the contraction graph disconnected.
    let adj = knn_graph(down.points(), params.lbc.k_neighbors);
    let comp = components(&adj);
    let n_comp = comp.iter().max().map_or(0, |m| m + 1);
    if n_comp > 1 {
        let mut sizes = vec![0usize; n_comp];
        comp.iter().for_each(|&c| sizes[c] += 1);
        let keep = (0..n_comp).max_by_key(|&c| (sizes[c], std::cmp::Reverse(c))).unwrap();
        let idx: Vec<usize> = (0..comp.len()).filter(|&i| comp[i] == keep).collect();
        warnings.push(format!(
            "kept largest of {n_comp} graph components ({} of {} points)",
            idx.len(),
            comp.len()
        ));
        down = down.select(&idx);
    }

    let contraction = lbc_contract(&down, &params.lbc)?;
    if !contraction.converged {
        warnings.push(format!(
            "contraction stopped at {} iterations without converging",
            contraction.iterations
        ));
    }
    let mut skel = build_skeleton(&contraction.cloud, &params.skeleton)?;
    if params.recenter {
        skel.recenter(down.points())?;
        skel.relink(down.points(), params.skeleton.k_neighbors)?;
    }
    let path = main_path(&skel, &params.path)?;
    if path.low_confidence {
        warnings.push(format!(
            "no path passed the {:.0} degree turning gate (max turn {:.1})",
            params.path.theta_max_deg, path.max_turn_deg
        ));
    }

    let shape = shape_nodes(&path.nodes, &skel.degrees());
    let mut pts: Vec<Vec3> = shape.iter().map(|&i| skel.nodes[i]).collect();
    if params.extend_tips {
        pts = extend_tips(&pts, &shape, &skel, down.points());
    }
    let curve_length = curve_length(&pts, params.smoothing)?;
    Ok(Trace {
        skeleton: skel,
        path,
        curve_points: pts,
        curve_length,
        lbc_iterations: contraction.iterations,
        lbc_converged: contraction.converged,
        warnings,
    })
}

/// Full length measurement of a segmented panicle cloud.
pub fn measure_length(panicle: &PointCloud, calib: &Calibration, params: &LengthParams) -> Result<LengthResult> {
    if panicle.is_empty() {
        return Err(Error::Empty("panicle cloud".into()));
    }
    let norm = PointCloud::new(normalized_points(panicle, calib))?;
    let trace = trace_main_path(&norm, params)?;
    let l1 = trace.curve_length * calib.x1;
    Ok(LengthResult {
        l_cm: panicle_length(l1, calib),
        l1,
        x1: calib.x1,
        path_nodes: trace.path.nodes.len(),
        skeleton_nodes: trace.skeleton.nodes.len(),
        low_confidence: trace.path.low_confidence,
        lbc_iterations: trace.lbc_iterations,
        lbc_converged: trace.lbc_converged,
        warnings: trace.warnings,
    })
}

/// Contraction pulls curve ends inward. The original points of an end node
/// still reach the true tip, so each end is pushed out along its tangent to
/// the farthest of them.
fn extend_tips(pts: &[Vec3], nodes: &[usize], skel: &SkeletonGraph, original: &[Vec3]) -> Vec<Vec3> {
    let n = pts.len();
    let reach = |end: usize, inner: usize| -> Option<Vec3> {
        let tangent = (pts[end] - pts[inner]).try_normalize(1e-15)?;
        let node = nodes[end];
        let far = original
            .iter()
            .zip(&skel.assignment)
            .filter(|(_, &a)| a == node)
            .map(|(q, _)| (q - pts[end]).dot(&tangent))
            .fold(0.0, f64::max);
        (far > 1e-12).then(|| pts[end] + tangent * far)
    };
    let inner = 3.min(n - 1);
    let head = reach(0, inner);
    let tail = reach(n - 1, n - 1 - inner);
    let mut out = Vec::with_capacity(n + 2);
    out.extend(head);
    out.extend_from_slice(pts);
    out.extend(tail);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use nalgebra::Rotation3;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn tube(rng: &mut crate::Rng, a: Vec3, b: Vec3, r: f64, n: usize) -> Vec<Vec3> {
        let axis = (b - a).normalize();
        let u = axis
            .cross(&Vec3::x())
            .try_normalize(1e-6)
            .unwrap_or_else(|| axis.cross(&Vec3::y()).normalize());
        let v = axis.cross(&u);
        (0..n)
            .map(|_| {
                let t: f64 = rng.random();
                let phi = rng.random::<f64>() * 2.0 * PI;
                a + (b - a) * t + (u * phi.cos() + v * phi.sin()) * r
            })
            .collect()
    }

    fn dist_to_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
        let d = b - a;
        let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        (p - (a + d * t)).norm()
    }

    fn path_skeleton(pts: Vec<Vec3>) -> SkeletonGraph {
        let n = pts.len();
        SkeletonGraph {
            edges: (0..n - 1).map(|i| (i, i + 1)).collect(),
            node_weights: vec![1; n],
            assignment: (0..n).collect(),
            nodes: pts,
        }
    }

    fn graph(nodes: Vec<Vec3>, mut edges: Vec<(usize, usize)>) -> SkeletonGraph {
        let n = nodes.len();
        edges.iter_mut().for_each(|e| *e = (e.0.min(e.1), e.0.max(e.1)));
        edges.sort_unstable();
        SkeletonGraph {
            nodes,
            edges,
            node_weights: vec![1; n],
            assignment: (0..n).collect(),
        }
    }

    #[test]
    fn cylinder_contracts_onto_axis() {
        let mut rng = seeded_rng(1);
        let (a, b) = (Vec3::zeros(), Vec3::new(0.0, 0.0, 10.0));
        let cloud = PointCloud::new(tube(&mut rng, a, b, 0.3, 3000)).unwrap();
        let out = lbc_contract(&cloud, &LbcParams::default()).unwrap();
        let spread = out
            .cloud
            .points()
            .iter()
            .map(|p| (p.x * p.x + p.y * p.y).sqrt())
            .fold(0.0, f64::max);
        assert!(
            spread / 10.0 <= 0.02,
            "radial spread {spread}, iters {}",
            out.iterations
        );
        assert!(out.history.windows(2).all(|w| w[1] <= w[0] * 1.0001));
    }

    #[test]
    fn collinear_cloud_is_left_alone() {
        let pts: Vec<Vec3> = (0..200).map(|i| Vec3::new(i as f64 * 0.05, 0.0, 0.0)).collect();
        let cloud = PointCloud::new(pts).unwrap();
        let out = lbc_contract(&cloud, &LbcParams::default()).unwrap();
        assert!(out.converged);
        let moved = cloud
            .points()
            .iter()
            .zip(out.cloud.points())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max);
        assert!(moved < 0.01 * 10.0, "moved {moved}");
    }

    #[test]
    fn y_tube_contracts_to_medial_segments() {
        let mut rng = seeded_rng(3);
        let j = Vec3::new(0.0, 0.0, 6.0);
        let ends = [Vec3::zeros(), Vec3::new(-3.0, 0.0, 11.0), Vec3::new(3.5, 0.0, 10.0)];
        let mut pts = Vec::new();
        for e in &ends {
            let n = (1000.0 * (e - j).norm()) as usize / 6;
            pts.extend(tube(&mut rng, j, *e, 0.25, n));
        }
        let cloud = PointCloud::new(pts).unwrap();
        let size = cloud.aabb().unwrap().diagonal();
        let out = lbc_contract(&cloud, &LbcParams::default()).unwrap();
        let c = out.cloud.points();
        // Contracted to medial structure.
        let to_axis = c
            .iter()
            .map(|p| ends.iter().map(|e| dist_to_segment(p, &j, e)).fold(f64::MAX, f64::min))
            .fold(0.0, f64::max);
        // Medial structure covered, ignoring tip shrinkage handled later.
        let tree = KdTree::new(c);
        let mut cover: f64 = 0.0;
        for e in &ends {
            for s in 0..=50 {
                let q = j + (e - j) * (s as f64 / 50.0 * 0.85);
                let nn = tree.knn(&q, 1)[0];
                cover = cover.max((c[nn] - q).norm());
            }
        }
        let hausdorff = to_axis.max(cover);
        assert!(hausdorff < 0.03 * size, "hausdorff {hausdorff} vs size {size}");
    }

    #[test]
    fn disconnected_graph_is_reported() {
        let mut pts: Vec<Vec3> = (0..40).map(|i| Vec3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        pts.extend((0..40).map(|i| Vec3::new(i as f64 * 0.1, 100.0, 0.0)));
        let err = lbc_contract(&PointCloud::new(pts).unwrap(), &LbcParams::default()).unwrap_err();
        assert!(matches!(err, Error::Disconnected { components: 2 }));
    }

    #[test]
    fn too_few_points_rejected() {
        let pts: Vec<Vec3> = (0..16).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(lbc_contract(&PointCloud::new(pts).unwrap(), &LbcParams::default()).is_err());
    }

    #[test]
    fn segment_gives_path_graph() {
        let pts: Vec<Vec3> = (0..500).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let skel = build_skeleton(&PointCloud::new(pts).unwrap(), &SkeletonParams::default()).unwrap();
        assert!(skel.is_tree());
        let deg = skel.degrees();
        assert_eq!(deg.iter().filter(|&&d| d == 1).count(), 2);
        assert!(deg.iter().all(|&d| d == 1 || d == 2));
        assert_eq!(skel.node_weights.iter().sum::<usize>(), 500);
    }

    #[test]
    fn y_shape_gives_three_leaves() {
        let j = Vec3::zeros();
        let dirs = [
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.8, 0.6, 0.0),
            Vec3::new(-0.8, 0.6, 0.0),
        ];
        let mut pts = vec![j];
        for d in &dirs {
            pts.extend((1..=300).map(|i| j + d * (i as f64 * 0.01)));
        }
        let skel = build_skeleton(&PointCloud::new(pts).unwrap(), &SkeletonParams::default()).unwrap();
        assert!(skel.is_tree());
        let deg = skel.degrees();
        assert_eq!(deg.iter().filter(|&&d| d == 1).count(), 3);
        assert_eq!(deg.iter().filter(|&&d| d == 3).count(), 1);
        assert!(deg.iter().all(|&d| d <= 3));
    }

    #[test]
    fn single_point_gives_single_node() {
        let skel = build_skeleton(
            &PointCloud::new(vec![Vec3::x(); 5]).unwrap(),
            &SkeletonParams::default(),
        )
        .unwrap();
        assert_eq!(skel.nodes.len(), 1);
        assert!(skel.edges.is_empty());
        assert!(build_skeleton(&PointCloud::empty(), &SkeletonParams::default()).is_err());
    }

    #[test]
    fn far_clusters_are_linked() {
        let mut pts: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        pts.extend((0..100).map(|i| Vec3::new(5.0 + i as f64 * 0.01, 0.0, 0.0)));
        let skel = build_skeleton(&PointCloud::new(pts).unwrap(), &SkeletonParams::default()).unwrap();
        assert!(skel.is_tree());
    }

    #[test]
    fn straight_path_taken_whole() {
        let skel = path_skeleton((0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect());
        let p = main_path(&skel, &PathParams::default()).unwrap();
        assert_eq!(p.nodes.len(), 10);
        assert!(!p.low_confidence);
        assert_eq!(p.max_turn_deg, 0.0);
        assert!((p.arc_length_scene - 9.0).abs() < 1e-12);
    }

    #[test]
    fn kinked_branch_rejected() {
        // Stem 0..=9 along x, branch of 12 nodes leaving node 4 at 90 degrees.
        let mut nodes: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut edges: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
        for i in 1..=12 {
            nodes.push(Vec3::new(4.0, i as f64, 0.0));
            edges.push((if i == 1 { 4 } else { 9 + i - 1 }, 9 + i));
        }
        let skel = graph(nodes, edges);
        let p = main_path(&skel, &PathParams::default()).unwrap();
        assert!(!p.low_confidence);
        let mut got = p.nodes.clone();
        got.sort_unstable();
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn star_picks_collinear_pair() {
        let dirs = [Vec3::x(), -Vec3::x(), Vec3::y()];
        let mut nodes = vec![Vec3::zeros()];
        let mut edges = Vec::new();
        for d in &dirs {
            let base = nodes.len();
            for i in 1..=5 {
                nodes.push(d * i as f64);
                edges.push((if i == 1 { 0 } else { base + i - 2 }, base + i - 1));
            }
        }
        let skel = graph(nodes.clone(), edges);
        let p = main_path(&skel, &PathParams::default()).unwrap();
        assert!(!p.low_confidence);
        assert!(p.nodes.iter().all(|&i| nodes[i].y.abs() < 1e-12));
        assert_eq!(p.nodes.len(), 11);
    }

    #[test]
    fn all_paths_sharp_falls_back() {
        let nodes = vec![
            Vec3::zeros(),
            Vec3::x(),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let skel = graph(nodes, vec![(0, 1), (1, 2), (2, 3)]);
        let p = main_path(&skel, &PathParams::default()).unwrap();
        assert!(p.low_confidence);
        assert_eq!(p.nodes.len(), 4);
        // Scale 3 sees both corners at once.
        assert!((p.max_turn_deg - 135.0).abs() < 1e-9);
    }

    #[test]
    fn main_path_rejects_bad_graphs() {
        let one = graph(vec![Vec3::zeros()], vec![]);
        assert!(main_path(&one, &PathParams::default()).is_err());
        let cyc = graph(vec![Vec3::zeros(), Vec3::x(), Vec3::y()], vec![(0, 1), (1, 2), (0, 2)]);
        assert!(main_path(&cyc, &PathParams::default()).is_err());
    }

    #[test]
    fn gentle_turns_spread_over_nodes_caught_at_scale_three() {
        // A 90 degree corner rounded over three nodes.
        let mut pts = vec![Vec3::zeros()];
        let mut dir: f64 = 0.0;
        for i in 0..12 {
            if (4..7).contains(&i) {
                dir += 30f64.to_radians();
            }
            let last = *pts.last().unwrap();
            pts.push(last + Vec3::new(dir.cos(), dir.sin(), 0.0));
        }
        let fine = turning_angles_deg(&pts, 1).into_iter().fold(0.0, f64::max);
        let coarse = turning_angles_deg(&pts, 3).into_iter().fold(0.0, f64::max);
        assert!(fine < 31.0);
        assert!(coarse > 60.0, "{coarse}");
    }

    #[test]
    fn displaced_junction_does_not_break_stem() {
        // Junction node 4 pulled toward its branch, as recentering does.
        let mut nodes: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        nodes[4].y = 0.8;
        let mut edges: Vec<(usize, usize)> = (0..9).map(|i| (i, i + 1)).collect();
        for i in 1..=4 {
            nodes.push(Vec3::new(4.0, 0.5 + i as f64, 0.0));
            edges.push((if i == 1 { 4 } else { 9 + i - 1 }, 9 + i));
        }
        let skel = graph(nodes, edges);
        let p = main_path(&skel, &PathParams::default()).unwrap();
        assert!(!p.low_confidence, "{}", p.max_turn_deg);
        assert_eq!(p.nodes.len(), 10);
        assert!((p.arc_length_scene - 9.0).abs() < 1e-12);
        assert!((fit_curve_length(&p, &skel).unwrap() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn corner_at_dropped_junction_still_rejected() {
        // Stem 0..=8 along x; a 12 node branch leaves node 4 at 75 degrees.
        let mut nodes: Vec<Vec3> = (0..9).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut edges: Vec<(usize, usize)> = (0..8).map(|i| (i, i + 1)).collect();
        let dir = Vec3::new(75f64.to_radians().cos(), 75f64.to_radians().sin(), 0.0);
        for i in 1..=12 {
            nodes.push(nodes[4] + dir * i as f64);
            edges.push((if i == 1 { 4 } else { 8 + i - 1 }, 8 + i));
        }
        let skel = graph(nodes, edges);
        let p = main_path(&skel, &PathParams::default()).unwrap();
        assert!(!p.low_confidence);
        let mut got = p.nodes.clone();
        got.sort_unstable();
        assert_eq!(got, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn gap_turns_measure_across_gap() {
        let pts = [
            Vec3::zeros(),
            Vec3::x(),
            Vec3::new(2.0, 1.0, 0.0),
            Vec3::new(2.0, 2.0, 0.0),
        ];
        let t = gap_turns_deg(&pts, &[1], 1);
        assert_eq!(t.len(), 1);
        assert!((t[0] - 90.0).abs() < 1e-9);
        assert!(gap_turns_deg(&pts, &[3], 1).is_empty());
    }

    #[test]
    fn relink_follows_original_neighbors() {
        // Nodes come from a line but start wired as a star.
        let original: Vec<Vec3> = (0..100).map(|i| Vec3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        let assignment: Vec<usize> = (0..100).map(|i| i / 10).collect();
        let mut skel = SkeletonGraph {
            nodes: vec![Vec3::zeros(); 10],
            edges: (1..10).map(|i| (0, i)).collect(),
            node_weights: vec![10; 10],
            assignment,
        };
        skel.recenter(&original).unwrap();
        skel.relink(&original, 8).unwrap();
        assert_eq!(skel.edges, (0..9).map(|i| (i, i + 1)).collect::<Vec<_>>());
        assert!(skel.relink(&original[..5], 8).is_err());
    }

    #[test]
    fn two_node_curve_is_chord() {
        let a = Vec3::new(0.1, 0.2, 0.3);
        let b = Vec3::new(1.0, -2.0, 0.5);
        assert_eq!(curve_length(&[a, b], DEFAULT_SMOOTHING).unwrap(), (b - a).norm());
    }

    #[test]
    fn half_circle_length() {
        let r = 3.0;
        let pts: Vec<Vec3> = (0..20)
            .map(|i| {
                let a = PI * i as f64 / 19.0;
                Vec3::new(r * a.cos(), r * a.sin(), 1.0)
            })
            .collect();
        let l = curve_length(&pts, DEFAULT_SMOOTHING).unwrap();
        assert!((l / (PI * r) - 1.0).abs() < 0.01, "{l}");
        let exact = curve_length(&pts, 0.0).unwrap();
        assert!((exact / (PI * r) - 1.0).abs() < 1e-3, "{exact}");
    }

    #[test]
    fn noisy_line_length() {
        let mut rng = seeded_rng(11);
        let span = 20.0;
        for _ in 0..5 {
            let pts: Vec<Vec3> = (0..40)
                .map(|i| {
                    let noise = Vec3::new(0.0, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
                    Vec3::new(span * i as f64 / 39.0, 0.0, 0.0) + noise * (2.0 * 0.001 * span)
                })
                .collect();
            let l = curve_length(&pts, DEFAULT_SMOOTHING).unwrap();
            assert!((l / span - 1.0).abs() < 0.005, "{l}");
        }
    }

    #[test]
    fn interpolating_spline_hits_knots() {
        let pts = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(2.0, 0.0, 1.0),
            Vec3::new(4.0, 1.0, 1.0),
        ];
        let s = SmoothingSpline::fit(&pts, 0.0).unwrap();
        let end = *s.knots().last().unwrap();
        for (t, p) in s.knots().iter().zip(&pts) {
            assert!((s.eval(t / end) - p).norm() < 1e-12);
        }
    }

    #[test]
    fn length_formula() {
        let calib = Calibration::new(0.3, 7.5).unwrap();
        assert!((panicle_length(0.8, &calib) - 20.0).abs() < 1e-12);
        assert!((panicle_length(0.3, &calib) - 7.5).abs() < 1e-12);
    }

    #[test]
    fn volume_formula() {
        let v = volume_from_count(1000, 0.01, 7.5);
        assert!((v.volume_cm3 - 0.421875).abs() < 1e-15);
        let calib = Calibration::new(2.0, 7.5).unwrap();
        let one = panicle_volume(&PointCloud::new(vec![Vec3::new(0.3, 0.1, 0.7)]).unwrap(), &calib, 0.01).unwrap();
        assert_eq!(one.num_voxels, 1);
        assert!((one.volume_cm3 - 4.21875e-4).abs() < 1e-18);
        assert!(panicle_volume(&PointCloud::empty(), &calib, 0.01).is_err());
    }

    #[test]
    fn solid_cylinder_volume() {
        let mut rng = seeded_rng(5);
        // Label length 2 scene units, so 1 scene unit = 3.75 cm.
        let calib = Calibration::new(2.0, 7.5).unwrap();
        // 2 cm radius, 6 cm tall.
        let (r, h) = (2.0 / 3.75, 6.0 / 3.75);
        let pts: Vec<Vec3> = (0..1_500_000)
            .map(|_| {
                let rad = r * rng.random::<f64>().sqrt();
                let phi = rng.random::<f64>() * 2.0 * PI;
                Vec3::new(rad * phi.cos(), rad * phi.sin(), rng.random::<f64>() * h)
            })
            .collect();
        let v = panicle_volume(&PointCloud::new(pts).unwrap(), &calib, 0.01).unwrap();
        let exact = PI * r * r * h * 3.75f64.powi(3);
        assert!((v.volume_cm3 / exact - 1.0).abs() < 0.1, "{} vs {exact}", v.volume_cm3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn volume_monotone(seed in any::<u64>(), extra in 1usize..200) {
            let mut rng = seeded_rng(seed);
            let calib = Calibration::new(1.0, 7.5).unwrap();
            let base: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 0.2).collect();
            let mut more = base.clone();
            more.extend((0..extra).map(|_| Vec3::new(rng.random(), rng.random(), rng.random()) * 0.3));
            let a = panicle_volume(&PointCloud::new(base).unwrap(), &calib, 0.01).unwrap();
            let b = panicle_volume(&PointCloud::new(more).unwrap(), &calib, 0.01).unwrap();
            prop_assert!(b.num_voxels >= a.num_voxels);
        }

        #[test]
        fn path_at_least_chord(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let n = rng.random_range(2..30);
            let nodes: Vec<Vec3> = (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
            let skel = graph(nodes.clone(), edges);
            let p = main_path(&skel, &PathParams::default()).unwrap();
            let chord = (nodes[p.nodes[0]] - nodes[*p.nodes.last().unwrap()]).norm();
            prop_assert!(p.arc_length_scene >= chord - 1e-12);
            let mut uniq = p.nodes.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), p.nodes.len());
        }

        #[test]
        fn contraction_never_grows_box(seed in any::<u64>()) {
            let mut rng = seeded_rng(seed);
            let rot = Rotation3::from_euler_angles(rng.random(), rng.random(), rng.random());
            let pts: Vec<Vec3> = tube(&mut rng, Vec3::zeros(), Vec3::new(0.0, 0.0, 4.0), 0.3, 400)
                .into_iter().map(|p| rot * p).collect();
            let cloud = PointCloud::new(pts).unwrap();
            let params = LbcParams { max_iters: 4, ..LbcParams::default() };
            let out = lbc_contract(&cloud, &params).unwrap();
            prop_assert!(out.cloud.aabb().unwrap().diagonal() <= cloud.aabb().unwrap().diagonal() + 1e-12);
        }
    }
}

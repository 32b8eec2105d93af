//! Scene clustering, label/panicle classification, oriented boxes, size
//! calibration against the fiducial label, and voxel downsampling.

use crate::error::{Error, Result};
use crate::geom::{OrientedBoundingBox, PointCloud, Vec3};
use crate::kdtree::KdTree;
use crate::pca::{normals_for_points, pca_points, sorted_eigen};
use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

pub const NOISE: i32 = -1;
pub const DEFAULT_MIN_PTS: usize = 10;
/// On a uniformly sampled surface this gives about 17 expected neighbors
/// within eps, comfortably above the default `min_pts`.
pub const DEFAULT_EPS_FACTOR: f64 = 5.0;
pub const DEFAULT_MIN_CLUSTER_FRAC: f64 = 0.01;
pub const DEFAULT_MAX_PLANARITY: f64 = 0.02;
pub const DEFAULT_MIN_CONCENTRATION: f64 = 0.9;
pub const DEFAULT_NORMAL_K: usize = 16;
pub const LABEL_LENGTH_CM: f64 = 7.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Clustering {
    labels: Vec<i32>,
    cluster_sizes: Vec<usize>,
}

impl Clustering {
    /// Builds from per-point labels; ids must be contiguous from 0.
    pub fn from_labels(labels: Vec<i32>) -> Result<Self> {
        let mut sizes: Vec<usize> = Vec::new();
        for &l in &labels {
            if l < NOISE {
                return Err(Error::InvalidInput(format!("invalid cluster label {l}")));
            }
            if l >= 0 {
                let l = l as usize;
                if l >= sizes.len() {
                    sizes.resize(l + 1, 0);
                }
                sizes[l] += 1;
            }
        }
        if let Some(id) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidInput(format!("cluster id {id} is unused")));
        }
        Ok(Self {
            labels,
            cluster_sizes: sizes,
        })
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn cluster_sizes(&self) -> &[usize] {
        &self.cluster_sizes
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_sizes.len()
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }

    pub fn members(&self, id: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == id as i32)
            .map(|(i, _)| i)
            .collect()
    }
}

/// DBSCAN with inclusive neighborhoods (`d ≤ eps`, self counted). Points are
/// visited in input order and a border point joins the first cluster that
/// reaches it.
pub fn dbscan(cloud: &PointCloud, eps: f64, min_pts: usize) -> Result<Clustering> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::InvalidInput(format!("eps must be positive, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::InvalidInput("min_pts must be at least 1".into()));
    }
    let n = cloud.len();
    const UNSEEN: i32 = -2;
    let mut labels = vec![UNSEEN; n];
    let tree = KdTree::from_cloud(cloud);
    let pts = cloud.points();
    let mut n_clusters = 0i32;
    let mut queue = VecDeque::new();
    for i in 0..n {
        if labels[i] != UNSEEN {
            continue;
        }
        let nb = tree.within_radius(&pts[i], eps);
        if nb.len() < min_pts {
            labels[i] = NOISE;
            continue;
        }
        let id = n_clusters;
        n_clusters += 1;
        labels[i] = id;
        queue.clear();
        queue.extend(nb);
        while let Some(j) = queue.pop_front() {
            if labels[j] == NOISE {
                labels[j] = id;
                continue;
            }
            if labels[j] != UNSEEN {
                continue;
            }
            labels[j] = id;
            let nb = tree.within_radius(&pts[j], eps);
            if nb.len() >= min_pts {
                queue.extend(nb.into_iter().filter(|&q| labels[q] == UNSEEN || labels[q] == NOISE));
            }
        }
    }
    Clustering::from_labels(labels)
}

/// `factor` times the median nearest-neighbor distance.
pub fn auto_eps(cloud: &PointCloud, factor: f64) -> Result<f64> {
    if cloud.len() < 2 {
        return Err(Error::InvalidInput("auto eps needs at least 2 points".into()));
    }
    let tree = KdTree::from_cloud(cloud);
    let mut d: Vec<f64> = cloud
        .points()
        .iter()
        .map(|p| tree.knn_with_dist2(p, 2)[1].1.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let median = d[d.len() / 2];
    if !(median > 0.0) {
        return Err(Error::DegenerateGeometry(
            "median nearest-neighbor distance is zero".into(),
        ));
    }
    Ok(factor * median)
}

/// Drops noise and clusters smaller than `min_size`; surviving ids are
/// renumbered in their original order.
pub fn remove_small_clusters(
    clustering: &Clustering,
    cloud: &PointCloud,
    min_size: usize,
) -> Result<(PointCloud, Clustering)> {
    if clustering.labels.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} points",
            clustering.labels.len(),
            cloud.len()
        )));
    }
    let mut remap = vec![NOISE; clustering.n_clusters()];
    let mut next = 0;
    for (id, &size) in clustering.cluster_sizes.iter().enumerate() {
        if size >= min_size {
            remap[id] = next;
            next += 1;
        }
    }
    if next == 0 {
        return Err(Error::AllClustersRemoved);
    }
    let mut keep = Vec::new();
    let mut labels = Vec::new();
    for (i, &l) in clustering.labels.iter().enumerate() {
        if l >= 0 && remap[l as usize] >= 0 {
            keep.push(i);
            labels.push(remap[l as usize]);
        }
    }
    Ok((cloud.select(&keep), Clustering::from_labels(labels)?))
}

/// One cloud per cluster id, noise excluded.
pub fn split_clusters(clustering: &Clustering, cloud: &PointCloud) -> Vec<PointCloud> {
    (0..clustering.n_clusters())
        .map(|id| cloud.select(&clustering.members(id)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifyParams {
    pub normal_k: usize,
    pub max_planarity: f64,
    pub min_concentration: f64,
}

impl Default for ClassifyParams {
    fn default() -> Self {
        Self {
            normal_k: DEFAULT_NORMAL_K,
            max_planarity: DEFAULT_MAX_PLANARITY,
            min_concentration: DEFAULT_MIN_CONCENTRATION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClusterStats {
    pub size: usize,
    /// λ3 / Σλ of the cluster covariance.
    pub planarity: f64,
    /// Mean |n · n̄| against the dominant normal direction.
    pub concentration: f64,
    pub label_like: bool,
}

#[derive(Debug, Clone)]
pub struct SemanticClouds {
    pub panicle: PointCloud,
    pub label: PointCloud,
    pub residue: Vec<PointCloud>,
    pub label_cluster: usize,
    pub panicle_cluster: usize,
    pub stats: Vec<ClusterStats>,
    /// The chosen panicle also looks like a label.
    pub low_confidence: bool,
}

fn normal_concentration(points: &[Vec3], k: usize) -> Option<f64> {
    let k = k.min(points.len());
    if k < 3 {
        return None;
    }
    let normals = normals_for_points(points, k).ok()?;
    let mut m = Matrix3::zeros();
    for n in &normals {
        m += n * n.transpose();
    }
    let (_, vecs) = sorted_eigen(&m);
    let dominant = vecs[0];
    Some(normals.iter().map(|n| n.dot(&dominant).abs()).sum::<f64>() / normals.len() as f64)
}

pub fn cluster_stats(cloud: &PointCloud, params: &ClassifyParams) -> ClusterStats {
    let planarity = pca_points(cloud.points())
        .map(|p| p.planarity())
        .unwrap_or(f64::INFINITY);
    let concentration = normal_concentration(cloud.points(), params.normal_k).unwrap_or(0.0);
    ClusterStats {
        size: cloud.len(),
        planarity,
        concentration,
        label_like: planarity < params.max_planarity && concentration > params.min_concentration,
    }
}

/// Picks the flattest label-like cluster as the label and the largest other
/// cluster as the panicle.
pub fn classify_clusters(clouds: &[PointCloud], params: &ClassifyParams) -> Result<SemanticClouds> {
    if clouds.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "classification needs at least 2 clusters, got {}",
            clouds.len()
        )));
    }
    let stats: Vec<ClusterStats> = clouds.iter().map(|c| cluster_stats(c, params)).collect();
    let label_cluster = stats
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label_like)
        .min_by(|a, b| a.1.planarity.total_cmp(&b.1.planarity))
        .map(|(i, _)| i)
        .ok_or(Error::NoLabelFound)?;
    let mut panicle_cluster = usize::MAX;
    for (i, s) in stats.iter().enumerate() {
        if i != label_cluster && (panicle_cluster == usize::MAX || s.size > stats[panicle_cluster].size) {
            panicle_cluster = i;
        }
    }
    let low_confidence = stats[panicle_cluster].label_like;
    if low_confidence {
        log::warn!("panicle cluster {panicle_cluster} also passes the label gate");
    }
    let residue = (0..clouds.len())
        .filter(|&i| i != label_cluster && i != panicle_cluster)
        .map(|i| clouds[i].clone())
        .collect();
    Ok(SemanticClouds {
        panicle: clouds[panicle_cluster].clone(),
        label: clouds[label_cluster].clone(),
        residue,
        label_cluster,
        panicle_cluster,
        stats,
        low_confidence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    /// `None` selects `eps_factor` times the median nearest-neighbor distance.
    pub eps: Option<f64>,
    pub eps_factor: f64,
    pub min_pts: usize,
    pub min_cluster_frac: f64,
    pub classify: ClassifyParams,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            eps: None,
            eps_factor: DEFAULT_EPS_FACTOR,
            min_pts: DEFAULT_MIN_PTS,
            min_cluster_frac: DEFAULT_MIN_CLUSTER_FRAC,
            classify: ClassifyParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SceneSegmentation {
    pub eps: f64,
    pub clustering: Clustering,
    pub kept_clusters: usize,
    pub semantic: SemanticClouds,
}

/// Clusters a scene, drops outlier clusters and classifies the rest.
pub fn segment_scene(cloud: &PointCloud, params: &ClusterParams) -> Result<SceneSegmentation> {
    let eps = match params.eps {
        Some(e) => e,
        None => auto_eps(cloud, params.eps_factor)?,
    };
    let clustering = dbscan(cloud, eps, params.min_pts)?;
    let min_size = ((params.min_cluster_frac * cloud.len() as f64).ceil() as usize).max(1);
    let (kept, kept_clustering) = remove_small_clusters(&clustering, cloud, min_size)?;
    let clouds = split_clusters(&kept_clustering, &kept);
    let semantic = classify_clusters(&clouds, &params.classify)?;
    Ok(SceneSegmentation {
        eps,
        clustering,
        kept_clusters: clouds.len(),
        semantic,
    })
}

/// PCA-aligned box: axes from the covariance eigenvectors, extents from the
/// projection range, sorted so the half extents descend.
pub fn compute_obb(cloud: &PointCloud) -> Result<OrientedBoundingBox> {
    let pca = pca_points(cloud.points())?;
    if pca.eigenvalues[1] <= 1e-12 * pca.eigenvalues[0] {
        return Err(Error::DegenerateGeometry("cloud is collinear; box is undefined".into()));
    }
    let axes = pca.eigenvectors;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        let d = p - pca.centroid;
        for a in 0..3 {
            let t = d.dot(&axes[a]);
            lo[a] = lo[a].min(t);
            hi[a] = hi[a].max(t);
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (hi[b] - lo[b]).total_cmp(&(hi[a] - lo[a])));
    let center = pca.centroid + (0..3).map(|a| axes[a] * ((lo[a] + hi[a]) / 2.0)).sum::<Vec3>();
    let (a0, a1) = (axes[order[0]], axes[order[1]]);
    Ok(OrientedBoundingBox {
        center,
        axes: [a0, a1, a0.cross(&a1)],
        half_extents: order.map(|a| (hi[a] - lo[a]) / 2.0),
    })
}

/// Rectangle in the plane, `axis` along the longer side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect2 {
    pub center: [f64; 2],
    pub axis: [f64; 2],
    /// Long then short.
    pub half_extents: [f64; 2],
}

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
pub fn convex_hull_2d(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross2(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Minimum-area enclosing rectangle; one side is always collinear with a hull
/// edge, so every edge direction is tried.
pub fn min_area_rectangle(points: &[[f64; 2]]) -> Result<Rect2> {
    let hull = convex_hull_2d(points);
    if hull.is_empty() {
        return Err(Error::Empty("no points for rectangle fit".into()));
    }
    if hull.len() == 1 {
        return Err(Error::DegenerateGeometry("all points coincide".into()));
    }
    let mut best: Option<(f64, Rect2)> = None;
    for e in 0..hull.len() {
        let (p, q) = (hull[e], hull[(e + 1) % hull.len()]);
        let len = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        if len == 0.0 {
            continue;
        }
        let u = [(q[0] - p[0]) / len, (q[1] - p[1]) / len];
        let v = [-u[1], u[0]];
        let (mut ulo, mut uhi, mut vlo, mut vhi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for h in &hull {
            let a = h[0] * u[0] + h[1] * u[1];
            let b = h[0] * v[0] + h[1] * v[1];
            ulo = ulo.min(a);
            uhi = uhi.max(a);
            vlo = vlo.min(b);
            vhi = vhi.max(b);
        }
        let area = (uhi - ulo) * (vhi - vlo);
        if best.as_ref().is_some_and(|(a, _)| *a <= area) {
            continue;
        }
        let (cu, cv) = ((ulo + uhi) / 2.0, (vlo + vhi) / 2.0);
        let center = [cu * u[0] + cv * v[0], cu * u[1] + cv * v[1]];
        let (eu, ev) = ((uhi - ulo) / 2.0, (vhi - vlo) / 2.0);
        let rect = if eu >= ev {
            Rect2 {
                center,
                axis: u,
                half_extents: [eu, ev],
            }
        } else {
            Rect2 {
                center,
                axis: v,
                half_extents: [ev, eu],
            }
        };
        best = Some((area, rect));
    }
    best.map(|(_, r)| r)
        .ok_or_else(|| Error::DegenerateGeometry("rectangle fit failed".into()))
}

/// Rigid frame attached to the label, used to voxelize in label coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelFrame {
    pub center: [f64; 3],
    pub axes: [[f64; 3]; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Calibration {
    /// Label length in scene units.
    pub x1: f64,
    pub real_length_cm: f64,
    pub scale_cm_per_unit: f64,
    pub normalize_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<LabelFrame>,
}

impl Calibration {
    pub fn new(x1: f64, real_length_cm: f64) -> Result<Self> {
        if !(x1 > 1e-9) || !x1.is_finite() {
            return Err(Error::DegenerateGeometry(format!("label length {x1} is degenerate")));
        }
        if !(real_length_cm > 0.0) || !real_length_cm.is_finite() {
            return Err(Error::InvalidInput(format!(
                "real label length must be positive, got {real_length_cm}"
            )));
        }
        Ok(Self {
            x1,
            real_length_cm,
            scale_cm_per_unit: real_length_cm / x1,
            normalize_factor: 1.0 / x1,
            frame: None,
        })
    }

    pub fn with_frame(mut self, frame: LabelFrame) -> Self {
        self.frame = Some(frame);
        self
    }
}

/// Measures the label and derives the cm-per-unit scale.
///
/// The cloud is projected onto the plane of its median-area box face and a
/// minimum-area rectangle fixes the long direction. The extent along that
/// direction is then fitted as a uniform interval blurred by Gaussian noise,
/// which keeps surface noise from inflating the length.
pub fn calibrate(label: &PointCloud, real_length_cm: f64) -> Result<Calibration> {
    let obb = compute_obb(label)?;
    let (a1, a3) = (obb.axes[0], obb.axes[2]);
    let flat: Vec<[f64; 2]> = label
        .points()
        .iter()
        .map(|p| {
            let d = p - obb.center;
            [d.dot(&a1), d.dot(&a3)]
        })
        .collect();
    let rect = min_area_rectangle(&flat)?;
    let dir = a1 * rect.axis[0] + a3 * rect.axis[1];
    let t: Vec<f64> = label.points().iter().map(|p| (p - obb.center).dot(&dir)).collect();
    let fit = fit_blurred_interval(&t)?;
    let x1 = fit.hi - fit.lo;
    log::debug!(
        "label rectangle {:.6} x {:.6}, fitted length {x1:.6}, noise {:.3e}",
        2.0 * rect.half_extents[0],
        2.0 * rect.half_extents[1],
        fit.sigma
    );
    let frame = LabelFrame {
        center: obb.center.into(),
        axes: obb.axes.map(Into::into),
    };
    Ok(Calibration::new(x1, real_length_cm)?.with_frame(frame))
}

/// Interval `[lo, hi]` and noise scale of a fitted uniform-plus-Gaussian model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalFit {
    pub lo: f64,
    pub hi: f64,
    pub sigma: f64,
}

/// Share of the likelihood given to a flat outlier floor over the data range.
const OUTLIER_WEIGHT: f64 = 1e-3;
/// Largest number of samples used by the interval fit.
const FIT_MAX_SAMPLES: usize = 20_000;

fn std_normal_cdf_diff(lo: f64, hi: f64) -> f64 {
    // Φ(hi) − Φ(lo), evaluated on the tail that avoids cancellation.
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if lo > 0.0 {
        0.5 * (libm::erfc(lo * s) - libm::erfc(hi * s))
    } else if hi < 0.0 {
        0.5 * (libm::erfc(-hi * s) - libm::erfc(-lo * s))
    } else {
        1.0 - 0.5 * (libm::erfc(-lo * s) + libm::erfc(hi * s))
    }
}

/// Maximum-likelihood fit of samples drawn uniformly on `[lo, hi]` and blurred
/// by isotropic Gaussian noise.
pub fn fit_blurred_interval(samples: &[f64]) -> Result<IntervalFit> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput("interval fit needs at least 2 samples".into()));
    }
    let mut t = samples.to_vec();
    t.sort_by(f64::total_cmp);
    let (min, max) = (t[0], t[t.len() - 1]);
    let range = max - min;
    if !(range > 0.0) {
        return Ok(IntervalFit {
            lo: min,
            hi: max,
            sigma: 0.0,
        });
    }
    let x: Vec<f64> = symmetric_subsample(&t, FIT_MAX_SAMPLES)
        .into_iter()
        .map(|v| (v - min) / range)
        .collect();
    let n = x.len();

    let nll = |p: &[f64; 3]| -> f64 {
        let (a, b, sigma) = (p[0], p[1], p[2].exp());
        if b - a <= 1e-9 {
            return f64::INFINITY;
        }
        let inv = (1.0 - OUTLIER_WEIGHT) / (b - a);
        -x.iter()
            .map(|&v| (inv * std_normal_cdf_diff((a - v) / sigma, (b - v) / sigma) + OUTLIER_WEIGHT).ln())
            .sum::<f64>()
    };

    let q = |f: f64| x[((n - 1) as f64 * f).round() as usize];
    let (q_lo, q_hi) = (q(0.05), q(0.95));
    let span = (q_hi - q_lo) / 0.9;
    let start = [q_lo - 0.05 * span, q_hi + 0.05 * span, (0.01f64).ln()];
    let mut best = nelder_mead(&nll, start, [0.01, 0.01, 1.0], 1e-12, 4000);
    // A restart from the optimum shakes out a collapsed simplex.
    best = nelder_mead(&nll, best, [0.002, 0.002, 0.3], 1e-13, 4000);
    Ok(IntervalFit {
        lo: min + best[0] * range,
        hi: min + best[1] * range,
        sigma: best[2].exp() * range,
    })
}

/// Evenly spaced order statistics of sorted `t`, at most `cap` of them.
///
/// Positions are mirrored about the middle, so negating the samples selects
/// the negated subset and the fitted length does not depend on axis sign.
fn symmetric_subsample(t: &[f64], cap: usize) -> Vec<f64> {
    let n = t.len();
    if n <= cap {
        return t.to_vec();
    }
    let m = cap.max(2);
    let step = (n - 1) as f64 / (m - 1) as f64;
    let mut idx = vec![0usize; m];
    for j in 0..m.div_ceil(2) {
        let p = (j as f64 * step).round() as usize;
        idx[j] = p;
        idx[m - 1 - j] = n - 1 - p;
    }
    idx.into_iter().map(|i| t[i]).collect()
}

fn nelder_mead(f: &impl Fn(&[f64; 3]) -> f64, start: [f64; 3], step: [f64; 3], tol: f64, max_iter: usize) -> [f64; 3] {
    let mut simplex: Vec<([f64; 3], f64)> = (0..4)
        .map(|i| {
            let mut p = start;
            if i > 0 {
                p[i - 1] += step[i - 1];
            }
            (p, f(&p))
        })
        .collect();
    let lerp = |a: &[f64; 3], b: &[f64; 3], t: f64| -> [f64; 3] { [0, 1, 2].map(|k| a[k] + t * (b[k] - a[k])) };
    for _ in 0..max_iter {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fbest, fworst) = (simplex[0].1, simplex[3].1);
        let size = (1..4)
            .map(|i| {
                (0..3)
                    .map(|k| (simplex[i].0[k] - simplex[0].0[k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if (fworst - fbest).abs() <= tol * (1.0 + fbest.abs()) && size <= 1e-10 {
            break;
        }
        let centroid = [0, 1, 2].map(|k| (0..3).map(|i| simplex[i].0[k]).sum::<f64>() / 3.0);
        let worst = simplex[3].0;
        let reflected = lerp(&centroid, &worst, -1.0);
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = lerp(&centroid, &worst, -2.0);
            let fe = f(&expanded);
            simplex[3] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[2].1 {
            simplex[3] = (reflected, fr);
        } else {
            let contracted = if fr < fworst {
                lerp(&centroid, &reflected, 0.5)
            } else {
                lerp(&centroid, &worst, 0.5)
            };
            let fc = f(&contracted);
            if fc < fworst.min(fr) {
                simplex[3] = (contracted, fc);
            } else {
                let best = simplex[0].0;
                for s in simplex.iter_mut().skip(1) {
                    s.0 = lerp(&best, &s.0, 0.5);
                    s.1 = f(&s.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    simplex[0].0
}

/// Replaces the points of each occupied `leaf`-sized voxel by their centroid.
/// Output follows voxel index order.
pub fn voxel_downsample(cloud: &PointCloud, leaf: f64) -> Result<PointCloud> {
    if !(leaf > 0.0) || !leaf.is_finite() {
        return Err(Error::InvalidInput(format!("voxel leaf must be positive, got {leaf}")));
    }
    let mut cells: BTreeMap<[i64; 3], (Vec3, usize)> = BTreeMap::new();
    for p in cloud.points() {
        let key = [0, 1, 2].map(|a| (p[a] / leaf).floor() as i64);
        let e = cells.entry(key).or_insert((Vec3::zeros(), 0));
        e.0 += p;
        e.1 += 1;
    }
    PointCloud::new(cells.into_values().map(|(s, c)| s / c as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use nalgebra::Rotation3;
    use petgraph::unionfind::UnionFind;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blob(rng: &mut crate::Rng, center: Vec3, n: usize, spread: f64) -> Vec<Vec3> {
        (0..n)
            .map(|_| center + Vec3::new(rng.random(), rng.random(), rng.random()) * spread)
            .collect()
    }

    /// Components of the core-core eps graph ordered by their smallest core
    /// index; each border point joins the earliest adjacent component.
    fn dbscan_oracle(pts: &[Vec3], eps: f64, min_pts: usize) -> Vec<i32> {
        let n = pts.len();
        let near = |i: usize, j: usize| (pts[i] - pts[j]).norm() <= eps;
        let core: Vec<bool> = (0..n)
            .map(|i| (0..n).filter(|&j| near(i, j)).count() >= min_pts)
            .collect();
        let mut uf = UnionFind::new(n);
        for i in 0..n {
            for j in (i + 1)..n {
                if core[i] && core[j] && near(i, j) {
                    uf.union(i, j);
                }
            }
        }
        let mut comp_id: BTreeMap<usize, i32> = BTreeMap::new();
        let mut labels = vec![NOISE; n];
        for i in 0..n {
            if core[i] {
                let root = uf.find(i);
                let next = comp_id.len() as i32;
                labels[i] = *comp_id.entry(root).or_insert(next);
            }
        }
        for i in 0..n {
            if !core[i] {
                labels[i] = (0..n)
                    .filter(|&j| core[j] && near(i, j))
                    .map(|j| labels[j])
                    .min()
                    .unwrap_or(NOISE);
            }
        }
        labels
    }

    #[test]
    fn interval_fit_ignores_sign() {
        let mut rng = seeded_rng(44);
        let t: Vec<f64> = (0..(FIT_MAX_SAMPLES * 2 + 17))
            .map(|_| rng.random_range(-1.0..1.0) + 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let (a, b) = (fit_blurred_interval(&t).unwrap(), fit_blurred_interval(&neg).unwrap());
        assert!(((a.hi - a.lo) - (b.hi - b.lo)).abs() < 1e-7, "{a:?} {b:?}");
        assert!((a.hi + b.lo).abs() < 1e-7);
    }

    #[test]
    fn two_separated_blobs() {
        let mut rng = seeded_rng(1);
        let mut pts = blob(&mut rng, Vec3::zeros(), 100, 1.0);
        pts.extend(blob(&mut rng, Vec3::new(20.0, 0.0, 0.0), 100, 1.0));
        let c = dbscan(&PointCloud::new(pts).unwrap(), 0.6, 4).unwrap();
        assert_eq!(c.n_clusters(), 2);
        assert_eq!(c.noise_count(), 0);
        assert_eq!(c.cluster_sizes(), &[100, 100]);
    }

    #[test]
    fn isolated_point_is_noise() {
        let cloud = PointCloud::new(vec![Vec3::zeros()]).unwrap();
        assert_eq!(dbscan(&cloud, 1.0, 2).unwrap().labels(), &[NOISE]);
        assert_eq!(dbscan(&cloud, 1.0, 1).unwrap().labels(), &[0]);
        assert_eq!(dbscan(&PointCloud::empty(), 1.0, 2).unwrap().n_clusters(), 0);
        assert!(dbscan(&cloud, 0.0, 2).is_err());
    }

    #[test]
    fn matches_oracle() {
        let mut rng = seeded_rng(77);
        for trial in 0..50 {
            let n = rng.random_range(5..=200);
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::new(rng.random(), rng.random(), rng.random::<f64>() * 0.3))
                .collect();
            let eps = rng.random_range(0.05..0.2);
            let min_pts = rng.random_range(1..8);
            let got = dbscan(&PointCloud::new(pts.clone()).unwrap(), eps, min_pts).unwrap();
            assert_eq!(
                got.labels(),
                dbscan_oracle(&pts, eps, min_pts).as_slice(),
                "trial {trial}"
            );
        }
    }

    #[test]
    fn auto_eps_uses_median_spacing() {
        let pts: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64 * 0.5, 0.0, 0.0)).collect();
        let eps = auto_eps(&PointCloud::new(pts).unwrap(), 2.5).unwrap();
        assert!((eps - 1.25).abs() < 1e-12);
    }

    #[test]
    fn small_cluster_removal() {
        let labels = vec![0, 0, 0, 1, 1, NOISE, 2, 2, 2, 2];
        let c = Clustering::from_labels(labels.clone()).unwrap();
        let cloud = PointCloud::new((0..10).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect()).unwrap();
        let (kept, kc) = remove_small_clusters(&c, &cloud, 3).unwrap();
        assert_eq!(kc.labels(), &[0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(kept.points()[3].x, 6.0);
        let (same, sc) = remove_small_clusters(&c, &cloud, 2).unwrap();
        assert_eq!(sc.n_clusters(), 3);
        assert_eq!(same.len(), 9);
        assert!(matches!(
            remove_small_clusters(&c, &cloud, 5),
            Err(Error::AllClustersRemoved)
        ));
        assert!(Clustering::from_labels(vec![0, 2]).is_err());
    }

    fn plate(rng: &mut crate::Rng, dims: [f64; 3], n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|i| {
                    let z = if i % 2 == 0 { dims[2] / 2.0 } else { -dims[2] / 2.0 };
                    Vec3::new(
                        (rng.random::<f64>() - 0.5) * dims[0],
                        (rng.random::<f64>() - 0.5) * dims[1],
                        z,
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    fn helix(rng: &mut crate::Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| {
                    let t: f64 = rng.random::<f64>() * 12.0;
                    let a: f64 = rng.random::<f64>() * std::f64::consts::TAU;
                    let axis = Vec3::new(2.0 * t.cos(), 2.0 * t.sin(), t * 0.5);
                    axis + Vec3::new(a.cos(), a.sin(), 0.0) * 0.3
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn plate_versus_helix() {
        let mut rng = seeded_rng(4);
        let clouds = vec![helix(&mut rng, 3000), plate(&mut rng, [7.5, 3.0, 0.2], 20_000)];
        let s = classify_clusters(&clouds, &ClassifyParams::default()).unwrap();
        assert_eq!(s.label_cluster, 1);
        assert_eq!(s.panicle_cluster, 0);
        assert!(!s.low_confidence);
    }

    #[test]
    fn two_plates_is_low_confidence() {
        let mut rng = seeded_rng(5);
        let a = plate(&mut rng, [7.5, 3.0, 0.01], 20_000);
        let b =
            plate(&mut rng, [7.5, 3.0, 0.2], 25_000).transformed(&Matrix3::identity(), &Vec3::new(20.0, 0.0, 0.0), 1.0);
        let s = classify_clusters(&[b, a], &ClassifyParams::default()).unwrap();
        assert_eq!(s.label_cluster, 1);
        assert!(s.low_confidence);
        assert!(s.stats[1].planarity < s.stats[0].planarity);
    }

    #[test]
    fn classification_errors() {
        let mut rng = seeded_rng(6);
        let h = helix(&mut rng, 500);
        assert!(classify_clusters(std::slice::from_ref(&h), &ClassifyParams::default()).is_err());
        assert!(matches!(
            classify_clusters(&[h.clone(), h], &ClassifyParams::default()),
            Err(Error::NoLabelFound)
        ));
    }

    #[test]
    fn obb_of_box_corners() {
        let mut pts = Vec::new();
        for x in [-2.0, 2.0] {
            for y in [-1.0, 1.0] {
                for z in [-0.5, 0.5] {
                    pts.push(Vec3::new(x, y, z) + Vec3::new(1.0, 2.0, 3.0));
                }
            }
        }
        let obb = compute_obb(&PointCloud::new(pts.clone()).unwrap()).unwrap();
        for (h, e) in obb.half_extents.iter().zip([2.0, 1.0, 0.5]) {
            assert!((h - e).abs() < 1e-12);
        }
        assert!((obb.center - Vec3::new(1.0, 2.0, 3.0)).norm() < 1e-12);
        assert!(pts.iter().all(|p| obb.contains(p, 1e-9)));
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::x() * i as f64).collect();
        assert!(compute_obb(&PointCloud::new(line).unwrap()).is_err());
    }

    #[test]
    fn rotated_plate_extents() {
        let mut rng = seeded_rng(8);
        let corners: Vec<Vec3> = [-1.0f64, 1.0]
            .iter()
            .flat_map(|&x| {
                [-1.0f64, 1.0].into_iter().flat_map(move |y| {
                    [-1.0f64, 1.0]
                        .into_iter()
                        .map(move |z| Vec3::new(x * 3.75, y * 1.5, z * 0.1))
                })
            })
            .collect();
        for _ in 0..10 {
            let rot = Rotation3::from_euler_angles(rng.random(), rng.random(), rng.random());
            let cloud =
                PointCloud::new(corners.clone())
                    .unwrap()
                    .transformed(rot.matrix(), &Vec3::new(5.0, -2.0, 1.0), 1.0);
            let obb = compute_obb(&cloud).unwrap();
            for (h, e) in obb.half_extents.iter().zip([3.75, 1.5, 0.1]) {
                assert!((h - e).abs() < 1e-6, "{h} vs {e}");
            }
        }
    }

    #[test]
    fn plane_obb_is_flat() {
        let mut rng = seeded_rng(9);
        let pts: Vec<Vec3> = (0..300).map(|_| Vec3::new(rng.random(), rng.random(), 0.0)).collect();
        let obb = compute_obb(&PointCloud::new(pts).unwrap()).unwrap();
        assert!(obb.half_extents[2] < 1e-12);
    }

    #[test]
    fn rectangle_of_rotated_rect() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let mut pts = Vec::new();
        for i in 0..=20 {
            for j in 0..=4 {
                let (x, y) = (i as f64 * 0.5 - 5.0, j as f64 * 0.5 - 1.0);
                pts.push([c * x - s * y + 1.0, s * x + c * y - 2.0]);
            }
        }
        let r = min_area_rectangle(&pts).unwrap();
        assert!((r.half_extents[0] - 5.0).abs() < 1e-9);
        assert!((r.half_extents[1] - 1.0).abs() < 1e-9);
        assert!((r.axis[0].abs() - c).abs() < 1e-9);
        assert!((r.center[0] - 1.0).abs() < 1e-9 && (r.center[1] + 2.0).abs() < 1e-9);
        assert!(min_area_rectangle(&[[1.0, 1.0]; 3]).is_err());
    }

    #[test]
    fn exact_plate_calibration() {
        let mut rng = seeded_rng(10);
        let cloud = plate(&mut rng, [0.3, 0.12, 0.008], 20_000);
        let cal = calibrate(&cloud, LABEL_LENGTH_CM).unwrap();
        assert!((cal.x1 - 0.3).abs() < 3e-4, "x1 {}", cal.x1);
        assert!((cal.scale_cm_per_unit - 25.0).abs() < 0.03);
        assert!((cal.normalize_factor - 1.0 / cal.x1).abs() < 1e-15);
    }

    #[test]
    fn noisy_plate_calibration() {
        let mut rng = seeded_rng(12);
        for _ in 0..5 {
            let clean = plate(&mut rng, [7.5, 3.0, 0.2], 20_000);
            let sigma = 0.002 * 7.5;
            let noisy: Vec<Vec3> = clean
                .points()
                .iter()
                .map(|p| {
                    p + Vec3::new(
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                        rng.sample(StandardNormal),
                    ) * sigma
                })
                .collect();
            let rot = Rotation3::from_euler_angles(rng.random(), rng.random(), rng.random());
            let cloud = PointCloud::new(noisy)
                .unwrap()
                .transformed(rot.matrix(), &Vec3::new(1.0, 2.0, 3.0), 1.0);
            let cal = calibrate(&cloud, LABEL_LENGTH_CM).unwrap();
            assert!((cal.x1 - 7.5).abs() / 7.5 < 0.005, "x1 {}", cal.x1);
        }
    }

    #[test]
    fn interval_fit_recovers_blurred_uniform() {
        let mut rng = seeded_rng(13);
        let t: Vec<f64> = (0..20_000)
            .map(|_| rng.random::<f64>() * 4.0 - 1.0 + rng.sample::<f64, _>(StandardNormal) * 0.02)
            .collect();
        let fit = fit_blurred_interval(&t).unwrap();
        assert!((fit.lo + 1.0).abs() < 0.005 && (fit.hi - 3.0).abs() < 0.005, "{fit:?}");
        assert!((fit.sigma - 0.02).abs() < 0.005);
    }

    #[test]
    fn calibration_is_scale_covariant() {
        let mut rng = seeded_rng(14);
        let cloud = plate(&mut rng, [0.3, 0.12, 0.008], 5_000);
        let base = calibrate(&cloud, LABEL_LENGTH_CM).unwrap();
        for s in [0.1, 10.0] {
            let scaled = cloud.transformed(&Matrix3::identity(), &Vec3::zeros(), s);
            let cal = calibrate(&scaled, LABEL_LENGTH_CM).unwrap();
            assert!((cal.scale_cm_per_unit * s / base.scale_cm_per_unit - 1.0).abs() < 1e-9);
        }
        assert!(Calibration::new(1e-12, 7.5).is_err());
    }

    #[test]
    fn downsampling() {
        let mut rng = seeded_rng(15);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random(), rng.random(), rng.random()))
            .collect();
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let leaf = 0.1;
        let occupied: std::collections::HashSet<[i64; 3]> = pts
            .iter()
            .map(|p| [0, 1, 2].map(|a| (p[a] / leaf).floor() as i64))
            .collect();
        assert_eq!(voxel_downsample(&cloud, leaf).unwrap().len(), occupied.len());

        let one = voxel_downsample(&cloud, 10.0).unwrap();
        assert_eq!(one.len(), 1);
        assert!((one.points()[0] - cloud.centroid().unwrap()).norm() < 1e-12);

        let grid: Vec<Vec3> = (0..27)
            .map(|i| Vec3::new((i % 3) as f64, ((i / 3) % 3) as f64, (i / 9) as f64))
            .collect();
        assert_eq!(
            voxel_downsample(&PointCloud::new(grid).unwrap(), 0.5).unwrap().len(),
            27
        );
        assert!(voxel_downsample(&cloud, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn dbscan_is_scale_invariant(seed in any::<u64>(), s in prop::sample::select(vec![0.5f64, 2.0, 4.0, 0.25])) {
            let mut rng = seeded_rng(seed);
            let pts: Vec<Vec3> = (0..120).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let cloud = PointCloud::new(pts).unwrap();
            let a = dbscan(&cloud, 0.15, 4).unwrap();
            let scaled = cloud.transformed(&Matrix3::identity(), &Vec3::zeros(), s);
            let b = dbscan(&scaled, 0.15 * s, 4).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn obb_is_rigidly_invariant(seed in any::<u64>(), angles in prop::array::uniform3(-3.0f64..3.0)) {
            let mut rng = seeded_rng(seed);
            let pts: Vec<Vec3> = (0..200).map(|_| Vec3::new(rng.random::<f64>() * 4.0, rng.random::<f64>() * 2.0, rng.random::<f64>())).collect();
            let cloud = PointCloud::new(pts).unwrap();
            let rot = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
            let a = compute_obb(&cloud).unwrap();
            let b = compute_obb(&cloud.transformed(rot.matrix(), &Vec3::new(3.0, -1.0, 7.0), 1.0)).unwrap();
            for i in 0..3 {
                prop_assert!((a.half_extents[i] - b.half_extents[i]).abs() < 1e-9);
            }
            prop_assert!(cloud.points().iter().all(|p| a.contains(p, 1e-6)));
        }

        #[test]
        fn removal_never_grows(seed in any::<u64>(), min_size in 1usize..30) {
            let mut rng = seeded_rng(seed);
            let pts: Vec<Vec3> = (0..150).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
            let cloud = PointCloud::new(pts).unwrap();
            let c = dbscan(&cloud, 0.12, 3).unwrap();
            if let Ok((kept, kc)) = remove_small_clusters(&c, &cloud, min_size) {
                prop_assert!(kept.len() <= cloud.len());
                let mut before = c.cluster_sizes().to_vec();
                before.retain(|&s| s >= min_size);
                prop_assert_eq!(kc.cluster_sizes(), before.as_slice());
            }
        }
    }
}

//! Pipeline stages as file-level operations, shared by the single-step
//! subcommands and by `run`.

use crate::config::PipelineConfig;
use crate::failure::{DataExt, Failure, StageExt};
use anyhow::anyhow;
use panicle_core::cloud_ops::{self, Calibration, SceneSegmentation};
use panicle_core::mask::{read_mask, write_mask, BinaryMask};
use panicle_core::segmentation::{
    boundary_overlap, filter_candidates, match_and_merge, seg_metrics, CandidateMask, ClassLabel, RoughInstance,
};
use panicle_core::traits::{measure_length, panicle_volume, LengthResult, VolumeResult};
use panicle_core::view_filter::{filter_view_set, ViewFilterResult, ViewSet};
use panicle_core::{field_export, grid, PointCloud};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const STABILITY_FILE: &str = "stability.json";

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).data("write")?;
    }
    let mut text = serde_json::to_string_pretty(value).data("write")?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::data("write", anyhow!("{}: {e}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, stage: &str) -> Result<T, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::data(stage, anyhow!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(stage, anyhow!("{}: {e}", path.display())))
}

pub fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).data("write"),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Views

pub fn filter_views(poses: &Path, max_angle: f64) -> Result<ViewFilterResult, Failure> {
    let views = ViewSet::read(poses).stage("filter-views")?;
    filter_view_set(&views, max_angle).stage("filter-views")
}

// ---------------------------------------------------------------------------
// Masks

fn is_mask_file(p: &Path) -> bool {
    p.is_file()
        && p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("pgm"))
}

fn sorted_entries(dir: &Path, stage: &str) -> Result<Vec<PathBuf>, Failure> {
    let rd = fs::read_dir(dir).map_err(|e| Failure::data(stage, anyhow!("{}: {e}", dir.display())))?;
    let mut out: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    out.sort();
    Ok(out)
}

pub fn mask_files(dir: &Path, stage: &str) -> Result<Vec<PathBuf>, Failure> {
    Ok(sorted_entries(dir, stage)?
        .into_iter()
        .filter(|p| is_mask_file(p))
        .collect())
}

/// Directories holding the masks of one image each. A directory with mask
/// files directly inside is a single image with an empty id.
pub fn image_units(dir: &Path, stage: &str) -> Result<Vec<(String, PathBuf)>, Failure> {
    if !mask_files(dir, stage)?.is_empty() {
        return Ok(vec![(String::new(), dir.to_path_buf())]);
    }
    let mut units = Vec::new();
    for p in sorted_entries(dir, stage)? {
        if p.is_dir() && !mask_files(&p, stage)?.is_empty() {
            let id = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            units.push((id, p));
        }
    }
    Ok(units)
}

fn file_name(p: &Path) -> String {
    p.file_name().unwrap_or_default().to_string_lossy().into_owned()
}

#[derive(Debug, Clone, Serialize)]
pub struct RefineRecord {
    pub image: String,
    pub class: ClassLabel,
    pub candidates: usize,
    pub kept_candidates: usize,
    pub matched: Vec<String>,
    pub used_rough: bool,
    pub warnings: Vec<String>,
}

/// Merges fine masks into each rough instance and writes `<out>/<image>/<class>.png`.
pub fn refine_masks(
    cfg: &PipelineConfig,
    fines_dir: &Path,
    rough_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<RefineRecord>, Failure> {
    const STAGE: &str = "refine-masks";
    let units = image_units(rough_dir, STAGE)?;
    if units.is_empty() {
        return Err(Failure::data(
            STAGE,
            anyhow!("no rough masks under {}", rough_dir.display()),
        ));
    }
    let mut records = Vec::new();
    for (id, rough_unit) in units {
        let fine_unit = if id.is_empty() {
            fines_dir.to_path_buf()
        } else {
            fines_dir.join(&id)
        };
        let fine_files = if fine_unit.is_dir() {
            mask_files(&fine_unit, STAGE)?
        } else {
            Vec::new()
        };
        let stability: BTreeMap<String, f64> = if fine_files.is_empty() {
            BTreeMap::new()
        } else {
            read_json(&fine_unit.join(STABILITY_FILE), STAGE)?
        };
        let mut cands = Vec::with_capacity(fine_files.len());
        let mut names = Vec::with_capacity(fine_files.len());
        for f in &fine_files {
            let name = file_name(f);
            let score = *stability
                .get(&name)
                .ok_or_else(|| Failure::data(STAGE, anyhow!("no stability score for {}", f.display())))?;
            let mask = read_mask(f).stage(STAGE)?;
            cands.push(CandidateMask::new(mask, score).stage(STAGE)?);
            names.push(name);
        }
        let kept = filter_candidates(&cands, cfg.min_area, cfg.min_stability);
        let kept_names: Vec<String> = names
            .iter()
            .zip(&cands)
            .filter(|(_, c)| c.area() >= cfg.min_area && c.stability() >= cfg.min_stability)
            .map(|(n, _)| n.clone())
            .collect();

        let out_unit = if id.is_empty() {
            out_dir.to_path_buf()
        } else {
            out_dir.join(&id)
        };
        fs::create_dir_all(&out_unit).data(STAGE)?;
        for rf in mask_files(&rough_unit, STAGE)? {
            let stem = rf.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let class: ClassLabel = stem.parse().map_err(|_| {
                Failure::data(
                    STAGE,
                    anyhow!("rough mask {} is not named panicle or label", rf.display()),
                )
            })?;
            let rough = RoughInstance::new(read_mask(&rf).stage(STAGE)?, class).stage(STAGE)?;
            let merged = match_and_merge(&rough, &kept, &cfg.match_params()).stage(STAGE)?;
            write_mask(&merged.mask, out_unit.join(format!("{}.png", class.as_str()))).stage(STAGE)?;
            records.push(RefineRecord {
                image: id.clone(),
                class,
                candidates: cands.len(),
                kept_candidates: kept.len(),
                matched: merged.matched.iter().map(|&i| kept_names[i].clone()).collect(),
                used_rough: merged.used_rough,
                warnings: merged.warnings,
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegRow {
    pub image: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub bo: f64,
}

fn collect_masks(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), Failure> {
    for p in sorted_entries(dir, "eval-seg")? {
        if p.is_dir() {
            collect_masks(root, &p, out)?;
        } else if is_mask_file(&p) {
            out.push(p.strip_prefix(root).unwrap_or(&p).to_path_buf());
        }
    }
    Ok(())
}

/// Scores every ground-truth mask against the prediction at the same relative path.
pub fn eval_seg(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<SegRow>, Failure> {
    const STAGE: &str = "eval-seg";
    let mut rel = Vec::new();
    collect_masks(gt_dir, gt_dir, &mut rel)?;
    if rel.is_empty() {
        return Err(Failure::data(
            STAGE,
            anyhow!("no ground-truth masks under {}", gt_dir.display()),
        ));
    }
    let mut rows = Vec::with_capacity(rel.len());
    for r in rel {
        let gt = read_mask(gt_dir.join(&r)).stage(STAGE)?;
        let pred = find_pred(pred_dir, &r)
            .ok_or_else(|| Failure::data(STAGE, anyhow!("no prediction for {}", r.display())))?;
        let pred: BinaryMask = read_mask(pred).stage(STAGE)?;
        let m = seg_metrics(&pred, &gt).stage(STAGE)?;
        rows.push(SegRow {
            image: r.to_string_lossy().replace('\\', "/"),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            iou: m.iou,
            bo: boundary_overlap(&pred, &gt).stage(STAGE)?,
        });
    }
    Ok(rows)
}

/// Same relative path, accepting either mask extension.
fn find_pred(pred_dir: &Path, rel: &Path) -> Option<PathBuf> {
    let direct = pred_dir.join(rel);
    if direct.is_file() {
        return Some(direct);
    }
    ["png", "pgm"]
        .iter()
        .map(|e| direct.with_extension(e))
        .find(|p| p.is_file())
}

pub fn seg_mean(rows: &[SegRow]) -> SegRow {
    let n = rows.len().max(1) as f64;
    let avg = |f: fn(&SegRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    SegRow {
        image: "mean".into(),
        precision: avg(|r| r.precision),
        recall: avg(|r| r.recall),
        f1: avg(|r| r.f1),
        iou: avg(|r| r.iou),
        bo: avg(|r| r.bo),
    }
}

pub fn write_seg_csv(path: &Path, rows: &[SegRow]) -> Result<(), Failure> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).data("write")?;
    for r in rows.iter().chain(std::iter::once(&seg_mean(rows))) {
        w.serialize(r).data("write")?;
    }
    w.flush().data("write")
}

// ---------------------------------------------------------------------------
// Clouds

pub fn export_cloud(cfg: &PipelineConfig, grid_path: &Path, seed: u64) -> Result<PointCloud, Failure> {
    let grid = grid::read_grid(grid_path).stage("export-cloud")?;
    field_export::export_cloud(&grid, cfg.iso, cfg.export_density, seed).stage("export-cloud")
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterReport {
    pub eps: f64,
    pub n_points: usize,
    pub n_clusters: usize,
    pub noise_points: usize,
    pub kept_clusters: usize,
    pub panicle_points: usize,
    pub label_points: usize,
    pub low_confidence: bool,
    pub stats: Vec<cloud_ops::ClusterStats>,
}

pub fn cluster(cfg: &PipelineConfig, cloud: &PointCloud) -> Result<(SceneSegmentation, ClusterReport), Failure> {
    let seg = cloud_ops::segment_scene(cloud, &cfg.cluster_params()).stage("cluster")?;
    let report = ClusterReport {
        eps: seg.eps,
        n_points: cloud.len(),
        n_clusters: seg.clustering.n_clusters(),
        noise_points: seg.clustering.noise_count(),
        kept_clusters: seg.kept_clusters,
        panicle_points: seg.semantic.panicle.len(),
        label_points: seg.semantic.label.len(),
        low_confidence: seg.semantic.low_confidence,
        stats: seg.semantic.stats.clone(),
    };
    Ok((seg, report))
}

pub fn calibrate(label: &PointCloud, length_cm: f64) -> Result<Calibration, Failure> {
    cloud_ops::calibrate(label, length_cm).stage("calibrate")
}

pub fn length(cfg: &PipelineConfig, panicle: &PointCloud, calib: &Calibration) -> Result<LengthResult, Failure> {
    measure_length(panicle, calib, &cfg.length_params()).stage("length")
}

pub fn volume(panicle: &PointCloud, calib: &Calibration, voxel: f64) -> Result<VolumeResult, Failure> {
    panicle_volume(panicle, calib, voxel).stage("volume")
}

// ---------------------------------------------------------------------------
// traits.csv

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraitsRow {
    pub sample_id: String,
    #[serde(rename = "L_cm")]
    pub l_cm: Option<f64>,
    #[serde(rename = "L1")]
    pub l1: Option<f64>,
    pub x1: Option<f64>,
    #[serde(rename = "Num")]
    pub num: Option<usize>,
    #[serde(rename = "V_cm3")]
    pub v_cm3: Option<f64>,
    /// Semicolon-separated confidence and failure flags.
    pub flags: String,
}

impl TraitsRow {
    pub fn add_flag(&mut self, flag: &str) {
        if self.flags.split(';').any(|f| f == flag) {
            return;
        }
        if !self.flags.is_empty() {
            self.flags.push(';');
        }
        self.flags.push_str(flag);
    }

    pub fn set_length(&mut self, r: &LengthResult) {
        self.l_cm = Some(r.l_cm);
        self.l1 = Some(r.l1);
        self.x1 = Some(r.x1);
        if r.low_confidence {
            self.add_flag("low_confidence_path");
        }
        if !r.lbc_converged {
            self.add_flag("contraction_unconverged");
        }
    }

    pub fn set_volume(&mut self, v: &VolumeResult, x1: f64) {
        self.num = Some(v.num_voxels);
        self.v_cm3 = Some(v.volume_cm3);
        self.x1.get_or_insert(x1);
    }
}

pub fn read_traits(path: &Path) -> Result<Vec<TraitsRow>, Failure> {
    let mut r = csv::Reader::from_path(path).data("read traits")?;
    r.deserialize()
        .collect::<Result<Vec<TraitsRow>, _>>()
        .data("read traits")
}

pub fn write_traits(path: &Path, rows: &[TraitsRow]) -> Result<(), Failure> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).data("write")?;
    if rows.is_empty() {
        w.write_record(["sample_id", "L_cm", "L1", "x1", "Num", "V_cm3", "flags"])
            .data("write")?;
    }
    for r in rows {
        w.serialize(r).data("write")?;
    }
    w.flush().data("write")
}

/// Updates the row for `sample_id` in an existing traits.csv, or creates it.
pub fn upsert_traits(path: &Path, sample_id: &str, update: impl FnOnce(&mut TraitsRow)) -> Result<(), Failure> {
    let mut rows = if path.is_file() { read_traits(path)? } else { Vec::new() };
    let idx = match rows.iter().position(|r| r.sample_id == sample_id) {
        Some(i) => i,
        None => {
            rows.push(TraitsRow {
                sample_id: sample_id.to_string(),
                ..Default::default()
            });
            rows.len() - 1
        }
    };
    update(&mut rows[idx]);
    write_traits(path, &rows)
}

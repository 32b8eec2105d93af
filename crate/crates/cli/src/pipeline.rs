//! Single-sample and batch orchestration.

use crate::config::PipelineConfig;
use crate::failure::{DataExt, Failure, FailureKind, StageExt};
use crate::stages::{self, read_json, write_json, write_traits, TraitsRow};
use anyhow::anyhow;
use panicle_core::eval::{self, PairedSeries};
use panicle_core::ply::{read_ply, write_ply, PlyFormat};
use panicle_core::PointCloud;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CLOUD_FILE: &str = "cloud.ply";
pub const GRID_FILE: &str = "grid.json";
pub const POSES_FILE: &str = "poses.json";
pub const MASKS_DIR: &str = "masks";
pub const TRUTH_FILE: &str = "truth.json";

#[derive(Debug, Clone, Serialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorRecord {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

impl From<&Failure> for ErrorRecord {
    fn from(f: &Failure) -> Self {
        Self {
            stage: f.stage.clone(),
            kind: f.kind,
            message: format!("{:#}", f.source),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleResult {
    pub traits: TraitsRow,
    pub stages_run: Vec<String>,
    pub timings: Vec<StageTime>,
    pub warnings: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<stages::SegRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorRecord>,
}

impl SampleResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

struct Timer<'a> {
    timings: &'a mut Vec<StageTime>,
    stages: &'a mut Vec<String>,
}

impl Timer<'_> {
    fn run<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T, Failure>) -> Result<T, Failure> {
        let t0 = Instant::now();
        let out = f();
        self.timings.push(StageTime {
            stage: stage.to_string(),
            seconds: t0.elapsed().as_secs_f64(),
        });
        self.stages.push(stage.to_string());
        out
    }
}

pub fn sample_id_of(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string())
}

/// Whether `dir` holds any input a stage can start from.
pub fn is_sample_dir(dir: &Path) -> bool {
    dir.join(CLOUD_FILE).is_file()
        || dir.join(GRID_FILE).is_file()
        || dir.join(POSES_FILE).is_file()
        || dir.join(MASKS_DIR).is_dir()
}

/// Runs every stage whose inputs exist in `dir`, writing products to `out`.
///
/// Errors end the sample early and are recorded in the result.
pub fn run_sample(cfg: &PipelineConfig, dir: &Path, out: &Path) -> SampleResult {
    let mut result = SampleResult {
        traits: TraitsRow {
            sample_id: sample_id_of(dir),
            ..Default::default()
        },
        stages_run: Vec::new(),
        timings: Vec::new(),
        warnings: Vec::new(),
        segmentation: None,
        error: None,
    };
    let (mut timings, mut stages_run) = (Vec::new(), Vec::new());
    let outcome = {
        let mut timer = Timer {
            timings: &mut timings,
            stages: &mut stages_run,
        };
        run_stages(cfg, dir, out, &mut result, &mut timer)
    };
    result.timings = timings;
    result.stages_run = stages_run;
    if let Err(f) = outcome {
        log::warn!("sample {}: {f}", result.traits.sample_id);
        result.traits.add_flag(&format!("failed:{}", f.stage));
        result.error = Some(ErrorRecord::from(&f));
    }
    result
}

fn run_stages(
    cfg: &PipelineConfig,
    dir: &Path,
    out: &Path,
    result: &mut SampleResult,
    timer: &mut Timer<'_>,
) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::data("input", anyhow!("{} is not a directory", dir.display())));
    }
    if !is_sample_dir(dir) {
        return Err(Failure::data(
            "input",
            anyhow!(
                "{} has none of {CLOUD_FILE}, {GRID_FILE}, {POSES_FILE}, {MASKS_DIR}/",
                dir.display()
            ),
        ));
    }
    std::fs::create_dir_all(out).data("write")?;

    let poses = dir.join(POSES_FILE);
    if poses.is_file() {
        let views = timer.run("filter-views", || stages::filter_views(&poses, cfg.max_angle))?;
        if !views.removed.is_empty() {
            result
                .warnings
                .push(format!("{} views off target", views.removed.len()));
        }
        write_json(&out.join("kept.json"), &views)?;
    }

    let masks = dir.join(MASKS_DIR);
    let (fines, rough) = (masks.join("fines"), masks.join("rough"));
    if rough.is_dir() {
        let refined = out.join("refined");
        let records = timer.run("refine-masks", || stages::refine_masks(cfg, &fines, &rough, &refined))?;
        if records.iter().any(|r| r.used_rough) {
            result.traits.add_flag("rough_mask_fallback");
        }
        write_json(&out.join("refine.json"), &records)?;
        let gt = masks.join("gt");
        if gt.is_dir() {
            let rows = timer.run("eval-seg", || stages::eval_seg(&refined, &gt))?;
            stages::write_seg_csv(&out.join("seg_metrics.csv"), &rows)?;
            result.segmentation = Some(stages::seg_mean(&rows));
        }
    }

    let cloud_path = dir.join(CLOUD_FILE);
    let grid_path = dir.join(GRID_FILE);
    let cloud: Option<PointCloud> = if cloud_path.is_file() {
        Some(timer.run("load", || read_ply(&cloud_path).stage("load"))?)
    } else if grid_path.is_file() {
        let c = timer.run("export-cloud", || stages::export_cloud(cfg, &grid_path, cfg.seed))?;
        write_ply(&c, out.join(CLOUD_FILE), PlyFormat::BinaryLittleEndian).stage("write")?;
        Some(c)
    } else {
        None
    };
    let Some(cloud) = cloud else {
        return Ok(());
    };

    let (seg, report) = timer.run("cluster", || stages::cluster(cfg, &cloud))?;
    if report.low_confidence {
        result.traits.add_flag("low_confidence_label");
    }
    write_json(&out.join("cluster.json"), &report)?;
    let panicle = &seg.semantic.panicle;
    write_ply(panicle, out.join("panicle.ply"), PlyFormat::BinaryLittleEndian).stage("write")?;
    write_ply(
        &seg.semantic.label,
        out.join("label.ply"),
        PlyFormat::BinaryLittleEndian,
    )
    .stage("write")?;

    let calib = timer.run("calibrate", || {
        stages::calibrate(&seg.semantic.label, cfg.label_length_cm)
    })?;
    write_json(&out.join("calib.json"), &calib)?;
    result.traits.x1 = Some(calib.x1);

    let len = timer.run("length", || stages::length(cfg, panicle, &calib))?;
    result.traits.set_length(&len);
    result.warnings.extend(len.warnings.iter().cloned());

    let vol = timer.run("volume", || stages::volume(panicle, &calib, cfg.voxel))?;
    result.traits.set_volume(&vol, calib.x1);
    Ok(())
}

/// Writes traits.csv, sample.json and timing.json for one finished sample.
pub fn write_sample_outputs(result: &SampleResult, out: &Path) -> Result<(), Failure> {
    write_traits(&out.join("traits.csv"), std::slice::from_ref(&result.traits))?;
    write_json(&out.join("sample.json"), result)?;
    write_json(
        &out.join("timing.json"),
        &serde_json::json!({
            "sample_id": result.traits.sample_id,
            "stages": result.timings,
            "total_seconds": result.timings.iter().map(|t| t.seconds).sum::<f64>(),
        }),
    )
}

// ---------------------------------------------------------------------------
// Batch

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Truth {
    pub length_cm: Option<f64>,
    pub volume_cm3: Option<f64>,
}

/// Reads the ground truth a synthetic sample carries, if any.
pub fn read_truth(dir: &Path) -> Result<Option<Truth>, Failure> {
    let path = dir.join(TRUTH_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let v: serde_json::Value = read_json(&path, "truth")?;
    Ok(Some(Truth {
        length_cm: v.get("rachis_arc_length_cm").and_then(|x| x.as_f64()),
        volume_cm3: v.get("occupied_volume_cm3").and_then(|x| x.as_f64()),
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct FailureRow {
    pub sample_id: String,
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchSummary {
    pub n_samples: usize,
    pub n_failed: usize,
    pub failures: Vec<FailureRow>,
    /// Trait metrics against truth.json, keyed by trait.
    pub metrics: Vec<eval::Metrics>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub summary: BatchSummary,
    pub results: Vec<SampleResult>,
}

pub fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>, Failure> {
    let rd = std::fs::read_dir(root).map_err(|e| Failure::data("input", anyhow!("{}: {e}", root.display())))?;
    let mut dirs: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && is_sample_dir(p))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::data(
            "input",
            anyhow!("no sample directories under {}", root.display()),
        ));
    }
    Ok(dirs)
}

/// Runs every sample under `root` on `workers` threads (0 = all cores).
pub fn run_batch(cfg: &PipelineConfig, root: &Path, out: &Path, workers: usize) -> Result<BatchOutput, Failure> {
    let dirs = sample_dirs(root)?;
    std::fs::create_dir_all(out).data("write")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::usage("workers", e))?;
    let mut results: Vec<(SampleResult, Option<Truth>)> = pool.install(|| {
        dirs.par_iter()
            .map(|d| {
                let id = sample_id_of(d);
                let sample_out = out.join("samples").join(&id);
                let mut r = run_sample(cfg, d, &sample_out);
                if let Err(f) = write_sample_outputs(&r, &sample_out) {
                    r.warnings.push(format!("could not write sample outputs: {f}"));
                }
                let truth = match read_truth(d) {
                    Ok(t) => t,
                    Err(f) => {
                        r.warnings.push(f.to_string());
                        None
                    }
                };
                (r, truth)
            })
            .collect()
    });
    results.sort_by(|a, b| a.0.traits.sample_id.cmp(&b.0.traits.sample_id));

    let rows: Vec<TraitsRow> = results.iter().map(|(r, _)| r.traits.clone()).collect();
    write_traits(&out.join("traits.csv"), &rows)?;

    let failures: Vec<FailureRow> = results
        .iter()
        .filter_map(|(r, _)| {
            r.error.as_ref().map(|e| FailureRow {
                sample_id: r.traits.sample_id.clone(),
                stage: e.stage.clone(),
                kind: e.kind,
                message: e.message.clone(),
            })
        })
        .collect();
    let mut w = csv::Writer::from_path(out.join("failures.csv")).data("write")?;
    w.write_record(["sample_id", "stage", "kind", "message"])
        .data("write")?;
    for f in &failures {
        let kind = serde_json::to_value(f.kind)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        w.write_record([&f.sample_id, &f.stage, &kind, &f.message])
            .data("write")?;
    }
    w.flush().data("write")?;

    let series = truth_series(&results);
    let corr = trait_correlations(&rows);
    eval::report(&series, corr.as_ref(), &out.join("eval")).stage("report")?;
    let summary = BatchSummary {
        n_samples: results.len(),
        n_failed: failures.len(),
        failures,
        metrics: series.iter().map(eval::metrics).collect(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_timing_table(&results, &out.join("timing.json"))?;
    Ok(BatchOutput {
        summary,
        results: results.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Predicted against true length and volume over samples that have both.
fn truth_series(results: &[(SampleResult, Option<Truth>)]) -> Vec<PairedSeries> {
    let mut out = Vec::new();
    let pick = |pred: fn(&TraitsRow) -> Option<f64>, truth: fn(&Truth) -> Option<f64>| {
        results
            .iter()
            .filter_map(|(r, t)| Some((pred(&r.traits)?, truth(t.as_ref()?)?)))
            .unzip::<f64, f64, Vec<f64>, Vec<f64>>()
    };
    let (lp, lm) = pick(|r| r.l_cm, |t| t.length_cm);
    if let Ok(s) = PairedSeries::new("length", "cm", lp, lm) {
        out.push(s);
    }
    let (vp, vm) = pick(|r| r.v_cm3, |t| t.volume_cm3);
    if let Ok(s) = PairedSeries::new("volume", "cm3", vp, vm) {
        out.push(s);
    }
    out
}

/// Correlations among the predicted traits of completed samples.
fn trait_correlations(rows: &[TraitsRow]) -> Option<eval::CorrelationMatrix> {
    let done: Vec<&TraitsRow> = rows.iter().filter(|r| r.l_cm.is_some() && r.v_cm3.is_some()).collect();
    let series = vec![
        ("L_cm".to_string(), done.iter().filter_map(|r| r.l_cm).collect()),
        ("V_cm3".to_string(), done.iter().filter_map(|r| r.v_cm3).collect()),
        (
            "Num".to_string(),
            done.iter()
                .filter_map(|r| r.num.map(|n| n as f64))
                .collect::<Vec<f64>>(),
        ),
    ];
    match eval::correlation_matrix(&series) {
        Ok(m) => Some(m),
        Err(e) => {
            log::info!("no trait correlation matrix: {e}");
            None
        }
    }
}

fn write_timing_table(results: &[(SampleResult, Option<Truth>)], path: &Path) -> Result<(), Failure> {
    let mut per_stage: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for (r, _) in results {
        for t in &r.timings {
            let e = per_stage.entry(t.stage.clone()).or_default();
            e.0 += 1;
            e.1 += t.seconds;
        }
    }
    let table: Vec<serde_json::Value> = per_stage
        .iter()
        .map(|(stage, (n, total))| {
            serde_json::json!({
                "stage": stage,
                "samples": n,
                "total_seconds": total,
                "mean_seconds": total / *n as f64,
            })
        })
        .collect();
    let samples: Vec<serde_json::Value> = results
        .iter()
        .map(|(r, _)| {
            serde_json::json!({
                "sample_id": r.traits.sample_id,
                "stages": r.timings,
                "total_seconds": r.timings.iter().map(|t| t.seconds).sum::<f64>(),
            })
        })
        .collect();
    write_json(path, &serde_json::json!({ "stages": table, "samples": samples }))
}

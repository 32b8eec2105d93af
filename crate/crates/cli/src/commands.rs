use crate::config::PipelineConfig;
use crate::failure::{DataExt, Failure, StageExt};
use crate::pipeline::{self, CLOUD_FILE, GRID_FILE, TRUTH_FILE};
use crate::stages::{self, read_json, upsert_traits, write_json};
use anyhow::anyhow;
use panicle_core::cloud_ops::Calibration;
use panicle_core::eval::{self, PairedSeries};
use panicle_core::grid::write_grid;
use panicle_core::ply::{read_ply, write_ply, PlyFormat};
use panicle_core::synth::{self, GridShape};
use panicle_core::Vec3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

fn sample_id_for(explicit: Option<&str>, input: &Path) -> String {
    if let Some(id) = explicit {
        return id.to_string();
    }
    input
        .parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string())
}

pub fn filter_views(cfg: &PipelineConfig, poses: &Path, out: &Path) -> Result<(), Failure> {
    let res = stages::filter_views(poses, cfg.max_angle)?;
    write_json(out, &res)?;
    println!(
        "kept {} of {} views, center [{:.6}, {:.6}, {:.6}]",
        res.kept.len(),
        res.kept.len() + res.removed.len(),
        res.center[0],
        res.center[1],
        res.center[2]
    );
    Ok(())
}

pub fn refine_masks(cfg: &PipelineConfig, fines: &Path, rough: &Path, out: &Path) -> Result<(), Failure> {
    let records = stages::refine_masks(cfg, fines, rough, out)?;
    write_json(&out.join("refine.json"), &records)?;
    let fallback = records.iter().filter(|r| r.used_rough).count();
    println!("refined {} instances ({fallback} kept the rough mask)", records.len());
    Ok(())
}

pub fn eval_seg(pred: &Path, gt: &Path, out: &Path) -> Result<(), Failure> {
    let rows = stages::eval_seg(pred, gt)?;
    stages::write_seg_csv(out, &rows)?;
    let m = stages::seg_mean(&rows);
    println!(
        "{} masks: precision {:.4} recall {:.4} f1 {:.4} iou {:.4} bo {:.4}",
        rows.len(),
        m.precision,
        m.recall,
        m.f1,
        m.iou,
        m.bo
    );
    Ok(())
}

pub fn export_cloud(cfg: &PipelineConfig, grid: &Path, out: &Path) -> Result<(), Failure> {
    let cloud = stages::export_cloud(cfg, grid, cfg.seed)?;
    stages::ensure_parent(out)?;
    write_ply(&cloud, out, PlyFormat::BinaryLittleEndian).stage("write")?;
    println!("wrote {} points to {}", cloud.len(), out.display());
    Ok(())
}

pub fn cluster(
    cfg: &PipelineConfig,
    input: &Path,
    out_panicle: &Path,
    out_label: &Path,
    report: Option<&Path>,
) -> Result<(), Failure> {
    let cloud = read_ply(input).stage("load")?;
    let (seg, rep) = stages::cluster(cfg, &cloud)?;
    for (path, c) in [(out_panicle, &seg.semantic.panicle), (out_label, &seg.semantic.label)] {
        stages::ensure_parent(path)?;
        write_ply(c, path, PlyFormat::BinaryLittleEndian).stage("write")?;
    }
    if let Some(r) = report {
        write_json(r, &rep)?;
    }
    println!(
        "eps {:.6}: {} clusters, {} kept, panicle {} points, label {} points{}",
        rep.eps,
        rep.n_clusters,
        rep.kept_clusters,
        rep.panicle_points,
        rep.label_points,
        if rep.low_confidence { " (low confidence)" } else { "" }
    );
    Ok(())
}

pub fn calibrate(cfg: &PipelineConfig, label: &Path, out: &Path) -> Result<(), Failure> {
    let cloud = read_ply(label).stage("load")?;
    let calib = stages::calibrate(&cloud, cfg.label_length_cm)?;
    write_json(out, &calib)?;
    println!(
        "label length {:.6} units, {:.6} cm per unit",
        calib.x1, calib.scale_cm_per_unit
    );
    Ok(())
}

fn load_panicle_and_calib(panicle: &Path, calib: &Path) -> Result<(panicle_core::PointCloud, Calibration), Failure> {
    let cloud = read_ply(panicle).stage("load")?;
    let calib: Calibration = read_json(calib, "load")?;
    Ok((cloud, calib))
}

pub fn length(cfg: &PipelineConfig, panicle: &Path, calib: &Path, out: &Path, id: Option<&str>) -> Result<(), Failure> {
    let (cloud, calib) = load_panicle_and_calib(panicle, calib)?;
    let r = stages::length(cfg, &cloud, &calib)?;
    for w in &r.warnings {
        log::warn!("{w}");
    }
    let id = sample_id_for(id, panicle);
    upsert_traits(out, &id, |row| row.set_length(&r))?;
    println!(
        "{id}: L = {:.3} cm (L1 {:.6}, x1 {:.6}){}",
        r.l_cm,
        r.l1,
        r.x1,
        if r.low_confidence { ", low confidence" } else { "" }
    );
    Ok(())
}

pub fn volume(cfg: &PipelineConfig, panicle: &Path, calib: &Path, out: &Path, id: Option<&str>) -> Result<(), Failure> {
    let (cloud, calib) = load_panicle_and_calib(panicle, calib)?;
    let v = stages::volume(&cloud, &calib, cfg.voxel)?;
    let id = sample_id_for(id, panicle);
    upsert_traits(out, &id, |row| row.set_volume(&v, calib.x1))?;
    println!("{id}: Num = {}, V = {:.4} cm3", v.num_voxels, v.volume_cm3);
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PairRow {
    sample_id: String,
    #[serde(rename = "trait")]
    trait_name: String,
    predicted: f64,
    measured: f64,
}

pub fn eval_reg(pairs: &Path, out: &Path) -> Result<(), Failure> {
    let mut rdr = csv::Reader::from_path(pairs).data("eval-reg")?;
    let rows: Vec<PairRow> = rdr.deserialize().collect::<Result<_, _>>().data("eval-reg")?;
    let mut by_trait: BTreeMap<String, Vec<&PairRow>> = BTreeMap::new();
    for r in &rows {
        by_trait.entry(r.trait_name.clone()).or_default().push(r);
    }
    let mut series = Vec::new();
    for (name, rs) in &by_trait {
        let s = PairedSeries::new(
            name.clone(),
            "",
            rs.iter().map(|r| r.predicted).collect(),
            rs.iter().map(|r| r.measured).collect(),
        )
        .stage("eval-reg")?;
        series.push(s);
    }

    // Correlate predicted traits over the samples that have all of them.
    let mut common: Option<BTreeSet<&str>> = None;
    for rs in by_trait.values() {
        let ids: BTreeSet<&str> = rs.iter().map(|r| r.sample_id.as_str()).collect();
        common = Some(match common {
            None => ids,
            Some(c) => c.intersection(&ids).copied().collect(),
        });
    }
    let common = common.unwrap_or_default();
    let corr = if by_trait.len() >= 2 && common.len() >= 2 {
        let vecs: Vec<(String, Vec<f64>)> = by_trait
            .iter()
            .map(|(name, rs)| {
                let m: BTreeMap<&str, f64> = rs.iter().map(|r| (r.sample_id.as_str(), r.predicted)).collect();
                (name.clone(), common.iter().map(|id| m[id]).collect())
            })
            .collect();
        match eval::correlation_matrix(&vecs) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("skipping correlation matrix: {e}");
                None
            }
        }
    } else {
        None
    };
    eval::report(&series, corr.as_ref(), out).stage("report")?;
    for s in &series {
        let m = eval::metrics(s);
        println!(
            "{}: n {} R2 {} RMSE {:.4} rRMSE {}",
            m.name,
            m.n,
            m.r_squared.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.rmse,
            m.rrmse_pct.map_or("n/a".into(), |v| format!("{v:.2}%"))
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SynthKind {
    /// Panicle and label scene with known rachis length and volume.
    Panicle,
    /// Density grid of a sphere.
    Sphere,
    /// Density grid of a box.
    Box,
}

#[derive(Serialize)]
struct PanicleTruthFile {
    kind: &'static str,
    seed: u64,
    #[serde(flatten)]
    truth: synth::GroundTruth,
    scene_units_per_cm: f64,
}

fn synth_one(kind: SynthKind, seed: u64, dims: usize, out: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(out).data("synth")?;
    match kind {
        SynthKind::Panicle => {
            let scene = synth::gen_scene(seed).stage("synth")?;
            write_ply(&scene.cloud, out.join(CLOUD_FILE), PlyFormat::BinaryLittleEndian).stage("write")?;
            write_ply(&scene.label, out.join("label.ply"), PlyFormat::BinaryLittleEndian).stage("write")?;
            write_json(
                &out.join(TRUTH_FILE),
                &PanicleTruthFile {
                    kind: "panicle",
                    seed,
                    truth: scene.truth,
                    scene_units_per_cm: scene.scene_scale,
                },
            )?;
        }
        SynthKind::Sphere | SynthKind::Box => {
            if dims < 2 {
                return Err(Failure::usage("synth", anyhow!("grid dims must be at least 2")));
            }
            let spacing = 2.0 / (dims - 1) as f64;
            let (shape, truth) = if kind == SynthKind::Sphere {
                (
                    GridShape::Sphere {
                        center: Vec3::zeros(),
                        radius: 0.7,
                    },
                    serde_json::json!({ "kind": "sphere", "center": [0.0, 0.0, 0.0], "radius": 0.7 }),
                )
            } else {
                (
                    GridShape::Box {
                        center: Vec3::zeros(),
                        half_extents: Vec3::new(0.6, 0.35, 0.2),
                    },
                    serde_json::json!({ "kind": "box", "center": [0.0, 0.0, 0.0], "half_extents": [0.6, 0.35, 0.2] }),
                )
            };
            let grid =
                synth::gen_density_grid(&shape, [dims; 3], Vec3::from_element(-1.0), [spacing; 3]).stage("synth")?;
            write_grid(&grid, out.join(GRID_FILE)).stage("write")?;
            write_json(&out.join(TRUTH_FILE), &truth)?;
        }
    }
    Ok(())
}

/// One sample in `out`, or with `count` one `synth_<seed>` directory per seed.
pub fn synth(kind: SynthKind, seed: u64, count: Option<usize>, dims: usize, out: &Path) -> Result<(), Failure> {
    match count {
        None => {
            synth_one(kind, seed, dims, out)?;
            println!("wrote {kind:?} sample to {}", out.display());
        }
        Some(n) => {
            let dirs: Vec<(u64, PathBuf)> = (0..n as u64)
                .map(|i| (seed + i, out.join(format!("synth_{:04}", seed + i))))
                .collect();
            use rayon::prelude::*;
            dirs.par_iter().try_for_each(|(s, d)| synth_one(kind, *s, dims, d))?;
            println!("wrote {n} {kind:?} samples under {}", out.display());
        }
    }
    Ok(())
}

pub fn run(cfg: &PipelineConfig, sample: &Path, out: &Path) -> Result<(), Failure> {
    let r = pipeline::run_sample(cfg, sample, out);
    pipeline::write_sample_outputs(&r, out)?;
    for w in &r.warnings {
        log::warn!("{}: {w}", r.traits.sample_id);
    }
    match &r.error {
        Some(e) => Err(Failure::new(e.kind, e.stage.clone(), anyhow!("{}", e.message))),
        None => {
            let t = &r.traits;
            println!(
                "{}: L_cm {} V_cm3 {} flags [{}] stages {}",
                t.sample_id,
                t.l_cm.map_or("-".into(), |v| format!("{v:.3}")),
                t.v_cm3.map_or("-".into(), |v| format!("{v:.4}")),
                t.flags,
                r.stages_run.join(",")
            );
            Ok(())
        }
    }
}

pub fn run_batch(cfg: &PipelineConfig, root: &Path, out: &Path, workers: usize) -> Result<(), Failure> {
    let b = pipeline::run_batch(cfg, root, out, workers)?;
    println!("{} samples, {} failed", b.summary.n_samples, b.summary.n_failed);
    for m in &b.summary.metrics {
        println!(
            "{}: n {} R2 {} RMSE {:.4} rRMSE {}",
            m.name,
            m.n,
            m.r_squared.map_or("n/a".into(), |v| format!("{v:.4}")),
            m.rmse,
            m.rrmse_pct.map_or("n/a".into(), |v| format!("{v:.2}%"))
        );
    }
    Ok(())
}

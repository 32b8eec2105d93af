use clap::{ArgAction, Parser, Subcommand};
use panicle_cli::commands::{self, SynthKind};
use panicle_cli::{Failure, PipelineConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "panicle",
    version,
    about = "Rice panicle trait extraction from 3D reconstructions"
)]
struct Cli {
    /// Flat key = value config file. Falls back to $PANICLE_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch work; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the scene center from camera poses and drop off-target views.
    FilterViews {
        #[arg(long)]
        poses: PathBuf,
        #[arg(long)]
        max_angle: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge fine candidate masks into rough panicle/label instances.
    RefineMasks {
        #[arg(long)]
        fines: PathBuf,
        #[arg(long)]
        rough: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted masks against ground truth.
    EvalSeg {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Isosurface a density grid and sample it into a point cloud.
    ExportCloud {
        #[arg(long)]
        grid: PathBuf,
        /// Iso level, or "auto" for the Otsu threshold.
        #[arg(long)]
        iso: Option<String>,
        /// Surface samples per unit area.
        #[arg(long)]
        density: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a scene cloud into panicle and label.
    Cluster {
        #[arg(long = "in")]
        input: PathBuf,
        /// DBSCAN radius, or "auto".
        #[arg(long)]
        eps: Option<String>,
        #[arg(long)]
        min_pts: Option<usize>,
        #[arg(long)]
        out_panicle: PathBuf,
        #[arg(long)]
        out_label: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Measure the label and write the scale calibration.
    Calibrate {
        #[arg(long)]
        label: PathBuf,
        #[arg(long)]
        length_cm: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Panicle length from the skeleton main path.
    Length {
        #[arg(long)]
        panicle: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        sample_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Panicle volume from occupied voxels.
    Volume {
        #[arg(long)]
        panicle: PathBuf,
        #[arg(long)]
        calib: PathBuf,
        #[arg(long)]
        voxel: Option<f64>,
        #[arg(long)]
        sample_id: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// R2, RMSE and rRMSE per trait, plus plots.
    EvalReg {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic samples with known answers.
    Synth {
        #[arg(long, value_enum, default_value_t = SynthKind::Panicle)]
        kind: SynthKind,
        /// Write this many samples, one subdirectory each.
        #[arg(long)]
        count: Option<usize>,
        /// Grid points per axis for grid kinds.
        #[arg(long, default_value_t = 64)]
        dims: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every available stage on one sample directory.
    Run {
        sample: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every sample directory under a root.
    RunBatch {
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_auto(flag: &str, v: &str) -> Result<Option<f64>, Failure> {
    if v.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    v.parse()
        .map(Some)
        .map_err(|e| Failure::usage("arguments", anyhow::anyhow!("--{flag} {v}: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let mut cfg = PipelineConfig::resolve(cli.config.as_deref()).map_err(|e| Failure::usage("config", e))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let checked = |cfg: PipelineConfig| -> Result<PipelineConfig, Failure> {
        cfg.validate().map_err(|e| Failure::usage("arguments", e))?;
        Ok(cfg)
    };
    match cli.command {
        Command::FilterViews { poses, max_angle, out } => {
            if let Some(a) = max_angle {
                cfg.max_angle = a;
            }
            commands::filter_views(&checked(cfg)?, &poses, &out)
        }
        Command::RefineMasks { fines, rough, out } => commands::refine_masks(&cfg, &fines, &rough, &out),
        Command::EvalSeg { pred, gt, out } => commands::eval_seg(&pred, &gt, &out),
        Command::ExportCloud {
            grid,
            iso,
            density,
            out,
        } => {
            if let Some(v) = iso {
                cfg.iso = parse_auto("iso", &v)?;
            }
            if let Some(d) = density {
                cfg.export_density = d;
            }
            commands::export_cloud(&checked(cfg)?, &grid, &out)
        }
        Command::Cluster {
            input,
            eps,
            min_pts,
            out_panicle,
            out_label,
            report,
        } => {
            if let Some(v) = eps {
                cfg.eps = parse_auto("eps", &v)?;
            }
            if let Some(m) = min_pts {
                cfg.min_pts = m;
            }
            commands::cluster(&checked(cfg)?, &input, &out_panicle, &out_label, report.as_deref())
        }
        Command::Calibrate { label, length_cm, out } => {
            if let Some(l) = length_cm {
                cfg.label_length_cm = l;
            }
            commands::calibrate(&checked(cfg)?, &label, &out)
        }
        Command::Length {
            panicle,
            calib,
            sample_id,
            out,
        } => commands::length(&cfg, &panicle, &calib, &out, sample_id.as_deref()),
        Command::Volume {
            panicle,
            calib,
            voxel,
            sample_id,
            out,
        } => {
            if let Some(v) = voxel {
                cfg.voxel = v;
            }
            commands::volume(&checked(cfg)?, &panicle, &calib, &out, sample_id.as_deref())
        }
        Command::EvalReg { pairs, out } => commands::eval_reg(&pairs, &out),
        Command::Synth { kind, count, dims, out } => commands::synth(kind, cfg.seed, count, dims, &out),
        Command::Run { sample, out } => commands::run(&cfg, &sample, &out),
        Command::RunBatch { root, out } => commands::run_batch(&cfg, &root, &out, cli.workers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.kind.exit_code())
        }
    }
}

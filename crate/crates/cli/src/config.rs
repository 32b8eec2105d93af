//! Flat `key = value` pipeline configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected so a
//! typo cannot silently fall back to a default.

use anyhow::{bail, Context, Result};
use panicle_core::cloud_ops::{self, ClusterParams};
use panicle_core::segmentation::{self, MatchParams};
use panicle_core::traits::{self, LbcParams, LengthParams, PathParams, SkeletonParams};
use panicle_core::view_filter;
use serde::Serialize;
use std::path::Path;

pub const CONFIG_ENV: &str = "PANICLE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub max_angle: f64,
    pub min_area: usize,
    pub min_stability: f64,
    pub erosion_radius: usize,
    pub match_samples: usize,
    pub containment_min: f64,
    /// `None` picks the Otsu threshold.
    pub iso: Option<f64>,
    /// Surface samples per unit area when exporting a grid.
    pub export_density: f64,
    /// `None` derives eps from the median nearest-neighbor distance.
    pub eps: Option<f64>,
    pub eps_factor: f64,
    pub min_pts: usize,
    pub min_cluster_frac: f64,
    pub theta_max: f64,
    pub tangent_scales: Vec<usize>,
    pub voxel: f64,
    pub label_length_cm: f64,
    pub downsample_frac: f64,
    pub node_spacing_frac: f64,
    pub lbc_neighbors: usize,
    pub lbc_max_iters: usize,
    pub smoothing: f64,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let lp = LengthParams::default();
        Self {
            max_angle: view_filter::DEFAULT_MAX_ANGLE_DEG,
            min_area: segmentation::DEFAULT_MIN_AREA,
            min_stability: segmentation::DEFAULT_MIN_STABILITY,
            erosion_radius: segmentation::DEFAULT_EROSION_RADIUS,
            match_samples: segmentation::DEFAULT_SAMPLES,
            containment_min: segmentation::DEFAULT_CONTAINMENT_MIN,
            iso: None,
            export_density: 5e4,
            eps: None,
            eps_factor: cloud_ops::DEFAULT_EPS_FACTOR,
            min_pts: cloud_ops::DEFAULT_MIN_PTS,
            min_cluster_frac: cloud_ops::DEFAULT_MIN_CLUSTER_FRAC,
            theta_max: traits::DEFAULT_THETA_MAX_DEG,
            tangent_scales: traits::DEFAULT_TANGENT_SCALES.to_vec(),
            voxel: traits::DEFAULT_VOXEL,
            label_length_cm: cloud_ops::LABEL_LENGTH_CM,
            downsample_frac: lp.downsample_frac,
            node_spacing_frac: lp.skeleton.spacing_frac,
            lbc_neighbors: lp.lbc.k_neighbors,
            lbc_max_iters: lp.lbc.max_iters,
            smoothing: lp.smoothing,
            seed: 0,
        }
    }
}

fn parse_auto(v: &str) -> Result<Option<f64>> {
    if v.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        Ok(Some(v.parse()?))
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key = value, got '{line}'", lineno + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            cfg.set(key, value)
                .with_context(|| format!("line {}: bad value '{value}' for {key}", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// The explicit path, else `$PANICLE_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self> {
        if let Some(p) = path {
            return Self::load(p);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
            _ => Ok(Self::default()),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "max_angle" => self.max_angle = value.parse()?,
            "min_area" => self.min_area = value.parse()?,
            "min_stability" => self.min_stability = value.parse()?,
            "erosion_radius" => self.erosion_radius = value.parse()?,
            "match_samples" => self.match_samples = value.parse()?,
            "containment_min" => self.containment_min = value.parse()?,
            "iso" => self.iso = parse_auto(value)?,
            "export_density" => self.export_density = value.parse()?,
            "eps" => self.eps = parse_auto(value)?,
            "eps_factor" => self.eps_factor = value.parse()?,
            "min_pts" => self.min_pts = value.parse()?,
            "min_cluster_frac" => self.min_cluster_frac = value.parse()?,
            "theta_max" => self.theta_max = value.parse()?,
            "tangent_scales" => {
                self.tangent_scales = value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()?
            }
            "voxel" => self.voxel = value.parse()?,
            "label_length_cm" => self.label_length_cm = value.parse()?,
            "downsample_frac" => self.downsample_frac = value.parse()?,
            "node_spacing_frac" => self.node_spacing_frac = value.parse()?,
            "lbc_neighbors" => self.lbc_neighbors = value.parse()?,
            "lbc_max_iters" => self.lbc_max_iters = value.parse()?,
            "smoothing" => self.smoothing = value.parse()?,
            "seed" => self.seed = value.parse()?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, what: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                bail!("config value out of range: {what}")
            }
        }
        check(self.max_angle > 0.0 && self.max_angle < 180.0, "max_angle in (0, 180)")?;
        check((0.0..=1.0).contains(&self.min_stability), "min_stability in [0, 1]")?;
        check(self.match_samples > 0, "match_samples > 0")?;
        check((0.0..=1.0).contains(&self.containment_min), "containment_min in [0, 1]")?;
        check(self.iso.is_none_or(f64::is_finite), "iso finite")?;
        check(
            self.export_density > 0.0 && self.export_density.is_finite(),
            "export_density > 0",
        )?;
        check(self.eps.is_none_or(|e| e > 0.0 && e.is_finite()), "eps > 0")?;
        check(self.eps_factor > 0.0, "eps_factor > 0")?;
        check(self.min_pts >= 1, "min_pts >= 1")?;
        check(
            (0.0..1.0).contains(&self.min_cluster_frac),
            "min_cluster_frac in [0, 1)",
        )?;
        check(self.theta_max > 0.0 && self.theta_max < 180.0, "theta_max in (0, 180)")?;
        check(
            !self.tangent_scales.is_empty() && self.tangent_scales.iter().all(|&s| s > 0),
            "tangent_scales non-empty and positive",
        )?;
        check(self.voxel > 0.0 && self.voxel.is_finite(), "voxel > 0")?;
        check(
            self.label_length_cm > 0.0 && self.label_length_cm.is_finite(),
            "label_length_cm > 0",
        )?;
        check(
            self.downsample_frac > 0.0 && self.downsample_frac < 0.5,
            "downsample_frac in (0, 0.5)",
        )?;
        check(
            self.node_spacing_frac > 0.0 && self.node_spacing_frac < 0.5,
            "node_spacing_frac in (0, 0.5)",
        )?;
        check(self.lbc_neighbors >= 3, "lbc_neighbors >= 3")?;
        check(self.lbc_max_iters >= 1, "lbc_max_iters >= 1")?;
        check(self.smoothing >= 0.0 && self.smoothing.is_finite(), "smoothing >= 0")?;
        Ok(())
    }

    pub fn match_params(&self) -> MatchParams {
        MatchParams {
            erosion_radius: self.erosion_radius,
            n_samples: self.match_samples,
            seed: self.seed,
            containment_min: self.containment_min,
        }
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            eps: self.eps,
            eps_factor: self.eps_factor,
            min_pts: self.min_pts,
            min_cluster_frac: self.min_cluster_frac,
            ..ClusterParams::default()
        }
    }

    pub fn length_params(&self) -> LengthParams {
        let d = LengthParams::default();
        LengthParams {
            downsample_frac: self.downsample_frac,
            lbc: LbcParams {
                k_neighbors: self.lbc_neighbors,
                max_iters: self.lbc_max_iters,
                ..d.lbc
            },
            skeleton: SkeletonParams {
                spacing_frac: self.node_spacing_frac,
                ..d.skeleton
            },
            path: PathParams {
                theta_max_deg: self.theta_max,
                tangent_scales: self.tangent_scales.clone(),
            },
            smoothing: self.smoothing,
            ..d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(PipelineConfig::parse("").unwrap(), PipelineConfig::default());
        assert_eq!(
            PipelineConfig::parse("# only a comment\n\n").unwrap(),
            PipelineConfig::default()
        );
    }

    #[test]
    fn keys_and_comments() {
        let cfg =
            PipelineConfig::parse("theta_max = 45  # tighter\neps=auto\niso = 0.5\ntangent_scales = 1, 2, 4\nseed=9")
                .unwrap();
        assert_eq!(cfg.theta_max, 45.0);
        assert_eq!(cfg.eps, None);
        assert_eq!(cfg.iso, Some(0.5));
        assert_eq!(cfg.tangent_scales, vec![1, 2, 4]);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.length_params().path.theta_max_deg, 45.0);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::parse("theta_maks = 45").unwrap_err();
        assert!(format!("{err:#}").contains("unknown config key 'theta_maks'"));
    }

    #[test]
    fn bad_values_rejected() {
        assert!(PipelineConfig::parse("voxel = -1").is_err());
        assert!(PipelineConfig::parse("voxel = abc").is_err());
        assert!(PipelineConfig::parse("theta_max").is_err());
        assert!(PipelineConfig::parse("tangent_scales = 0").is_err());
    }
}

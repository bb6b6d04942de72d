//! Flat run configuration shared by the CLI and the experiments.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correlation::CorrPath;
use crate::deformable::TAU;
use crate::error::{Error, Result};
use crate::gaussian::{truncation_radius, MaskParams, ALPHA, BETA, MASK_SCALE};
use crate::geometry::SceneConfig;
use crate::losses::LossWeights;
use crate::model::{Ablation, ModelConfig};
use crate::temporal::OperatorDims;
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub hidden: usize,
    pub context: usize,
    pub corr_channels: usize,
    pub flow_channels: usize,
    pub head_channels: usize,
    /// Lookup half-width `r`; the mask radius is always derived from the grid.
    pub radius: usize,

    /// Fixed by the model; present so that runs record them.
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub mask_scale: f64,

    pub gamma: f64,
    pub lambda_flow: f64,
    pub lambda_self: f64,
    pub lr: f64,
    pub clip: f64,
    pub batch: usize,
    pub iterations: usize,
    pub steps: usize,
    pub checkpoint_every: usize,

    pub seed: u64,
    pub dtype: DType,
    pub threads: usize,
    pub deterministic: bool,
    pub out_dir: PathBuf,
    pub path: CorrPath,

    pub corpus_size: usize,
    pub heldout_size: usize,
    pub ambiguous_fraction: f64,
    pub motion_min: f64,
    pub motion_max: f64,
    pub max_flow: f64,
    pub depth_min: f64,
    pub depth_max: f64,

    pub bench_sizes: Vec<usize>,
    pub bench_reps: usize,

    pub no_lgu: bool,
    pub no_deform: bool,
    pub no_kan: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        RunConfig {
            height: scene.height,
            width: scene.width,
            channels: scene.channels,
            hidden: 64,
            context: 16,
            corr_channels: 32,
            flow_channels: 16,
            head_channels: 32,
            radius: 3,
            alpha: ALPHA,
            beta: BETA,
            tau: TAU,
            mask_scale: MASK_SCALE,
            gamma: 0.9,
            lambda_flow: 0.05,
            lambda_self: 0.08,
            lr: 1e-4,
            clip: 1.0,
            batch: 2,
            iterations: 8,
            steps: 2000,
            checkpoint_every: 500,
            seed: 0,
            dtype: DType::F64,
            threads: 1,
            deterministic: true,
            out_dir: PathBuf::from("runs"),
            path: CorrPath::Materialized,
            corpus_size: 200,
            heldout_size: 50,
            ambiguous_fraction: scene.ambiguous_fraction,
            motion_min: scene.motion_min,
            motion_max: scene.motion_max,
            max_flow: scene.max_flow,
            depth_min: scene.depth_min,
            depth_max: scene.depth_max,
            bench_sizes: vec![32, 48, 64, 96],
            bench_reps: 5,
            no_lgu: false,
            no_deform: false,
            no_kan: false,
        }
    }
}

impl RunConfig {
    /// Small operator widths that keep a 2k-step run on one core in minutes.
    pub fn toy() -> Self {
        RunConfig {
            hidden: 8,
            context: 4,
            corr_channels: 8,
            flow_channels: 4,
            head_channels: 8,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// `round((H + W) / 16)`.
    pub fn truncation_radius(&self) -> usize {
        truncation_radius(self.height, self.width)
    }

    pub fn validate(&self) -> Result<()> {
        let fixed = [
            ("alpha", self.alpha, ALPHA),
            ("beta", self.beta, BETA),
            ("tau", self.tau, TAU),
        ];
        for (name, got, want) in fixed {
            if got != want {
                return Err(Error::Config(format!("{name} is fixed at {want}, got {got}")));
            }
        }
        let positive = [
            ("channels", self.channels),
            ("hidden", self.hidden),
            ("context", self.context),
            ("corr_channels", self.corr_channels),
            ("flow_channels", self.flow_channels),
            ("head_channels", self.head_channels),
            ("batch", self.batch),
            ("iterations", self.iterations),
            ("threads", self.threads),
            ("bench_reps", self.bench_reps),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.mask_scale >= 0.0 && self.mask_scale.is_finite()) {
            return Err(Error::Config("mask_scale must be finite and non-negative".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must lie in (0, 1]".into()));
        }
        for (name, v) in [("lambda_flow", self.lambda_flow), ("lambda_self", self.lambda_self), ("lr", self.lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("clip must be positive".into()));
        }
        if self.bench_sizes.iter().any(|&s| s < 16 || s % 8 != 0) {
            return Err(Error::Config("bench sizes must be multiples of 8, at least 16".into()));
        }
        self.scene_config().validate()
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            motion_min: self.motion_min,
            motion_max: self.motion_max,
            ambiguous_fraction: self.ambiguous_fraction,
            max_flow: self.max_flow,
            depth_min: self.depth_min,
            depth_max: self.depth_max,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            radius: self.radius,
            mask: MaskParams {
                scale: self.mask_scale,
                radius: self.truncation_radius(),
            },
            dims: OperatorDims {
                hidden: self.hidden,
                context: self.context,
                corr: self.corr_channels,
                flow: self.flow_channels,
                head: self.head_channels,
            },
            iterations: self.iterations,
            path: self.path,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            gamma: self.gamma,
            lambda_flow: self.lambda_flow,
            lambda_self: self.lambda_self,
        }
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            lgu: !self.no_lgu,
            deform: !self.no_deform,
            kan: !self.no_kan,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_the_published_constants() {
        let c = RunConfig::default();
        assert_eq!((c.alpha, c.beta, c.mask_scale, c.tau), (5.0, 0.05, 3.0, 4.0));
        assert_eq!((c.lambda_flow, c.lambda_self), (0.05, 0.08));
        assert_eq!(c.iterations, 8);
        assert_eq!(c.batch, 2);
        assert_eq!(c.truncation_radius(), 7);
        assert_eq!(c.model_config().mask.radius, 7);
        c.validate().unwrap();
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("steps = 10\nno_kan = true\ndtype = \"f32\"\n").unwrap();
        assert_eq!(partial.steps, 10);
        assert!(!partial.ablation().kan);
        assert_eq!(partial.dtype, DType::F32);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(RunConfig::from_toml("stpes = 10"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("r1 = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("alpha = 4.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("gamma = 0.0"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("height = 0"), Err(Error::Config(_))));
    }

    #[test]
    fn radius_follows_the_grid() {
        let c = RunConfig::from_toml("height = 32\nwidth = 32\n").unwrap();
        assert_eq!(c.truncation_radius(), 4);
    }
}

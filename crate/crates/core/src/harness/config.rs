//! Run configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::data::DatasetSpec;
use crate::icp::IcpConfig;
use crate::loss::{LossConfig, TrainOptions};
use crate::metrics::EvalConfig;
use crate::network::NetworkConfig;
use crate::refine::RefinerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Frames timed per repeat.
    pub frames: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { frames: 50, repeats: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub dataset: DatasetSpec,
    pub network: NetworkConfig,
    pub loss: LossConfig,
    /// Optimizer settings other than the learning rate, plus training-time input sampling.
    pub train: TrainOptions,
    pub refiner: RefinerConfig,
    pub icp: IcpConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub seed: u64,
    /// Main-network epochs.
    pub epochs: usize,
    /// Refiner epochs once the gate opens.
    pub refiner_epochs: usize,
    pub lr: f64,
    /// Main-network learning rate is `lr * lr_decay^epoch`.
    pub lr_decay: f64,
    pub refiner_lr: f64,
    /// Scenes per optimizer step.
    pub batch_size: usize,
    /// Model points ICP aligns against.
    pub icp_model_points: usize,
    /// Corrupt evaluation masks with `(dilation_px, leak_fraction)`.
    pub eval_mask_corruption: Option<(usize, f64)>,
    pub overlays: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            dataset: DatasetSpec::default(),
            network: NetworkConfig::default(),
            loss: LossConfig::default(),
            train: TrainOptions::default(),
            refiner: RefinerConfig::default(),
            icp: IcpConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            seed: 7,
            epochs: 20,
            refiner_epochs: 10,
            lr: 1e-3,
            lr_decay: 1.0,
            refiner_lr: 1e-3,
            batch_size: 4,
            icp_model_points: 500,
            eval_mask_corruption: None,
            overlays: true,
        }
    }
}

impl RunConfig {
    /// Small network, rotations within 45 degrees of the model frame and a
    /// relative accuracy threshold, sized for a laptop CPU.
    pub fn toy() -> Self {
        Self {
            dataset: DatasetSpec {
                max_rotation_deg: 45.0,
                ..DatasetSpec::default()
            },
            network: NetworkConfig::toy(),
            // segmentation bleeds one pixel plus a fifth of the next ring
            train: TrainOptions {
                mask_dilation: 1,
                mask_leak: 0.2,
                ..TrainOptions::default()
            },
            lr_decay: 0.95,
            eval: EvalConfig {
                threshold: 0.1,
                relative_threshold: true,
                ..EvalConfig::default()
            },
            eval_mask_corruption: Some((1, 0.2)),
            ..Self::default()
        }
    }

    /// Reads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.dataset, &mut cfg.paths.checkpoints, &mut cfg.paths.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Replaces every seed in the config with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.seed = seed;
        self.network.seed = seed;
        self.refiner.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.network.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(HarnessError::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.refiner_lr > 0.0) {
            return Err(HarnessError::Config("learning rates must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(HarnessError::Config("lr_decay must be in (0, 1]".into()));
        }
        if self.refiner.d_glob == 0 || self.refiner.d_geo == 0 || self.refiner.hidden.contains(&0) {
            return Err(HarnessError::Config("refiner widths must be positive".into()));
        }
        Ok(())
    }

    /// Training options with the learning rate of main epoch `epoch`.
    pub fn train_options(&self, epoch: usize) -> TrainOptions {
        let mut t = self.train.clone();
        t.adam.lr = self.lr * self.lr_decay.powi(epoch as i32);
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"paths": {"dataset": "d", "reports": "/abs/r"}, "epochs": 3}"#).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.dataset, dir.path().join("d"));
        assert_eq!(cfg.paths.reports, PathBuf::from("/abs/r"));
        assert_eq!(cfg.paths.checkpoints, dir.path().join("checkpoints"));
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.refiner.iterations, 2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"epoch": 3}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(HarnessError::Config(_))));
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::toy().with_seed(11);
        let back: RunConfig = serde_json::from_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.network.seed, 11);
    }

    #[test]
    fn shipped_preset_is_the_toy_config() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.json");
        let mut cfg = RunConfig::load(&path).unwrap();
        cfg.paths = RunConfig::toy().paths;
        assert_eq!(cfg, RunConfig::toy());
    }
}

//! Run configuration: a TOML file mirroring the library config structs.
//! Every key has a default; unknown keys are rejected before any work starts.

use neurosleep::encoder::{EncoderConfig, SigmaFloor};
use neurosleep::network::{ModelConfig, Pooling};
use neurosleep::operating_point::{FidelityThresholds, SweepGrid};
use neurosleep::training::TrainConfig;
use neurosleep::{Error, Result};
use serde::Deserialize;
use std::path::Path;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderSection,
    pub thresholds: ThresholdSection,
    pub grid: GridSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub preprocess: PreprocessSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub k_slow: f64,
    pub k_fast: f64,
    pub sigma_window: usize,
    /// Sigma floor as a fraction of the recording's global std.
    pub sigma_floor: f64,
    /// When set, overrides `sigma_floor` with a fixed value in signal units.
    pub sigma_floor_absolute: Option<f64>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        EncoderSection {
            k_slow: d.k_slow,
            k_fast: d.k_fast,
            sigma_window: d.sigma_window,
            sigma_floor: 1e-3,
            sigma_floor_absolute: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSection {
    pub snr_db: f64,
    pub nmse: f64,
    pub corr: f64,
}

impl Default for ThresholdSection {
    fn default() -> Self {
        let d = FidelityThresholds::default();
        ThresholdSection {
            snr_db: d.tau_snr,
            nmse: d.tau_nmse,
            corr: d.tau_corr,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub k_values: Vec<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            k_values: SweepGrid::default().k_values,
        }
    }
}

/// Optional overrides applied on top of the selected profile.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub t_b: Option<usize>,
    pub window_radius: Option<usize>,
    pub lambda: Option<f64>,
    pub fire_threshold: Option<f64>,
    /// "attention" (default) or "mean".
    pub pooling: Option<String>,
    pub gate_bypass: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    pub val_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr: d.lr,
            weight_decay: d.weight_decay,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            patience: d.patience,
            folds: 5,
            val_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub enabled: bool,
    pub low_hz: f64,
    pub high_hz: f64,
    pub target_fs: f64,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            enabled: true,
            low_hz: 0.5,
            high_hz: 35.0,
            target_fs: 100.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::format(format!("cannot read config {}: {e}", p.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::format(format!("config {}: {e}", p.display())))
            }
        }
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            k_slow: self.encoder.k_slow,
            k_fast: self.encoder.k_fast,
            sigma_window: self.encoder.sigma_window,
            sigma_floor: match self.encoder.sigma_floor_absolute {
                Some(v) => SigmaFloor::Absolute(v),
                None => SigmaFloor::RelativeToGlobalStd(self.encoder.sigma_floor),
            },
            ..EncoderConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fidelity_thresholds(&self) -> Result<FidelityThresholds> {
        let thr = FidelityThresholds {
            tau_snr: self.thresholds.snr_db,
            tau_nmse: self.thresholds.nmse,
            tau_corr: self.thresholds.corr,
        };
        thr.validate()?;
        Ok(thr)
    }

    pub fn sweep_grid(&self) -> Result<SweepGrid> {
        let grid = SweepGrid {
            k_values: self.grid.k_values.clone(),
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Profile base config with the `[model]` overrides and ablation flags
    /// applied.
    pub fn model_config(
        &self,
        profile: &str,
        dense_input: bool,
        single_branch: bool,
        no_elif: bool,
    ) -> Result<ModelConfig> {
        let mut cfg = match profile {
            "desk" => ModelConfig::desk(),
            "paper_scale" => ModelConfig::paper_scale(),
            other => {
                return Err(Error::parameter(format!(
                    "unknown profile '{other}', expected desk or paper_scale"
                )))
            }
        };
        if let Some(v) = self.model.t_b {
            cfg.t_b = v;
        }
        if let Some(v) = self.model.window_radius {
            cfg.window_radius = v;
        }
        if let Some(v) = self.model.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.model.fire_threshold {
            cfg.fire_threshold = v;
        }
        if let Some(ref p) = self.model.pooling {
            cfg.pooling = match p.as_str() {
                "attention" => Pooling::Attention,
                "mean" => Pooling::Mean,
                other => {
                    return Err(Error::parameter(format!(
                        "unknown pooling '{other}', expected attention or mean"
                    )))
                }
            };
        }
        if let Some(v) = self.model.gate_bypass {
            cfg.gate_bypass = v;
        }
        cfg.dense_input = dense_input;
        cfg.single_branch = single_branch;
        cfg.no_elif = no_elif;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let tc = TrainConfig {
            lr: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed,
            class_weights: None,
        };
        tc.validate()?;
        Ok(tc)
    }
}

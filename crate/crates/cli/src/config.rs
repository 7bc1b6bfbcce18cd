//! Run configuration: built-in defaults, overridden by a JSON file,
//! overridden by command-line flags.

use crate::error::{CliError, Result};
use mtmm_core::data::Dims;
use mtmm_core::metrics::Thresholds;
use mtmm_core::model::{Modalities, ModelConfig, TaskMode};
use mtmm_core::training::{AdamConfig, TrainOptions};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const OUT_DIR_ENV: &str = "MTMM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "mtmm-out";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: TaskMode,
    pub modalities: Modalities,
    pub d: usize,
    pub dense_units: usize,
    pub dropout_rate: f64,
    pub loss_weight_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
    pub thresholds: Thresholds,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::new(Dims::new(0, 0, 0));
        let opts = TrainOptions::default();
        Self {
            mode: model.mode,
            modalities: model.modalities,
            d: model.d,
            dense_units: model.dense_units,
            dropout_rate: model.dropout_rate,
            loss_weight_lambda: model.loss_weight_lambda,
            epochs: opts.epochs,
            batch_size: opts.batch_size,
            learning_rate: opts.adam.lr,
            clip_grad_norm: opts.clip_grad_norm,
            seed: opts.seed,
            thresholds: opts.thresholds,
            train: None,
            dev: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    /// Defaults, then `file` if given.
    pub fn base(file: Option<&Path>) -> Result<Self> {
        match file {
            Some(p) => Self::from_file(p),
            None => Ok(Self::default()),
        }
    }

    pub fn model_config(&self, dims: Dims) -> Result<ModelConfig> {
        let c = ModelConfig {
            d: self.d,
            dense_units: self.dense_units,
            dropout_rate: self.dropout_rate,
            mode: self.mode,
            modalities: self.modalities,
            loss_weight_lambda: self.loss_weight_lambda,
            ..ModelConfig::new(dims)
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            adam: AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            },
            clip_grad_norm: self.clip_grad_norm,
            thresholds: self.thresholds,
        }
    }

    /// Checks the fields that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Data(format!("invalid config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("clip_grad_norm {c} must be positive"));
            }
        }
        check_thresholds(self.thresholds)?;
        self.model_config(Dims::new(1, 1, 1)).map(|_| ())
    }

    /// Flag, then config file, then `$MTMM_OUT_DIR`, then `mtmm-out`.
    pub fn resolve_out_dir(&mut self, flag: Option<PathBuf>) -> PathBuf {
        let dir = flag
            .or_else(|| self.out_dir.clone())
            .or_else(default_out_dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
        self.out_dir = Some(dir.clone());
        dir
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

pub fn default_out_dir() -> Option<PathBuf> {
    std::env::var_os(OUT_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

pub fn check_thresholds(t: Thresholds) -> Result<()> {
    for v in [t.f1, t.wacc] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CliError::Usage(format!("threshold {v} outside [0, 1]")));
        }
    }
    Ok(())
}

/// Parses `"<f1>,<wacc>"`, e.g. `0.4,0.2`.
pub fn parse_thresholds(s: &str) -> std::result::Result<Thresholds, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [f1, wacc] = parts.as_slice() else {
        return Err(format!(
            "expected two comma-separated thresholds, got {s:?}"
        ));
    };
    let num = |p: &str| p.parse::<f64>().map_err(|e| format!("{p:?}: {e}"));
    Ok(Thresholds {
        f1: num(f1)?,
        wacc: num(wacc)?,
    })
}

/// Parses `"<text>,<acoustic>,<visual>"` feature sizes.
pub fn parse_dims(s: &str) -> std::result::Result<Dims, String> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    match parts.as_slice() {
        &[t, a, v] if t > 0 && a > 0 && v > 0 => Ok(Dims::new(t, a, v)),
        _ => Err(format!("expected three positive sizes, got {s:?}")),
    }
}

//! Flat TOML run configuration covering every model and training field.

use std::path::{Path, PathBuf};

use memto::model::ModelConfig;
use memto::train::{LossMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One flat document: model fields, training fields, data paths and outputs.
/// Missing keys take the documented defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train_data: Option<PathBuf>,
    pub test_data: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Whether data files start with a header row.
    pub header: bool,
    /// Named benchmark whose threshold ratio seeds `p_percent`.
    pub dataset: Option<String>,
    pub p_percent: Option<f64>,

    pub window_len: usize,
    /// Inferred from the training data when unset.
    pub channels: Option<usize>,
    pub latent_dim: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub dec_layers: usize,
    pub memory_items: usize,
    pub tau: f64,
    pub dropout: f64,

    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub kmeans_sample_frac: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub train_ratio: f64,
    pub loss_mode: LossMode,
    pub skip_kmeans: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            train_data: None,
            test_data: None,
            out_dir: PathBuf::from("run"),
            header: false,
            dataset: None,
            p_percent: None,
            window_len: m.window_len,
            channels: None,
            latent_dim: m.latent_dim,
            enc_layers: m.enc_layers,
            enc_heads: m.enc_heads,
            dec_layers: m.dec_layers,
            memory_items: m.memory_items,
            tau: m.tau,
            dropout: m.dropout,
            lambda: t.lambda,
            lr: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            kmeans_sample_frac: t.kmeans_sample_frac,
            kmeans_iters: t.kmeans_iters,
            kmeans_tol: t.kmeans_tol,
            seed: t.seed,
            train_ratio: t.train_ratio,
            loss_mode: t.loss_mode,
            skip_kmeans: t.skip_kmeans,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        // data paths in a config file are relative to that file
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_data, &mut cfg.test_data]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Threshold ratio: explicit `p_percent`, else the dataset preset, else 1.
    pub fn resolved_p(&self) -> Result<f64, CliError> {
        if let Some(p) = self.p_percent {
            return Ok(p);
        }
        match &self.dataset {
            Some(name) => memto::presets::dataset_p(name)
                .ok_or_else(|| CliError::Usage(format!("unknown dataset preset {name:?}"))),
            None => Ok(1.0),
        }
    }

    pub fn model_config(&self, channels: usize) -> ModelConfig {
        ModelConfig {
            window_len: self.window_len,
            channels: self.channels.unwrap_or(channels),
            latent_dim: self.latent_dim,
            enc_layers: self.enc_layers,
            enc_heads: self.enc_heads,
            dec_layers: self.dec_layers,
            memory_items: self.memory_items,
            tau: self.tau,
            dropout: self.dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            kmeans_sample_frac: self.kmeans_sample_frac,
            kmeans_iters: self.kmeans_iters,
            kmeans_tol: self.kmeans_tol,
            seed: self.seed,
            train_ratio: self.train_ratio,
            loss_mode: self.loss_mode,
            skip_kmeans: self.skip_kmeans,
        }
    }
}

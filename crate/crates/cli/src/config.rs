//! Run configuration: a flat JSON file with strict key checking. Flags
//! override file values; file values override defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hfmf_core::backbones::{CnnConfig, SepConvConfig, VitConfig};
use hfmf_core::fusion::M1Config;
use hfmf_core::pipeline::TrainConfig;
use hfmf_core::streams::{M2Config, StreamSelection};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    // optimization
    pub seed: u64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    // model dimensions
    /// Token width shared by the transformer and the fusion stages.
    pub d: usize,
    /// Global-stream embedding width.
    pub d_x: usize,
    /// Region-stream embedding width.
    pub d_r: usize,
    /// Edge-stream embedding width.
    pub d_s: usize,
    /// Patch side length.
    pub p: usize,
    /// Stage widths shared by both conv pyramids.
    pub channels: [usize; 3],
    // calibration
    pub n_bins: usize,
    // paths
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            seed: t.seed,
            max_epochs: t.max_epochs,
            early_stop_patience: t.early_stop_patience,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            train_fraction: t.train_fraction,
            val_fraction: t.val_fraction,
            test_fraction: t.test_fraction,
            d: 64,
            d_x: 64,
            d_r: 64,
            d_s: 64,
            p: 8,
            channels: [16, 32, 64],
            n_bins: 15,
            data_dir: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&raw)
            .map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train_config().validate().map_err(|e| e.to_string())?;
        let dims = [
            ("d", self.d),
            ("d_x", self.d_x),
            ("d_r", self.d_r),
            ("d_s", self.d_s),
            ("p", self.p),
            ("n_bins", self.n_bins),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(format!("{name} must be >= 1"));
            }
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err("channels must all be >= 1".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            max_epochs: self.max_epochs,
            early_stop_patience: self.early_stop_patience,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            test_fraction: self.test_fraction,
        }
    }

    pub fn m1_config(&self, input_size: usize) -> M1Config {
        M1Config {
            vit: VitConfig { input_size, patch: self.p, dim: self.d, blocks: 2 },
            cnn: CnnConfig { input_size, channels: self.channels },
            head_hidden: 32,
        }
    }

    pub fn m2_config(&self, input_size: usize) -> M2Config {
        M2Config {
            input_size,
            region_input: (input_size / 2).max(1),
            context_k: 3,
            region_dim: self.d_r,
            sobel_dim: self.d_s,
            head_hidden: 32,
            sepconv: SepConvConfig { input_size, channels: self.channels, embed_dim: self.d_x },
            streams: StreamSelection::ALL,
        }
    }
}

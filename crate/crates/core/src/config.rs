//! Model, training and run configuration, with the `toy` and `full` presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatio-temporal patch extent `(frames, rows, cols)` of the patch embedding.
pub const PATCH_SIZE: [usize; 3] = [2, 4, 4];

/// Short-term memory backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StmmConfig {
    /// Frames per input clip.
    pub nf: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Channel width `C` after the patch projection.
    pub embed_dim: usize,
    /// Blocks per stage. Every stage but the last ends with a patch merge.
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Attention window `(frames, rows, cols)` in tokens.
    pub window: [usize; 3],
    pub mlp_ratio: usize,
    pub relative_position_bias: bool,
    pub patch_norm: bool,
    /// Per-channel standardization applied to `[0, 1]` RGB input.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl StmmConfig {
    pub fn toy() -> Self {
        Self {
            nf: 3,
            input_h: 16,
            input_w: 16,
            embed_dim: 32,
            depths: vec![2],
            num_heads: vec![2],
            window: [2, 2, 2],
            mlp_ratio: 4,
            relative_position_bias: true,
            patch_norm: true,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
        }
    }

    /// Swin-B layout at 320x240 input.
    pub fn full() -> Self {
        Self {
            nf: 3,
            input_h: 240,
            input_w: 320,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            window: [2, 7, 7],
            mlp_ratio: 4,
            relative_position_bias: true,
            patch_norm: true,
            pixel_mean: IMAGENET_MEAN,
            pixel_std: IMAGENET_STD,
        }
    }

    /// Frames after front padding to a multiple of the temporal patch size.
    pub fn padded_frames(&self) -> usize {
        self.nf.div_ceil(PATCH_SIZE[0]) * PATCH_SIZE[0]
    }

    /// Token grid `(T', H', W')` produced by the patch embedding.
    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.padded_frames() / PATCH_SIZE[0],
            self.input_h / PATCH_SIZE[1],
            self.input_w / PATCH_SIZE[2],
        ]
    }

    /// Channel width at the output of the last stage.
    pub fn feature_dim(&self) -> usize {
        self.embed_dim << self.depths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.nf == 0 {
            return bad("nf must be at least 1".into());
        }
        if self.input_h == 0 || self.input_w == 0 {
            return bad("input size must be positive".into());
        }
        if !self.input_h.is_multiple_of(PATCH_SIZE[1]) || !self.input_w.is_multiple_of(PATCH_SIZE[2]) {
            return bad(format!(
                "input {}x{} is not divisible by the {}x{} patch",
                self.input_h, self.input_w, PATCH_SIZE[1], PATCH_SIZE[2]
            ));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be positive".into());
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return bad("depths and num_heads must be non-empty and of equal length".into());
        }
        for (stage, &heads) in self.num_heads.iter().enumerate() {
            let width = self.embed_dim << stage;
            if heads == 0 || !width.is_multiple_of(heads) {
                return bad(format!("stage {stage}: {heads} heads do not divide width {width}"));
            }
        }
        if self.window.contains(&0) {
            return bad("window dimensions must be at least 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive".into());
        }
        if self.pixel_std.iter().any(|&s| !(s > 0.0)) || self.pixel_mean.iter().any(|m| !m.is_finite()) {
            return bad("pixel standardization constants must be finite with positive std".into());
        }
        Ok(())
    }
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Classifier head with the long-term memory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub input_dim: usize,
    /// Stacked LSTM cells; 0 removes the recurrent memory entirely.
    pub lstm_cells: usize,
    pub lstm_width: usize,
    pub dropout: f64,
    pub num_classes: usize,
}

impl HeadConfig {
    pub fn toy() -> Self {
        Self {
            input_dim: StmmConfig::toy().feature_dim(),
            lstm_cells: 2,
            lstm_width: 32,
            dropout: 0.1,
            num_classes: 2,
        }
    }

    pub fn full() -> Self {
        Self {
            input_dim: 1024,
            lstm_cells: 2,
            lstm_width: 1024,
            dropout: 0.3,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.input_dim == 0 || self.lstm_width == 0 {
            return bad("head widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.num_classes != 2 {
            return bad("the head is a binary normal/anomaly classifier (num_classes = 2)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub stmm: StmmConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            stmm: StmmConfig::toy(),
            head: HeadConfig::toy(),
        }
    }

    pub fn full() -> Self {
        Self {
            stmm: StmmConfig::full(),
            head: HeadConfig::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stmm.validate()?;
        self.head.validate()?;
        if self.head.input_dim != self.stmm.feature_dim() {
            return Err(Error::Config(format!(
                "head input_dim {} does not match backbone feature width {}",
                self.head.input_dim,
                self.stmm.feature_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Consecutive frames per video in each batch row.
    pub vcl: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to roughly one pass over the frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// `(w_normal, w_anomaly)`; derived from training label counts when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_weights: Option<[f64; 2]>,
    /// Carry the (detached) recurrent state from one step's rows into the next.
    #[serde(default)]
    pub carry_state: bool,
}

impl TrainConfig {
    pub fn toy() -> Self {
        Self {
            batch_size: 8,
            vcl: 8,
            learning_rate: 0.1,
            momentum: 0.9,
            epochs: 20,
            steps_per_epoch: Some(25),
            seed: 0,
            class_weights: None,
            carry_state: false,
        }
    }

    pub fn full() -> Self {
        Self {
            batch_size: 8,
            vcl: 8,
            learning_rate: 0.0001,
            momentum: 0.9,
            epochs: 500,
            steps_per_epoch: None,
            seed: 0,
            class_weights: Some([0.3, 0.7]),
            carry_state: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.vcl == 0 {
            return bad("batch_size and vcl must be at least 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1");
        }
        // TOML integers are signed 64-bit
        if self.seed > i64::MAX as u64 {
            return bad("seed must not exceed 9223372036854775807");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return bad("class weights must be positive");
            }
        }
        Ok(())
    }

    /// Class weights rescaled to sum to one.
    pub fn normalized_weights(&self) -> Option<[f64; 2]> {
        self.class_weights.map(|[n, a]| [n / (n + a), a / (n + a)])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
}

/// Everything needed to reproduce a run. Model fields live only in `model`,
/// so there is a single source for `nf`, widths and cell counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataPaths,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            train: TrainConfig::toy(),
            data: DataPaths::default(),
        }
    }

    pub fn full() -> Self {
        Self {
            model: ModelConfig::full(),
            train: TrainConfig::full(),
            data: DataPaths::default(),
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

//! Run configuration: model shapes, simulator geometry, dataset, training,
//! error regression and evaluation settings.
//!
//! Three presets exist: `paper` (the full-size shapes of the published
//! network, used for structural checks), `desk` (default, trainable on a
//! laptop CPU) and `tiny` (smoke runs). Config files are partial overlays on
//! a preset; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::RAdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels of the three image-encoder convolutions; the last
    /// must equal the number of attention points (6).
    pub encoder_channels: Vec<usize>,
    /// Output channels of the three convolutions in each attention-point
    /// encoder; the last is the number of points per encoder (3).
    pub point_channels: Vec<usize>,
    /// Output channels of the first two transposed convolutions; the third
    /// always produces RGB.
    pub decoder_channels: Vec<usize>,
    pub kernel: usize,
    pub joints: usize,
    pub token_width: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    pub ff_width: usize,
    pub lstm_layers: usize,
    pub lstm_hidden: usize,
    pub slv_dim: usize,
    /// Hidden width of the SLV-to-LSTM stacks (2 layers each).
    pub slv_lstm_hidden: usize,
    pub leaky_slope: f32,
    pub softmax_temperature: f32,
    pub learn_temperature: bool,
    pub heatmap_sigma: f32,
    pub norm_eps: f32,
    pub init_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub blocks: usize,
    pub hidden: usize,
    /// Fixed vocabulary size; `None` sizes the head from the corpus vocabulary.
    pub vocab_size: Option<usize>,
    pub ffn_mult: usize,
    pub max_len: usize,
    /// Layers in each SLV-to-block projection stack.
    pub slv_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    /// Freeze is refused while the loss exceeds the corpus entropy floor by
    /// more than this many nats per token.
    pub max_excess_nats: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub cube_size: f32,
    /// Arm base position `(x, z)`, outside the table on the camera's lower edge.
    pub arm_base: [f32; 2],
    pub links: [f32; 3],
    /// Training cell centres along each axis.
    pub train_grid: Vec<f32>,
    /// Test cell centres along each axis (midpoints between training centres).
    pub test_grid: Vec<f32>,
    pub jitter: f32,
    pub min_separation: f32,
    pub lift_height: f32,
    pub roll_distance: f32,
    pub stack_tolerance: f32,
    pub push_distance: f32,
    pub grasp_tolerance: f32,
    pub supersample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeCounts {
    pub lift: usize,
    pub roll: usize,
    pub stack: usize,
}

impl EpisodeCounts {
    pub fn total(&self) -> usize {
        self.lift + self.roll + self.stack
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub episodes: EpisodeCounts,
    pub seed: u64,
    pub noise_sigma: f32,
    /// Probability that a training step swaps the instruction for a random
    /// training-split paraphrase.
    pub paraphrase_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
    pub gamma: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.1, gamma: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub cosine_decay: bool,
    pub weights: LossWeights,
    pub detach_point_targets: bool,
    /// Sequences per optimizer step; 0 means the full set.
    pub batch_size: usize,
    pub grad_clip: Option<f32>,
    pub slv_l2: f32,
    /// Separate learning rate for the SLV table; `None` uses `lr`.
    #[serde(default)]
    pub slv_lr: Option<f64>,
    /// Stop once the epoch loss has not improved by `early_stop_delta` for
    /// this many epochs; 0 disables early stopping.
    pub early_stop_patience: usize,
    pub early_stop_delta: f32,
    pub loss_threshold: f32,
    pub checkpoint_every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErConfig {
    pub iterations: usize,
    pub optimizer: RAdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    /// Rollout timeout as a multiple of the task's demonstration length.
    pub timeout_factor: f32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: String,
    pub model: ModelConfig,
    pub lm: LmConfig,
    pub pretrain: PretrainConfig,
    pub sim: SimConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub er: ErConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Shapes of the published network. Not intended for training on a CPU.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.preset = "paper".into();
        c.model.image_size = 64;
        c.model.encoder_channels = vec![18, 36, 6];
        c.model.point_channels = vec![9, 18, 3];
        c.model.decoder_channels = vec![18, 36];
        c.model.joints = 8;
        c.lm = LmConfig { blocks: 12, hidden: 768, vocab_size: Some(50277), ffn_mult: 4, max_len: 24, slv_layers: 3 };
        c.train.epochs = 5000;
        c
    }

    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelConfig {
                image_size: 24,
                encoder_channels: vec![8, 12, 6],
                point_channels: vec![8, 8, 3],
                decoder_channels: vec![8, 12],
                kernel: 3,
                joints: 5,
                token_width: 20,
                attn_layers: 4,
                attn_heads: 4,
                ff_width: 80,
                lstm_layers: 3,
                lstm_hidden: 100,
                slv_dim: 5,
                slv_lstm_hidden: 100,
                leaky_slope: 0.01,
                softmax_temperature: 1.0,
                learn_temperature: false,
                heatmap_sigma: 0.1,
                norm_eps: 1e-5,
                init_seed: 1,
            },
            lm: LmConfig { blocks: 4, hidden: 64, vocab_size: None, ffn_mult: 4, max_len: 24, slv_layers: 3 },
            pretrain: PretrainConfig { epochs: 300, lr: 3e-3, batch: 32, max_excess_nats: 0.1, seed: 2 },
            sim: SimConfig {
                cube_size: 0.28,
                arm_base: [0.0, 1.35],
                links: [1.2, 1.1, 0.2],
                train_grid: vec![-0.45, 0.0, 0.45],
                test_grid: vec![-0.225, 0.225],
                jitter: 0.05,
                min_separation: 0.4,
                lift_height: 0.25,
                roll_distance: 0.2,
                stack_tolerance: 0.1,
                push_distance: 0.35,
                grasp_tolerance: 0.12,
                supersample: 4,
            },
            data: DataConfig {
                episodes: EpisodeCounts { lift: 10, roll: 10, stack: 20 },
                seed: 7,
                noise_sigma: 0.02,
                paraphrase_rate: 1.0,
            },
            train: TrainConfig {
                epochs: 600,
                lr: 1e-3,
                cosine_decay: true,
                weights: LossWeights::default(),
                detach_point_targets: true,
                batch_size: 8,
                grad_clip: Some(1.0),
                slv_l2: 0.0,
                slv_lr: Some(1e-2),
                early_stop_patience: 0,
                early_stop_delta: 1e-5,
                loss_threshold: 0.0,
                checkpoint_every: 100,
                seed: 3,
            },
            er: ErConfig { iterations: 10, optimizer: RAdamConfig::with_lr(0.05) },
            eval: EvalConfig { trials: 20, timeout_factor: 3.0, seed: 11 },
        }
    }

    /// Smoke-test scale: 16-pixel images, two demonstrations per task.
    pub fn tiny() -> Self {
        let mut c = Self::desk();
        c.preset = "tiny".into();
        c.model.image_size = 16;
        c.model.encoder_channels = vec![4, 6, 6];
        c.model.point_channels = vec![4, 4, 3];
        c.model.decoder_channels = vec![4, 6];
        c.model.lstm_hidden = 32;
        c.model.slv_lstm_hidden = 32;
        c.lm = LmConfig { blocks: 2, hidden: 32, vocab_size: None, ffn_mult: 4, max_len: 24, slv_layers: 3 };
        c.pretrain.epochs = 60;
        c.pretrain.max_excess_nats = 5.0;
        c.data.episodes = EpisodeCounts { lift: 2, roll: 2, stack: 2 };
        c.train.epochs = 50;
        c.train.early_stop_patience = 0;
        c.train.checkpoint_every = 25;
        c.eval.trials = 2;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper, desk or tiny)"))),
        }
    }

    /// Applies a partial TOML or JSON overlay (chosen by file extension) on
    /// top of the preset it names, or `desk` when it names none.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let overlay: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?,
        };
        Self::from_overlay(overlay)
    }

    pub fn from_overlay(overlay: serde_json::Value) -> Result<Self> {
        let preset = overlay.get("preset").and_then(|p| p.as_str()).unwrap_or("desk");
        let mut base = serde_json::to_value(Self::preset(preset)?)?;
        merge(&mut base, overlay);
        let config: Config = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(Error::Config(msg));
        if m.encoder_channels.len() != 3 || m.point_channels.len() != 3 || m.decoder_channels.len() != 2 {
            return bad("encoder and point stacks need 3 layers, the decoder 2 hidden layers".into());
        }
        if m.point_channels[2] != 3 || m.encoder_channels[2] != 6 {
            return bad("each point encoder yields 3 points and the feature map must have 6 channels".into());
        }
        if m.image_size < 3 * (m.kernel - 1) + 2 {
            return bad(format!("image size {} too small for three {}x{} convolutions", m.image_size, m.kernel, m.kernel));
        }
        if m.token_width % m.attn_heads != 0 {
            return bad(format!("token width {} not divisible by {} heads", m.token_width, m.attn_heads));
        }
        if self.er.iterations == 0 {
            return bad("error regression needs at least one iteration".into());
        }
        if m.slv_dim == 0 || m.lstm_layers == 0 || self.lm.blocks == 0 {
            return bad("slv_dim, lstm_layers and lm.blocks must be positive".into());
        }
        if self.sim.train_grid.iter().any(|a| self.sim.test_grid.iter().any(|b| (a - b).abs() < 2.0 * self.sim.jitter)) {
            return bad("training and test grids overlap".into());
        }
        if !(0.0..=1.0).contains(&self.data.paraphrase_rate) {
            return bad(format!("data.paraphrase_rate = {} is not a probability", self.data.paraphrase_rate));
        }
        Ok(())
    }

    /// Spatial size of the encoder feature map.
    pub fn feature_size(&self) -> usize {
        self.model.image_size - 3 * (self.model.kernel - 1)
    }
}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

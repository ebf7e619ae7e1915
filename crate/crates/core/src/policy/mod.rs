//! Chunked CVAE-transformer policy with three action heads, its composite
//! training objective, training loop and checkpoints.

mod checkpoint;
pub mod diagnostics;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_loss_log, save_checkpoint, LossRow, CONFIG_FILE, LOSS_LOG_FILE, STATS_FILE, WEIGHTS_FILE};
pub use model::{gripper_branch_prefixes, Batch, ForwardOut, LatentMode, Policy, PolicyInput, PredictionBundle};
pub use train::{
    batch_from_samples, count_parameters, evaluate_loss, measure_inference_ms, train, train_on_records,
    TrainReport,
};

use crate::dataset::{DatasetError, PoseSource};
use crate::sim::CameraLabel;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown variant {0:?} (expected act, epact-l or epact-ee)")]
    UnknownVariant(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Weights(#[from] berrypick_nn::NnError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "act")]
    Act,
    #[serde(rename = "epact_l")]
    EpactL,
    #[serde(rename = "epact_ee")]
    EpactEe,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Act, Variant::EpactL, Variant::EpactEe];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Act => "act",
            Variant::EpactL => "epact_l",
            Variant::EpactEe => "epact_ee",
        }
    }

    /// Display name used in reports.
    pub fn display(self) -> &'static str {
        match self {
            Variant::Act => "ACT",
            Variant::EpactL => "EPACT-L",
            Variant::EpactEe => "EPACT-EE",
        }
    }

    pub fn predicts_end_pose(self) -> bool {
        !matches!(self, Variant::Act)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "act" => Ok(Variant::Act),
            "epact_l" => Ok(Variant::EpactL),
            "epact_ee" => Ok(Variant::EpactEe),
            _ => Err(PolicyError::UnknownVariant(s.to_string())),
        }
    }
}

/// How EPACT-L combines the predicted end pose with the hidden state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Concat,
    Add,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub variant: Variant,
    pub cameras: Vec<CameraLabel>,
    /// Chunk length `k`.
    pub chunk: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub cvae_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Output channels of the stride-2 convolution blocks.
    pub backbone: Vec<usize>,
    pub image_width: usize,
    pub image_height: usize,
    /// KL weight.
    pub beta: f64,
    /// End-pose loss weight.
    pub gamma: f64,
    pub lr: f64,
    /// Cosine decay of the learning rate to `lr * lr_floor` over `steps`;
    /// `None` keeps it constant.
    #[serde(default)]
    pub lr_floor: Option<f64>,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fusion: Fusion,
    /// Blocks the action loss from reaching the end-pose head (EPACT-L).
    pub stop_grad: bool,
    pub ik_hidden: usize,
    pub head_hidden: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub log_every: usize,
    pub val_episodes: usize,
    pub pose_source: PoseSource,
}

impl Default for PolicyConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        PolicyConfig {
            variant: Variant::EpactEe,
            cameras: CameraLabel::ALL.to_vec(),
            chunk: 50,
            latent_dim: 32,
            width: 128,
            enc_layers: 2,
            dec_layers: 2,
            cvae_layers: 2,
            heads: 4,
            ff_dim: 256,
            backbone: vec![16, 32, 64, 64],
            image_width: 96,
            image_height: 96,
            beta: 10.0,
            gamma: 1.0,
            lr: 1e-4,
            lr_floor: None,
            weight_decay: 1e-4,
            steps: 20_000,
            batch_size: 8,
            seed: 0,
            fusion: Fusion::Concat,
            stop_grad: false,
            ik_hidden: 128,
            head_hidden: 128,
            grad_clip: 10.0,
            log_every: 100,
            val_episodes: 6,
            pose_source: PoseSource::Action,
        }
    }
}

impl PolicyConfig {
    /// Learning rate used for update `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_floor {
            None => self.lr,
            Some(floor) => {
                let progress = (step.saturating_sub(1)) as f64 / self.steps.max(1) as f64;
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.lr * (floor + (1.0 - floor) * cos)
            }
        }
    }

    /// Miniature configuration for finite-difference checks.
    pub fn miniature(variant: Variant) -> Self {
        PolicyConfig {
            variant,
            chunk: 4,
            latent_dim: 4,
            width: 16,
            enc_layers: 1,
            dec_layers: 1,
            cvae_layers: 1,
            heads: 2,
            ff_dim: 16,
            backbone: vec![4, 8],
            image_width: 8,
            image_height: 8,
            ik_hidden: 8,
            head_hidden: 8,
            batch_size: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.to_string()));
        if self.chunk == 0 {
            return bad("chunk must be at least 1");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return bad("beta and gamma must be non-negative");
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required");
        }
        let mut sorted = self.cameras.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.cameras {
            return bad("cameras must be sorted and unique");
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.backbone.is_empty() || self.backbone.contains(&0) {
            return bad("backbone needs at least one non-empty block");
        }
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image size must be nonzero");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.lr_floor.is_some_and(|f| !(0.0..=1.0).contains(&f)) {
            return bad("lr_floor must lie in [0, 1]");
        }
        Ok(())
    }

    /// Spatial tokens produced per camera.
    pub fn tokens_per_camera(&self) -> usize {
        let (mut h, mut w) = (self.image_height, self.image_width);
        for _ in &self.backbone {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        h * w
    }
}

/// Terms of the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_action: f64,
    pub reg: f64,
    pub rec_end_pose: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `rec_action + beta * reg + gamma * rec_end_pose`.
    pub fn combine(rec_action: f64, reg: f64, rec_end_pose: f64, beta: f64, gamma: f64) -> Self {
        LossBreakdown { rec_action, reg, rec_end_pose, total: rec_action + beta * reg + gamma * rec_end_pose }
    }

    pub fn is_finite(&self) -> bool {
        self.rec_action.is_finite() && self.reg.is_finite() && self.rec_end_pose.is_finite() && self.total.is_finite()
    }
}

//! Closed-loop policy execution with temporal ensembling, open-loop replay
//! and predicted-trajectory overlays.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::time::Instant;

use berrypick_nn::Real;
use serde::{Deserialize, Serialize};

use crate::dataset::{EpisodeMeta, EpisodeRecord, Source, FORMAT_VERSION};
use crate::image::{Image, ImageError};
use crate::policy::{Policy, PolicyError, PolicyInput};
use crate::scara::{forward_kinematics, Action, JointState, ScaraParams};
use crate::sim::render::draw_thick_line;
use crate::sim::{project_point, CameraModel, Observation, Outcome, SimEnv, SimError, V3};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("ensemble buffer holds no chunk covering step {0}")]
    EmptyBuffer(usize),
    #[error("chunk born at step {birth} does not cover step {t}")]
    StaleChunk { birth: usize, t: usize },
    #[error("policy camera {0} is not rendered by the environment")]
    MissingCamera(String),
    #[error("step {step}: {source}")]
    Policy {
        step: usize,
        #[source]
        source: PolicyError,
    },
    #[error("step {step}: {source}")]
    Sim {
        step: usize,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Retained chunk predictions, oldest first.
#[derive(Clone, Debug)]
pub struct EnsembleBuffer {
    entries: VecDeque<(usize, Vec<[f64; 5]>)>,
    m: f64,
    capacity: usize,
    enabled: bool,
}

impl EnsembleBuffer {
    /// Weights `exp(-m * j)` with `j = 0` the oldest retained chunk.
    pub fn new(m: f64, capacity: usize) -> Self {
        EnsembleBuffer { entries: VecDeque::new(), m, capacity: capacity.max(1), enabled: true }
    }

    /// Emits the newest chunk's step-`t` action and retains nothing.
    pub fn disabled() -> Self {
        EnsembleBuffer { entries: VecDeque::new(), m: 0.0, capacity: 1, enabled: false }
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `(birth step, chunk)` pairs, oldest first.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &[[f64; 5]])> {
        self.entries.iter().map(|(b, c)| (*b, c.as_slice()))
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Inserts `chunk` born at `t` and returns the weighted action for `t`.
    pub fn step(&mut self, chunk: Vec<[f64; 5]>, t: usize) -> Result<[f64; 5], RuntimeError> {
        if chunk.is_empty() {
            return Err(RuntimeError::StaleChunk { birth: t, t });
        }
        if !self.enabled {
            return Ok(chunk[0]);
        }
        self.entries.push_back((t, chunk));
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
        let mut acc = [0.0; 5];
        let mut wsum = 0.0;
        let mut j = 0;
        for (birth, c) in &self.entries {
            let Some(a) = t.checked_sub(*birth).and_then(|i| c.get(i)) else {
                continue;
            };
            let w = (-self.m * j as f64).exp();
            for (dst, v) in acc.iter_mut().zip(a) {
                *dst += w * v;
            }
            wsum += w;
            j += 1;
        }
        if wsum == 0.0 {
            return Err(RuntimeError::EmptyBuffer(t));
        }
        self.entries.retain(|(birth, c)| birth + c.len() > t + 1);
        Ok(acc.map(|v| v / wsum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub ensemble: bool,
    /// Ensemble decay constant `m`.
    pub decay: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig { ensemble: true, decay: 0.01 }
    }
}

/// One closed-loop episode.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutLog {
    pub state_id: usize,
    pub seed: u64,
    pub record: EpisodeRecord,
    /// Predicted end-pose chunk at every step (FK of the predicted joints
    /// for the baseline).
    pub end_pose_chunks: Vec<Vec<[f64; 6]>>,
    pub latencies_ms: Vec<f64>,
    pub outcome: Option<Outcome>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RolloutSidecar {
    outcome: Option<Outcome>,
    state_id: usize,
    seed: u64,
    ensemble: bool,
    latencies_ms: Vec<f64>,
}

impl RolloutLog {
    pub fn len(&self) -> usize {
        self.record.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.record.actions.is_empty()
    }

    pub fn mean_latency_ms(&self) -> f64 {
        if self.latencies_ms.is_empty() {
            return 0.0;
        }
        self.latencies_ms.iter().sum::<f64>() / self.latencies_ms.len() as f64
    }

    /// Writes the episode into the dataset at `root` plus a `rollout.json`
    /// sidecar inside the episode directory; returns the episode id.
    pub fn save(&self, root: &Path, ensemble: bool) -> Result<u64, RuntimeError> {
        let id = crate::dataset::write_episode(&self.record, root)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let side = RolloutSidecar {
            outcome: self.outcome,
            state_id: self.state_id,
            seed: self.seed,
            ensemble,
            latencies_ms: self.latencies_ms.clone(),
        };
        let json = serde_json::to_string_pretty(&side).map_err(std::io::Error::other)?;
        std::fs::write(crate::dataset::episode_dir(root, id).join("rollout.json"), json)?;
        Ok(id)
    }
}

fn chunk_end_poses<T: Real>(policy: &Policy<T>, pred: &crate::policy::PredictionBundle, arm: &ScaraParams<f64>) -> Vec<[f64; 6]> {
    match &pred.end_poses {
        Some(p) if policy.cfg.variant.predicts_end_pose() => p.clone(),
        _ => pred
            .actions
            .iter()
            .map(|a| forward_kinematics(&JointState::new(a[0], a[1], a[2], a[3]), arm).to_array())
            .collect(),
    }
}

/// Runs `policy` in closed loop from `(state, seed)` until the episode ends.
pub fn run_episode<T: Real>(
    env: &mut SimEnv,
    policy: &Policy<T>,
    cfg: &RolloutConfig,
    state: usize,
    seed: u64,
) -> Result<RolloutLog, RuntimeError> {
    for cam in &policy.cfg.cameras {
        if !env.config().cameras.contains(cam) {
            return Err(RuntimeError::MissingCamera(cam.to_string()));
        }
    }
    let arm = env.config().arm;
    let mut obs = env.reset(state, seed).map_err(|source| RuntimeError::Sim { step: 0, source })?;
    let mut buffer =
        if cfg.ensemble { EnsembleBuffer::new(cfg.decay, policy.cfg.chunk) } else { EnsembleBuffer::disabled() };
    let cams = env.config().cameras.clone();
    let mut images: BTreeMap<_, Vec<u8>> = cams.iter().map(|c| (*c, Vec::new())).collect();
    let (mut qs, mut grips, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    let mut end_pose_chunks = Vec::new();
    let mut latencies_ms = Vec::new();
    while !env.is_terminal() {
        let step = env.t();
        let start = Instant::now();
        let input = PolicyInput::from_observation(&obs, &policy.cfg).map_err(|source| RuntimeError::Policy { step, source })?;
        let pred = policy.predict(&input).map_err(|source| RuntimeError::Policy { step, source })?;
        let a = buffer.step(pred.actions.clone(), step)?;
        let action = Action::from_array(a).clamped(&arm);
        latencies_ms.push(start.elapsed().as_secs_f64() * 1e3);
        end_pose_chunks.push(chunk_end_poses(policy, &pred, &arm));
        for (cam, img) in &obs.images {
            images.get_mut(cam).expect("configured camera").extend_from_slice(img.raw());
        }
        qs.push(obs.q.to_array().map(|v| v as f32));
        grips.push(obs.grip as f32);
        actions.push(action.to_array().map(|v| v as f32));
        obs = env.step(&action).map_err(|source| RuntimeError::Sim { step, source })?.0;
    }
    let outcome = env.episode_outcome().ok();
    let meta = EpisodeMeta {
        format_version: FORMAT_VERSION,
        state_id: state,
        seed,
        source: Source::Policy,
        outcome: outcome.unwrap_or(Outcome::Timeout),
        fps: env.config().fps,
        cameras: cams,
        image_width: env.config().image_width,
        image_height: env.config().image_height,
        num_steps: actions.len(),
        extra: BTreeMap::from([
            ("variant".to_string(), policy.cfg.variant.as_str().to_string()),
            ("ensemble".to_string(), cfg.ensemble.to_string()),
        ]),
    };
    Ok(RolloutLog {
        state_id: state,
        seed,
        record: EpisodeRecord { meta, images, q: qs, grip: grips, actions },
        end_pose_chunks,
        latencies_ms,
        outcome,
    })
}

/// Open-loop comparison against a recorded episode.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenLoopReport {
    /// First action of each predicted chunk, denormalized.
    pub actions: Vec<[f64; 5]>,
    /// RMS distance between the FK positions of predicted and demonstrated
    /// actions, metres.
    pub position_rms: f64,
    pub max_position_error: f64,
}

/// Feeds the recorded observations of `record` to `policy` and compares the
/// first action of every chunk with the recorded action.
pub fn open_loop_replay<T: Real>(
    policy: &Policy<T>,
    record: &EpisodeRecord,
    arm: &ScaraParams<f64>,
) -> Result<OpenLoopReport, RuntimeError> {
    let mut actions = Vec::with_capacity(record.len());
    let (mut sq, mut max) = (0.0, 0.0f64);
    for t in 0..record.len() {
        let mut imgs = BTreeMap::new();
        for cam in &policy.cfg.cameras {
            let img = record.frame(*cam, t).ok_or_else(|| RuntimeError::MissingCamera(cam.to_string()))?;
            imgs.insert(*cam, img);
        }
        let q = JointState::from_array(record.q[t].map(f64::from));
        let obs = Observation { images: imgs, q, grip: record.grip[t] as f64, t };
        let input = PolicyInput::from_observation(&obs, &policy.cfg).map_err(|source| RuntimeError::Policy { step: t, source })?;
        let pred = policy.predict(&input).map_err(|source| RuntimeError::Policy { step: t, source })?;
        let a = Action::from_array(pred.actions[0]).clamped(arm);
        let demo = record.actions[t].map(f64::from);
        let p = forward_kinematics(&a.joints, arm).position();
        let d = forward_kinematics(&JointState::new(demo[0], demo[1], demo[2], demo[3]), arm).position();
        let e2: f64 = p.iter().zip(&d).map(|(x, y)| (x - y) * (x - y)).sum();
        sq += e2;
        max = max.max(e2.sqrt());
        actions.push(a.to_array());
    }
    let n = actions.len().max(1) as f64;
    Ok(OpenLoopReport { actions, position_rms: (sq / n).sqrt(), max_position_error: max })
}

/// Color for chunk index `i` of `n`: yellow at the first step, blue at the last.
pub fn gradient_color(i: usize, n: usize) -> [u8; 3] {
    let s = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    let lerp = |a: f64, b: f64| (a + (b - a) * s).round() as u8;
    [lerp(255.0, 30.0), lerp(230.0, 90.0), lerp(0.0, 255.0)]
}

/// Projected pixels of the predicted positions; `None` marks points behind
/// the camera.
pub fn project_chunk(
    poses: &[[f64; 6]],
    cam: &CameraModel,
    q: &JointState<f64>,
    arm: &ScaraParams<f64>,
) -> Vec<Option<(f64, f64)>> {
    poses.iter().map(|p| project_point(cam, q, arm, V3::new(p[0], p[1], p[2])).pixel()).collect()
}

/// Draws the predicted end-effector path as a color-graded polyline.
pub fn overlay_trajectory(
    image: &Image,
    poses: &[[f64; 6]],
    cam: &CameraModel,
    q: &JointState<f64>,
    arm: &ScaraParams<f64>,
) -> Image {
    let mut out = image.clone();
    let pts = project_chunk(poses, cam, q, arm);
    let n = pts.len();
    for (i, p) in pts.iter().enumerate() {
        let Some(a) = p else { continue };
        let color = gradient_color(i, n);
        match pts.get(i + 1).copied().flatten() {
            Some(b) => draw_thick_line(&mut out, *a, b, 0.5, color),
            None => draw_thick_line(&mut out, *a, *a, 0.5, color),
        }
    }
    out
}

/// Writes one overlay PNG per rollout step for `cam` into `dir`.
pub fn export_overlays(
    log: &RolloutLog,
    cam: &CameraModel,
    arm: &ScaraParams<f64>,
    dir: &Path,
) -> Result<usize, RuntimeError> {
    std::fs::create_dir_all(dir)?;
    let mut written = 0;
    for (t, poses) in log.end_pose_chunks.iter().enumerate() {
        let Some(frame) = log.record.frame(cam.label, t) else { break };
        let q = JointState::from_array(log.record.q[t].map(f64::from));
        overlay_trajectory(&frame, poses, cam, &q, arm).save_png(&dir.join(format!("{}_{t:04}.png", cam.label.short())))?;
        written += 1;
    }
    Ok(written)
}

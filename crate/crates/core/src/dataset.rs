//! Append-only episodic demonstration store, normalization statistics and
//! chunk sampling.
//!
//! Layout: one `episode_NNNNNN/` directory per episode holding `meta.json`
//! and one raw little-endian array per field, each with a JSON sidecar
//! declaring its element type and shape.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::scara::{end_pose_sequence, ScaraParams};
use crate::sim::{CameraLabel, Outcome};

pub const FORMAT_VERSION: u32 = 1;
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("schema violation in {path}: {msg}")]
    SchemaViolation { path: String, msg: String },
    #[error("i/o failure at {path}: {source}")]
    IoFailure { path: String, source: std::io::Error },
    #[error("split {0:?} contains no episodes")]
    EmptySplit(String),
    #[error("index t={t} out of range for episode of {len} steps")]
    BadIndex { t: usize, len: usize },
    #[error("need more than {n_val} episodes for validation, have {have}")]
    TooFewEpisodes { n_val: usize, have: usize },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::IoFailure { path: path.display().to_string(), source }
}

fn schema(path: &Path, msg: impl Into<String>) -> DatasetError {
    DatasetError::SchemaViolation { path: path.display().to_string(), msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Expert,
    Teleop,
    /// Closed-loop policy rollout.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub format_version: u32,
    pub state_id: usize,
    pub seed: u64,
    pub source: Source,
    pub outcome: Outcome,
    pub fps: f64,
    pub cameras: Vec<CameraLabel>,
    pub image_width: usize,
    pub image_height: usize,
    pub num_steps: usize,
    /// Free-form tags, e.g. the expert strategy.
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

/// One demonstration: per-step observations and the commanded actions.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub meta: EpisodeMeta,
    /// Per camera, `T x H x W x 3` bytes.
    pub images: BTreeMap<CameraLabel, Vec<u8>>,
    pub q: Vec<[f32; 4]>,
    pub grip: Vec<f32>,
    pub actions: Vec<[f32; 5]>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    fn frame_bytes(&self) -> usize {
        self.meta.image_width * self.meta.image_height * 3
    }

    pub fn frame(&self, cam: CameraLabel, t: usize) -> Option<Image> {
        let n = self.frame_bytes();
        let buf = self.images.get(&cam)?;
        let bytes = buf.get(t * n..(t + 1) * n)?;
        Image::from_raw(self.meta.image_width, self.meta.image_height, bytes.to_vec()).ok()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let t = self.len();
        let bad = |m: String| Err(DatasetError::InvalidRecord(m));
        if t < 2 {
            return bad(format!("episode has {t} steps, need at least 2"));
        }
        if self.meta.num_steps != t || self.q.len() != t || self.grip.len() != t {
            return bad(format!(
                "length mismatch: meta {} actions {} q {} grip {}",
                self.meta.num_steps,
                t,
                self.q.len(),
                self.grip.len()
            ));
        }
        if !self.actions.iter().flatten().all(|v| v.is_finite()) {
            return bad("actions contain non-finite values".into());
        }
        let cams: Vec<CameraLabel> = self.images.keys().copied().collect();
        if cams != self.meta.cameras {
            return bad(format!("image cameras {:?} differ from meta {:?}", cams, self.meta.cameras));
        }
        for (cam, buf) in &self.images {
            if buf.len() != t * self.frame_bytes() {
                return bad(format!("{cam} image buffer has {} bytes, expected {}", buf.len(), t * self.frame_bytes()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    dtype: String,
    shape: Vec<usize>,
}

pub fn episode_dir(root: &Path, id: u64) -> PathBuf {
    root.join(format!("episode_{id:06}"))
}

/// Sorted ids of every complete episode under `root`.
pub fn list_episodes(root: &Path) -> Result<Vec<u64>, DatasetError> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let name = entry.file_name();
        let Some(num) = name.to_str().and_then(|s| s.strip_prefix("episode_")) else { continue };
        if let Ok(id) = num.parse::<u64>() {
            if entry.path().join("meta.json").is_file() {
                ids.push(id);
            }
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

fn write_array(dir: &Path, name: &str, dtype: &str, shape: Vec<usize>, bytes: &[u8]) -> Result<(), DatasetError> {
    let bin = dir.join(format!("{name}.bin"));
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let side = dir.join(format!("{name}.json"));
    let text = serde_json::to_string(&Sidecar { dtype: dtype.into(), shape }).expect("sidecar serializes");
    fs::write(&side, text).map_err(io_err(&side))
}

fn f32_bytes<const N: usize>(rows: &[[f32; N]]) -> Vec<u8> {
    rows.iter().flatten().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `record` as a new episode and returns its id. The episode is
/// assembled in a temporary directory and renamed into place.
pub fn write_episode(record: &EpisodeRecord, root: &Path) -> Result<u64, DatasetError> {
    record.validate()?;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let id = list_episodes(root)?.last().map_or(0, |l| l + 1);
    let tmp = root.join(format!(".tmp_episode_{id:06}_{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
    let t = record.len();
    let (h, w) = (record.meta.image_height, record.meta.image_width);
    write_array(&tmp, "q", "f32le", vec![t, 4], &f32_bytes(&record.q))?;
    let grip: Vec<[f32; 1]> = record.grip.iter().map(|g| [*g]).collect();
    write_array(&tmp, "grip", "f32le", vec![t, 1], &f32_bytes(&grip))?;
    write_array(&tmp, "actions", "f32le", vec![t, 5], &f32_bytes(&record.actions))?;
    for (cam, buf) in &record.images {
        write_array(&tmp, &format!("images_{cam}"), "u8", vec![t, h, w, 3], buf)?;
    }
    let meta_path = tmp.join("meta.json");
    let meta = serde_json::to_string_pretty(&record.meta).expect("meta serializes");
    fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
    let dest = episode_dir(root, id);
    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    Ok(id)
}

fn read_array(dir: &Path, name: &str, dtype: &str, shape: &[usize]) -> Result<Vec<u8>, DatasetError> {
    let side_path = dir.join(format!("{name}.json"));
    let text = fs::read_to_string(&side_path).map_err(io_err(&side_path))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| schema(&side_path, e.to_string()))?;
    if side.dtype != dtype {
        return Err(schema(&side_path, format!("dtype {} (expected {dtype})", side.dtype)));
    }
    if side.shape != shape {
        return Err(schema(&side_path, format!("shape {:?} (expected {shape:?})", side.shape)));
    }
    let bin = dir.join(format!("{name}.bin"));
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    let elem = if dtype == "u8" { 1 } else { 4 };
    let expected = shape.iter().product::<usize>() * elem;
    if bytes.len() != expected {
        return Err(schema(&bin, format!("{} bytes (expected {expected})", bytes.len())));
    }
    Ok(bytes)
}

fn f32_rows<const N: usize>(bytes: &[u8]) -> Vec<[f32; N]> {
    bytes
        .chunks_exact(4 * N)
        .map(|row| std::array::from_fn(|i| f32::from_le_bytes(row[4 * i..4 * i + 4].try_into().expect("4 bytes"))))
        .collect()
}

pub fn read_episode(root: &Path, id: u64) -> Result<EpisodeRecord, DatasetError> {
    let dir = episode_dir(root, id);
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: EpisodeMeta = serde_json::from_str(&text).map_err(|e| schema(&meta_path, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(schema(&meta_path, format!("unsupported format_version {}", meta.format_version)));
    }
    let t = meta.num_steps;
    let q = f32_rows::<4>(&read_array(&dir, "q", "f32le", &[t, 4])?);
    let grip = f32_rows::<1>(&read_array(&dir, "grip", "f32le", &[t, 1])?).into_iter().map(|g| g[0]).collect();
    let actions = f32_rows::<5>(&read_array(&dir, "actions", "f32le", &[t, 5])?);
    let mut images = BTreeMap::new();
    for cam in &meta.cameras {
        let shape = [t, meta.image_height, meta.image_width, 3];
        images.insert(*cam, read_array(&dir, &format!("images_{cam}"), "u8", &shape)?);
    }
    let record = EpisodeRecord { meta, images, q, grip, actions };
    record.validate().map_err(|e| schema(&dir, e.to_string()))?;
    Ok(record)
}

/// Which joint vectors the end-pose targets are computed from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseSource {
    /// Forward kinematics of the commanded action joints.
    #[default]
    Action,
    /// Forward kinematics of the measured joint state.
    Measured,
}

/// End poses for every step of `record` (f64, unnormalized).
pub fn episode_end_poses(record: &EpisodeRecord, arm: &ScaraParams<f64>, source: PoseSource) -> Vec<[f64; 6]> {
    let joints: Vec<[f64; 4]> = match source {
        PoseSource::Action => record.actions.iter().map(|a| [a[0], a[1], a[2], a[3]].map(f64::from)).collect(),
        PoseSource::Measured => record.q.iter().map(|q| q.map(f64::from)).collect(),
    };
    end_pose_sequence(&joints, arm).into_iter().map(|p| p.to_array()).collect()
}

/// Per-channel affine normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub q_mean: [f64; 4],
    pub q_std: [f64; 4],
    /// The gripper channel keeps mean 0 and std 1 so it stays in `[0, 1]`.
    pub action_mean: [f64; 5],
    pub action_std: [f64; 5],
    pub pose_mean: [f64; 6],
    pub pose_std: [f64; 6],
    #[serde(default)]
    pub pose_source: PoseSource,
}

struct Moments<const N: usize> {
    n: usize,
    sum: [f64; N],
    sq: [f64; N],
}

impl<const N: usize> Moments<N> {
    fn push(&mut self, x: [f64; N]) {
        self.n += 1;
        for i in 0..N {
            self.sum[i] += x[i];
            self.sq[i] += x[i] * x[i];
        }
    }

    fn finish(&self) -> ([f64; N], [f64; N]) {
        let n = self.n as f64;
        let mean: [f64; N] = std::array::from_fn(|i| self.sum[i] / n);
        let std = std::array::from_fn(|i| (self.sq[i] / n - mean[i] * mean[i]).max(0.0).sqrt().max(STD_FLOOR));
        (mean, std)
    }
}

impl NormStats {
    /// Identity normalization.
    pub fn identity() -> Self {
        NormStats {
            q_mean: [0.0; 4],
            q_std: [1.0; 4],
            action_mean: [0.0; 5],
            action_std: [1.0; 5],
            pose_mean: [0.0; 6],
            pose_std: [1.0; 6],
            pose_source: PoseSource::Action,
        }
    }

    /// Statistics over every step of `records`, summed in a fixed
    /// channel-sorted order so the result does not depend on episode order.
    pub fn from_records(
        records: &[&EpisodeRecord],
        arm: &ScaraParams<f64>,
        pose_source: PoseSource,
    ) -> Result<Self, DatasetError> {
        if records.is_empty() {
            return Err(DatasetError::EmptySplit("records".into()));
        }
        let mut q_rows = Vec::new();
        let mut a_rows = Vec::new();
        let mut p_rows = Vec::new();
        for r in records {
            q_rows.extend(r.q.iter().map(|q| q.map(f64::from)));
            a_rows.extend(r.actions.iter().map(|a| a.map(f64::from)));
            p_rows.extend(episode_end_poses(r, arm, pose_source));
        }
        let (q_mean, q_std) = sorted_moments(&mut q_rows);
        let (mut action_mean, mut action_std) = sorted_moments(&mut a_rows);
        action_mean[4] = 0.0;
        action_std[4] = 1.0;
        let (pose_mean, pose_std) = sorted_moments(&mut p_rows);
        Ok(NormStats { q_mean, q_std, action_mean, action_std, pose_mean, pose_std, pose_source })
    }

    pub fn norm_q(&self, q: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|i| (q[i] - self.q_mean[i]) / self.q_std[i])
    }

    pub fn norm_action(&self, a: [f64; 5]) -> [f64; 5] {
        std::array::from_fn(|i| (a[i] - self.action_mean[i]) / self.action_std[i])
    }

    pub fn denorm_action(&self, a: [f64; 5]) -> [f64; 5] {
        std::array::from_fn(|i| a[i] * self.action_std[i] + self.action_mean[i])
    }

    pub fn norm_pose(&self, p: [f64; 6]) -> [f64; 6] {
        std::array::from_fn(|i| (p[i] - self.pose_mean[i]) / self.pose_std[i])
    }

    pub fn denorm_pose(&self, p: [f64; 6]) -> [f64; 6] {
        std::array::from_fn(|i| p[i] * self.pose_std[i] + self.pose_mean[i])
    }
}

/// Mean/std per channel; rows are sorted first so summation order is
/// independent of the input order.
fn sorted_moments<const N: usize>(rows: &mut [[f64; N]]) -> ([f64; N], [f64; N]) {
    rows.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let mut m = Moments::<N> { n: 0, sum: [0.0; N], sq: [0.0; N] };
    for r in rows.iter() {
        m.push(*r);
    }
    m.finish()
}

/// Loads `ids` from `root` and computes their statistics.
pub fn compute_norm_stats(
    root: &Path,
    ids: &[u64],
    arm: &ScaraParams<f64>,
    pose_source: PoseSource,
) -> Result<NormStats, DatasetError> {
    if ids.is_empty() {
        return Err(DatasetError::EmptySplit(root.display().to_string()));
    }
    let records = ids.iter().map(|id| read_episode(root, *id)).collect::<Result<Vec<_>, _>>()?;
    NormStats::from_records(&records.iter().collect::<Vec<_>>(), arm, pose_source)
}

/// Training example: observation at `t` plus the normalized future chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkSample {
    /// Per selected camera, `H x W x 3` values in `[0, 1]`.
    pub images: Vec<(CameraLabel, Vec<f32>)>,
    pub q: [f64; 4],
    /// `k` normalized actions.
    pub actions: Vec<[f64; 5]>,
    /// `k` normalized end poses.
    pub end_poses: Vec<[f64; 6]>,
    /// `true` marks padding past the end of the episode.
    pub pad_mask: Vec<bool>,
}

pub fn image_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|b| *b as f32 / 255.0).collect()
}

/// Chunk starting at step `t`. Steps past the episode end repeat the final
/// action and are flagged in `pad_mask`.
pub fn sample_chunk(
    record: &EpisodeRecord,
    t: usize,
    k: usize,
    cameras: &[CameraLabel],
    stats: &NormStats,
    arm: &ScaraParams<f64>,
) -> Result<ChunkSample, DatasetError> {
    let len = record.len();
    if t >= len || k == 0 {
        return Err(DatasetError::BadIndex { t, len });
    }
    let n = record.meta.image_width * record.meta.image_height * 3;
    let mut images = Vec::with_capacity(cameras.len());
    for cam in cameras {
        let buf = record
            .images
            .get(cam)
            .ok_or_else(|| DatasetError::InvalidRecord(format!("episode has no {cam} images")))?;
        images.push((*cam, image_to_f32(&buf[t * n..(t + 1) * n])));
    }
    let idx: Vec<usize> = (0..k).map(|i| (t + i).min(len - 1)).collect();
    let pad_mask = (0..k).map(|i| t + i >= len).collect();
    let actions = idx.iter().map(|&j| stats.norm_action(record.actions[j].map(f64::from))).collect();
    let joints: Vec<[f64; 4]> = idx
        .iter()
        .map(|&j| match stats.pose_source {
            PoseSource::Action => {
                let a = record.actions[j];
                [a[0], a[1], a[2], a[3]].map(f64::from)
            }
            PoseSource::Measured => record.q[j].map(f64::from),
        })
        .collect();
    let end_poses = end_pose_sequence(&joints, arm).into_iter().map(|p| stats.norm_pose(p.to_array())).collect();
    Ok(ChunkSample { images, q: stats.norm_q(record.q[t].map(f64::from)), actions, end_poses, pad_mask })
}

/// Seeded split of `ids` into `(train, val)`; both halves are sorted.
pub fn split_ids(ids: &[u64], n_val: usize, seed: u64) -> Result<(Vec<u64>, Vec<u64>), DatasetError> {
    if n_val >= ids.len() {
        return Err(DatasetError::TooFewEpisodes { n_val, have: ids.len() });
    }
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    let mut shuffled = sorted.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<u64> = shuffled[..n_val].to_vec();
    val.sort_unstable();
    let train = sorted.into_iter().filter(|id| val.binary_search(id).is_err()).collect();
    Ok((train, val))
}

pub fn split_train_val(root: &Path, n_val: usize, seed: u64) -> Result<(Vec<u64>, Vec<u64>), DatasetError> {
    split_ids(&list_episodes(root)?, n_val, seed)
}

/// Ids of episodes whose state is in `states`.
pub fn filter_by_state(root: &Path, ids: &[u64], states: &[usize]) -> Result<Vec<u64>, DatasetError> {
    let mut out = Vec::new();
    for id in ids {
        let path = episode_dir(root, *id).join("meta.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: EpisodeMeta = serde_json::from_str(&text).map_err(|e| schema(&path, e.to_string()))?;
        if states.contains(&meta.state_id) {
            out.push(*id);
        }
    }
    Ok(out)
}

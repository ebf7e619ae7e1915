use std::path::Path;
use std::time::Instant;

use berrypick_nn::{Adam, AdamConfig, Graph, Matrix, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::checkpoint::{save_checkpoint, LossRow};
use super::{LatentMode, LossBreakdown, Policy, PolicyConfig, PolicyError};
use super::model::Batch;
use crate::dataset::{read_episode, sample_chunk, split_train_val, ChunkSample, DatasetError, EpisodeRecord, NormStats};
use crate::scara::ScaraParams;
use crate::seeds::mix_seed;

/// Validation chunks drawn per held-out episode.
const VAL_CHUNKS_PER_EPISODE: usize = 4;

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub final_loss: LossBreakdown,
    pub log: Vec<LossRow>,
    pub num_parameters: usize,
    pub wall_seconds: f64,
    pub train_episodes: usize,
    pub val_episodes: usize,
}

/// Stacks samples into model layout. Images are shifted to `[-0.5, 0.5]`.
pub fn batch_from_samples<T: Real>(samples: &[ChunkSample], cfg: &PolicyConfig) -> Result<Batch<T>, PolicyError> {
    if samples.is_empty() {
        return Err(PolicyError::ShapeMismatch("empty batch".into()));
    }
    let px = cfg.image_width * cfg.image_height * 3;
    let k = cfg.chunk;
    let mut images: Vec<Vec<T>> = vec![Vec::with_capacity(samples.len() * px); cfg.cameras.len()];
    let mut q = Vec::with_capacity(samples.len() * 4);
    let mut actions = Vec::with_capacity(samples.len() * k * 5);
    let mut poses = Vec::with_capacity(samples.len() * k * 6);
    let mut pad = Vec::with_capacity(samples.len() * k);
    for s in samples {
        if s.images.len() != cfg.cameras.len() || s.actions.len() != k || s.end_poses.len() != k || s.pad_mask.len() != k {
            return Err(PolicyError::ShapeMismatch("sample does not match the policy config".into()));
        }
        for (slot, (cam, img)) in s.images.iter().enumerate() {
            if *cam != cfg.cameras[slot] || img.len() != px {
                return Err(PolicyError::ShapeMismatch(format!("image for {cam} has {} values, expected {px}", img.len())));
            }
            images[slot].extend(img.iter().map(|&v| T::lit(v as f64 - 0.5)));
        }
        q.extend(s.q.iter().map(|&v| T::lit(v)));
        actions.extend(s.actions.iter().flatten().map(|&v| T::lit(v)));
        poses.extend(s.end_poses.iter().flatten().map(|&v| T::lit(v)));
        pad.extend_from_slice(&s.pad_mask);
    }
    let n = samples.len();
    Ok(Batch {
        size: n,
        images: images.into_iter().map(|d| Matrix::from_vec(n * px / 3, 3, d)).collect(),
        q: Matrix::from_vec(n, 4, q),
        actions: Matrix::from_vec(n * k, 5, actions),
        poses: Matrix::from_vec(n * k, 6, poses),
        pad,
    })
}

/// Trainable scalar count for `cfg`.
pub fn count_parameters(cfg: &PolicyConfig) -> Result<usize, PolicyError> {
    Ok(Policy::<f32>::new(cfg.clone(), NormStats::identity())?.num_parameters())
}

/// Loss terms on a batch without updating anything.
pub fn evaluate_loss<T: Real>(
    policy: &Policy<T>,
    batch: &Batch<T>,
    mode: &LatentMode<T>,
) -> Result<LossBreakdown, PolicyError> {
    let mut g = Graph::new(policy.store());
    let out = policy.forward(&mut g, batch, mode)?;
    let (rec, reg, ep, total) = policy.loss(&mut g, batch, &out);
    let v = |x| g.value(x).item().to_f64().unwrap_or(f64::NAN);
    Ok(LossBreakdown { rec_action: v(rec), reg: v(reg), rec_end_pose: v(ep), total: v(total) })
}

/// Mean wall time of a single-observation chunk prediction, after one
/// warm-up call.
pub fn measure_inference_ms<T: Real>(policy: &Policy<T>, reps: usize) -> Result<f64, PolicyError> {
    let c = &policy.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let px = c.image_width * c.image_height * 3;
    let input = super::PolicyInput {
        images: (0..c.cameras.len()).map(|_| (0..px).map(|_| rng.random::<f32>()).collect()).collect(),
        q: [0.0; 4],
    };
    policy.predict(&input)?;
    let reps = reps.max(1);
    let start = Instant::now();
    for _ in 0..reps {
        policy.predict(&input)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / reps as f64)
}

fn draw_samples(
    records: &[EpisodeRecord],
    n: usize,
    cfg: &PolicyConfig,
    stats: &NormStats,
    arm: &ScaraParams<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ChunkSample>, DatasetError> {
    (0..n)
        .map(|_| {
            let r = &records[rng.random_range(0..records.len())];
            let t = rng.random_range(0..r.len());
            sample_chunk(r, t, cfg.chunk, &cfg.cameras, stats, arm)
        })
        .collect()
}

fn validation_batches<T: Real>(
    records: &[EpisodeRecord],
    cfg: &PolicyConfig,
    stats: &NormStats,
    arm: &ScaraParams<f64>,
) -> Result<Vec<Batch<T>>, PolicyError> {
    let mut samples = Vec::new();
    for r in records {
        for i in 0..VAL_CHUNKS_PER_EPISODE {
            let t = i * (r.len() - 1) / VAL_CHUNKS_PER_EPISODE.max(1);
            samples.push(sample_chunk(r, t, cfg.chunk, &cfg.cameras, stats, arm)?);
        }
    }
    samples.chunks(cfg.batch_size).map(|c| batch_from_samples(c, cfg)).collect()
}

fn mean_val_loss<T: Real>(policy: &Policy<T>, batches: &[Batch<T>]) -> Result<Option<f64>, PolicyError> {
    if batches.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for b in batches {
        sum += evaluate_loss(policy, b, &LatentMode::Mean)?.total;
    }
    Ok(Some(sum / batches.len() as f64))
}

/// Trains a fresh policy on in-memory episodes. Statistics come from `train`
/// only; `val` feeds the logged validation loss.
pub fn train_on_records<T: Real>(
    cfg: &PolicyConfig,
    train: &[EpisodeRecord],
    val: &[EpisodeRecord],
    arm: &ScaraParams<f64>,
) -> Result<(Policy<T>, TrainReport), PolicyError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DatasetError::EmptySplit("train".into()).into());
    }
    let stats = NormStats::from_records(&train.iter().collect::<Vec<_>>(), arm, cfg.pose_source)?;
    let mut policy = Policy::<T>::new(cfg.clone(), stats.clone())?;
    let val_batches = validation_batches::<T>(val, cfg, &stats, arm)?;
    let mut adam = Adam::new(
        AdamConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() },
        policy.store(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xDA7A]));
    let start = Instant::now();
    let mut log = Vec::new();
    let mut last = LossBreakdown::default();
    for step in 1..=cfg.steps {
        let samples = draw_samples(train, cfg.batch_size, cfg, &stats, arm, &mut rng)?;
        let batch = batch_from_samples::<T>(&samples, cfg)?;
        let eps_data = (0..batch.size * cfg.latent_dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect();
        let eps = Matrix::from_vec(batch.size, cfg.latent_dim, eps_data);
        let mut grads = {
            let mut g = Graph::new(policy.store());
            let out = policy.forward(&mut g, &batch, &LatentMode::Sample(eps))?;
            let (rec, reg, ep, total) = policy.loss(&mut g, &batch, &out);
            let v = |x| g.value(x).item().to_f64().unwrap_or(f64::NAN);
            last = LossBreakdown { rec_action: v(rec), reg: v(reg), rec_end_pose: v(ep), total: v(total) };
            if !last.is_finite() {
                return Err(PolicyError::NonFiniteLoss { step, detail: format!("{last:?}") });
            }
            g.backward(total)
        };
        if !grads.all_finite() {
            return Err(PolicyError::NonFiniteLoss { step, detail: "non-finite gradient".into() });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm().to_f64().unwrap_or(f64::INFINITY);
            if norm > cfg.grad_clip {
                grads.scale(T::lit(cfg.grad_clip / norm));
            }
        }
        adam.set_lr(cfg.lr_at(step));
        adam.step(policy.store_mut(), &grads);
        if step % cfg.log_every.max(1) == 0 || step == cfg.steps {
            let val_total = mean_val_loss(&policy, &val_batches)?;
            log::info!("step {step}: total {:.5} rec {:.5} reg {:.5} ep {:.5}", last.total, last.rec_action, last.reg, last.rec_end_pose);
            log.push(LossRow { step, loss: last, val_total });
        }
    }
    let report = TrainReport {
        steps: cfg.steps,
        final_loss: last,
        log,
        num_parameters: policy.num_parameters(),
        wall_seconds: start.elapsed().as_secs_f64(),
        train_episodes: train.len(),
        val_episodes: val.len(),
    };
    Ok((policy, report))
}

/// Trains on the episodes under `data_root` with a seeded held-out split,
/// then writes a checkpoint to `out_dir`.
pub fn train(
    cfg: &PolicyConfig,
    data_root: &Path,
    out_dir: &Path,
    arm: &ScaraParams<f64>,
) -> Result<(Policy<f32>, TrainReport), PolicyError> {
    let (train_ids, val_ids) = split_train_val(data_root, cfg.val_episodes, cfg.seed)?;
    let load = |ids: &[u64]| ids.iter().map(|id| read_episode(data_root, *id)).collect::<Result<Vec<_>, _>>();
    let train_set = load(&train_ids)?;
    let val_set = load(&val_ids)?;
    let (policy, report) = train_on_records::<f32>(cfg, &train_set, &val_set, arm)?;
    save_checkpoint(out_dir, &policy, &report.log)?;
    Ok((policy, report))
}

//! Numerical checks on the policy: finite-difference gradients, head
//! decoupling, synthetic batches.

use berrypick_nn::{Graph, Grads, Matrix, ParamId, Real};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::model::Batch;
use super::{gripper_branch_prefixes, LatentMode, Policy, PolicyConfig, PolicyError};
use crate::dataset::NormStats;

/// Random batch matching `cfg`; the last step of every other sample is padded.
pub fn synthetic_batch<T: Real>(cfg: &PolicyConfig, size: usize, seed: u64) -> Batch<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |n: usize, rng: &mut ChaCha8Rng| -> Vec<T> {
        (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
    };
    let px = cfg.image_width * cfg.image_height;
    let k = cfg.chunk;
    let images = (0..cfg.cameras.len())
        .map(|_| Matrix::from_vec(size * px, 3, (0..size * px * 3).map(|_| T::lit(rng.random::<f64>() - 0.5)).collect()))
        .collect();
    let q = Matrix::from_vec(size, 4, normal(size * 4, &mut rng));
    let actions = Matrix::from_vec(size * k, 5, normal(size * k * 5, &mut rng));
    let poses = Matrix::from_vec(size * k, 6, normal(size * k * 6, &mut rng));
    let pad = (0..size * k).map(|i| k > 1 && (i / k) % 2 == 1 && i % k == k - 1).collect();
    Batch { size, images, q, actions, poses, pad }
}

/// Standard-normal `eps` for [`LatentMode::Sample`].
pub fn synthetic_eps<T: Real>(cfg: &PolicyConfig, size: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(
        size,
        cfg.latent_dim,
        (0..size * cfg.latent_dim).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect(),
    )
}

/// Which scalar of the objective to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    RecAction,
    Reg,
    RecEndPose,
    Total,
}

fn eval_term<T: Real>(policy: &Policy<T>, batch: &Batch<T>, mode: &LatentMode<T>, term: LossTerm, grad: bool) -> Result<(T, Option<Grads<T>>), PolicyError> {
    let mut g = Graph::new(policy.store());
    let out = policy.forward(&mut g, batch, mode)?;
    let (rec, reg, ep, total) = policy.loss(&mut g, batch, &out);
    let v = match term {
        LossTerm::RecAction => rec,
        LossTerm::Reg => reg,
        LossTerm::RecEndPose => ep,
        LossTerm::Total => total,
    };
    let value = g.value(v).item();
    Ok((value, grad.then(|| g.backward(v))))
}

/// Gradients of one loss term.
pub fn loss_gradients<T: Real>(
    policy: &Policy<T>,
    batch: &Batch<T>,
    mode: &LatentMode<T>,
    term: LossTerm,
) -> Result<Grads<T>, PolicyError> {
    Ok(eval_term(policy, batch, mode, term, true)?.1.expect("requested"))
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }
}

/// Relative difference with a small absolute floor on the scale so that
/// entries whose true gradient is zero compare absolutely.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite differences of the total loss on `n` randomly chosen
/// scalar parameters of a double-precision policy.
pub fn gradient_check(
    cfg: &PolicyConfig,
    n: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, PolicyError> {
    let mut policy = Policy::<f64>::new(cfg.clone(), NormStats::identity())?;
    let batch = synthetic_batch::<f64>(cfg, cfg.batch_size, seed);
    let mode = LatentMode::Sample(synthetic_eps(cfg, cfg.batch_size, seed ^ 0xE5));
    let grads = loss_gradients(&policy, &batch, &mode, LossTerm::Total)?;
    let ids: Vec<ParamId> = policy.store().ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let id = ids[rng.random_range(0..ids.len())];
        let (rows, cols) = policy.store().get(id).shape();
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let orig = policy.store().get(id).get(r, c);
        policy.store_mut().get_mut(id).set(r, c, orig + step);
        let (plus, _) = eval_term(&policy, &batch, &mode, LossTerm::Total, false)?;
        policy.store_mut().get_mut(id).set(r, c, orig - step);
        let (minus, _) = eval_term(&policy, &batch, &mode, LossTerm::Total, false)?;
        policy.store_mut().get_mut(id).set(r, c, orig);
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.entry(id, r, c);
        entries.push(GradCheckEntry {
            param: policy.store().name(id).to_string(),
            row: r,
            col: c,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric, 1e-6),
        });
    }
    Ok(GradCheckReport { entries })
}

/// Largest absolute gradient of `rec_end_pose` over the gripper-branch
/// parameters; `None` entries (not reached) count as zero.
pub fn gripper_branch_end_pose_grad<T: Real>(
    policy: &Policy<T>,
    batch: &Batch<T>,
    mode: &LatentMode<T>,
) -> Result<f64, PolicyError> {
    let grads = loss_gradients(policy, batch, mode, LossTerm::RecEndPose)?;
    let mut max = 0.0f64;
    for prefix in gripper_branch_prefixes(policy.cfg.variant) {
        for id in policy.store().ids_with_prefix(prefix) {
            if let Some(g) = grads.get(id) {
                for v in g.data() {
                    max = max.max(v.to_f64().unwrap_or(f64::INFINITY).abs());
                }
            }
        }
    }
    Ok(max)
}

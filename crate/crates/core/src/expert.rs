//! Scripted demonstrator with privileged scene access: plans a direct,
//! detour or push-through approach to the picking point, grasps, pulls to
//! detach and holds.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_episode, DatasetError, EpisodeMeta, EpisodeRecord, Source, FORMAT_VERSION};
use crate::scara::{
    forward_kinematics, inverse_kinematics, wrap_angle, Action, Elbow, EndPose, JointState, KinematicsError,
    ScaraParams,
};
use crate::seeds::mix_seed;
use crate::sim::env::{leaf_extent, GripperBody, PhysicsConfig};
use crate::sim::geometry::closest_on_segment_xy;
use crate::sim::{EnvConfig, Outcome, Scene, SimEnv, SimError, V3};

#[derive(Debug, thiserror::Error)]
pub enum ExpertError {
    #[error("cannot plan: {0}")]
    Unplannable(String),
    #[error("gave up after {attempts} attempts with {successes} successful episodes")]
    ExhaustedRetries { attempts: usize, successes: usize },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Direct,
    DetourLeft,
    DetourRight,
    PushThrough,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::DetourLeft => "detour_left",
            Strategy::DetourRight => "detour_right",
            Strategy::PushThrough => "push_through",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub pose: EndPose<f64>,
    pub grip: f64,
    /// Time to reach this waypoint from the previous one (s).
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoPlan {
    /// Starting pose followed by the targets, in order.
    pub start: EndPose<f64>,
    pub waypoints: Vec<Waypoint>,
    pub strategy: Strategy,
    pub noise_seed: u64,
    /// Final approach heading (rad).
    pub approach_yaw: f64,
    /// Minimum gripper-body gap to any non-target object along the approach.
    pub clearance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Distance of the pre-grasp waypoint behind the picking point (m).
    pub standoff: f64,
    /// Gap below which a side counts as blocked (m).
    pub min_clearance: f64,
    pub angle_step: f64,
    pub max_angle: f64,
    /// Std of the waypoint jitter (m).
    pub noise_sigma: f64,
    pub jitter_tries: usize,
    /// Cartesian speed used for segment timing (m/s).
    pub speed: f64,
    pub yaw_speed: f64,
    pub min_segment: f64,
    pub dwell: f64,
    pub close_time: f64,
    pub pull_distance: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            standoff: 0.10,
            min_clearance: 0.01,
            angle_step: 2.5f64.to_radians(),
            max_angle: 75f64.to_radians(),
            noise_sigma: 0.005,
            jitter_tries: 8,
            speed: 0.2,
            yaw_speed: 1.0,
            min_segment: 0.3,
            dwell: 0.1,
            close_time: 0.3,
            pull_distance: 0.03,
        }
    }
}

struct Obstacle {
    center: V3,
    radius: f64,
    z_lo: f64,
    z_hi: f64,
}

fn obstacles(scene: &Scene) -> Vec<Obstacle> {
    let mut out: Vec<Obstacle> = scene
        .berries
        .iter()
        .filter(|b| b.id != scene.target_id && b.attached)
        .map(|b| Obstacle { center: b.cur_pos, radius: b.radius, z_lo: b.cur_pos.z - b.radius, z_hi: b.anchor.z })
        .collect();
    for l in &scene.leaves {
        let (reach, half_h) = leaf_extent(l);
        out.push(Obstacle {
            center: l.cur_center,
            radius: reach,
            z_lo: l.cur_center.z - half_h,
            z_hi: l.cur_center.z + half_h,
        });
    }
    out
}

/// Smallest gap between the gripper body at `(tcp, yaw)` and any obstacle.
fn body_gap(obs: &[Obstacle], body: &GripperBody, tcp: V3, yaw: f64) -> f64 {
    let dir = V3::new(yaw.cos(), yaw.sin(), 0.0);
    let (a, b) = (tcp - dir * body.back, tcp - dir * body.front);
    let (lo, hi) = (tcp.z - body.below, tcp.z + body.above);
    obs.iter()
        .filter(|o| !(o.z_hi < lo || o.z_lo > hi))
        .map(|o| (o.center.xy() - closest_on_segment_xy(a, b, o.center)).norm() - body.radius - o.radius)
        .fold(f64::INFINITY, f64::min)
}

fn lerp_pose(a: &EndPose<f64>, b: &EndPose<f64>, s: f64) -> EndPose<f64> {
    let dyaw = wrap_angle(b.yaw - a.yaw);
    EndPose::planar(a.x + (b.x - a.x) * s, a.y + (b.y - a.y) * s, a.z + (b.z - a.z) * s, a.yaw + dyaw * s)
}

fn pos(p: &EndPose<f64>) -> V3 {
    V3::new(p.x, p.y, p.z)
}

/// Minimum body gap along the straight segments `poses[i] -> poses[i+1]`,
/// sampled so that no point of the body moves more than 1 mm between
/// samples.
pub fn path_clearance_poses(scene: &Scene, body: &GripperBody, poses: &[EndPose<f64>]) -> f64 {
    let obs = obstacles(scene);
    let mut gap = f64::INFINITY;
    for w in poses.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let travel = pos(a).dist(pos(b)) + wrap_angle(b.yaw - a.yaw).abs() * body.back;
        let n = (travel / 1e-3).ceil().max(1.0) as usize;
        for i in 0..=n {
            let p = lerp_pose(a, b, i as f64 / n as f64);
            gap = gap.min(body_gap(&obs, body, pos(&p), p.yaw));
        }
    }
    gap
}

fn segment_duration(a: &EndPose<f64>, b: &EndPose<f64>, cfg: &ExpertConfig) -> f64 {
    let lin = pos(a).dist(pos(b)) / cfg.speed;
    let ang = wrap_angle(b.yaw - a.yaw).abs() / cfg.yaw_speed;
    lin.max(ang).max(cfg.min_segment)
}

/// Plans a pick of the scene's target from the arm configuration `start`.
pub fn plan_demo(
    scene: &Scene,
    start: &JointState<f64>,
    arm: &ScaraParams<f64>,
    physics: &PhysicsConfig,
    cfg: &ExpertConfig,
    noise_seed: u64,
) -> Result<DemoPlan, ExpertError> {
    let target = scene.target().picking_point(physics.picking_offset);
    let body = &physics.body;
    let start_pose = forward_kinematics(start, arm);
    let reachable = |p: &EndPose<f64>| inverse_kinematics(p, arm, Elbow::Down).is_ok();
    let pick = |yaw: f64| EndPose::planar(target.x, target.y, target.z, yaw);
    let pre = |yaw: f64| {
        EndPose::planar(target.x - cfg.standoff * yaw.cos(), target.y - cfg.standoff * yaw.sin(), target.z, yaw)
    };
    let gap_for = |yaw: f64, pre_pose: &EndPose<f64>| {
        if !(reachable(pre_pose) && reachable(&pick(yaw))) {
            return f64::NEG_INFINITY;
        }
        path_clearance_poses(scene, body, &[start_pose, *pre_pose, pick(yaw)])
    };
    if !reachable(&pick(start_pose.yaw)) {
        return Err(ExpertError::Unplannable(format!("picking point {target:?} is not reachable")));
    }

    let yaw0 = start_pose.yaw;
    let direct_gap = gap_for(yaw0, &pre(yaw0));
    let (strategy, yaw, gap) = if direct_gap > 0.0 {
        (Strategy::Direct, yaw0, direct_gap)
    } else {
        // Per side: (largest gap, smallest angle reaching min_clearance).
        let mut sides = Vec::new();
        for sign in [1.0, -1.0] {
            let mut best = (f64::NEG_INFINITY, yaw0);
            let mut first_ok = None;
            let steps = (cfg.max_angle / cfg.angle_step).round() as usize;
            for i in 1..=steps {
                let yaw = wrap_angle(yaw0 + sign * cfg.angle_step * i as f64);
                let g = gap_for(yaw, &pre(yaw));
                if g > best.0 {
                    best = (g, yaw);
                }
                if first_ok.is_none() && g >= cfg.min_clearance {
                    first_ok = Some((g, yaw));
                }
            }
            sides.push((best, first_ok));
        }
        let (left, right) = (&sides[0], &sides[1]);
        if left.0 .0 < cfg.min_clearance && right.0 .0 < cfg.min_clearance {
            let best = if left.0 .0.max(direct_gap) >= right.0 .0.max(direct_gap) { left.0 } else { right.0 };
            let (g, yaw) = if direct_gap >= best.0 { (direct_gap, yaw0) } else { best };
            (Strategy::PushThrough, yaw, g)
        } else if left.0 .0 >= right.0 .0 {
            let (g, yaw) = left.1.expect("left side has a clear angle");
            (Strategy::DetourLeft, yaw, g)
        } else {
            let (g, yaw) = right.1.expect("right side has a clear angle");
            (Strategy::DetourRight, yaw, g)
        }
    };

    // Jitter the pre-grasp waypoint; keep the approach free of contact
    // unless the plan already pushes through.
    let nominal = pre(yaw);
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let normal = Normal::new(0.0, cfg.noise_sigma).expect("finite sigma");
    let mut chosen = (nominal, gap);
    for _ in 0..cfg.jitter_tries {
        let cand = EndPose::planar(
            nominal.x + normal.sample(&mut rng),
            nominal.y + normal.sample(&mut rng),
            nominal.z + normal.sample(&mut rng),
            yaw,
        );
        let g = gap_for(yaw, &cand);
        let ok = match strategy {
            Strategy::PushThrough => g.is_finite(),
            _ => g > 0.0,
        };
        if ok {
            chosen = (cand, g);
            break;
        }
    }
    let (pre_pose, clearance) = chosen;
    let pick_pose = pick(yaw);
    let pull_pose = EndPose::planar(
        target.x - cfg.pull_distance * yaw.cos(),
        target.y - cfg.pull_distance * yaw.sin(),
        target.z,
        yaw,
    );
    if !reachable(&pull_pose) {
        return Err(ExpertError::Unplannable("pull-back pose unreachable".into()));
    }
    let waypoints = vec![
        Waypoint { pose: pre_pose, grip: 1.0, duration: segment_duration(&start_pose, &pre_pose, cfg) },
        Waypoint { pose: pick_pose, grip: 1.0, duration: segment_duration(&pre_pose, &pick_pose, cfg) },
        Waypoint { pose: pick_pose, grip: 1.0, duration: cfg.dwell },
        Waypoint { pose: pick_pose, grip: 0.0, duration: cfg.close_time },
        Waypoint { pose: pull_pose, grip: 0.0, duration: segment_duration(&pick_pose, &pull_pose, cfg) },
    ];
    Ok(DemoPlan { start: start_pose, waypoints, strategy, noise_seed, approach_yaw: yaw, clearance })
}

/// Minimum-jerk time scaling on `[0, 1]`.
pub fn min_jerk(tau: f64) -> f64 {
    let t = tau.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// Per-step `(pose, grip)` targets at `fps`, excluding the start pose.
pub fn plan_trajectory(plan: &DemoPlan, fps: f64) -> Vec<(EndPose<f64>, f64)> {
    let mut out = Vec::new();
    let mut prev = plan.start;
    for w in &plan.waypoints {
        let n = (w.duration * fps).round().max(1.0) as usize;
        for i in 1..=n {
            out.push((lerp_pose(&prev, &w.pose, min_jerk(i as f64 / n as f64)), w.grip));
        }
        prev = w.pose;
    }
    out
}

fn to_f32_action(q: &JointState<f64>, grip: f64) -> Action<f64> {
    Action::from_array([q.theta1, q.theta2, q.d3, q.theta4, grip].map(|v| v as f32 as f64))
}

fn f32_row<const N: usize>(a: [f64; N]) -> [f32; N] {
    a.map(|v| v as f32)
}

/// Runs `plan` in `env` (already reset to the plan's scene), recording one
/// observation/action pair per step until the episode terminates. Actions
/// are rounded to `f32` before stepping so a stored episode replays
/// exactly.
pub fn execute_plan(env: &mut SimEnv, plan: &DemoPlan, seed: u64) -> Result<EpisodeRecord, ExpertError> {
    let arm = env.config().arm;
    let fps = env.config().fps;
    let traj = plan_trajectory(plan, fps);
    let cams = env.config().cameras.clone();
    let mut images: BTreeMap<_, Vec<u8>> = cams.iter().map(|c| (*c, Vec::new())).collect();
    let (mut qs, mut grips, mut actions) = (Vec::new(), Vec::new(), Vec::new());
    let mut obs = env.observe();
    let mut last = to_f32_action(&env.q(), env.grip());
    let mut i = 0;
    while !env.is_terminal() {
        if let Some((pose, grip)) = traj.get(i) {
            last = to_f32_action(&inverse_kinematics(pose, &arm, Elbow::Down)?, *grip);
        }
        i += 1;
        for (cam, img) in &obs.images {
            images.get_mut(cam).expect("configured camera").extend_from_slice(img.raw());
        }
        qs.push(f32_row(obs.q.to_array()));
        grips.push(obs.grip as f32);
        actions.push(f32_row(last.to_array()));
        obs = env.step(&last)?.0;
    }
    let scene = env.scene();
    let mut extra = BTreeMap::new();
    extra.insert("strategy".to_string(), plan.strategy.as_str().to_string());
    extra.insert("noise_seed".to_string(), plan.noise_seed.to_string());
    let meta = EpisodeMeta {
        format_version: FORMAT_VERSION,
        state_id: scene.state_id,
        seed,
        source: Source::Expert,
        outcome: env.episode_outcome()?,
        fps,
        cameras: cams,
        image_width: env.config().image_width,
        image_height: env.config().image_height,
        num_steps: actions.len(),
        extra,
    };
    Ok(EpisodeRecord { meta, images, q: qs, grip: grips, actions })
}

/// Resets `env` to `(state, seed)`, plans and executes one demonstration.
pub fn run_expert_episode(
    env: &mut SimEnv,
    cfg: &ExpertConfig,
    state: usize,
    seed: u64,
    noise_seed: u64,
) -> Result<(DemoPlan, EpisodeRecord), ExpertError> {
    env.reset(state, seed)?;
    let plan = plan_demo(env.scene(), &env.q(), &env.config().arm, &env.config().physics, cfg, noise_seed)?;
    let record = execute_plan(env, &plan, seed)?;
    Ok((plan, record))
}

/// Replays stored actions from a fresh reset and returns the outcome.
pub fn replay_actions(env: &mut SimEnv, state: usize, seed: u64, actions: &[[f32; 5]]) -> Result<Outcome, SimError> {
    env.reset(state, seed)?;
    for a in actions {
        if env.is_terminal() {
            break;
        }
        env.step_physics(&Action::from_array(a.map(f64::from)))?;
    }
    while !env.is_terminal() {
        let hold = actions.last().map(|a| Action::from_array(a.map(f64::from))).unwrap_or_default();
        env.step_physics(&hold)?;
    }
    env.episode_outcome()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CollectSummary {
    pub episodes: usize,
    pub per_state: BTreeMap<usize, usize>,
    pub attempts: usize,
    pub retries: usize,
    pub episode_ids: Vec<u64>,
    pub strategies: BTreeMap<String, usize>,
}

/// Writes `n` successful expert episodes to `out`, assigning states
/// round-robin. Failed attempts are retried with fresh seeds.
pub fn collect_demos(
    n: usize,
    states: &[usize],
    seed: u64,
    out: &Path,
    env_cfg: &EnvConfig,
    cfg: &ExpertConfig,
) -> Result<CollectSummary, ExpertError> {
    if n == 0 {
        return Err(ExpertError::InvalidRequest("episode count must be positive".into()));
    }
    if states.is_empty() {
        return Err(ExpertError::InvalidRequest("state list is empty".into()));
    }
    if let Some(bad) = states.iter().find(|s| **s > 5) {
        return Err(SimError::InvalidState(*bad).into());
    }
    let mut env = SimEnv::new(env_cfg.clone())?;
    let mut summary = CollectSummary::default();
    let max_attempts = 10 * n;
    for i in 0..n {
        let state = states[i % states.len()];
        let mut attempt = 0u64;
        loop {
            if summary.attempts >= max_attempts {
                return Err(ExpertError::ExhaustedRetries { attempts: summary.attempts, successes: summary.episodes });
            }
            summary.attempts += 1;
            let env_seed = mix_seed(&[seed, i as u64, attempt, 0]);
            let noise_seed = mix_seed(&[seed, i as u64, attempt, 1]);
            let result = run_expert_episode(&mut env, cfg, state, env_seed, noise_seed);
            match result {
                Ok((plan, record)) if record.meta.outcome == Outcome::Success => {
                    let id = write_episode(&record, out)?;
                    summary.episode_ids.push(id);
                    summary.episodes += 1;
                    *summary.per_state.entry(state).or_default() += 1;
                    *summary.strategies.entry(plan.strategy.as_str().to_string()).or_default() += 1;
                    break;
                }
                Ok((_, record)) => {
                    log::info!("episode {i} state {state} attempt {attempt}: {} - retrying", record.meta.outcome);
                }
                Err(ExpertError::Unplannable(msg)) => {
                    log::info!("episode {i} state {state} attempt {attempt}: unplannable ({msg}) - retrying");
                }
                Err(e) => return Err(e),
            }
            summary.retries += 1;
            attempt += 1;
        }
    }
    log::info!("collected {} episodes in {} attempts ({} retries)", summary.episodes, summary.attempts, summary.retries);
    Ok(summary)
}

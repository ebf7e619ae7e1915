//! Quasi-static picking environment: rate-limited arm, push-out contacts,
//! stem relaxation and displacement-triggered detachment.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{ee_frame, CameraLabel, CameraModel};
use super::geometry::{closest_on_segment_xy, V3};
use super::render::{render_camera, RenderOptions};
use super::scene::{make_scene, Scene, SceneConfig, StateTable};
use super::SimError;
use crate::image::Image;
use crate::scara::{inverse_kinematics, Action, Elbow, EndPose, JointState, ScaraParams};

/// Horizontal capsule behind the fingers plus its vertical extent, relative
/// to the tool center point (m).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GripperBody {
    pub back: f64,
    pub front: f64,
    pub radius: f64,
    pub below: f64,
    pub above: f64,
}

impl Default for GripperBody {
    fn default() -> Self {
        GripperBody { back: 0.095, front: 0.025, radius: 0.01, below: 0.045, above: 0.02 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConfig {
    /// Fraction of displacement kept per step by un-contacted objects.
    pub relax: f64,
    pub capture_radius: f64,
    pub detach_distance: f64,
    pub grip_close: f64,
    pub stem_slack: f64,
    pub joint_rate: f64,
    pub prismatic_rate: f64,
    pub grip_rate: f64,
    /// Height of the picking point above the berry top.
    pub picking_offset: f64,
    pub body: GripperBody,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        PhysicsConfig {
            relax: 0.9,
            capture_radius: 0.008,
            detach_distance: 0.015,
            grip_close: 0.25,
            stem_slack: 0.05,
            joint_rate: 0.08,
            prismatic_rate: 0.008,
            grip_rate: 0.25,
            picking_offset: 0.01,
            body: GripperBody::default(),
        }
    }
}

/// Seeded start pose: behind the picking point, inside a cone around the
/// radial direction from the arm base.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomeConfig {
    pub min_back: f64,
    pub max_back: f64,
    pub cone_half_angle: f64,
    pub z_jitter: f64,
}

impl Default for HomeConfig {
    fn default() -> Self {
        HomeConfig { min_back: 0.11, max_back: 0.15, cone_half_angle: 15f64.to_radians(), z_jitter: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub arm: ScaraParams<f64>,
    pub scene: SceneConfig,
    pub states: StateTable,
    pub physics: PhysicsConfig,
    pub home: HomeConfig,
    /// Rendered cameras; empty disables rendering entirely.
    pub cameras: Vec<CameraLabel>,
    pub image_width: usize,
    pub image_height: usize,
    pub max_steps: usize,
    /// Steps simulated after the first detachment before the episode ends.
    pub settle_steps: usize,
    pub fps: f64,
    pub render: RenderOptions,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            arm: ScaraParams::default(),
            scene: SceneConfig::default(),
            states: StateTable::default(),
            physics: PhysicsConfig::default(),
            home: HomeConfig::default(),
            cameras: CameraLabel::ALL.to_vec(),
            image_width: 96,
            image_height: 96,
            max_steps: 150,
            settle_steps: 10,
            fps: 30.0,
            render: RenderOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ongoing,
    Success,
    WrongTarget,
    MultiPick,
    Timeout,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Ongoing => "ongoing",
            Outcome::Success => "success",
            Outcome::WrongTarget => "wrong_target",
            Outcome::MultiPick => "multi_pick",
            Outcome::Timeout => "timeout",
        }
    }

    pub fn parse(s: &str) -> Option<Outcome> {
        [Outcome::Ongoing, Outcome::Success, Outcome::WrongTarget, Outcome::MultiPick, Outcome::Timeout]
            .into_iter()
            .find(|o| o.as_str() == s)
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactObject {
    Berry(usize),
    Leaf(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    pub object: ContactObject,
    /// Penetration resolved this step (m).
    pub depth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub detached_ids: Vec<usize>,
    pub contacts: Vec<Contact>,
    pub terminal: bool,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub images: BTreeMap<CameraLabel, Image>,
    pub q: JointState<f64>,
    pub grip: f64,
    pub t: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Held {
    id: usize,
    offset: V3,
}

pub struct SimEnv {
    cfg: EnvConfig,
    cams: Vec<CameraModel>,
    scene: Scene,
    q: JointState<f64>,
    grip: f64,
    t: usize,
    held: Vec<Held>,
    detached: Vec<usize>,
    first_detach: Option<usize>,
    terminal: bool,
    outcome: Outcome,
}

impl SimEnv {
    pub fn new(cfg: EnvConfig) -> Result<Self, SimError> {
        cfg.arm.validate().map_err(SimError::Config)?;
        if cfg.image_width == 0 || cfg.image_height == 0 {
            return Err(SimError::Config("image size must be nonzero".into()));
        }
        if cfg.max_steps == 0 {
            return Err(SimError::Config("max_steps must be positive".into()));
        }
        let cams = cfg.cameras.iter().map(|&l| CameraModel::wrist(l, cfg.image_width, cfg.image_height)).collect();
        let mut env = SimEnv {
            cfg,
            cams,
            scene: Scene::empty(0, 0),
            q: JointState::default(),
            grip: 1.0,
            t: 0,
            held: Vec::new(),
            detached: Vec::new(),
            first_detach: None,
            terminal: false,
            outcome: Outcome::Ongoing,
        };
        env.reset(0, 0)?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn cameras(&self) -> &[CameraModel] {
        &self.cams
    }

    pub fn camera(&self, label: CameraLabel) -> Option<&CameraModel> {
        self.cams.iter().find(|c| c.label == label)
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    /// Mutable scene access for diagnostics; changes take effect on the
    /// next step.
    pub fn scene_mut(&mut self) -> &mut Scene {
        &mut self.scene
    }

    pub fn q(&self) -> JointState<f64> {
        self.q
    }

    pub fn grip(&self) -> f64 {
        self.grip
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Ids detached so far, in detachment order.
    pub fn detached(&self) -> &[usize] {
        &self.detached
    }

    pub fn held_ids(&self) -> Vec<usize> {
        self.held.iter().map(|h| h.id).collect()
    }

    pub fn tcp(&self) -> V3 {
        ee_frame(&self.q, &self.cfg.arm).translation
    }

    pub fn picking_point(&self, id: usize) -> Option<V3> {
        self.scene.berry(id).map(|b| b.picking_point(self.cfg.physics.picking_offset))
    }

    pub fn reset(&mut self, state_id: usize, seed: u64) -> Result<Observation, SimError> {
        let scene = make_scene(state_id, seed, &self.cfg.states, &self.cfg.scene)?;
        let target = scene.target().picking_point(self.cfg.physics.picking_offset);
        let q = home_pose(target, seed, &self.cfg.home, &self.cfg.arm)?;
        self.scene = scene;
        self.q = q;
        self.grip = self.cfg.arm.gripper_range.hi;
        self.t = 0;
        self.held.clear();
        self.detached.clear();
        self.first_detach = None;
        self.terminal = false;
        self.outcome = Outcome::Ongoing;
        Ok(self.observe())
    }

    /// Places the arm directly, bypassing rate limits. Intended for tests and
    /// tooling; grasp state is left untouched.
    pub fn set_arm(&mut self, q: JointState<f64>, grip: f64) {
        self.q = crate::scara::clamp_to_limits(&q, &self.cfg.arm);
        self.grip = self.cfg.arm.gripper_range.clamp(grip);
    }

    pub fn observe(&self) -> Observation {
        let images = self
            .cams
            .iter()
            .map(|c| (c.label, render_camera(&self.scene, &self.q, self.grip, c, &self.cfg.arm, &self.cfg.render)))
            .collect();
        Observation { images, q: self.q, grip: self.grip, t: self.t }
    }

    pub fn step(&mut self, action: &Action<f64>) -> Result<(Observation, StepInfo), SimError> {
        let info = self.step_physics(action)?;
        Ok((self.observe(), info))
    }

    /// Advances the simulation without rendering.
    pub fn step_physics(&mut self, action: &Action<f64>) -> Result<StepInfo, SimError> {
        if self.terminal {
            return Err(SimError::TerminalEnv);
        }
        if !action.to_array().iter().all(|v| v.is_finite()) {
            return Err(SimError::NonFiniteAction);
        }
        let ph = &self.cfg.physics;
        let a = action.clamped(&self.cfg.arm);
        let step = |cur: f64, target: f64, rate: f64| cur + (target - cur).clamp(-rate, rate);
        self.q = JointState::new(
            step(self.q.theta1, a.joints.theta1, ph.joint_rate),
            step(self.q.theta2, a.joints.theta2, ph.joint_rate),
            step(self.q.d3, a.joints.d3, ph.prismatic_rate),
            step(self.q.theta4, a.joints.theta4, ph.joint_rate),
        );
        let prev_grip = self.grip;
        self.grip = step(self.grip, a.grip, ph.grip_rate);
        self.t += 1;

        let ee = ee_frame(&self.q, &self.cfg.arm);
        let tcp = ee.translation;
        let dir = ee.rotation.cols[0];
        let was_closed = prev_grip < ph.grip_close;
        let now_closed = self.grip < ph.grip_close;
        if !was_closed && now_closed {
            for b in &self.scene.berries {
                let free = !self.held.iter().any(|h| h.id == b.id);
                if free && b.picking_point(ph.picking_offset).dist(tcp) <= ph.capture_radius {
                    self.held.push(Held { id: b.id, offset: b.cur_pos - tcp });
                }
            }
        } else if was_closed && !now_closed {
            self.held.clear();
        }

        let mut detached_ids = Vec::new();
        for h in &self.held {
            let b = self.scene.berries.iter_mut().find(|b| b.id == h.id).expect("held berry exists");
            b.cur_pos = tcp + h.offset;
            if b.attached && b.cur_pos.dist(b.rest_pos) >= ph.detach_distance {
                b.attached = false;
                detached_ids.push(b.id);
            }
        }
        self.detached.extend_from_slice(&detached_ids);

        let body = &ph.body;
        let seg_a = tcp - dir * body.back;
        let seg_b = tcp - dir * body.front;
        let (slab_lo, slab_hi) = (tcp.z - body.below, tcp.z + body.above);
        let left = V3::new(-dir.y, dir.x, 0.0);
        let push = |pos: V3, radius: f64, z_lo: f64, z_hi: f64| -> Option<(V3, f64)> {
            if z_hi < slab_lo || z_lo > slab_hi {
                return None;
            }
            let c = closest_on_segment_xy(seg_a, seg_b, pos);
            let d_vec = pos.xy() - c;
            let d = d_vec.norm();
            let min = body.radius + radius;
            if d >= min {
                return None;
            }
            let n = if d > 1e-12 {
                d_vec * (1.0 / d)
            } else if (pos - tcp).dot(left) >= 0.0 {
                left
            } else {
                -left
            };
            Some((n * (min - d), min - d))
        };
        let clamp_slack = |pos: V3, rest: V3| {
            let disp = pos - rest;
            let n = disp.norm();
            if n > ph.stem_slack {
                rest + disp * (ph.stem_slack / n)
            } else {
                pos
            }
        };

        let mut contacts = Vec::new();
        for b in &mut self.scene.berries {
            if !b.attached || self.held.iter().any(|h| h.id == b.id) {
                continue;
            }
            match push(b.cur_pos, b.radius, b.cur_pos.z - b.radius, b.anchor.z) {
                Some((delta, depth)) => {
                    b.cur_pos = clamp_slack(b.cur_pos + delta, b.rest_pos);
                    contacts.push(Contact { object: ContactObject::Berry(b.id), depth });
                }
                None => b.cur_pos = b.rest_pos + (b.cur_pos - b.rest_pos) * ph.relax,
            }
        }
        for (i, l) in self.scene.leaves.iter_mut().enumerate() {
            let (reach, half_h) = leaf_extent(l);
            match push(l.cur_center, reach, l.cur_center.z - half_h, l.cur_center.z + half_h) {
                Some((delta, depth)) => {
                    if l.pushable {
                        l.cur_center = clamp_slack(l.cur_center + delta, l.rest_center);
                    }
                    contacts.push(Contact { object: ContactObject::Leaf(i), depth });
                }
                None => l.cur_center = l.rest_center + (l.cur_center - l.rest_center) * ph.relax,
            }
        }

        if self.first_detach.is_none() && !detached_ids.is_empty() {
            self.first_detach = Some(self.t);
        }
        let settled = self.first_detach.is_some_and(|s| self.t >= s + self.cfg.settle_steps);
        if settled || self.t >= self.cfg.max_steps {
            self.terminal = true;
            self.outcome = self.classify();
        }
        Ok(StepInfo { detached_ids, contacts, terminal: self.terminal, outcome: self.outcome })
    }

    fn classify(&self) -> Outcome {
        let target_held = self.held.iter().any(|h| h.id == self.scene.target_id);
        classify_detachments(&self.detached, self.scene.target_id, target_held)
    }

    pub fn episode_outcome(&self) -> Result<Outcome, SimError> {
        if self.terminal {
            Ok(self.outcome)
        } else {
            Err(SimError::NotTerminal)
        }
    }
}

/// Terminal outcome from the detached berry ids.
pub fn classify_detachments(detached: &[usize], target_id: usize, target_held: bool) -> Outcome {
    match detached {
        [] => Outcome::Timeout,
        [only] if *only != target_id => Outcome::WrongTarget,
        [_] if target_held => Outcome::Success,
        [_] => Outcome::Timeout,
        _ => Outcome::MultiPick,
    }
}

/// Horizontal reach and vertical half-height of a leaf ellipse.
pub fn leaf_extent(l: &super::scene::Leaf) -> (f64, f64) {
    let (a1, a2) = l.axis_vectors();
    ((a1.y * a1.y + a2.y * a2.y).sqrt(), (a1.z * a1.z + a2.z * a2.z).sqrt())
}

/// Seeded start configuration facing `target` from behind.
pub fn home_pose(target: V3, seed: u64, home: &HomeConfig, arm: &ScaraParams<f64>) -> Result<JointState<f64>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0A11_C0DE_0000_0000);
    let radial = target.y.atan2(target.x);
    let yaw = radial + rng.random_range(-home.cone_half_angle..=home.cone_half_angle);
    let back = rng.random_range(home.min_back..=home.max_back);
    let dz = rng.random_range(-home.z_jitter..=home.z_jitter);
    let pose = EndPose::planar(target.x - back * yaw.cos(), target.y - back * yaw.sin(), target.z + dz, yaw);
    Ok(inverse_kinematics(&pose, arm, Elbow::Down)?)
}

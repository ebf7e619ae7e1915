use std::collections::BTreeMap;
use std::path::PathBuf;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use berrypick_core::dataset::{write_episode, EpisodeMeta, EpisodeRecord, Source, FORMAT_VERSION};
use berrypick_core::scara::{Action, JointState};
use berrypick_core::sim::{CameraLabel, EnvConfig, Observation, Outcome, SimEnv};
use serde::{Deserialize, Serialize};

use crate::protocol::{ClientMsg, RecordAction, ServerMsg};
use crate::TeleopError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeleopConfig {
    pub env: EnvConfig,
    pub state_id: usize,
    pub seed: u64,
    /// Observation stream rate; the env itself steps at `env.fps`.
    pub fps: f64,
    /// Dataset root for kept recordings.
    pub out_dir: PathBuf,
}

impl TeleopConfig {
    pub fn validate(&self) -> Result<(), TeleopError> {
        if !(self.fps > 0.0 && self.fps <= self.env.fps) {
            return Err(TeleopError::InvalidConfig(format!(
                "stream fps {} must lie in (0, {}]",
                self.fps, self.env.fps
            )));
        }
        if self.state_id > 5 {
            return Err(TeleopError::InvalidConfig(format!("state {} out of range 0-5", self.state_id)));
        }
        Ok(())
    }
}

/// Latest operator command: joint increments applied every env step, and
/// the gripper target (`None` holds the current opening).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Command {
    pub dq: [f64; 4],
    pub grip: Option<f64>,
}

#[derive(Default)]
struct Recording {
    images: BTreeMap<CameraLabel, Vec<u8>>,
    q: Vec<[f32; 4]>,
    grip: Vec<f32>,
    actions: Vec<[f32; 5]>,
}

/// One env driven by one operator. Owns all env access; the server feeds
/// it messages and ticks.
pub struct Session {
    cfg: TeleopConfig,
    env: SimEnv,
    state_id: usize,
    seed: u64,
    command: Command,
    recording: Option<Recording>,
    phase: f64,
    kept: Vec<u64>,
}

fn f32_row<const N: usize>(a: [f64; N]) -> [f32; N] {
    a.map(|v| v as f32)
}

impl Session {
    pub fn new(cfg: TeleopConfig) -> Result<Self, TeleopError> {
        cfg.validate()?;
        let mut env = SimEnv::new(cfg.env.clone())?;
        env.reset(cfg.state_id, cfg.seed)?;
        Ok(Session {
            state_id: cfg.state_id,
            seed: cfg.seed,
            cfg,
            env,
            command: Command::default(),
            recording: None,
            phase: 0.0,
            kept: Vec::new(),
        })
    }

    pub fn env(&self) -> &SimEnv {
        &self.env
    }

    pub fn is_recording(&self) -> bool {
        self.recording.is_some()
    }

    pub fn recorded_steps(&self) -> usize {
        self.recording.as_ref().map_or(0, |r| r.actions.len())
    }

    /// Dataset ids of episodes kept so far.
    pub fn kept_episodes(&self) -> &[u64] {
        &self.kept
    }

    pub fn command(&self) -> Command {
        self.command
    }

    /// Replaces the latest command; the previous one is dropped unapplied
    /// if no tick happened in between.
    pub fn set_command(&mut self, cmd: Command) {
        self.command = cmd;
    }

    /// Applies a client message and returns the replies. `cmd` produces
    /// none.
    pub fn handle(&mut self, msg: ClientMsg) -> Vec<ServerMsg> {
        match msg {
            ClientMsg::Cmd { dq, grip } => {
                self.set_command(Command { dq, grip: Some(grip) });
                Vec::new()
            }
            ClientMsg::Reset { state, seed } => match self.env.reset(state, seed) {
                Ok(_) => {
                    let steps = self.recorded_steps();
                    self.recording = None;
                    self.command = Command::default();
                    self.state_id = state;
                    self.seed = seed;
                    vec![self.ack("reset", None, steps)]
                }
                Err(e) => vec![ServerMsg::error(format!("reset failed: {e}"))],
            },
            ClientMsg::Record { action } => self.record(action),
        }
    }

    fn ack(&self, action: &str, episode: Option<u64>, steps: usize) -> ServerMsg {
        ServerMsg::Ack { action: action.into(), recording: self.is_recording(), episode, steps }
    }

    fn record(&mut self, action: RecordAction) -> Vec<ServerMsg> {
        match (action, self.recording.is_some()) {
            (RecordAction::Start, true) => vec![ServerMsg::error("already recording")],
            (RecordAction::Start, false) => {
                let images = self.cfg.env.cameras.iter().map(|c| (*c, Vec::new())).collect();
                self.recording = Some(Recording { images, ..Default::default() });
                vec![self.ack("start", None, 0)]
            }
            (_, false) => vec![ServerMsg::error("not recording")],
            (RecordAction::Discard, true) => {
                let steps = self.recorded_steps();
                self.recording = None;
                vec![self.ack("discard", None, steps)]
            }
            (RecordAction::Stop, true) => {
                let rec = self.recording.take().expect("checked");
                let steps = rec.actions.len();
                match self.keep(rec) {
                    Ok(id) => vec![self.ack("stop", Some(id), steps)],
                    Err(e) => vec![ServerMsg::error(format!("recording not kept: {e}")), self.ack("discard", None, steps)],
                }
            }
        }
    }

    fn keep(&mut self, rec: Recording) -> Result<u64, TeleopError> {
        let outcome = self.env.episode_outcome().unwrap_or(Outcome::Ongoing);
        let env_cfg = self.env.config();
        let meta = EpisodeMeta {
            format_version: FORMAT_VERSION,
            state_id: self.state_id,
            seed: self.seed,
            source: Source::Teleop,
            outcome,
            fps: env_cfg.fps,
            cameras: env_cfg.cameras.clone(),
            image_width: env_cfg.image_width,
            image_height: env_cfg.image_height,
            num_steps: rec.actions.len(),
            extra: BTreeMap::new(),
        };
        let record = EpisodeRecord { meta, images: rec.images, q: rec.q, grip: rec.grip, actions: rec.actions };
        let id = write_episode(&record, &self.cfg.out_dir)?;
        log::info!("kept teleop episode {id} ({} steps, {outcome})", record.len());
        self.kept.push(id);
        Ok(id)
    }

    /// Client went away: recording stops, its buffer is dropped and the arm
    /// holds.
    pub fn disconnect(&mut self) {
        if let Some(r) = self.recording.take() {
            log::info!("client disconnected; discarding {} recorded steps", r.actions.len());
        }
        self.command = Command::default();
    }

    /// Drops any in-progress recording on shutdown; returns its length.
    pub fn shutdown(&mut self) -> usize {
        let steps = self.recorded_steps();
        self.recording = None;
        steps
    }

    /// Action the current command produces from the current joint state.
    /// The env steps with this value; recordings store it rounded to `f32`.
    pub fn current_action(&self) -> [f64; 5] {
        let q = self.env.q().to_array();
        let target: [f64; 4] = std::array::from_fn(|i| q[i] + self.command.dq[i]);
        let grip = self.command.grip.unwrap_or(self.env.grip());
        let a = Action::new(JointState::from_array(target), grip).clamped(&self.env.config().arm);
        a.to_array()
    }

    /// One env step at the env rate. Returns an observation message when
    /// the stream phase says one is due. A terminated env holds still.
    pub fn tick(&mut self) -> Result<Option<ServerMsg>, TeleopError> {
        if !self.env.is_terminal() {
            let action = self.current_action();
            if let Some(rec) = &mut self.recording {
                let obs = self.env.observe();
                for (cam, img) in &obs.images {
                    rec.images.get_mut(cam).expect("configured camera").extend_from_slice(img.raw());
                }
                rec.q.push(f32_row(obs.q.to_array()));
                rec.grip.push(obs.grip as f32);
                rec.actions.push(f32_row(action));
            }
            self.env.step_physics(&Action::from_array(action))?;
        }
        self.phase += self.cfg.fps / self.env.config().fps;
        if self.phase + 1e-9 >= 1.0 {
            self.phase -= 1.0;
            return Ok(Some(self.observation_message()?));
        }
        Ok(None)
    }

    pub fn observation_message(&self) -> Result<ServerMsg, TeleopError> {
        observation_message(&self.env.observe())
    }
}

fn encode(obs: &Observation, cam: CameraLabel) -> Result<String, TeleopError> {
    match obs.images.get(&cam) {
        Some(img) => Ok(B64.encode(img.encode_png()?)),
        None => Ok(String::new()),
    }
}

/// Wire form of an observation; a camera the env does not render is sent
/// as an empty string.
pub fn observation_message(obs: &Observation) -> Result<ServerMsg, TeleopError> {
    Ok(ServerMsg::Obs {
        t: obs.t,
        q: obs.q.to_array(),
        grip: obs.grip,
        img_up: encode(obs, CameraLabel::WristUp)?,
        img_down: encode(obs, CameraLabel::WristDown)?,
    })
}

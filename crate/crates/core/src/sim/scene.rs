//! Strawberry cluster layouts and seeded scene construction.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::V3;
use super::SimError;

pub const NUM_STATES: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Berry {
    pub id: usize,
    /// Ripe berries are red (the target class); unripe ones are white.
    pub ripe: bool,
    /// Stem attachment point on the cultivation pipe.
    pub anchor: V3,
    pub rest_pos: V3,
    pub cur_pos: V3,
    pub attached: bool,
    pub radius: f64,
}

impl Berry {
    /// Stem point just above the calyx where the grasp must close.
    pub fn picking_point(&self, offset: f64) -> V3 {
        self.cur_pos + V3::new(0.0, 0.0, self.radius + offset)
    }

    pub fn top(&self) -> V3 {
        self.cur_pos + V3::new(0.0, 0.0, self.radius)
    }
}

/// Flat elliptical leaf hanging in a vertical plane facing the arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub anchor: V3,
    pub rest_center: V3,
    /// Semi-axes (m).
    pub axes: [f64; 2],
    /// In-plane rotation of the first axis (rad).
    pub orientation: f64,
    pub cur_center: V3,
    pub pushable: bool,
}

impl Leaf {
    /// In-world semi-axis vectors of the ellipse.
    pub fn axis_vectors(&self) -> (V3, V3) {
        let (s, c) = self.orientation.sin_cos();
        (V3::new(0.0, c, s) * self.axes[0], V3::new(0.0, -s, c) * self.axes[1])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub berries: Vec<Berry>,
    pub leaves: Vec<Leaf>,
    pub target_id: usize,
    pub state_id: usize,
    pub seed: u64,
}

impl Scene {
    pub fn target(&self) -> &Berry {
        self.berry(self.target_id).expect("scene target exists")
    }

    pub fn berry(&self, id: usize) -> Option<&Berry> {
        self.berries.iter().find(|b| b.id == id)
    }

    pub fn empty(state_id: usize, seed: u64) -> Scene {
        Scene { berries: Vec::new(), leaves: Vec::new(), target_id: 0, state_id, seed }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafLayout {
    /// Center offset from the target berry center (m).
    pub offset: [f64; 3],
    pub axes: [f64; 2],
    pub orientation: f64,
}

/// Non-target objects of one cluster state, as offsets from the target
/// berry center. `x` points away from the arm base, so negative `x` is in
/// front of the target.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StateLayout {
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub unripe: Vec<[f64; 3]>,
    #[serde(default)]
    pub leaves: Vec<LeafLayout>,
}

/// Layouts of the six cluster states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateTable {
    pub states: Vec<StateLayout>,
}

impl Default for StateTable {
    fn default() -> Self {
        let s = |d: &str, unripe: Vec<[f64; 3]>, leaves: Vec<LeafLayout>| StateLayout {
            description: d.to_string(),
            unripe,
            leaves,
        };
        StateTable {
            states: vec![
                s("single ripe berry, no occluders", vec![], vec![]),
                s("ripe behind one unripe, 2 cm lateral offset", vec![[-0.035, 0.020, 0.0]], vec![]),
                s("ripe directly behind unripe", vec![[-0.040, 0.0, 0.0]], vec![]),
                s("ripe between two unripe, 3 cm to each side", vec![[-0.010, 0.030, 0.0], [-0.010, -0.030, 0.0]], vec![]),
                s(
                    "ripe behind two unripe plus one leaf",
                    vec![[-0.040, 0.018, 0.0], [-0.040, -0.018, 0.0]],
                    vec![LeafLayout { offset: [-0.055, 0.005, 0.015], axes: [0.028, 0.013], orientation: 0.5 }],
                ),
                s("two-berry cluster, ripe behind unripe", vec![[-0.030, -0.012, 0.005]], vec![]),
            ],
        }
    }
}

/// On-disk form: `[states.N]` tables keyed by state id.
#[derive(Serialize, Deserialize)]
struct StateTableFile {
    states: BTreeMap<String, StateLayout>,
}

impl StateTable {
    pub fn layout(&self, state_id: usize) -> Result<&StateLayout, SimError> {
        self.states.get(state_id).ok_or(SimError::InvalidState(state_id))
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let file: StateTableFile =
            toml::from_str(text).map_err(|e| SimError::Config(format!("state table: {e}")))?;
        let mut states = vec![StateLayout::default(); NUM_STATES];
        let mut seen = [false; NUM_STATES];
        for (key, layout) in file.states {
            let id: usize = key.parse().map_err(|_| SimError::Config(format!("bad state key {key:?}")))?;
            if id >= NUM_STATES {
                return Err(SimError::InvalidState(id));
            }
            seen[id] = true;
            states[id] = layout;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(SimError::Config(format!("state table is missing state {missing}")));
        }
        Ok(StateTable { states })
    }

    pub fn to_toml_string(&self) -> String {
        let file = StateTableFile {
            states: self.states.iter().enumerate().map(|(i, s)| (i.to_string(), s.clone())).collect(),
        };
        toml::to_string(&file).expect("state table serializes")
    }
}

/// Placement constants shared by every state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    /// Nominal target berry center (m).
    pub target_center: [f64; 3],
    /// Height of the cultivation pipe the stems hang from (m).
    pub pipe_height: f64,
    pub berry_radius: f64,
    /// Uniform jitter of the whole cluster, per axis (m).
    pub cluster_jitter: f64,
    /// Additional independent jitter of each berry, per axis (m).
    pub berry_jitter: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            target_center: [0.42, 0.0, 0.178],
            pipe_height: 0.30,
            berry_radius: 0.012,
            cluster_jitter: 0.017,
            berry_jitter: 0.003,
        }
    }
}

/// Builds the scene for `(state_id, seed)`. Rest positions are jittered by
/// at most `cluster_jitter + berry_jitter` per axis.
pub fn make_scene(
    state_id: usize,
    seed: u64,
    table: &StateTable,
    cfg: &SceneConfig,
) -> Result<Scene, SimError> {
    if state_id >= NUM_STATES {
        return Err(SimError::InvalidState(state_id));
    }
    let layout = table.layout(state_id)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CE7_E000 ^ ((state_id as u64) << 40));
    let mut jit = |amp: f64| {
        if amp > 0.0 {
            V3::new(rng.random_range(-amp..=amp), rng.random_range(-amp..=amp), rng.random_range(-amp..=amp))
        } else {
            V3::ZERO
        }
    };
    let cluster = V3::from_array(cfg.target_center) + jit(cfg.cluster_jitter);
    let mut berries = Vec::with_capacity(1 + layout.unripe.len());
    let mut push_berry = |id: usize, ripe: bool, center: V3| {
        berries.push(Berry {
            id,
            ripe,
            anchor: V3::new(center.x, center.y, cfg.pipe_height),
            rest_pos: center,
            cur_pos: center,
            attached: true,
            radius: cfg.berry_radius,
        });
    };
    push_berry(0, true, cluster + jit(cfg.berry_jitter));
    for (i, off) in layout.unripe.iter().enumerate() {
        push_berry(i + 1, false, cluster + V3::from_array(*off) + jit(cfg.berry_jitter));
    }
    let leaves = layout
        .leaves
        .iter()
        .map(|l| {
            let center = cluster + V3::from_array(l.offset) + jit(cfg.berry_jitter);
            Leaf {
                anchor: V3::new(center.x, center.y, cfg.pipe_height),
                rest_center: center,
                axes: l.axes,
                orientation: l.orientation,
                cur_center: center,
                pushable: true,
            }
        })
        .collect();
    Ok(Scene { berries, leaves, target_id: 0, state_id, seed })
}

//! Layered run configuration: built-in defaults, then an optional TOML
//! file, then `--set section.key=value` overrides, then dedicated flags.

use std::path::Path;

use berrypick_core::expert::ExpertConfig;
use berrypick_core::policy::PolicyConfig;
use berrypick_core::runtime::RolloutConfig;
use berrypick_core::sim::EnvConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

/// File name of the echoed configuration in every output directory.
pub const ECHO_FILE: &str = "run_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollectSection {
    pub episodes: usize,
    pub states: Vec<usize>,
    pub seed: u64,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection { episodes: 200, states: vec![1, 2, 3, 4, 5], seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub states: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { states: (0..6).collect(), trials: 10, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub state_id: usize,
    pub seed: u64,
    pub fps: f64,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            host: "127.0.0.1".into(),
            port: berrypick_teleop::DEFAULT_PORT,
            state_id: 1,
            seed: 0,
            fps: 15.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub collect: CollectSection,
    pub eval: EvalSection,
    pub serve: ServeSection,
    pub rollout: RolloutConfig,
    pub expert: ExpertConfig,
    pub policy: PolicyConfig,
    pub env: EnvConfig,
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Resolves defaults, `file` and `overrides` (`a.b.c=value`; the value
    /// is read as a TOML literal, falling back to a bare string).
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = Table::try_from(RunConfig::default()).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            let over: Table =
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            merge(&mut table, over);
        }
        for item in overrides {
            let (key, raw) =
                item.split_once('=').ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {item:?}")))?;
            let mut path: Vec<&str> = key.trim().split('.').collect();
            let leaf = path.pop().filter(|l| !l.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in {item:?}")))?;
            let mut node = &mut table;
            for part in path {
                node = match node.get_mut(part) {
                    Some(Value::Table(t)) => t,
                    _ => return Err(CliError::Usage(format!("unknown config section {part:?} in {key:?}"))),
                };
            }
            if !node.contains_key(leaf) {
                return Err(CliError::Usage(format!("unknown config key {key:?}")));
            }
            node.insert(leaf.to_string(), parse_scalar(raw.trim()));
        }
        Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(ECHO_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::resolve(Some(path), &[])
    }
}

/// Parses `1,2,3`, `0-5` or mixtures such as `0-2,4`; every state must lie
/// in 0..=5.
pub fn parse_states(s: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("invalid state {v:?}"));
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b)?);
                if a > b {
                    return Err(format!("empty state range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err("state list is empty".into());
    }
    if let Some(bad) = out.iter().find(|s| **s > 5) {
        return Err(format!("state {bad} out of range 0-5"));
    }
    out.dedup();
    Ok(out)
}

use std::fs;
use std::path::Path;

use berrypick_nn::Real;

use super::{LossBreakdown, Policy, PolicyConfig, PolicyError};
use crate::dataset::NormStats;

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const STATS_FILE: &str = "norm_stats.json";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub val_total: Option<f64>,
}

impl LossRow {
    pub const CSV_HEADER: &'static str = "step,rec_action,reg,rec_end_pose,total,val_total";

    pub fn to_csv(&self) -> String {
        let l = &self.loss;
        let val = self.val_total.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{},{}", self.step, l.rec_action, l.reg, l.rec_end_pose, l.total, val)
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return None;
        }
        let num = |s: &str| s.parse::<f64>().ok();
        Some(LossRow {
            step: f[0].parse().ok()?,
            loss: LossBreakdown { rec_action: num(f[1])?, reg: num(f[2])?, rec_end_pose: num(f[3])?, total: num(f[4])? },
            val_total: if f[5].is_empty() { None } else { Some(num(f[5])?) },
        })
    }
}

fn ck_err(path: &Path, msg: impl ToString) -> PolicyError {
    PolicyError::Checkpoint { path: path.display().to_string(), msg: msg.to_string() }
}

/// Writes weights, config, normalization statistics and the loss log.
pub fn save_checkpoint<T: Real>(dir: &Path, policy: &Policy<T>, log: &[LossRow]) -> Result<(), PolicyError> {
    fs::create_dir_all(dir).map_err(|e| ck_err(dir, e))?;
    policy.store().save(&dir.join(WEIGHTS_FILE))?;
    let cfg = serde_json::to_string_pretty(&policy.cfg).map_err(|e| ck_err(dir, e))?;
    fs::write(dir.join(CONFIG_FILE), cfg).map_err(|e| ck_err(dir, e))?;
    let stats = serde_json::to_string_pretty(&policy.stats).map_err(|e| ck_err(dir, e))?;
    fs::write(dir.join(STATS_FILE), stats).map_err(|e| ck_err(dir, e))?;
    let mut csv = String::from(LossRow::CSV_HEADER);
    csv.push('\n');
    for row in log {
        csv.push_str(&row.to_csv());
        csv.push('\n');
    }
    fs::write(dir.join(LOSS_LOG_FILE), csv).map_err(|e| ck_err(dir, e))?;
    Ok(())
}

/// Rebuilds a policy from a checkpoint directory.
pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Policy<T>, PolicyError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| ck_err(&p, e))
    };
    let cfg: PolicyConfig =
        serde_json::from_str(&read(CONFIG_FILE)?).map_err(|e| ck_err(&dir.join(CONFIG_FILE), e))?;
    let stats: NormStats = serde_json::from_str(&read(STATS_FILE)?).map_err(|e| ck_err(&dir.join(STATS_FILE), e))?;
    let mut policy = Policy::new(cfg, stats)?;
    policy.store_mut().load(&dir.join(WEIGHTS_FILE))?;
    Ok(policy)
}

/// Reads a loss log written by [`save_checkpoint`].
pub fn read_loss_log(dir: &Path) -> Result<Vec<LossRow>, PolicyError> {
    let p = dir.join(LOSS_LOG_FILE);
    let text = fs::read_to_string(&p).map_err(|e| ck_err(&p, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| LossRow::parse_csv(l).ok_or_else(|| ck_err(&p, format!("bad row {l:?}"))))
        .collect()
}

//! Success-rate matrix over policies and cluster states, failure taxonomy,
//! camera ablations and report rendering.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use berrypick_nn::Real;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::policy::{count_parameters, measure_inference_ms, Policy, PolicyConfig, PolicyError};
use crate::runtime::{run_episode, RolloutConfig, RuntimeError};
use crate::seeds::mix_seed;
use crate::sim::{CameraLabel, Outcome, SimEnv};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("success is not a failure")]
    SuccessNotAFailure,
    #[error("trials_per_cell must be at least 1")]
    NoTrials,
    #[error("nothing to report")]
    EmptyTable,
    #[error("camera setting {0:?} is not one of up, down, up+down")]
    BadCameraSetting(Vec<CameraLabel>),
    #[error("{path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trial failed: {0}")]
    Trial(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::IoFailure { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub policy: String,
    pub state_id: usize,
    pub index: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureCategory {
    TargetMisidentification,
    MultiPicking,
    TrajectoryErrors,
}

impl FailureCategory {
    pub const ALL: [FailureCategory; 3] =
        [FailureCategory::TargetMisidentification, FailureCategory::MultiPicking, FailureCategory::TrajectoryErrors];

    pub fn label(self) -> &'static str {
        match self {
            FailureCategory::TargetMisidentification => "Target Misidentification",
            FailureCategory::MultiPicking => "Multi-Picking",
            FailureCategory::TrajectoryErrors => "Trajectory Errors",
        }
    }
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

pub fn classify_failure(outcome: Outcome) -> Result<FailureCategory, EvalError> {
    match outcome {
        Outcome::Success => Err(EvalError::SuccessNotAFailure),
        Outcome::WrongTarget => Ok(FailureCategory::TargetMisidentification),
        Outcome::MultiPick => Ok(FailureCategory::MultiPicking),
        Outcome::Timeout | Outcome::Ongoing => Ok(FailureCategory::TrajectoryErrors),
    }
}

/// Environment seed of trial `index` in state `state`. It does not depend
/// on the policy, so every policy faces the same scenes.
pub fn trial_seed(base: u64, state: usize, index: usize) -> u64 {
    mix_seed(&[base, state as u64, index as u64])
}

/// Something that can execute one evaluation trial.
pub trait TrialRunner {
    fn name(&self) -> &str;
    /// Returns the outcome and the number of steps used.
    fn run_trial(&mut self, state: usize, seed: u64) -> Result<(Outcome, usize), EvalError>;
}

/// Closed-loop policy rollouts in a simulator.
pub struct PolicyRunner<T: Real> {
    pub name: String,
    pub policy: Policy<T>,
    pub env: SimEnv,
    pub rollout: RolloutConfig,
}

impl<T: Real> TrialRunner for PolicyRunner<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn run_trial(&mut self, state: usize, seed: u64) -> Result<(Outcome, usize), EvalError> {
        let log = run_episode(&mut self.env, &self.policy, &self.rollout, state, seed)?;
        Ok((log.outcome.unwrap_or(Outcome::Timeout), log.len()))
    }
}

/// Runner whose construction failed; every trial reports the error.
pub struct FailedRunner {
    pub name: String,
    pub error: String,
}

impl TrialRunner for FailedRunner {
    fn name(&self) -> &str {
        &self.name
    }

    fn run_trial(&mut self, _state: usize, _seed: u64) -> Result<(Outcome, usize), EvalError> {
        Err(EvalError::Trial(self.error.clone()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub states: Vec<usize>,
    pub trials_per_cell: usize,
    pub base_seed: u64,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        MatrixConfig { states: (0..6).collect(), trials_per_cell: 10, base_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub policy: String,
    pub state_id: usize,
    pub trials: Vec<TrialResult>,
    /// Set when the cell could not be evaluated.
    pub error: Option<String>,
}

impl CellResult {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.outcome == Outcome::Success).count()
    }

    pub fn rate(&self) -> Option<f64> {
        (!self.trials.is_empty()).then(|| self.successes() as f64 / self.trials.len() as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub policies: Vec<String>,
    pub states: Vec<usize>,
    pub cells: Vec<CellResult>,
    /// Per-policy configuration fingerprints.
    pub fingerprints: BTreeMap<String, String>,
}

impl ResultsTable {
    pub fn cell(&self, policy: &str, state: usize) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.policy == policy && c.state_id == state)
    }

    pub fn rate(&self, policy: &str, state: usize) -> Option<f64> {
        self.cell(policy, state).and_then(CellResult::rate)
    }

    /// Mean of the per-state rates that could be evaluated.
    pub fn average(&self, policy: &str) -> Option<f64> {
        let rates: Vec<f64> = self.states.iter().filter_map(|s| self.rate(policy, *s)).collect();
        (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64)
    }

    pub fn trials(&self, policy: &str) -> impl Iterator<Item = &TrialResult> {
        let policy = policy.to_string();
        self.cells.iter().filter(move |c| c.policy == policy).flat_map(|c| c.trials.iter())
    }

    pub fn failure_counts(&self, policy: &str) -> BTreeMap<FailureCategory, usize> {
        let mut counts: BTreeMap<_, _> = FailureCategory::ALL.iter().map(|c| (*c, 0)).collect();
        for t in self.trials(policy) {
            if let Ok(cat) = classify_failure(t.outcome) {
                *counts.entry(cat).or_default() += 1;
            }
        }
        counts
    }
}

fn cell_cache_path(dir: &Path, policy: &str, state: usize) -> PathBuf {
    let safe: String = policy.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    dir.join(format!("{safe}__state{state}.json"))
}

fn load_cached(path: &Path, cfg: &MatrixConfig, policy: &str, state: usize) -> Option<CellResult> {
    let cell: CellResult = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
    let valid = cell.error.is_none()
        && cell.policy == policy
        && cell.state_id == state
        && cell.trials.len() == cfg.trials_per_cell
        && cell.trials.iter().enumerate().all(|(i, t)| t.seed == trial_seed(cfg.base_seed, state, i));
    valid.then_some(cell)
}

fn store_cached(path: &Path, cell: &CellResult) -> Result<(), EvalError> {
    let tmp = path.with_extension("json.tmp");
    let json = serde_json::to_string_pretty(cell).expect("cell serializes");
    fs::write(&tmp, json).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Runs every `(runner, state)` cell with paired trial seeds. Completed
/// cells are cached under `cache` and reused on rerun; a failing cell is
/// recorded with its error and the matrix continues.
pub fn run_matrix(
    runners: &mut [Box<dyn TrialRunner + '_>],
    cfg: &MatrixConfig,
    cache: Option<&Path>,
) -> Result<ResultsTable, EvalError> {
    if cfg.trials_per_cell == 0 {
        return Err(EvalError::NoTrials);
    }
    if let Some(dir) = cache {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut table = ResultsTable {
        policies: runners.iter().map(|r| r.name().to_string()).collect(),
        states: cfg.states.clone(),
        ..Default::default()
    };
    for runner in runners.iter_mut() {
        let name = runner.name().to_string();
        for &state in &cfg.states {
            let path = cache.map(|d| cell_cache_path(d, &name, state));
            if let Some(cell) = path.as_deref().and_then(|p| load_cached(p, cfg, &name, state)) {
                table.cells.push(cell);
                continue;
            }
            let mut cell = CellResult { policy: name.clone(), state_id: state, trials: Vec::new(), error: None };
            for index in 0..cfg.trials_per_cell {
                let seed = trial_seed(cfg.base_seed, state, index);
                match runner.run_trial(state, seed) {
                    Ok((outcome, steps)) => {
                        cell.trials.push(TrialResult { policy: name.clone(), state_id: state, index, seed, outcome, steps })
                    }
                    Err(e) => {
                        log::warn!("{name} state {state} trial {index}: {e}");
                        cell.trials.clear();
                        cell.error = Some(e.to_string());
                        break;
                    }
                }
            }
            if let (Some(p), None) = (&path, &cell.error) {
                store_cached(p, &cell)?;
            }
            table.cells.push(cell);
        }
    }
    Ok(table)
}

/// Reference success rates (percent) for State0..State5 and the average,
/// printed alongside desk results for orientation only.
pub const REFERENCE_ROWS: [(&str, [f64; 7]); 3] = [
    ("ACT", [10.0, 60.0, 30.0, 70.0, 30.0, 10.0, 35.0]),
    ("EPACT-L", [50.0, 90.0, 70.0, 50.0, 80.0, 60.0, 66.7]),
    ("EPACT-EE", [70.0, 60.0, 80.0, 90.0, 60.0, 70.0, 71.7]),
];

fn pct(r: Option<f64>) -> String {
    r.map(|v| format!("{:.1}%", v * 100.0)).unwrap_or_else(|| "n/a".to_string())
}

/// Markdown success-rate table with one column per state plus `Avg.`.
pub fn markdown_table(table: &ResultsTable, include_reference: bool) -> String {
    let mut out = String::from("| Method |");
    for s in &table.states {
        out.push_str(&format!(" State{s} |"));
    }
    out.push_str(" Avg. |\n|---|");
    out.push_str(&"---|".repeat(table.states.len() + 1));
    out.push('\n');
    for p in &table.policies {
        out.push_str(&format!("| {p} |"));
        for s in &table.states {
            out.push_str(&format!(" {} |", pct(table.rate(p, *s))));
        }
        out.push_str(&format!(" {} |\n", pct(table.average(p))));
    }
    if include_reference && table.states == (0..6).collect::<Vec<_>>() {
        for (name, row) in REFERENCE_ROWS {
            out.push_str(&format!("| {name} (reference) |"));
            for v in row {
                out.push_str(&format!(" {v:.1}% |"));
            }
            out.push('\n');
        }
    }
    out
}

pub fn csv_rows(table: &ResultsTable) -> String {
    let mut out = String::from("policy,state,trials,successes,rate,target_misidentification,multi_picking,trajectory_errors,error\n");
    for p in &table.policies {
        for s in &table.states {
            let Some(c) = table.cell(p, *s) else { continue };
            let mut counts = [0usize; 3];
            for t in &c.trials {
                if let Ok(cat) = classify_failure(t.outcome) {
                    counts[FailureCategory::ALL.iter().position(|x| *x == cat).expect("listed")] += 1;
                }
            }
            let rate = c.rate().map(|r| format!("{r:.4}")).unwrap_or_default();
            let err = c.error.as_deref().unwrap_or("").replace([',', '\n'], ";");
            out.push_str(&format!(
                "{p},{s},{},{},{rate},{},{},{},{err}\n",
                c.trials.len(),
                c.successes(),
                counts[0],
                counts[1],
                counts[2]
            ));
        }
    }
    out
}

/// One row per trial: seed, outcome and failure category.
pub fn trial_rows(table: &ResultsTable) -> String {
    let mut out = String::from("policy,state,trial,seed,outcome,steps,failure\n");
    for p in &table.policies {
        for s in &table.states {
            let Some(c) = table.cell(p, *s) else { continue };
            for t in &c.trials {
                let failure = classify_failure(t.outcome).map(|f| f.label()).unwrap_or("");
                out.push_str(&format!("{p},{s},{},{},{},{},{failure}\n", t.index, t.seed, t.outcome, t.steps));
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub trials: PathBuf,
    pub markdown: PathBuf,
    pub failures: PathBuf,
}

/// Writes `results.csv`, `trials.csv`, `results.md` and `failures.json`
/// into `dir`.
pub fn render_report(table: &ResultsTable, dir: &Path) -> Result<ReportFiles, EvalError> {
    if table.cells.is_empty() || table.policies.is_empty() || table.states.is_empty() {
        return Err(EvalError::EmptyTable);
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = ReportFiles {
        csv: dir.join("results.csv"),
        trials: dir.join("trials.csv"),
        markdown: dir.join("results.md"),
        failures: dir.join("failures.json"),
    };
    fs::write(&files.csv, csv_rows(table)).map_err(io_err(&files.csv))?;
    fs::write(&files.trials, trial_rows(table)).map_err(io_err(&files.trials))?;
    let md = format!("# Success rate per cluster state\n\n{}", markdown_table(table, true));
    fs::write(&files.markdown, md).map_err(io_err(&files.markdown))?;
    let failures: BTreeMap<&str, BTreeMap<String, usize>> = table
        .policies
        .iter()
        .map(|p| (p.as_str(), table.failure_counts(p).into_iter().map(|(k, v)| (k.label().to_string(), v)).collect()))
        .collect();
    let json = serde_json::to_string_pretty(&failures).expect("counts serialize");
    fs::write(&files.failures, json).map_err(io_err(&files.failures))?;
    Ok(files)
}

/// Short SHA-256 fingerprint of any serializable configuration.
pub fn config_hash<S: Serialize>(cfg: &S) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

/// `{timestamp}_{hash}` directory under `root`.
pub fn run_dir_name<S: Serialize>(cfg: &S, now: chrono::DateTime<chrono::Utc>) -> String {
    format!("{}_{}", now.format("%Y%m%dT%H%M%SZ"), config_hash(cfg))
}

/// The three permitted camera settings.
pub fn camera_settings() -> Vec<Vec<CameraLabel>> {
    vec![vec![CameraLabel::WristUp], vec![CameraLabel::WristDown], CameraLabel::ALL.to_vec()]
}

fn setting_name(cams: &[CameraLabel]) -> String {
    cams.iter().map(|c| c.short()).collect::<Vec<_>>().join("+")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub cameras: Vec<CameraLabel>,
    pub parameters: usize,
    pub inference_ms: f64,
    pub average_success: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub table: ResultsTable,
}

impl AblationReport {
    /// Parameter count and latency columns plus the grouped per-state rates.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,parameters,inference_ms,average_success");
        for s in &self.table.states {
            out.push_str(&format!(",state{s}"));
        }
        out.push('\n');
        for r in &self.rows {
            let avg = r.average_success.map(|v| format!("{v:.4}")).unwrap_or_default();
            out.push_str(&format!("{},{},{:.3},{avg}", r.setting, r.parameters, r.inference_ms));
            for s in &self.table.states {
                let rate = self.table.rate(&r.setting, *s).map(|v| format!("{v:.4}")).unwrap_or_default();
                out.push_str(&format!(",{rate}"));
            }
            out.push('\n');
        }
        out
    }
}

/// For each camera setting: obtain a policy through `train` (same data and
/// seed for all), count its parameters, time inference, then evaluate all
/// settings on one paired matrix built by `runner`.
pub fn camera_ablation<T, F, R>(
    base: &PolicyConfig,
    settings: &[Vec<CameraLabel>],
    mut train: F,
    mut runner: R,
    matrix: &MatrixConfig,
    latency_reps: usize,
) -> Result<AblationReport, EvalError>
where
    T: Real,
    F: FnMut(&PolicyConfig) -> Result<Policy<T>, PolicyError>,
    R: FnMut(String, Policy<T>) -> Result<Box<dyn TrialRunner>, EvalError>,
{
    let allowed = camera_settings();
    let mut rows = Vec::new();
    let mut runners: Vec<Box<dyn TrialRunner>> = Vec::new();
    for cams in settings {
        if !allowed.contains(cams) {
            return Err(EvalError::BadCameraSetting(cams.clone()));
        }
        let cfg = PolicyConfig { cameras: cams.clone(), ..base.clone() };
        let name = setting_name(cams);
        let parameters = count_parameters(&cfg)?;
        let policy = train(&cfg)?;
        let inference_ms = measure_inference_ms(&policy, latency_reps)?;
        rows.push(AblationRow { setting: name.clone(), cameras: cams.clone(), parameters, inference_ms, average_success: None });
        runners.push(runner(name, policy)?);
    }
    let table = run_matrix(&mut runners, matrix, None)?;
    for r in &mut rows {
        r.average_success = table.average(&r.setting);
    }
    Ok(AblationReport { rows, table })
}

//! Acceptance suite for the picking pipeline. Prints one line per criterion
//! and exits non-zero if any criterion fails. Criterion 7 is directional:
//! an ordering miss is reported as FLAG, not FAIL.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use berrypick_core::dataset::{read_episode, sample_chunk, EpisodeRecord};
use berrypick_core::eval::*;
use berrypick_core::expert::{collect_demos, run_expert_episode, ExpertConfig};
use berrypick_core::policy::diagnostics::{gradient_check, gripper_branch_end_pose_grad, synthetic_batch, synthetic_eps};
use berrypick_core::policy::*;
use berrypick_core::runtime::{open_loop_replay, EnsembleBuffer, RolloutConfig};
use berrypick_core::scara::*;
use berrypick_core::seeds::mix_seed;
use berrypick_core::sim::{EnvConfig, Outcome, SimEnv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Flag,
}

type Verdict = (Status, String);

fn check(ok: bool, detail: String) -> Verdict {
    (if ok { Status::Pass } else { Status::Fail }, detail)
}

fn work_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

// 1. FK/IK roundtrip.
fn kinematics() -> Verdict {
    let start = Instant::now();
    let p = ScaraParams::<f64>::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let n = 10_000;
    for _ in 0..n {
        let mut u = |r: Interval<f64>| rng.random_range(r.lo..=r.hi);
        let q = JointState::new(u(p.theta1_range), u(p.theta2_range), u(p.d3_range), u(p.theta4_range));
        let back = inverse_kinematics(&forward_kinematics(&q, &p), &p, q.elbow()).unwrap();
        for (a, b, angular) in [
            (back.theta1, q.theta1, true),
            (back.theta2, q.theta2, false),
            (back.d3, q.d3, false),
            (back.theta4, q.theta4, true),
        ] {
            let e = if angular { wrap_angle(a - b).abs() } else { (a - b).abs() };
            worst = worst.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst < 1e-9 && secs < 10.0, format!("max joint error {worst:.2e} (< 1e-9) over {n} samples in {secs:.2}s (< 10s)"))
}

// 2. Loss combination.
fn loss_formula() -> Verdict {
    let mut worst = 0.0f64;
    let mut exact_act = true;
    for v in Variant::ALL {
        for gamma in [1.0, 0.0] {
            let cfg = PolicyConfig { gamma, beta: 10.0, ..PolicyConfig::miniature(v) };
            let p = Policy::<f64>::new(cfg.clone(), berrypick_core::dataset::NormStats::identity()).unwrap();
            let b = synthetic_batch::<f64>(&cfg, 3, 11);
            let l = evaluate_loss(&p, &b, &LatentMode::Sample(synthetic_eps(&cfg, 3, 12))).unwrap();
            worst = worst.max((l.total - (l.rec_action + cfg.beta * l.reg + gamma * l.rec_end_pose)).abs());
            if gamma == 0.0 {
                exact_act &= l.total == l.rec_action + cfg.beta * l.reg;
            }
        }
    }
    check(
        worst <= 1e-12 && exact_act,
        format!("max |total - (rec + b*reg + g*ep)| = {worst:.1e} (<= 1e-12); gamma = 0 equals rec + b*reg exactly: {exact_act}"),
    )
}

// 3. Finite-difference gradients.
fn gradients() -> Verdict {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for v in Variant::ALL {
        let r = gradient_check(&PolicyConfig::miniature(v), 20, 1e-5, 7).unwrap();
        let e = r.max_rel_error();
        ok &= e < 1e-4 && r.entries.len() == 20;
        parts.push(format!("{} {e:.1e}", v.display()));
    }
    let secs = start.elapsed().as_secs_f64();
    check(ok && secs < 120.0, format!("max relative error over 20 params: {} (< 1e-4) in {secs:.1}s (< 120s)", parts.join(", ")))
}

fn ensemble_oracle(history: &[(usize, Vec<[f64; 5]>)], t: usize, m: f64, capacity: usize) -> [f64; 5] {
    let start = history.len().saturating_sub(capacity);
    let covering: Vec<&[f64; 5]> =
        history[start..].iter().filter(|(b, c)| *b <= t && t - b < c.len()).map(|(b, c)| &c[t - b]).collect();
    std::array::from_fn(|ch| {
        let num: f64 = covering.iter().enumerate().map(|(j, a)| (-m * j as f64).exp() * a[ch]).sum();
        let den: f64 = (0..covering.len()).map(|j| (-m * j as f64).exp()).sum();
        num / den
    })
}

// 4. Temporal ensembling.
fn ensembling() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(1..12);
        let m = rng.random_range(0.0..0.5);
        let mut b = EnsembleBuffer::new(m, k);
        let mut history = Vec::new();
        let mut t = 0;
        for _ in 0..rng.random_range(1..25) {
            let chunk: Vec<[f64; 5]> = (0..k).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect();
            history.push((t, chunk.clone()));
            let got = b.step(chunk, t).unwrap();
            let want = ensemble_oracle(&history, t, m, k);
            worst = got.iter().zip(&want).fold(worst, |w, (g, o)| w.max((g - o).abs()));
            t += rng.random_range(1..3);
        }
    }
    let mut b = EnsembleBuffer::new(0.01, 10);
    b.step(vec![[0.0; 5]; 10], 0).unwrap();
    let two = b.step(vec![[1.0; 5]; 10], 1).unwrap()[0];
    check(
        worst <= 1e-12 && (two - 0.49750).abs() <= 1e-5,
        format!("max deviation from oracle {worst:.1e} (<= 1e-12) over 1000 buffers; worked example {two:.5} (0.49750 +/- 1e-5)"),
    )
}

// 5. Scripted expert success.
fn expert() -> Verdict {
    let start = Instant::now();
    let mut env = SimEnv::new(EnvConfig { cameras: Vec::new(), ..Default::default() }).unwrap();
    let cfg = ExpertConfig::default();
    let mut per_state = Vec::new();
    let mut total = 0;
    for state in 0..6 {
        let mut ok = 0;
        for i in 0..10 {
            let seed = trial_seed(5, state, i);
            if let Ok((_, rec)) = run_expert_episode(&mut env, &cfg, state, seed, mix_seed(&[seed, 1])) {
                ok += (rec.meta.outcome == Outcome::Success) as usize;
            }
        }
        per_state.push(ok.to_string());
        total += ok;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        total >= 54 && secs < 300.0,
        format!("{total}/60 successes (>= 54), per state [{}], in {secs:.1}s (< 300s)", per_state.join(" ")),
    )
}

/// Reduced desk configuration used for the training criteria.
fn study_config(variant: Variant, px: usize) -> PolicyConfig {
    PolicyConfig {
        variant,
        chunk: 10,
        latent_dim: 8,
        width: 64,
        enc_layers: 1,
        dec_layers: 1,
        cvae_layers: 1,
        heads: 2,
        ff_dim: 128,
        backbone: vec![8, 16, 16],
        image_width: px,
        image_height: px,
        lr: 1e-3,
        lr_floor: Some(0.05),
        weight_decay: 0.0,
        steps: 2000,
        batch_size: 16,
        ik_hidden: 64,
        head_hidden: 64,
        log_every: 500,
        seed: 0,
        ..Default::default()
    }
}

fn train_chunk_l1(policy: &Policy<f32>, records: &[EpisodeRecord], arm: &ScaraParams<f64>) -> f64 {
    let cfg = &policy.cfg;
    let mut samples = Vec::new();
    for r in records {
        for t in 0..r.len() {
            samples.push(sample_chunk(r, t, cfg.chunk, &cfg.cameras, &policy.stats, arm).unwrap());
        }
    }
    let (mut sum, mut n) = (0.0, 0);
    for c in samples.chunks(cfg.batch_size) {
        let b = batch_from_samples::<f32>(c, cfg).unwrap();
        sum += evaluate_loss(policy, &b, &LatentMode::Prior).unwrap().rec_action * c.len() as f64;
        n += c.len();
    }
    sum / n as f64
}

// 6. Overfit and open-loop replay.
fn overfit() -> Verdict {
    let px = 32;
    let env_cfg = EnvConfig { image_width: px, image_height: px, ..Default::default() };
    let mut env = SimEnv::new(env_cfg.clone()).unwrap();
    let records: Vec<EpisodeRecord> = (0..5u64)
        .map(|i| run_expert_episode(&mut env, &ExpertConfig::default(), 1 + i as usize, 100 + i, 200 + i).unwrap().1)
        .collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let start = Instant::now();
        let (policy, report) = train_on_records::<f32>(&study_config(v, px), &records, &[], &env_cfg.arm).unwrap();
        let l1 = train_chunk_l1(&policy, &records, &env_cfg.arm);
        let rms = open_loop_replay(&policy, &records[0], &env_cfg.arm).unwrap().position_rms;
        ok &= report.steps <= 2000 && l1 < 0.05 && rms < 0.02;
        parts.push(format!(
            "{} L1 {l1:.4} RMS {:.1} mm ({:.0}s)",
            v.display(),
            rms * 1e3,
            start.elapsed().as_secs_f64()
        ));
    }
    check(ok, format!("{} [limits: L1 < 0.05, RMS < 20 mm, 2000 steps]", parts.join("; ")))
}

// 7. Desk-scale study.
fn desk_study() -> Verdict {
    let dir = work_dir("desk_study");
    let px = 32;
    let env_cfg = EnvConfig { image_width: px, image_height: px, ..Default::default() };
    let data = dir.join("data");
    let summary = collect_demos(200, &[1, 2, 3, 4, 5], 7, &data, &env_cfg, &ExpertConfig::default()).unwrap();
    let mut runners: Vec<Box<dyn TrialRunner>> = Vec::new();
    for v in Variant::ALL {
        let cfg = study_config(v, px);
        let (policy, _) = train(&cfg, &data, &dir.join(v.as_str()), &env_cfg.arm).unwrap();
        let env = SimEnv::new(env_cfg.clone()).unwrap();
        runners.push(Box::new(PolicyRunner {
            name: v.display().to_string(),
            policy,
            env,
            rollout: RolloutConfig::default(),
        }));
    }
    let matrix = MatrixConfig { states: (0..6).collect(), trials_per_cell: 10, base_seed: 2024 };
    let table = run_matrix(&mut runners, &matrix, None).unwrap();
    let report = dir.join("report");
    render_report(&table, &report).unwrap();
    let seeds = |p: &str| table.trials(p).map(|t| (t.state_id, t.index, t.seed)).collect::<Vec<_>>();
    let paired = Variant::ALL.iter().all(|v| seeds(v.display()) == seeds("ACT")) && seeds("ACT").len() == 60;
    let avg = |p: &str| table.average(p).unwrap_or(f64::NAN) * 100.0;
    let (act, l, ee) = (avg("ACT"), avg("EPACT-L"), avg("EPACT-EE"));
    let detail = format!(
        "{} demos, report at {}; averages ACT {act:.1}% EPACT-L {l:.1}% EPACT-EE {ee:.1}%; paired seeds: {paired}",
        summary.episodes,
        report.display()
    );
    if !paired || !report.join("results.md").is_file() {
        return (Status::Fail, detail);
    }
    if ee >= act {
        (Status::Pass, format!("{detail}; EPACT-EE >= ACT"))
    } else {
        (Status::Flag, format!("{detail}; ordering EPACT-EE >= ACT not reproduced"))
    }
}

// 8. Head decoupling.
fn decoupling() -> Verdict {
    let grad = |v: Variant| {
        let cfg = PolicyConfig::miniature(v);
        let p = Policy::<f64>::new(cfg.clone(), berrypick_core::dataset::NormStats::identity()).unwrap();
        let b = synthetic_batch::<f64>(&cfg, 3, 21);
        gripper_branch_end_pose_grad(&p, &b, &LatentMode::Sample(synthetic_eps(&cfg, 3, 22))).unwrap()
    };
    let (ee, l) = (grad(Variant::EpactEe), grad(Variant::EpactL));
    check(
        ee == 0.0 && l > 0.0,
        format!("max |d rec_end_pose / d gripper branch|: EPACT-EE {ee:e} (== 0), EPACT-L {l:.2e} (> 0)"),
    )
}

struct Injected {
    name: String,
    outcomes: BTreeMap<usize, Vec<Outcome>>,
    next: BTreeMap<usize, usize>,
}

impl TrialRunner for Injected {
    fn name(&self) -> &str {
        &self.name
    }

    fn run_trial(&mut self, state: usize, _seed: u64) -> Result<(Outcome, usize), EvalError> {
        let i = self.next.entry(state).or_default();
        let o = self.outcomes[&state][*i];
        *i += 1;
        Ok((o, 42))
    }
}

// 9. Reporting.
fn reporting() -> Verdict {
    use Outcome::*;
    let pattern = [Success, WrongTarget, MultiPick, Timeout, Success, Success, Timeout, WrongTarget, Success, Timeout];
    let outcomes: BTreeMap<usize, Vec<Outcome>> =
        (0..6).map(|s| (s, pattern.iter().cycle().skip(s).take(10).copied().collect())).collect();
    let mut runners: Vec<Box<dyn TrialRunner>> =
        vec![Box::new(Injected { name: "P".into(), outcomes: outcomes.clone(), next: BTreeMap::new() })];
    let table = run_matrix(&mut runners, &MatrixConfig::default(), None).unwrap();
    let mut rates_ok = true;
    let mut expected = BTreeMap::new();
    for (s, os) in &outcomes {
        let want = os.iter().filter(|o| **o == Success).count() as f64 / 10.0;
        rates_ok &= table.rate("P", *s) == Some(want);
        for o in os.iter().filter(|o| **o != Success) {
            *expected.entry(classify_failure(*o).unwrap()).or_insert(0usize) += 1;
        }
    }
    let counts = table.failure_counts("P");
    let partition_ok = counts == expected;

    let base = PolicyConfig::miniature(Variant::EpactL);
    let env_cfg = EnvConfig { image_width: 8, image_height: 8, max_steps: 5, ..Default::default() };
    let ablation = camera_ablation::<f32, _, _>(
        &base,
        &camera_settings(),
        |cfg| Ok(Policy::new(cfg.clone(), berrypick_core::dataset::NormStats::identity())?),
        |name, policy| {
            Ok(Box::new(PolicyRunner { name, policy, env: SimEnv::new(env_cfg.clone()).unwrap(), rollout: RolloutConfig::default() }))
        },
        &MatrixConfig { states: vec![0], trials_per_cell: 1, base_seed: 0 },
        5,
    )
    .unwrap();
    let both = ablation.rows.iter().find(|r| r.cameras.len() == 2).unwrap();
    let ones: Vec<_> = ablation.rows.iter().filter(|r| r.cameras.len() == 1).collect();
    let ablation_ok = ones.len() == 2
        && ones.iter().all(|r| both.parameters > r.parameters)
        && ablation.rows.iter().all(|r| r.inference_ms.is_finite() && r.inference_ms > 0.0);
    let params: Vec<String> = ablation.rows.iter().map(|r| format!("{:?}={}/{:.2}ms", r.cameras, r.parameters, r.inference_ms)).collect();
    check(
        rates_ok && partition_ok && ablation_ok,
        format!(
            "rates exact: {rates_ok}; failure partition {:?} matches: {partition_ok}; ablation params/latency {}",
            counts.values().collect::<Vec<_>>(),
            params.join(" ")
        ),
    )
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_berrypick")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

// 10. Rerun determinism through the command line.
fn determinism() -> Verdict {
    let dir = work_dir("determinism");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let small = [
        "--set", "env.image_width=24", "--set", "env.image_height=24",
        "--set", "policy.width=16", "--set", "policy.ff_dim=32", "--set", "policy.backbone=[4,8]",
        "--set", "policy.chunk=5", "--set", "policy.latent_dim=4", "--set", "policy.ik_hidden=16",
        "--set", "policy.head_hidden=16", "--set", "policy.enc_layers=1", "--set", "policy.dec_layers=1",
        "--set", "policy.cvae_layers=1", "--set", "policy.log_every=5", "--set", "policy.val_episodes=2",
    ];
    let with = |extra: &[&str]| small.iter().copied().chain(extra.iter().copied()).map(String::from).collect::<Vec<_>>();
    let run = |args: Vec<String>| cli(&args.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..2 {
        let d = dir.join(format!("run{i}"));
        run(with(&["collect", "--episodes", "10", "--states", "1-5", "--seed", "7", "--out", &s(&d.join("data"))]));
        run(with(&["train", "--variant", "epact-ee", "--steps", "40", "--seed", "3", "--data", &s(&d.join("data")), "--out", &s(&d.join("ckpt"))]));
        run(with(&["eval", "--ckpt", &s(&d.join("ckpt")), "--states", "0-5", "--trials", "2", "--seed", "5", "--report", &s(&d.join("report"))]));
    }
    let (a, b) = (dir.join("run0"), dir.join("run1"));
    let data_same = tree(&a.join("data")) == tree(&b.join("data"));
    let (la, lb) = (read_loss_log(&a.join("ckpt")).unwrap(), read_loss_log(&b.join("ckpt")).unwrap());
    let mut worst = 0.0f64;
    for (x, y) in la.iter().zip(&lb) {
        for (p, q) in [(x.loss.total, y.loss.total), (x.loss.rec_action, y.loss.rec_action), (x.loss.reg, y.loss.reg)] {
            worst = worst.max((p - q).abs() / p.abs().max(1e-12));
        }
    }
    let curves_ok = la.len() == lb.len() && !la.is_empty() && worst <= 1e-5;
    let report = |root: &Path| {
        let run = fs::read_dir(root.join("report")).unwrap().next().unwrap().unwrap().path();
        ["results.csv", "trials.csv", "results.md", "failures.json", "fingerprint.txt", "run_config.toml"]
            .map(|f| fs::read(run.join(f)).unwrap())
    };
    let eval_same = report(&a) == report(&b);
    let episodes = read_episode(&a.join("data"), 9).map(|r| r.len()).unwrap_or(0);
    check(
        data_same && curves_ok && eval_same,
        format!(
            "collect byte-identical: {data_same} (10 episodes, last has {episodes} steps); loss curves max relative diff {worst:.1e} (<= 1e-5) over {} rows; eval artifacts identical: {eval_same}",
            la.len()
        ),
    )
}

fn main() {
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "kinematics oracle", kinematics),
        (2, "loss formula", loss_formula),
        (3, "gradient check", gradients),
        (4, "ensemble oracle", ensembling),
        (5, "environment solvability", expert),
        (6, "overfit-replay", overfit),
        (7, "desk-scale study", desk_study),
        (8, "head decoupling", decoupling),
        (9, "reporting fidelity", reporting),
        (10, "determinism", determinism),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                (Status::Fail, format!("panicked: {}", msg.unwrap_or_default()))
            }
        };
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Flag => "FLAG",
        };
        println!("criterion {id:>2} [{tag}] {name}: {detail} ({:.1}s)", start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use berrypick_core::dataset::{image_to_f32, list_episodes, read_episode, EpisodeRecord};
use berrypick_core::eval::{config_hash, render_report, run_dir_name, run_matrix, MatrixConfig, PolicyRunner, TrialRunner};
use berrypick_core::expert::collect_demos;
use berrypick_core::policy::{load_checkpoint, train, Policy, PolicyConfig, PolicyInput, CONFIG_FILE, WEIGHTS_FILE};
use berrypick_core::runtime::{open_loop_replay, overlay_trajectory};
use berrypick_core::scara::{end_pose_sequence, JointState, ScaraParams};
use berrypick_core::sim::{CameraModel, SimEnv};
use berrypick_teleop::{bind, serve, TeleopConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Cli, CliError, CollectArgs, Command, EvalArgs, ReplayArgs, ServeArgs, SourceArg, TrainArgs};

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Collect(a) => collect(&mut cfg, a),
        Command::Train(a) => train_cmd(&mut cfg, a),
        Command::Eval(a) => eval(&mut cfg, a),
        Command::Replay(a) => replay(&cfg, a),
        Command::Serve(a) => serve_cmd(&mut cfg, a),
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn collect(cfg: &mut RunConfig, a: CollectArgs) -> Result<(), CliError> {
    if a.source == SourceArg::Teleop {
        return Err(CliError::Usage("teleop episodes are recorded through `serve`".into()));
    }
    if let Some(n) = a.episodes {
        cfg.collect.episodes = n;
    }
    if let Some(s) = a.states {
        cfg.collect.states = s.0;
    }
    if let Some(s) = a.seed {
        cfg.collect.seed = s;
    }
    let c = &cfg.collect;
    if c.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    crate::config::parse_states(&c.states.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))
        .map_err(CliError::Usage)?;
    let existing = list_episodes(&a.out)?.len();
    let summary = collect_demos(c.episodes, &c.states, c.seed, &a.out, &cfg.env, &cfg.expert)?;
    // Appending to a dataset keeps the earlier echoes.
    let tag = if existing == 0 { String::new() } else { format!("_{:06}", summary.episode_ids[0]) };
    fs::write(a.out.join(format!("run_config{tag}.toml")), cfg.to_toml())?;
    write_json(&a.out.join(format!("collect_summary{tag}.json")), &summary)?;
    for (state, n) in &summary.per_state {
        println!("state {state}: {n} episodes");
    }
    println!(
        "collected {} episodes into {} ({} attempts, {} retries)",
        summary.episodes,
        a.out.display(),
        summary.attempts,
        summary.retries
    );
    Ok(())
}

fn train_cmd(cfg: &mut RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let p = &mut cfg.policy;
    if let Some(v) = a.variant {
        p.variant = v;
    }
    if let Some(c) = a.cams {
        p.cameras = c.0;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { p.$field = v; })* };
    }
    set!(beta, gamma, chunk, steps, seed, lr, batch_size);
    require_dir(&a.data, "dataset")?;
    let ids = list_episodes(&a.data)?;
    let first = ids.first().ok_or_else(|| CliError::Usage(format!("no episodes under {}", a.data.display())))?;
    let meta = read_episode(&a.data, *first)?.meta;
    if let Some(missing) = p.cameras.iter().find(|c| !meta.cameras.contains(c)) {
        return Err(CliError::Usage(format!("dataset has no {missing} camera (recorded: {:?})", meta.cameras)));
    }
    if (p.image_width, p.image_height) != (meta.image_width, meta.image_height) {
        log::info!("using dataset image size {}x{}", meta.image_width, meta.image_height);
        p.image_width = meta.image_width;
        p.image_height = meta.image_height;
    }
    p.validate()?;
    if a.out.join(WEIGHTS_FILE).exists() {
        return Err(CliError::Failed(format!("{} already holds a checkpoint; checkpoints are immutable", a.out.display())));
    }
    let (_, report) = train(&cfg.policy, &a.data, &a.out, &cfg.env.arm)?;
    cfg.echo(&a.out)?;
    #[derive(Serialize)]
    struct Summary {
        variant: String,
        steps: usize,
        num_parameters: usize,
        train_episodes: usize,
        val_episodes: usize,
        final_total: f64,
        final_rec_action: f64,
        final_reg: f64,
        final_rec_end_pose: f64,
        wall_seconds: f64,
    }
    let l = report.final_loss;
    let summary = Summary {
        variant: cfg.policy.variant.as_str().into(),
        steps: report.steps,
        num_parameters: report.num_parameters,
        train_episodes: report.train_episodes,
        val_episodes: report.val_episodes,
        final_total: l.total,
        final_rec_action: l.rec_action,
        final_reg: l.reg,
        final_rec_end_pose: l.rec_end_pose,
        wall_seconds: report.wall_seconds,
    };
    write_json(&a.out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} ({} parameters) for {} steps in {:.1}s: total {:.5} rec {:.5} reg {:.5} ep {:.5}",
        cfg.policy.variant.display(),
        report.num_parameters,
        report.steps,
        report.wall_seconds,
        l.total,
        l.rec_action,
        l.reg,
        l.rec_end_pose
    );
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn load_ckpt(dir: &Path) -> Result<Policy<f32>, CliError> {
    if !dir.join(CONFIG_FILE).is_file() || !dir.join(WEIGHTS_FILE).is_file() {
        return Err(CliError::Usage(format!("{} is not a checkpoint directory", dir.display())));
    }
    Ok(load_checkpoint::<f32>(dir)?)
}

#[derive(Serialize)]
struct EvalFingerprint<'a> {
    config: &'a RunConfig,
    checkpoints: Vec<(String, &'a PolicyConfig)>,
}

fn eval(cfg: &mut RunConfig, a: EvalArgs) -> Result<(), CliError> {
    if let Some(s) = a.states {
        cfg.eval.states = s.0;
    }
    if let Some(t) = a.trials {
        cfg.eval.trials = t;
    }
    if let Some(s) = a.seed {
        cfg.eval.seed = s;
    }
    if cfg.eval.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let policies = a.ckpt.iter().map(|d| load_ckpt(d)).collect::<Result<Vec<_>, _>>()?;
    let mut names: Vec<String> = policies.iter().map(|p| p.cfg.variant.display().to_string()).collect();
    for i in 0..names.len() {
        if names.iter().filter(|n| **n == names[i]).count() > 1 {
            let dir = a.ckpt[i].file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            names[i] = format!("{} ({dir})", names[i]);
        }
    }
    let fingerprint = EvalFingerprint {
        config: cfg,
        checkpoints: names.iter().cloned().zip(policies.iter().map(|p| &p.cfg)).collect(),
    };
    let hash = config_hash(&fingerprint);
    let run_dir = a.report.join(run_dir_name(&fingerprint, chrono::Utc::now()));
    fs::create_dir_all(&run_dir)?;
    cfg.echo(&run_dir)?;
    fs::write(run_dir.join("fingerprint.txt"), format!("{hash}\n"))?;
    let listing: BTreeMap<&str, String> =
        names.iter().map(String::as_str).zip(a.ckpt.iter().map(|p| p.display().to_string())).collect();
    write_json(&run_dir.join("checkpoints.json"), &listing)?;

    let mut runners: Vec<Box<dyn TrialRunner>> = Vec::new();
    for (policy, name) in policies.into_iter().zip(names) {
        let mut env_cfg = cfg.env.clone();
        env_cfg.cameras = policy.cfg.cameras.clone();
        env_cfg.image_width = policy.cfg.image_width;
        env_cfg.image_height = policy.cfg.image_height;
        let env = SimEnv::new(env_cfg)?;
        runners.push(Box::new(PolicyRunner { name, policy, env, rollout: cfg.rollout }));
    }
    let matrix = MatrixConfig { states: cfg.eval.states.clone(), trials_per_cell: cfg.eval.trials, base_seed: cfg.eval.seed };
    let table = run_matrix(&mut runners, &matrix, Some(&run_dir.join("cells")))?;
    render_report(&table, &run_dir)?;
    println!("{}", berrypick_core::eval::markdown_table(&table, false));
    println!("report written to {}", run_dir.display());
    let failed: Vec<String> = table
        .cells
        .iter()
        .filter_map(|c| c.error.as_ref().map(|e| format!("{} state {}: {e}", c.policy, c.state_id)))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Failed(format!("{} cells failed: {}", failed.len(), failed.join("; "))))
    }
}

fn predicted_poses(
    policy: &Policy<f32>,
    record: &EpisodeRecord,
    t: usize,
    arm: &ScaraParams<f64>,
) -> Result<Vec<[f64; 6]>, CliError> {
    let px = record.meta.image_width * record.meta.image_height * 3;
    let images = policy
        .cfg
        .cameras
        .iter()
        .map(|c| record.images.get(c).map(|buf| image_to_f32(&buf[t * px..(t + 1) * px])))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CliError::Usage("episode lacks a camera the checkpoint uses".into()))?;
    let bundle = policy.predict(&PolicyInput { images, q: record.q[t].map(f64::from) })?;
    Ok(match bundle.end_poses {
        Some(p) => p,
        None => {
            let joints: Vec<[f64; 4]> = bundle.actions.iter().map(|a| [a[0], a[1], a[2], a[3]]).collect();
            end_pose_sequence(&joints, arm).into_iter().map(|p| p.to_array()).collect()
        }
    })
}

fn replay(cfg: &RunConfig, a: ReplayArgs) -> Result<(), CliError> {
    require_dir(&a.data, "dataset")?;
    if !list_episodes(&a.data)?.contains(&a.episode) {
        return Err(CliError::Usage(format!("episode {} not found under {}", a.episode, a.data.display())));
    }
    if a.overlay && a.ckpt.is_none() {
        return Err(CliError::Usage("--overlay needs --ckpt".into()));
    }
    let record = read_episode(&a.data, a.episode)?;
    let policy = a.ckpt.as_deref().map(load_ckpt).transpose()?;
    if let Some(p) = &policy {
        if (p.cfg.image_width, p.cfg.image_height) != (record.meta.image_width, record.meta.image_height) {
            return Err(CliError::Usage(format!(
                "checkpoint expects {}x{} images, episode has {}x{}",
                p.cfg.image_width, p.cfg.image_height, record.meta.image_width, record.meta.image_height
            )));
        }
    }
    fs::create_dir_all(&a.out)?;
    let arm = cfg.env.arm;
    let (w, h) = (record.meta.image_width, record.meta.image_height);
    let mut frames = 0;
    for t in 0..record.len() {
        let poses = match (&policy, a.overlay) {
            (Some(p), true) => Some(predicted_poses(p, &record, t, &arm)?),
            _ => None,
        };
        let q = JointState::from_array(record.q[t].map(f64::from));
        for &cam in &record.meta.cameras {
            let frame = record.frame(cam, t).expect("validated episode");
            let img = match &poses {
                Some(p) => overlay_trajectory(&frame, p, &CameraModel::wrist(cam, w, h), &q, &arm),
                None => frame,
            };
            img.save_png(&a.out.join(format!("{}_{t:04}.png", cam.short())))?;
            frames += 1;
        }
    }
    if let Some(p) = &policy {
        let report = open_loop_replay(p, &record, &arm)?;
        #[derive(Serialize)]
        struct Summary {
            episode: u64,
            steps: usize,
            position_rms: f64,
            max_position_error: f64,
        }
        let s = Summary {
            episode: a.episode,
            steps: record.len(),
            position_rms: report.position_rms,
            max_position_error: report.max_position_error,
        };
        write_json(&a.out.join("open_loop.json"), &s)?;
        println!("open-loop end-pose RMS {:.4} m (max {:.4} m)", s.position_rms, s.max_position_error);
    }
    cfg.echo(&a.out)?;
    println!("wrote {frames} frames to {}", a.out.display());
    Ok(())
}

fn serve_cmd(cfg: &mut RunConfig, a: ServeArgs) -> Result<(), CliError> {
    let s = &mut cfg.serve;
    if let Some(p) = a.port {
        s.port = p;
    }
    if let Some(h) = a.host {
        s.host = h;
    }
    if let Some(v) = a.state_id {
        s.state_id = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.fps {
        s.fps = v;
    }
    if s.state_id > 5 {
        return Err(CliError::Usage(format!("state {} out of range 0-5", s.state_id)));
    }
    let tcfg = TeleopConfig {
        env: cfg.env.clone(),
        state_id: s.state_id,
        seed: s.seed,
        fps: s.fps,
        out_dir: a.data.clone(),
    };
    tcfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let addr = format!("{}:{}", s.host, s.port);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let summary = rt.block_on(async {
        let listener = bind(&addr).await?;
        fs::create_dir_all(&a.data)?;
        fs::write(a.data.join("serve_config.toml"), cfg.to_toml())?;
        println!("serving teleop on ws://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        Ok::<_, CliError>(serve(listener, tcfg, shutdown).await?)
    })?;
    println!(
        "stopped: {} clients, {} episodes kept, {} recorded steps discarded",
        summary.clients,
        summary.kept_episodes.len(),
        summary.discarded_steps
    );
    Ok(())
}

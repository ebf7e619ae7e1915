use berrypick_core::dataset::{read_episode, Source};
use berrypick_core::sim::EnvConfig;
use berrypick_teleop::{ClientMsg, Command, RecordAction, ServerMsg, Session, TeleopConfig};

fn config(out: &std::path::Path) -> TeleopConfig {
    TeleopConfig {
        env: EnvConfig { image_width: 24, image_height: 24, ..Default::default() },
        state_id: 1,
        seed: 3,
        fps: 15.0,
        out_dir: out.to_path_buf(),
    }
}

fn record(s: &mut Session, action: RecordAction) -> Vec<ServerMsg> {
    s.handle(ClientMsg::Record { action })
}

#[test]
fn no_command_holds_position() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    let q0 = s.env().q();
    let g0 = s.env().grip();
    for _ in 0..20 {
        s.tick().unwrap();
    }
    assert_eq!(s.env().q(), q0);
    assert_eq!(s.env().grip(), g0);
    assert_eq!(s.env().t(), 20);
}

#[test]
fn positive_dq_raises_theta1_next_tick() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    let q0 = s.env().q();
    let grip = s.env().grip();
    assert!(s.handle(ClientMsg::Cmd { dq: [0.01, 0.0, 0.0, 0.0], grip }).is_empty());
    s.tick().unwrap();
    let q1 = s.env().q();
    assert!((q1.theta1 - q0.theta1 - 0.01).abs() < 1e-6);
    assert_eq!((q1.theta2, q1.d3, q1.theta4), (q0.theta2, q0.d3, q0.theta4));
    // The command persists across ticks.
    s.tick().unwrap();
    assert!(s.env().q().theta1 > q1.theta1);
}

#[test]
fn last_command_between_ticks_wins() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    let q0 = s.env().q();
    s.set_command(Command { dq: [0.02, 0.0, 0.0, 0.0], grip: None });
    s.set_command(Command { dq: [0.0, -0.01, 0.0, 0.0], grip: None });
    s.tick().unwrap();
    let q1 = s.env().q();
    assert_eq!(q1.theta1, q0.theta1);
    assert!((q1.theta2 - q0.theta2 + 0.01).abs() < 1e-6);
}

#[test]
fn oversized_increment_is_rate_limited() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    let rate = s.env().config().physics.joint_rate;
    let q0 = s.env().q();
    s.set_command(Command { dq: [1.0, 0.0, 0.0, 0.0], grip: None });
    s.tick().unwrap();
    assert!((s.env().q().theta1 - q0.theta1).abs() <= rate + 1e-12);
}

#[test]
fn observations_stream_at_half_env_rate() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    let emitted = (0..30).filter(|_| s.tick().unwrap().is_some()).count();
    assert_eq!(emitted, 15);
    match s.observation_message().unwrap() {
        ServerMsg::Obs { t, img_up, img_down, .. } => {
            assert_eq!(t, 30);
            assert!(!img_up.is_empty() && !img_down.is_empty());
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn reset_reconfigures_the_scene() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    s.tick().unwrap();
    let replies = s.handle(ClientMsg::Reset { state: 2, seed: 9 });
    assert!(matches!(&replies[..], [ServerMsg::Ack { action, .. }] if action == "reset"));
    assert_eq!(s.env().scene().state_id, 2);
    assert_eq!(s.env().t(), 0);
    let replies = s.handle(ClientMsg::Reset { state: 9, seed: 0 });
    assert!(matches!(&replies[..], [ServerMsg::Error { .. }]));
}

#[test]
fn kept_recording_is_a_valid_teleop_episode() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    assert!(matches!(&record(&mut s, RecordAction::Start)[..], [ServerMsg::Ack { recording: true, .. }]));
    s.set_command(Command { dq: [0.005, -0.005, 0.0, 0.01], grip: Some(0.02) });
    for _ in 0..12 {
        s.tick().unwrap();
    }
    let replies = record(&mut s, RecordAction::Stop);
    let id = match &replies[..] {
        [ServerMsg::Ack { action, recording: false, episode: Some(id), steps: 12 }] if action == "stop" => *id,
        other => panic!("unexpected {other:?}"),
    };
    let ep = read_episode(dir.path(), id).unwrap();
    ep.validate().unwrap();
    assert_eq!(ep.meta.source, Source::Teleop);
    assert_eq!((ep.meta.state_id, ep.meta.seed, ep.len()), (1, 3, 12));
    // Recorded at the env rate, and each stored action replays the step.
    for w in ep.q.windows(2).zip(&ep.actions) {
        let ([a, b], act) = w else { unreachable!() };
        assert!((b[0] - a[0] - 0.005).abs() < 1e-5 && (act[0] - a[0] - 0.005).abs() < 1e-5);
    }
    assert_eq!(s.kept_episodes(), &[id]);
}

#[test]
fn discarded_recording_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    record(&mut s, RecordAction::Start);
    for _ in 0..5 {
        s.tick().unwrap();
    }
    let replies = record(&mut s, RecordAction::Discard);
    assert!(matches!(&replies[..], [ServerMsg::Ack { steps: 5, recording: false, .. }]));
    assert_eq!(std::fs::read_dir(dir.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn disconnect_drops_buffer_and_command() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    record(&mut s, RecordAction::Start);
    s.set_command(Command { dq: [0.01, 0.0, 0.0, 0.0], grip: None });
    s.tick().unwrap();
    s.disconnect();
    assert!(!s.is_recording());
    assert_eq!(s.command(), Command::default());
    assert!(matches!(&record(&mut s, RecordAction::Stop)[..], [ServerMsg::Error { .. }]));
}

#[test]
fn too_short_recording_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    record(&mut s, RecordAction::Start);
    s.tick().unwrap();
    let replies = record(&mut s, RecordAction::Stop);
    assert!(matches!(&replies[..], [ServerMsg::Error { .. }, ServerMsg::Ack { episode: None, .. }]));
}

#[test]
fn double_start_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = Session::new(config(dir.path())).unwrap();
    record(&mut s, RecordAction::Start);
    assert!(matches!(&record(&mut s, RecordAction::Start)[..], [ServerMsg::Error { .. }]));
    assert!(s.is_recording());
}

#[test]
fn wire_format_matches_the_protocol() {
    let cmd = ClientMsg::parse(r#"{"type":"cmd","dq":[0.01,0,0,0],"grip":1.0}"#).unwrap();
    assert_eq!(cmd, ClientMsg::Cmd { dq: [0.01, 0.0, 0.0, 0.0], grip: 1.0 });
    assert_eq!(
        ClientMsg::parse(r#"{"type":"reset","state":2,"seed":9}"#).unwrap(),
        ClientMsg::Reset { state: 2, seed: 9 }
    );
    assert_eq!(
        ClientMsg::parse(r#"{"type":"record","action":"discard"}"#).unwrap(),
        ClientMsg::Record { action: RecordAction::Discard }
    );
    assert!(ClientMsg::parse("\u{1}garbage").is_err());
    assert!(ClientMsg::parse(r#"{"type":"cmd","dq":[0,0,0],"grip":1}"#).is_err());
    let obs = ServerMsg::Obs { t: 3, q: [0.0; 4], grip: 0.5, img_up: "a".into(), img_down: "b".into() };
    let v: serde_json::Value = serde_json::from_str(&obs.to_json()).unwrap();
    assert_eq!(v["type"], "obs");
    for key in ["t", "q", "grip", "img_up", "img_down"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    let v: serde_json::Value = serde_json::from_str(&ServerMsg::error("x").to_json()).unwrap();
    assert_eq!((v["type"].as_str(), v["msg"].as_str()), (Some("error"), Some("x")));
}

#[test]
fn config_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.fps = 60.0;
    assert!(Session::new(cfg.clone()).is_err());
    cfg.fps = 15.0;
    cfg.state_id = 6;
    assert!(Session::new(cfg).is_err());
}

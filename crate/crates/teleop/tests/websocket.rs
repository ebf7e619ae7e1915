mod common;

use base64::Engine;
use berrypick_core::dataset::{list_episodes, read_episode, Source};
use berrypick_core::image::Image;
use berrypick_core::policy::{train, PolicyConfig, Variant};
use berrypick_core::scara::ScaraParams;
use berrypick_teleop::{bind, ClientMsg, RecordAction, ServerMsg, TeleopError};
use common::*;

#[tokio::test]
async fn scripted_pick_is_recorded_and_trainable() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), 8, 15.0).await;
    let mut ws = server.connect().await;

    let first = recv(&mut ws).await.unwrap();
    let ServerMsg::Obs { img_up, img_down, .. } = first else { panic!("expected an observation first") };
    for img in [img_up, img_down] {
        let png = base64::engine::general_purpose::STANDARD.decode(img).unwrap();
        let decoded = Image::decode_png(&png).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (8, 8));
    }

    send(&mut ws, &ClientMsg::Reset { state: 1, seed: 9 }).await;
    assert!(matches!(recv_reply(&mut ws).await, ServerMsg::Ack { ref action, .. } if action == "reset"));
    send(&mut ws, &ClientMsg::Record { action: RecordAction::Start }).await;
    assert!(matches!(recv_reply(&mut ws).await, ServerMsg::Ack { recording: true, .. }));
    let (t0, q0, _) = recv_obs(&mut ws).await;
    send(&mut ws, &ClientMsg::Cmd { dq: [0.01, 0.0, 0.0, 0.0], grip: 0.0 }).await;
    let mut last = (t0, q0);
    for _ in 0..8 {
        let (t, q, _) = recv_obs(&mut ws).await;
        assert!(t > last.0 && q[0] >= last.1[0]);
        last = (t, q);
    }
    assert!(last.1[0] > q0[0]);
    send(&mut ws, &ClientMsg::Record { action: RecordAction::Stop }).await;
    let id = match recv_reply(&mut ws).await {
        ServerMsg::Ack { action, recording: false, episode: Some(id), steps } if action == "stop" => {
            assert!(steps >= 16);
            id
        }
        other => panic!("unexpected {other:?}"),
    };
    drop(ws);
    let summary = server.stop().await;
    assert_eq!(summary.kept_episodes, vec![id]);

    let ep = read_episode(dir.path(), id).unwrap();
    ep.validate().unwrap();
    assert_eq!((ep.meta.source, ep.meta.state_id, ep.meta.seed), (Source::Teleop, 1, 9));

    let cfg = PolicyConfig { steps: 3, val_episodes: 0, ..PolicyConfig::miniature(Variant::EpactEe) };
    let ckpt = dir.path().join("ckpt");
    let (_, report) = train(&cfg, dir.path(), &ckpt, &ScaraParams::default()).unwrap();
    assert_eq!(report.train_episodes, 1);
    assert!(report.final_loss.is_finite());
}

#[tokio::test]
async fn garbage_gets_an_error_and_the_session_continues() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), 8, 15.0).await;
    let mut ws = server.connect().await;
    send_raw(&mut ws, "\u{7}\u{0}not json").await;
    assert!(matches!(recv_reply(&mut ws).await, ServerMsg::Error { .. }));
    send_raw(&mut ws, r#"{"type":"warp","speed":9}"#).await;
    assert!(matches!(recv_reply(&mut ws).await, ServerMsg::Error { .. }));
    send(&mut ws, &ClientMsg::Reset { state: 4, seed: 11 }).await;
    assert!(matches!(recv_reply(&mut ws).await, ServerMsg::Ack { .. }));
    let (t, _, _) = recv_obs(&mut ws).await;
    assert!(t < 30);
    drop(ws);
    server.stop().await;
}

#[tokio::test]
async fn second_client_is_turned_away() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), 8, 15.0).await;
    let mut first = server.connect().await;
    recv_obs(&mut first).await;
    let mut second = server.connect().await;
    assert!(matches!(recv(&mut second).await, Some(ServerMsg::Error { .. })));
    assert!(recv(&mut second).await.is_none());
    recv_obs(&mut first).await;
    drop((first, second));
    let summary = server.stop().await;
    assert_eq!((summary.clients, summary.rejected_clients), (1, 1));
}

#[tokio::test]
async fn disconnect_discards_recording_and_allows_reconnect() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), 8, 15.0).await;
    let mut ws = server.connect().await;
    send(&mut ws, &ClientMsg::Record { action: RecordAction::Start }).await;
    assert!(matches!(recv_reply(&mut ws).await, ServerMsg::Ack { recording: true, .. }));
    for _ in 0..3 {
        recv_obs(&mut ws).await;
    }
    ws.close(None).await.unwrap();
    drop(ws);

    let mut again = loop {
        let mut ws = server.connect().await;
        match recv(&mut ws).await {
            Some(ServerMsg::Obs { .. }) => break ws,
            _ => tokio::time::sleep(std::time::Duration::from_millis(20)).await,
        }
    };
    send(&mut again, &ClientMsg::Record { action: RecordAction::Stop }).await;
    assert!(matches!(recv_reply(&mut again).await, ServerMsg::Error { .. }));
    drop(again);
    let summary = server.stop().await;
    assert!(summary.kept_episodes.is_empty());
    assert!(list_episodes(dir.path()).map(|v| v.is_empty()).unwrap_or(true));
}

#[tokio::test]
async fn shutdown_drops_open_recording() {
    let dir = tempfile::tempdir().unwrap();
    let server = Server::start(dir.path(), 8, 15.0).await;
    let mut ws = server.connect().await;
    send(&mut ws, &ClientMsg::Record { action: RecordAction::Start }).await;
    recv_reply(&mut ws).await;
    recv_obs(&mut ws).await;
    recv_obs(&mut ws).await;
    let summary = server.stop().await;
    assert!(summary.discarded_steps > 0);
    assert!(summary.kept_episodes.is_empty());
    assert!(recv(&mut ws).await.is_none());
}

#[tokio::test]
async fn occupied_port_is_a_bind_error() {
    let held = bind("127.0.0.1:0").await.unwrap();
    let addr = held.local_addr().unwrap().to_string();
    assert!(matches!(bind(&addr).await, Err(TeleopError::Bind { .. })));
}

#![allow(dead_code)]

use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use berrypick_core::sim::EnvConfig;
use berrypick_teleop::{bind, serve, ClientMsg, ServeSummary, ServerMsg, TeleopConfig, TeleopError};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

pub type Client = WebSocketStream<MaybeTlsStream<TcpStream>>;

pub struct Server {
    pub addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    handle: JoinHandle<Result<ServeSummary, TeleopError>>,
}

impl Server {
    pub async fn start(out: &Path, size: usize, fps: f64) -> Server {
        let cfg = TeleopConfig {
            env: EnvConfig { image_width: size, image_height: size, ..Default::default() },
            state_id: 0,
            seed: 1,
            fps,
            out_dir: out.to_path_buf(),
        };
        let listener = bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = oneshot::channel();
        let handle = tokio::spawn(serve(listener, cfg, async move {
            let _ = rx.await;
        }));
        Server { addr, stop: Some(tx), handle }
    }

    pub async fn connect(&self) -> Client {
        tokio_tungstenite::connect_async(format!("ws://{}", self.addr)).await.unwrap().0
    }

    pub async fn stop(mut self) -> ServeSummary {
        self.stop.take().unwrap().send(()).unwrap();
        self.handle.await.unwrap().unwrap()
    }
}

pub async fn send(ws: &mut Client, msg: &ClientMsg) {
    ws.send(Message::Text(serde_json::to_string(msg).unwrap())).await.unwrap();
}

pub async fn send_raw(ws: &mut Client, text: &str) {
    ws.send(Message::Text(text.to_string())).await.unwrap();
}

/// Next server message, or `None` once the socket closes.
pub async fn recv(ws: &mut Client) -> Option<ServerMsg> {
    loop {
        let frame = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("server went quiet")?;
        match frame {
            Ok(Message::Text(t)) => return Some(serde_json::from_str(&t).expect("server sent valid JSON")),
            Ok(Message::Close(_)) | Err(_) => return None,
            Ok(_) => continue,
        }
    }
}

/// Skips observations until a non-observation message arrives.
pub async fn recv_reply(ws: &mut Client) -> ServerMsg {
    loop {
        match recv(ws).await.expect("socket closed") {
            ServerMsg::Obs { .. } => continue,
            other => return other,
        }
    }
}

pub async fn recv_obs(ws: &mut Client) -> (usize, [f64; 4], f64) {
    loop {
        if let ServerMsg::Obs { t, q, grip, .. } = recv(ws).await.expect("socket closed") {
            return (t, q, grip);
        }
    }
}

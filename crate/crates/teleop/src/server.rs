use std::future::Future;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio::task::JoinSet;
use tokio_tungstenite::tungstenite::Message;

use crate::protocol::{ClientMsg, ServerMsg};
use crate::session::{Command, Session, TeleopConfig};
use crate::TeleopError;

const OUTBOUND_QUEUE: usize = 64;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ServeSummary {
    pub ticks: u64,
    pub clients: usize,
    pub rejected_clients: usize,
    pub kept_episodes: Vec<u64>,
    /// Steps of a recording still open at shutdown, dropped.
    pub discarded_steps: usize,
}

enum Event {
    Message { client: usize, msg: ClientMsg },
    Disconnected { client: usize },
}

/// Binds the listening socket; an occupied port is reported as
/// [`TeleopError::Bind`].
pub async fn bind(addr: &str) -> Result<TcpListener, TeleopError> {
    TcpListener::bind(addr).await.map_err(|source| TeleopError::Bind { addr: addr.to_string(), source })
}

fn push(tx: &mpsc::Sender<String>, msg: &ServerMsg) {
    // A slow client loses frames rather than stalling the env.
    let _ = tx.try_send(msg.to_json());
}

/// Runs one session until `shutdown` resolves. One client at a time; a
/// second connection gets an error frame and is closed.
pub async fn serve<F>(listener: TcpListener, cfg: TeleopConfig, shutdown: F) -> Result<ServeSummary, TeleopError>
where
    F: Future<Output = ()>,
{
    let mut session = Session::new(cfg)?;
    let latest: Arc<Mutex<Option<Command>>> = Arc::new(Mutex::new(None));
    let (ev_tx, mut ev_rx) = mpsc::channel::<Event>(256);
    let mut tasks = JoinSet::new();
    let mut active: Option<(usize, mpsc::Sender<String>)> = None;
    let mut next_client = 0usize;
    let mut summary = ServeSummary::default();
    let mut ticker = tokio::time::interval(Duration::from_secs_f64(1.0 / session.env().config().fps));
    tokio::pin!(shutdown);
    log::info!("teleop session listening on {}", listener.local_addr()?);

    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                let (stream, peer) = match accepted {
                    Ok(s) => s,
                    Err(e) => {
                        log::warn!("accept failed: {e}");
                        continue;
                    }
                };
                let id = next_client;
                next_client += 1;
                if active.is_some() {
                    summary.rejected_clients += 1;
                    tasks.spawn(reject(stream));
                    continue;
                }
                log::info!("client {id} connected from {peer}");
                summary.clients += 1;
                let (tx, rx) = mpsc::channel(OUTBOUND_QUEUE);
                push(&tx, &session.observation_message()?);
                *latest.lock().expect("command cell") = None;
                tasks.spawn(connection(id, stream, tx.clone(), rx, latest.clone(), ev_tx.clone()));
                active = Some((id, tx));
            }
            Some(ev) = ev_rx.recv() => match ev {
                Event::Message { client, msg } if active.as_ref().is_some_and(|(a, _)| *a == client) => {
                    let replies = session.handle(msg);
                    if let Some((_, tx)) = &active {
                        for r in &replies {
                            push(tx, r);
                        }
                    }
                }
                Event::Message { .. } => {}
                Event::Disconnected { client } => {
                    if active.as_ref().is_some_and(|(a, _)| *a == client) {
                        log::info!("client {client} disconnected");
                        active = None;
                        *latest.lock().expect("command cell") = None;
                        session.disconnect();
                    }
                }
            },
            _ = ticker.tick() => {
                if let Some(cmd) = latest.lock().expect("command cell").take() {
                    session.set_command(cmd);
                }
                let obs = session.tick()?;
                summary.ticks += 1;
                if let (Some(obs), Some((_, tx))) = (obs, &active) {
                    push(tx, &obs);
                }
            }
        }
    }
    summary.discarded_steps = session.shutdown();
    summary.kept_episodes = session.kept_episodes().to_vec();
    tasks.abort_all();
    log::info!("teleop session stopped after {} ticks", summary.ticks);
    Ok(summary)
}

async fn reject(stream: TcpStream) {
    if let Ok(mut ws) = tokio_tungstenite::accept_async(stream).await {
        let _ = ws.send(Message::Text(ServerMsg::error("session already has a client").to_json())).await;
        let _ = ws.close(None).await;
    }
}

async fn connection(
    id: usize,
    stream: TcpStream,
    tx: mpsc::Sender<String>,
    mut rx: mpsc::Receiver<String>,
    latest: Arc<Mutex<Option<Command>>>,
    events: mpsc::Sender<Event>,
) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("client {id}: handshake failed: {e}");
            let _ = events.send(Event::Disconnected { client: id }).await;
            return;
        }
    };
    let (mut sink, mut source) = ws.split();
    let writer = async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text)).await.is_err() {
                break;
            }
        }
    };
    let reader = async {
        while let Some(frame) = source.next().await {
            let text = match frame {
                Ok(Message::Text(t)) => t,
                Ok(Message::Binary(b)) => String::from_utf8_lossy(&b).into_owned(),
                Ok(Message::Close(_)) | Err(_) => break,
                Ok(_) => continue,
            };
            match ClientMsg::parse(&text) {
                Ok(ClientMsg::Cmd { dq, grip }) => {
                    *latest.lock().expect("command cell") = Some(Command { dq, grip: Some(grip) });
                }
                Ok(msg) => {
                    if events.send(Event::Message { client: id, msg }).await.is_err() {
                        break;
                    }
                }
                Err(e) => push(&tx, &ServerMsg::error(e)),
            }
        }
    };
    tokio::select! {
        _ = writer => {}
        _ = reader => {}
    }
    let _ = events.send(Event::Disconnected { client: id }).await;
}

//! JSON text frames exchanged with the browser client.
//!
//! Client to server:
//! `{"type":"cmd","dq":[4],"grip":f}`, `{"type":"reset","state":int,"seed":int}`,
//! `{"type":"record","action":"start"|"stop"|"discard"}`.
//!
//! Server to client:
//! `{"type":"obs","t":int,"q":[4],"grip":f,"img_up":"<base64 PNG>","img_down":"<base64 PNG>"}`,
//! `{"type":"ack",...}` after reset/record requests and `{"type":"error","msg":...}`.
//!
//! `dq` is a per-env-step joint increment (rad, or m for `d3`); the env
//! rate limits still apply. `grip` is an absolute opening target.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordAction {
    Start,
    /// Stop and keep the episode.
    Stop,
    Discard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Cmd { dq: [f64; 4], grip: f64 },
    Reset { state: usize, seed: u64 },
    Record { action: RecordAction },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Obs {
        t: usize,
        q: [f64; 4],
        grip: f64,
        img_up: String,
        img_down: String,
    },
    Ack {
        /// `reset`, `start`, `stop` or `discard`.
        action: String,
        recording: bool,
        /// Dataset id of a kept episode.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        episode: Option<u64>,
        /// Steps in the buffer that was kept or dropped.
        #[serde(default)]
        steps: usize,
    },
    Error { msg: String },
}

impl ServerMsg {
    pub fn error(msg: impl Into<String>) -> Self {
        ServerMsg::Error { msg: msg.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

impl ClientMsg {
    /// Parses one text frame; the error string is suitable for an
    /// `error` reply.
    pub fn parse(text: &str) -> Result<Self, String> {
        let msg: ClientMsg = serde_json::from_str(text).map_err(|e| format!("malformed message: {e}"))?;
        if let ClientMsg::Cmd { dq, grip } = &msg {
            if !dq.iter().chain(std::iter::once(grip)).all(|v| v.is_finite()) {
                return Err("cmd contains non-finite values".into());
            }
        }
        Ok(msg)
    }
}

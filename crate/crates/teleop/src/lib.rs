//! Teleoperation over a websocket: the server streams wrist-camera frames
//! of one live [`SimEnv`](berrypick_core::sim::SimEnv), applies incremental
//! joint commands from a single client and records kept demonstrations
//! into the episode dataset.

pub mod protocol;
pub mod server;
pub mod session;

pub use protocol::{ClientMsg, RecordAction, ServerMsg};
pub use server::{bind, serve, ServeSummary};
pub use session::{Command, Session, TeleopConfig};

use berrypick_core::dataset::DatasetError;
use berrypick_core::image::ImageError;
use berrypick_core::sim::SimError;

pub const DEFAULT_PORT: u16 = 8765;

#[derive(Debug, thiserror::Error)]
pub enum TeleopError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("invalid teleop config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

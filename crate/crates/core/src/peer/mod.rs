//! Peer engine: wire protocol, piece selection and storage, and the
//! networked node that combines swarm peers with HTTP web seeds.

use std::io;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

mod bitfield;
mod node;
mod picker;
mod ratelimit;
mod session;
mod store;
pub mod webseed;
pub mod wire;

pub use bitfield::{Bitfield, BitfieldError};
pub use node::{generate_peer_id, run_session_set, Node, NodeConfig, CLIENT_PEER_PREFIX};
pub use picker::{rarest_first, select_next_piece};
pub use ratelimit::TokenBucket;
pub use store::{BlockOutcome, PieceState, PieceStore, StoreError};
pub use webseed::{webseed_fetch, WebseedError};
pub use wire::{Handshake, Message, WireError};

#[derive(Debug, Error)]
pub enum PeerError {
    #[error("no peers or web seeds to download from")]
    NoSources,
    #[error("download did not finish in time")]
    Timeout,
    #[error("seeding requires the complete, verified content")]
    MissingContent,
    #[error("peer sent no data for too long")]
    PeerStalled,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("node stopped before the download completed")]
    Stopped,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Seed,
    Fetch,
}

#[derive(Debug, Clone)]
pub struct Limits {
    /// Node-wide upload cap, bytes/s.
    pub up_rate: Option<u64>,
    /// Node-wide download cap, bytes/s.
    pub down_rate: Option<u64>,
    /// Outstanding block requests per session.
    pub pipeline_depth: usize,
    /// Sessions we unchoke at once.
    pub max_unchoked: usize,
    /// How long a piece must have no peer holding it before the web seed
    /// is asked for it.
    pub webseed_fallback: Duration,
    pub webseed_concurrency: usize,
    /// A session with requests outstanding and no data for this long is dropped.
    pub peer_timeout: Duration,
    /// Fetches with no web seed fail with `NoSources` if no peer session has
    /// been established after this long.
    pub source_wait: Duration,
    /// Overall deadline for a fetch.
    pub timeout: Option<Duration>,
    /// Upper bound on the re-announce period.
    pub reannounce: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            up_rate: None,
            down_rate: None,
            pipeline_depth: 8,
            max_unchoked: 32,
            webseed_fallback: Duration::from_secs(5),
            webseed_concurrency: 4,
            peer_timeout: Duration::from_secs(30),
            source_wait: Duration::from_secs(10),
            timeout: None,
            reannounce: Duration::from_secs(30),
        }
    }
}

/// Exact byte and piece totals for one node.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SessionReport {
    /// Piece payload bytes sent to peers.
    pub bytes_up: u64,
    /// Piece payload bytes received from peers and web seeds.
    pub bytes_down: u64,
    /// Portion of `bytes_down` that came from web seeds.
    pub webseed_bytes: u64,
    pub duration_secs: f64,
    pub pieces_from_peers: u64,
    pub pieces_from_webseed: u64,
    pub corrupt_pieces: u64,
    pub complete: bool,
}

#![allow(dead_code)]

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use swarmshare::metainfo::{build_metainfo, Metainfo};
use swarmshare::peer::{Message, Node};
use swarmshare::tracker::{serve, Tracker, TrackerConfig, TrackerHandle};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub fn random_content(len: usize, seed: u64) -> Vec<u8> {
    let mut data = vec![0u8; len];
    StdRng::seed_from_u64(seed).fill_bytes(&mut data);
    data
}

pub fn meta_for(content: &[u8], piece_length: u64, announce: &str, webseeds: &[String]) -> Metainfo {
    build_metainfo(content, "data.bin", piece_length, announce, webseeds).unwrap()
}

pub async fn start_tracker(interval: u32) -> TrackerHandle {
    let tracker = Arc::new(Tracker::new(TrackerConfig::with_interval(interval)));
    serve(tracker, "127.0.0.1:0".parse().unwrap()).await.unwrap()
}

/// Static file server honouring single `bytes=a-b` ranges.
pub struct FileServer {
    pub addr: SocketAddr,
    task: JoinHandle<()>,
}

impl FileServer {
    pub fn url(&self) -> String {
        format!("http://{}/data.bin", self.addr)
    }

    pub fn dir_url(&self) -> String {
        format!("http://{}/", self.addr)
    }

    /// Same file from a handler that ignores `Range`.
    pub fn plain_url(&self) -> String {
        format!("http://{}/plain/data.bin", self.addr)
    }
}

impl Drop for FileServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn file(State(body): State<Arc<Vec<u8>>>, headers: HeaderMap) -> Response {
    let range = headers
        .get(header::RANGE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("bytes="))
        .and_then(|v| v.split_once('-'))
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)));
    match range {
        Some((a, b)) if a <= b && b < body.len() => (
            StatusCode::PARTIAL_CONTENT,
            [(header::CONTENT_RANGE, format!("bytes {a}-{b}/{}", body.len()))],
            body[a..=b].to_vec(),
        )
            .into_response(),
        Some(_) => StatusCode::RANGE_NOT_SATISFIABLE.into_response(),
        None => (StatusCode::OK, body.to_vec()).into_response(),
    }
}

pub async fn serve_file(content: Vec<u8>) -> FileServer {
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = Router::new()
        .route("/data.bin", get(file))
        .route(
            "/plain/data.bin",
            get(|State(body): State<Arc<Vec<u8>>>| async move { body.to_vec() }),
        )
        .with_state(Arc::new(content));
    let task = tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    FileServer { addr, task }
}

/// Wait until no node's byte counters move for `quiet`, so that blocks still
/// in flight when the last download completed are delivered.
pub async fn settle(nodes: &[&Node], quiet: std::time::Duration) {
    let totals = || {
        nodes
            .iter()
            .map(|n| {
                let r = n.report();
                (r.bytes_up, r.bytes_down)
            })
            .collect::<Vec<_>>()
    };
    let mut last = totals();
    loop {
        tokio::time::sleep(quiet).await;
        let now = totals();
        if now == last {
            return;
        }
        last = now;
    }
}

pub const GOLDEN_INFO_HASH: [u8; 20] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 19];
pub const GOLDEN_PEER_ID: &[u8; 20] = b"-SW0001-abcdefghijkl";
pub const GOLDEN_HANDSHAKE: &str = "13426974546f7272656e742070726f746f636f6c\
    0000000000000000000102030405060708090a0b0c0d0e0f10111213\
    2d5357303030312d6162636465666768696a6b6c";

/// Every message kind with its expected frame, computed independently.
pub fn wire_golden() -> Vec<(&'static str, Message, &'static str)> {
    vec![
        ("keep-alive", Message::KeepAlive, "00000000"),
        ("choke", Message::Choke, "0000000100"),
        ("unchoke", Message::Unchoke, "0000000101"),
        ("interested", Message::Interested, "0000000102"),
        ("not interested", Message::NotInterested, "0000000103"),
        ("have", Message::Have(1), "000000050400000001"),
        ("bitfield", Message::Bitfield(vec![0xa0, 0x01]), "0000000305a001"),
        (
            "request",
            Message::Request { index: 0, begin: 0, length: 16384 },
            "0000000d06000000000000000000004000",
        ),
        (
            "piece",
            Message::Piece { index: 1, begin: 0, data: b"abc".to_vec() },
            "0000000c070000000100000000616263",
        ),
        (
            "cancel",
            Message::Cancel { index: 1, begin: 16384, length: 16384 },
            "0000000d08000000010000400000004000",
        ),
    ]
}

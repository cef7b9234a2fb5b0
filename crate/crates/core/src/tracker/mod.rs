//! A minimal HTTP tracker.
//!
//! The tracker keeps one registry per info-hash. Peers report cumulative
//! `uploaded`/`downloaded` counters; the tracker differences them against the
//! previous announce of the same peer and accumulates the deltas into a
//! [`TransferLedger`]. Only uploads from peers whose id starts with the
//! configured origin prefix count as `seeder_uploaded`; every peer's download
//! counts toward `total_downloaded`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use percent_encoding::{percent_decode, percent_encode, NON_ALPHANUMERIC};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bencode::{self, DictBuilder, Value};
use crate::metainfo::Digest20;

mod journal;
mod server;

pub use journal::{replay_journal, Journal, JournalRecord};
pub use server::{serve, TrackerHandle};

pub type PeerId = [u8; 20];

pub const DEFAULT_INTERVAL_SECS: u32 = 1800;
pub const DEFAULT_MAX_PEERS: usize = 50;
pub const DEFAULT_ORIGIN_PREFIX: &[u8] = b"-SWORIG-";

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error("unknown swarm {0}")]
    UnknownSwarm(Digest20),
    #[error("malformed announce: {0}")]
    MalformedAnnounce(String),
    #[error("{0} is not an IPv4 address")]
    NonV4Address(SocketAddr),
    #[error("journal: {0}")]
    Journal(#[from] io::Error),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, TrackerError> {
    Err(TrackerError::MalformedAnnounce(msg.into()))
}

/// Seconds since the Unix epoch.
pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnnounceEvent {
    Started,
    Stopped,
    Completed,
    None,
}

impl AnnounceEvent {
    fn as_query(self) -> Option<&'static str> {
        match self {
            AnnounceEvent::Started => Some("started"),
            AnnounceEvent::Stopped => Some("stopped"),
            AnnounceEvent::Completed => Some("completed"),
            AnnounceEvent::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnounceRequest {
    pub info_hash: Digest20,
    pub peer_id: PeerId,
    pub ip: Ipv4Addr,
    pub port: u16,
    pub uploaded: u64,
    pub downloaded: u64,
    pub left: u64,
    pub event: AnnounceEvent,
    pub compact: bool,
}

impl AnnounceRequest {
    /// Parse a raw (still percent-encoded) query string. `remote` is the
    /// connection's address, used when the query carries no `ip`.
    pub fn from_query(query: &str, remote: Option<IpAddr>) -> Result<Self, TrackerError> {
        let params = parse_query(query);
        let get = |key: &str| params.get(key).map(Vec::as_slice);
        let text = |key: &str| -> Result<&str, TrackerError> {
            match get(key) {
                Some(v) => std::str::from_utf8(v)
                    .map_err(|_| TrackerError::MalformedAnnounce(format!("`{key}` is not text"))),
                None => malformed(format!("missing `{key}`")),
            }
        };
        let counter = |key: &str| -> Result<u64, TrackerError> {
            text(key)?
                .parse::<u64>()
                .map_err(|_| TrackerError::MalformedAnnounce(format!("`{key}` is not a non-negative integer")))
        };

        let info_hash = match get("info_hash").map(Digest20::from_slice) {
            Some(Some(h)) => h,
            Some(None) => return malformed("`info_hash` must be 20 bytes"),
            None => return malformed("missing `info_hash`"),
        };
        let peer_id: PeerId = match get("peer_id").map(<[u8; 20]>::try_from) {
            Some(Ok(id)) => id,
            Some(Err(_)) => return malformed("`peer_id` must be 20 bytes"),
            None => return malformed("missing `peer_id`"),
        };
        let port = match text("port")?.parse::<u16>() {
            Ok(p) if p > 0 => p,
            _ => return malformed("`port` must be in 1..=65535"),
        };
        let uploaded = counter("uploaded")?;
        let downloaded = counter("downloaded")?;
        let left = counter("left")?;
        let event = match get("event") {
            None | Some(b"") | Some(b"empty") => AnnounceEvent::None,
            Some(b"started") => AnnounceEvent::Started,
            Some(b"stopped") => AnnounceEvent::Stopped,
            Some(b"completed") => AnnounceEvent::Completed,
            Some(_) => return malformed("unknown `event`"),
        };
        let compact = match get("compact") {
            None | Some(b"1") => true,
            Some(b"0") => return malformed("only compact peer lists are supported"),
            Some(_) => return malformed("`compact` must be 0 or 1"),
        };
        let ip = match get("ip") {
            Some(_) => match text("ip")?.parse::<Ipv4Addr>() {
                Ok(ip) => ip,
                Err(_) => return malformed("`ip` must be an IPv4 address"),
            },
            None => match remote {
                Some(IpAddr::V4(v4)) => v4,
                Some(IpAddr::V6(v6)) => match v6.to_ipv4_mapped() {
                    Some(v4) => v4,
                    None => return malformed("IPv6 peers are not supported"),
                },
                None => return malformed("no peer address"),
            },
        };
        Ok(AnnounceRequest {
            info_hash,
            peer_id,
            ip,
            port,
            uploaded,
            downloaded,
            left,
            event,
            compact,
        })
    }

    /// Query string as a client would send it. `ip` is left for the tracker
    /// to take from the connection.
    pub fn to_query(&self) -> String {
        let mut q = format!(
            "info_hash={}&peer_id={}&port={}&uploaded={}&downloaded={}&left={}&compact=1",
            percent_encode(self.info_hash.as_bytes(), NON_ALPHANUMERIC),
            percent_encode(&self.peer_id, NON_ALPHANUMERIC),
            self.port,
            self.uploaded,
            self.downloaded,
            self.left,
        );
        if let Some(ev) = self.event.as_query() {
            q.push_str("&event=");
            q.push_str(ev);
        }
        q
    }
}

/// Split `a=b&c=d` into percent-decoded byte values. Later keys win.
fn parse_query(query: &str) -> HashMap<String, Vec<u8>> {
    query
        .split('&')
        .filter(|kv| !kv.is_empty())
        .map(|kv| {
            let (k, v) = kv.split_once('=').unwrap_or((kv, ""));
            let key = percent_decode(k.as_bytes()).decode_utf8_lossy().into_owned();
            (key, percent_decode(v.as_bytes()).collect())
        })
        .collect()
}

/// All values of a repeated query key, e.g. `info_hash` on scrape.
fn query_values(query: &str, key: &str) -> Vec<Vec<u8>> {
    query
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .filter(|(k, _)| *k == key)
        .map(|(_, v)| percent_decode(v.as_bytes()).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnounceResponse {
    pub interval: u32,
    pub complete: u32,
    pub incomplete: u32,
    pub peers: Vec<SocketAddrV4>,
}

impl AnnounceResponse {
    pub fn to_value(&self) -> Value {
        let peers: Vec<SocketAddr> = self.peers.iter().map(|p| SocketAddr::V4(*p)).collect();
        DictBuilder::new()
            .insert("interval", i64::from(self.interval))
            .insert("complete", i64::from(self.complete))
            .insert("incomplete", i64::from(self.incomplete))
            .insert("peers", encode_compact_peers(&peers).expect("registry holds IPv4 only"))
            .build()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_value().encode()
    }

    /// Parse a tracker response body. A `failure reason` becomes `Err`.
    pub fn parse(body: &[u8]) -> Result<AnnounceResponse, TrackerError> {
        let v = bencode::decode(body)
            .map_err(|e| TrackerError::MalformedAnnounce(format!("bad response: {e}")))?;
        if let Some(reason) = v.get(b"failure reason") {
            return malformed(String::from_utf8_lossy(reason.as_bytes().unwrap_or(b"?")).into_owned());
        }
        let int = |key: &[u8]| -> Result<i64, TrackerError> {
            v.get(key)
                .and_then(Value::as_int)
                .ok_or_else(|| TrackerError::MalformedAnnounce(format!("response lacks `{}`", String::from_utf8_lossy(key))))
        };
        let peers = match v.get(b"peers").and_then(Value::as_bytes) {
            Some(b) => decode_compact_peers(b)?,
            None => return malformed("response lacks compact `peers`"),
        };
        Ok(AnnounceResponse {
            interval: int(b"interval")?.clamp(0, u32::MAX as i64) as u32,
            complete: int(b"complete").unwrap_or(0).max(0) as u32,
            incomplete: int(b"incomplete").unwrap_or(0).max(0) as u32,
            peers,
        })
    }
}

/// Bencoded `{failure reason: ...}` body.
pub fn failure_body(reason: &str) -> Vec<u8> {
    DictBuilder::new().insert("failure reason", reason).build().encode()
}

/// 6 bytes per peer: big-endian IPv4 address then big-endian port.
pub fn encode_compact_peers(peers: &[SocketAddr]) -> Result<Vec<u8>, TrackerError> {
    let mut out = Vec::with_capacity(peers.len() * 6);
    for peer in peers {
        match peer {
            SocketAddr::V4(v4) => {
                out.extend_from_slice(&v4.ip().octets());
                out.extend_from_slice(&v4.port().to_be_bytes());
            }
            SocketAddr::V6(_) => return Err(TrackerError::NonV4Address(*peer)),
        }
    }
    Ok(out)
}

pub fn decode_compact_peers(bytes: &[u8]) -> Result<Vec<SocketAddrV4>, TrackerError> {
    if !bytes.len().is_multiple_of(6) {
        return malformed("compact peer list length is not a multiple of 6");
    }
    Ok(bytes
        .chunks_exact(6)
        .map(|c| {
            SocketAddrV4::new(
                Ipv4Addr::new(c[0], c[1], c[2], c[3]),
                u16::from_be_bytes([c[4], c[5]]),
            )
        })
        .collect())
}

/// Cumulative transfer accounting for one swarm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferLedger {
    /// Bytes uploaded by the designated origin seeder.
    pub seeder_uploaded: u64,
    /// Bytes downloaded by every peer in the swarm.
    pub total_downloaded: u64,
}

impl TransferLedger {
    fn add(&mut self, from_origin: bool, up: u64, down: u64) {
        if from_origin {
            self.seeder_uploaded = self.seeder_uploaded.saturating_add(up);
        }
        self.total_downloaded = self.total_downloaded.saturating_add(down);
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct SwarmReport {
    pub complete: u32,
    pub incomplete: u32,
    pub ledger: TransferLedger,
    /// Number of `completed` events received.
    pub completed_events: u64,
    /// Distinct peer ids ever seen.
    pub unique_peers: u64,
}

#[derive(Debug, Clone)]
struct PeerEntry {
    addr: SocketAddrV4,
    last_seen: u64,
    left: u64,
    /// Counters at the previous announce.
    base_up: u64,
    base_down: u64,
}

#[derive(Debug, Default)]
struct Swarm {
    peers: BTreeMap<PeerId, PeerEntry>,
    ledger: TransferLedger,
    completed_events: u64,
    seen: HashSet<PeerId>,
}

impl Swarm {
    fn counts(&self) -> (u32, u32) {
        let complete = self.peers.values().filter(|p| p.left == 0).count() as u32;
        (complete, self.peers.len() as u32 - complete)
    }

    fn report(&self) -> SwarmReport {
        let (complete, incomplete) = self.counts();
        SwarmReport {
            complete,
            incomplete,
            ledger: self.ledger,
            completed_events: self.completed_events,
            unique_peers: self.seen.len() as u64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrackerConfig {
    pub interval: u32,
    /// Seconds without an announce before a peer is dropped.
    pub peer_ttl: u64,
    pub max_peers: usize,
    pub origin_prefix: Vec<u8>,
    /// Reject announces for swarms that were not registered.
    pub closed: bool,
}

impl TrackerConfig {
    pub fn with_interval(interval: u32) -> Self {
        let interval = interval.max(1);
        TrackerConfig {
            interval,
            peer_ttl: 2 * u64::from(interval),
            max_peers: DEFAULT_MAX_PEERS,
            origin_prefix: DEFAULT_ORIGIN_PREFIX.to_vec(),
            closed: false,
        }
    }
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig::with_interval(DEFAULT_INTERVAL_SECS)
    }
}

pub struct Tracker {
    config: TrackerConfig,
    swarms: RwLock<HashMap<Digest20, Arc<Mutex<Swarm>>>>,
    journal: Option<Mutex<Journal>>,
}

impl fmt::Debug for Tracker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tracker")
            .field("config", &self.config)
            .field("swarms", &self.swarms.read().unwrap().len())
            .field("journal", &self.journal.is_some())
            .finish()
    }
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Self {
        Tracker {
            config,
            swarms: RwLock::new(HashMap::new()),
            journal: None,
        }
    }

    /// Open (or create) an append-only journal, restoring ledgers from any
    /// records already in it.
    pub fn with_journal(config: TrackerConfig, path: &Path) -> Result<Self, TrackerError> {
        let ledgers = if path.exists() {
            replay_journal(path, &config.origin_prefix)?
        } else {
            HashMap::new()
        };
        let swarms = ledgers
            .into_iter()
            .map(|(hash, ledger)| {
                let swarm = Swarm {
                    ledger,
                    ..Swarm::default()
                };
                (hash, Arc::new(Mutex::new(swarm)))
            })
            .collect();
        Ok(Tracker {
            config,
            swarms: RwLock::new(swarms),
            journal: Some(Mutex::new(Journal::open(path)?)),
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    /// Make a swarm known, which matters in closed mode.
    pub fn register(&self, info_hash: Digest20) {
        self.swarms
            .write()
            .unwrap()
            .entry(info_hash)
            .or_default();
    }

    fn swarm(&self, info_hash: &Digest20, create: bool) -> Option<Arc<Mutex<Swarm>>> {
        if let Some(s) = self.swarms.read().unwrap().get(info_hash) {
            return Some(s.clone());
        }
        if !create {
            return None;
        }
        Some(
            self.swarms
                .write()
                .unwrap()
                .entry(*info_hash)
                .or_default()
                .clone(),
        )
    }

    pub fn handle_announce(
        &self,
        req: &AnnounceRequest,
        now: u64,
    ) -> Result<AnnounceResponse, TrackerError> {
        if !req.compact {
            return malformed("only compact peer lists are supported");
        }
        let swarm = self
            .swarm(&req.info_hash, !self.config.closed)
            .ok_or(TrackerError::UnknownSwarm(req.info_hash))?;
        let mut swarm = swarm.lock().unwrap();
        let addr = SocketAddrV4::new(req.ip, req.port);

        // A `started` announce begins a fresh session whose counters restart at 0.
        let (base_up, base_down) = match (req.event, swarm.peers.get(&req.peer_id)) {
            (AnnounceEvent::Started, _) | (_, None) => (0, 0),
            (_, Some(p)) => (p.base_up, p.base_down),
        };
        // Counters that went backwards without `started` are treated as a reset.
        let delta = |now: u64, base: u64| if now >= base { now - base } else { now };
        let up = delta(req.uploaded, base_up);
        let down = delta(req.downloaded, base_down);
        let from_origin = req.peer_id.starts_with(&self.config.origin_prefix);
        if up > 0 || down > 0 {
            if let Some(journal) = &self.journal {
                journal.lock().unwrap().append(&JournalRecord {
                    timestamp: now,
                    info_hash: req.info_hash,
                    peer_id: req.peer_id,
                    up_delta: up,
                    down_delta: down,
                })?;
            }
            swarm.ledger.add(from_origin, up, down);
        }
        swarm.seen.insert(req.peer_id);

        match req.event {
            AnnounceEvent::Stopped => {
                swarm.peers.remove(&req.peer_id);
            }
            event => {
                if event == AnnounceEvent::Completed {
                    swarm.completed_events += 1;
                }
                let left = if event == AnnounceEvent::Completed { 0 } else { req.left };
                swarm.peers.insert(
                    req.peer_id,
                    PeerEntry {
                        addr,
                        last_seen: now,
                        left,
                        base_up: req.uploaded,
                        base_down: req.downloaded,
                    },
                );
            }
        }

        let (complete, incomplete) = swarm.counts();
        let peers = swarm
            .peers
            .iter()
            .filter(|(id, _)| **id != req.peer_id)
            .map(|(_, p)| p.addr)
            .take(self.config.max_peers)
            .collect();
        Ok(AnnounceResponse {
            interval: self.config.interval,
            complete,
            incomplete,
            peers,
        })
    }

    /// Drop peers not heard from since `now - ttl`. Ledgers are untouched.
    pub fn expire_peers(&self, now: u64, ttl: u64) -> usize {
        let swarms: Vec<_> = self.swarms.read().unwrap().values().cloned().collect();
        let cutoff = now.saturating_sub(ttl);
        swarms
            .iter()
            .map(|s| {
                let mut s = s.lock().unwrap();
                let before = s.peers.len();
                s.peers.retain(|_, p| p.last_seen >= cutoff);
                before - s.peers.len()
            })
            .sum()
    }

    pub fn swarm_report(&self, info_hash: &Digest20) -> Result<SwarmReport, TrackerError> {
        let swarm = self
            .swarm(info_hash, false)
            .ok_or(TrackerError::UnknownSwarm(*info_hash))?;
        let report = swarm.lock().unwrap().report();
        Ok(report)
    }

    /// Reports for the given swarms, or all swarms when `hashes` is empty.
    pub fn scrape(&self, hashes: &[Digest20]) -> Vec<(Digest20, SwarmReport)> {
        let swarms = self.swarms.read().unwrap();
        let mut out: Vec<_> = if hashes.is_empty() {
            swarms
                .iter()
                .map(|(h, s)| (*h, s.lock().unwrap().report()))
                .collect()
        } else {
            hashes
                .iter()
                .filter_map(|h| swarms.get(h).map(|s| (*h, s.lock().unwrap().report())))
                .collect()
        };
        out.sort_by_key(|(h, _)| *h);
        out
    }
}

/// Bencoded scrape body: `{files: {<hash>: {complete, downloaded, incomplete}}}`.
pub fn scrape_body(reports: &[(Digest20, SwarmReport)]) -> Vec<u8> {
    let files = reports
        .iter()
        .map(|(h, r)| {
            let stats = DictBuilder::new()
                .insert("complete", i64::from(r.complete))
                .insert("downloaded", r.completed_events as i64)
                .insert("incomplete", i64::from(r.incomplete))
                .build();
            (h.as_bytes().to_vec(), stats)
        })
        .collect();
    DictBuilder::new().insert("files", Value::Dict(files)).build().encode()
}

/// Handle a raw `/announce` query end to end, producing the response body.
pub fn announce_body(tracker: &Tracker, query: &str, remote: Option<IpAddr>, now: u64) -> Vec<u8> {
    let result = AnnounceRequest::from_query(query, remote)
        .and_then(|req| tracker.handle_announce(&req, now));
    match result {
        Ok(resp) => resp.to_bytes(),
        Err(e) => {
            tracing::debug!("announce rejected: {e}");
            failure_body(&e.to_string())
        }
    }
}

/// Handle a raw `/scrape` query.
pub fn scrape_query_body(tracker: &Tracker, query: &str) -> Vec<u8> {
    let mut hashes = Vec::new();
    for raw in query_values(query, "info_hash") {
        match Digest20::from_slice(&raw) {
            Some(h) => hashes.push(h),
            None => return failure_body("`info_hash` must be 20 bytes"),
        }
    }
    scrape_body(&tracker.scrape(&hashes))
}

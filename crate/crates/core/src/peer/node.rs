//! A running peer: listener, tracker client, web-seed worker and the shared
//! piece state every session works against.

use std::collections::{HashMap, HashSet, VecDeque};
use std::future::Future;
use std::net::{Ipv4Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::distr::Alphanumeric;
use rand::Rng;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, watch, Notify, Semaphore};
use tokio::task::JoinHandle;
use tracing::{debug, info, warn};

use super::session::{run_session, Outgoing};
use super::webseed::{webseed_fetch, WebseedError};
use super::wire::{Message, BLOCK_SIZE};
use super::{Bitfield, BlockOutcome, Limits, PeerError, PieceStore, Role, SessionReport, TokenBucket};
use crate::metainfo::{Digest20, Metainfo};
use crate::tracker::{AnnounceEvent, AnnounceRequest, AnnounceResponse, PeerId};

pub const CLIENT_PEER_PREFIX: &[u8] = b"-SW0001-";

const WEBSEED_MAX_FAILURES: u32 = 8;
const DIAL_TIMEOUT: Duration = Duration::from_secs(5);

/// `prefix` followed by random alphanumerics, 20 bytes in total.
pub fn generate_peer_id(prefix: &[u8]) -> PeerId {
    assert!(prefix.len() <= 20, "peer id prefix too long");
    let mut id = [0u8; 20];
    id[..prefix.len()].copy_from_slice(prefix);
    let mut rng = rand::rng();
    for b in &mut id[prefix.len()..] {
        *b = rng.sample(Alphanumeric);
    }
    id
}

#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub role: Role,
    pub peer_id: PeerId,
    pub listen: SocketAddr,
    pub tracker_url: Option<String>,
    pub webseeds: Vec<String>,
    /// Peers dialled at startup in addition to tracker results.
    pub bootstrap: Vec<SocketAddr>,
    /// Keep serving after a fetch completes (only used by
    /// [`run_session_set`]).
    pub seed_after: bool,
    pub limits: Limits,
}

impl NodeConfig {
    pub fn new(role: Role) -> Self {
        NodeConfig {
            role,
            peer_id: generate_peer_id(CLIENT_PEER_PREFIX),
            listen: SocketAddr::from((Ipv4Addr::LOCALHOST, 0)),
            tracker_url: None,
            webseeds: Vec::new(),
            bootstrap: Vec::new(),
            seed_after: false,
            limits: Limits::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Status {
    Running,
    Complete,
    NoSources,
    Timeout,
}

pub(crate) struct SessionEntry {
    pub their_id: PeerId,
    pub outbound: bool,
    pub bits: Bitfield,
    pub out: mpsc::UnboundedSender<Outgoing>,
    pub close: Arc<Notify>,
    /// We are not choking them.
    pub unchoked: bool,
    /// They are choking us.
    pub choking_us: bool,
}

pub(crate) struct State {
    pub store: PieceStore,
    /// Pieces some session or the web-seed worker is currently fetching.
    pub pending: Bitfield,
    pub availability: Vec<u32>,
    pub sessions: HashMap<u64, SessionEntry>,
    pub unchoked: usize,
    pub choked_queue: VecDeque<u64>,
    zero_since: Vec<Option<Instant>>,
    /// Pieces whose peer source stalled; the web seed may take them at once.
    pub stalled: Bitfield,
    webseed_failures: Vec<u32>,
    pub pieces_from_peers: u64,
    pub pieces_from_webseed: u64,
    pub webseed_corrupt: u64,
    pub ever_connected: bool,
    dialed: HashSet<SocketAddr>,
}

impl State {
    pub fn add_bits(&mut self, bits: &Bitfield) {
        for i in bits.iter_set() {
            self.availability[i] += 1;
        }
    }

    pub fn remove_bits(&mut self, bits: &Bitfield) {
        for i in bits.iter_set() {
            self.availability[i] = self.availability[i].saturating_sub(1);
        }
    }

    pub fn broadcast(&self, msg: &Message) {
        for s in self.sessions.values() {
            let _ = s.out.send(Outgoing::Msg(msg.clone()));
        }
    }

    /// Bookkeeping after piece `index` verifies, from either source.
    pub fn on_verified(&mut self, index: usize, status: &watch::Sender<Status>) {
        self.pending.clear(index);
        self.stalled.clear(index);
        self.broadcast(&Message::Have(index as u32));
        if self.store.is_complete() {
            status.send_if_modified(|s| {
                if *s == Status::Running {
                    *s = Status::Complete;
                    true
                } else {
                    false
                }
            });
        }
    }

    /// Unchoke the longest-waiting choked session, if any.
    pub fn promote_choked(&mut self) {
        while let Some(id) = self.choked_queue.pop_front() {
            if let Some(s) = self.sessions.get_mut(&id) {
                s.unchoked = true;
                self.unchoked += 1;
                let _ = s.out.send(Outgoing::Msg(Message::Unchoke));
                return;
            }
        }
    }
}

pub(crate) struct Shared {
    pub meta: Metainfo,
    pub info_hash: Digest20,
    pub peer_id: PeerId,
    /// Tie-break rotation for piece selection, derived from the peer id and
    /// advanced on every pick so that peers do not chase the same pieces.
    pub pick_seed: u64,
    pub picks: AtomicU64,
    pub limits: Limits,
    pub state: Mutex<State>,
    pub up: Option<TokenBucket>,
    pub down: Option<TokenBucket>,
    pub bytes_up: AtomicU64,
    pub bytes_down: AtomicU64,
    pub webseed_bytes: AtomicU64,
    pub status: watch::Sender<Status>,
    pub shutdown: watch::Sender<bool>,
    /// Signalled when new pieces become requestable.
    pub changed: Notify,
    pub next_session: AtomicU64,
    pub local_addr: SocketAddr,
    started: Instant,
}

impl Shared {
    /// Next tie-break seed (splitmix64 over the pick counter).
    pub fn next_pick_seed(&self) -> u64 {
        let k = self.picks.fetch_add(1, Ordering::Relaxed);
        let mut z = self.pick_seed.wrapping_add(k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn is_shutting_down(&self) -> bool {
        *self.shutdown.borrow()
    }

    fn report(&self) -> SessionReport {
        let st = self.state.lock().unwrap();
        SessionReport {
            bytes_up: self.bytes_up.load(Ordering::SeqCst),
            bytes_down: self.bytes_down.load(Ordering::SeqCst),
            webseed_bytes: self.webseed_bytes.load(Ordering::SeqCst),
            duration_secs: self.started.elapsed().as_secs_f64(),
            pieces_from_peers: st.pieces_from_peers,
            pieces_from_webseed: st.pieces_from_webseed,
            corrupt_pieces: st.store.corrupt_events() + st.webseed_corrupt,
            complete: st.store.is_complete(),
        }
    }
}

fn bucket(rate: Option<u64>) -> Option<TokenBucket> {
    rate.map(|r| TokenBucket::new(r, u64::from(BLOCK_SIZE).max(r / 10)))
}

pub struct Node {
    shared: Arc<Shared>,
    tasks: Vec<JoinHandle<()>>,
    tracker_task: Option<JoinHandle<()>>,
}

impl Node {
    /// Bind the listener and start the background tasks. A seed must be
    /// given content that verifies against `meta`.
    pub async fn start(meta: Metainfo, config: NodeConfig, content: Option<Vec<u8>>) -> Result<Node, PeerError> {
        let store = match (config.role, content) {
            (Role::Seed, Some(c)) => PieceStore::with_content(&meta, c)?,
            (Role::Seed, None) => return Err(PeerError::MissingContent),
            (Role::Fetch, _) => PieceStore::new(&meta),
        };
        let n = meta.piece_count();
        let listener = TcpListener::bind(config.listen).await?;
        let local_addr = listener.local_addr()?;
        let complete = store.is_complete();
        let state = State {
            store,
            pending: Bitfield::new(n),
            availability: vec![0; n],
            sessions: HashMap::new(),
            unchoked: 0,
            choked_queue: VecDeque::new(),
            zero_since: vec![None; n],
            stalled: Bitfield::new(n),
            webseed_failures: vec![0; n],
            pieces_from_peers: 0,
            pieces_from_webseed: 0,
            webseed_corrupt: 0,
            ever_connected: false,
            dialed: HashSet::new(),
        };
        let digest = Digest20::of(&config.peer_id);
        let pick_seed = u64::from_be_bytes(digest.as_bytes()[..8].try_into().unwrap());
        let shared = Arc::new(Shared {
            info_hash: meta.info_hash(),
            meta,
            peer_id: config.peer_id,
            pick_seed,
            picks: AtomicU64::new(0),
            state: Mutex::new(state),
            up: bucket(config.limits.up_rate),
            down: bucket(config.limits.down_rate),
            limits: config.limits.clone(),
            bytes_up: AtomicU64::new(0),
            bytes_down: AtomicU64::new(0),
            webseed_bytes: AtomicU64::new(0),
            status: watch::Sender::new(if complete { Status::Complete } else { Status::Running }),
            shutdown: watch::Sender::new(false),
            changed: Notify::new(),
            next_session: AtomicU64::new(0),
            local_addr,
            started: Instant::now(),
        });
        info!(addr = %local_addr, role = ?config.role, info_hash = %shared.info_hash, "node started");

        let mut tasks = vec![tokio::spawn(accept_loop(shared.clone(), listener))];
        for addr in &config.bootstrap {
            dial(&shared, *addr);
        }
        if config.role == Role::Fetch {
            if !config.webseeds.is_empty() {
                tasks.push(tokio::spawn(webseed_worker(shared.clone(), config.webseeds.clone())));
            }
            let has_sources =
                config.tracker_url.is_some() || !config.bootstrap.is_empty() || !config.webseeds.is_empty();
            tasks.push(tokio::spawn(supervise(shared.clone(), has_sources, !config.webseeds.is_empty())));
        }
        let tracker_task = config
            .tracker_url
            .clone()
            .map(|url| tokio::spawn(tracker_loop(shared.clone(), url)));
        Ok(Node {
            shared,
            tasks,
            tracker_task,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.local_addr
    }

    pub fn peer_id(&self) -> PeerId {
        self.shared.peer_id
    }

    pub fn is_complete(&self) -> bool {
        self.shared.state.lock().unwrap().store.is_complete()
    }

    /// Resolves once every piece has verified, or with the reason the fetch
    /// gave up.
    pub async fn wait_complete(&self) -> Result<(), PeerError> {
        let mut rx = self.shared.status.subscribe();
        let status = rx
            .wait_for(|s| *s != Status::Running)
            .await
            .map(|s| s.clone())
            .unwrap_or(Status::Running);
        match status {
            Status::Complete => Ok(()),
            Status::NoSources => Err(PeerError::NoSources),
            Status::Timeout => Err(PeerError::Timeout),
            Status::Running => Err(PeerError::Stopped),
        }
    }

    pub fn report(&self) -> SessionReport {
        self.shared.report()
    }

    /// The assembled content, once complete.
    pub fn content(&self) -> Option<Vec<u8>> {
        let st = self.shared.state.lock().unwrap();
        st.store.is_complete().then(|| st.store.content().to_vec())
    }

    /// Stop all sessions, send the final `stopped` announce and return the
    /// node's totals.
    pub async fn shutdown(mut self) -> SessionReport {
        self.shared.shutdown.send_replace(true);
        if let Some(t) = self.tracker_task.take() {
            let _ = t.await;
        }
        for t in self.tasks.drain(..) {
            t.abort();
            let _ = t.await;
        }
        self.shared.report()
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.shared.shutdown.send_replace(true);
        for t in &self.tasks {
            t.abort();
        }
    }
}

/// Run one node to its natural end: a fetch returns when complete (or keeps
/// seeding until `until` resolves when `seed_after` is set); a seed serves
/// until `until` resolves. Returns the totals and, for a fetch, the content.
pub async fn run_session_set(
    meta: Metainfo,
    config: NodeConfig,
    content: Option<Vec<u8>>,
    until: impl Future<Output = ()>,
) -> Result<(SessionReport, Option<Vec<u8>>), PeerError> {
    let role = config.role;
    let seed_after = config.seed_after;
    let node = Node::start(meta, config, content).await?;
    tokio::pin!(until);
    match role {
        Role::Seed => {
            tokio::select! {
                _ = &mut until => {}
            }
            Ok((node.shutdown().await, None))
        }
        Role::Fetch => {
            let outcome = tokio::select! {
                r = node.wait_complete() => r,
                _ = &mut until => Err(PeerError::Stopped),
            };
            if let Err(e) = outcome {
                node.shutdown().await;
                return Err(e);
            }
            let content = node.content();
            if seed_after {
                until.await;
            }
            Ok((node.shutdown().await, content))
        }
    }
}

async fn accept_loop(shared: Arc<Shared>, listener: TcpListener) {
    let mut stop = shared.shutdown.subscribe();
    loop {
        tokio::select! {
            r = listener.accept() => match r {
                Ok((stream, addr)) => {
                    debug!(%addr, "inbound connection");
                    let shared = shared.clone();
                    tokio::spawn(async move {
                        if let Err(e) = run_session(shared, stream, false).await {
                            debug!(%addr, error = %e, "session ended");
                        }
                    });
                }
                Err(e) => {
                    warn!(error = %e, "accept failed");
                    tokio::time::sleep(Duration::from_millis(50)).await;
                }
            },
            _ = stopped(&mut stop) => return,
        }
    }
}

/// Resolves once shutdown has been requested.
pub(crate) async fn stopped(rx: &mut watch::Receiver<bool>) {
    let _ = rx.wait_for(|s| *s).await;
}

/// Connect to `addr` unless it is ourselves or already being tried.
pub(crate) fn dial(shared: &Arc<Shared>, addr: SocketAddr) {
    if addr == shared.local_addr || shared.is_shutting_down() {
        return;
    }
    if !shared.state.lock().unwrap().dialed.insert(addr) {
        return;
    }
    let shared = shared.clone();
    tokio::spawn(async move {
        let result = match tokio::time::timeout(DIAL_TIMEOUT, TcpStream::connect(addr)).await {
            Ok(Ok(stream)) => run_session(shared.clone(), stream, true).await,
            Ok(Err(e)) => Err(e.into()),
            Err(_) => Err(PeerError::PeerStalled),
        };
        if let Err(e) = result {
            debug!(%addr, error = %e, "outbound session ended");
        }
        shared.state.lock().unwrap().dialed.remove(&addr);
    });
}

async fn announce(
    client: &reqwest::Client,
    url: &str,
    req: &AnnounceRequest,
) -> Result<AnnounceResponse, String> {
    let sep = if url.contains('?') { '&' } else { '?' };
    let full = format!("{url}{sep}{}", req.to_query());
    let resp = client.get(full).send().await.map_err(|e| e.to_string())?;
    let body = resp.bytes().await.map_err(|e| e.to_string())?;
    AnnounceResponse::parse(&body).map_err(|e| e.to_string())
}

fn announce_request(shared: &Shared, event: AnnounceEvent) -> AnnounceRequest {
    let left = shared.state.lock().unwrap().store.bytes_left();
    AnnounceRequest {
        info_hash: shared.info_hash,
        peer_id: shared.peer_id,
        ip: Ipv4Addr::UNSPECIFIED,
        port: shared.local_addr.port(),
        uploaded: shared.bytes_up.load(Ordering::SeqCst),
        downloaded: shared.bytes_down.load(Ordering::SeqCst),
        left,
        event,
        compact: true,
    }
}

async fn tracker_loop(shared: Arc<Shared>, url: String) {
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(10))
        .build()
        .expect("HTTP client");
    let mut stop = shared.shutdown.subscribe();
    let mut status = shared.status.subscribe();
    let mut completed_sent = *status.borrow_and_update() == Status::Complete;
    let mut event = AnnounceEvent::Started;
    let mut interval = Duration::from_secs(1800);
    loop {
        let req = announce_request(&shared, event);
        match announce(&client, &url, &req).await {
            Ok(resp) => {
                debug!(peers = resp.peers.len(), ?event, "announce ok");
                interval = Duration::from_secs(u64::from(resp.interval.max(1)));
                for p in resp.peers {
                    dial(&shared, SocketAddr::V4(p));
                }
            }
            Err(e) => warn!(error = %e, "announce failed"),
        }
        event = AnnounceEvent::None;
        let lonely = shared.state.lock().unwrap().sessions.is_empty();
        let wait = if lonely {
            Duration::from_secs(1)
        } else {
            interval.min(shared.limits.reannounce)
        };
        tokio::select! {
            _ = tokio::time::sleep(wait) => {}
            _ = status.wait_for(|s| *s == Status::Complete), if !completed_sent => {
                completed_sent = true;
                event = AnnounceEvent::Completed;
            }
            _ = stopped(&mut stop) => break,
        }
    }
    let req = announce_request(&shared, AnnounceEvent::Stopped);
    if let Err(e) = announce(&client, &url, &req).await {
        warn!(error = %e, "final announce failed");
    }
}

async fn supervise(shared: Arc<Shared>, has_sources: bool, has_webseeds: bool) {
    let started = Instant::now();
    let mut stop = shared.shutdown.subscribe();
    let fail = |s: Status| {
        shared.status.send_if_modified(|cur| {
            if *cur == Status::Running {
                *cur = s;
                true
            } else {
                false
            }
        });
    };
    if !has_sources {
        fail(Status::NoSources);
        return;
    }
    loop {
        if *shared.status.borrow() != Status::Running {
            return;
        }
        let elapsed = started.elapsed();
        if shared.limits.timeout.is_some_and(|t| elapsed >= t) {
            fail(Status::Timeout);
            return;
        }
        if !has_webseeds && elapsed >= shared.limits.source_wait && !shared.state.lock().unwrap().ever_connected {
            fail(Status::NoSources);
            return;
        }
        tokio::select! {
            _ = tokio::time::sleep(Duration::from_millis(100)) => {}
            _ = stopped(&mut stop) => return,
        }
    }
}

/// Pieces the web seed should take now: nobody in the swarm has them (for
/// longer than the fallback delay) or their peer source stalled.
fn webseed_candidates(shared: &Shared, max: usize) -> Vec<usize> {
    let mut st = shared.state.lock().unwrap();
    let now = Instant::now();
    let mut picks = Vec::new();
    for i in 0..st.store.piece_count() {
        if st.store.have().has(i) || st.pending.has(i) {
            st.zero_since[i] = None;
            continue;
        }
        if st.availability[i] > 0 {
            st.zero_since[i] = None;
        } else if st.zero_since[i].is_none() {
            st.zero_since[i] = Some(now);
        }
        let waited = st.zero_since[i].is_some_and(|t| now.duration_since(t) >= shared.limits.webseed_fallback);
        if picks.len() < max && st.webseed_failures[i] < WEBSEED_MAX_FAILURES && (waited || st.stalled.has(i)) {
            st.pending.set(i);
            picks.push(i);
        }
    }
    picks
}

async fn webseed_worker(shared: Arc<Shared>, webseeds: Vec<String>) {
    let client = reqwest::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .expect("HTTP client");
    let permits = Arc::new(Semaphore::new(shared.limits.webseed_concurrency.max(1)));
    let mut stop = shared.shutdown.subscribe();
    loop {
        if shared.state.lock().unwrap().store.is_complete() {
            return;
        }
        let free = permits.available_permits();
        for index in webseed_candidates(&shared, free) {
            let permit = permits.clone().acquire_owned().await.expect("semaphore open");
            let shared = shared.clone();
            let client = client.clone();
            let failures = shared.state.lock().unwrap().webseed_failures[index] as usize;
            let url = webseeds[(index + failures) % webseeds.len()].clone();
            tokio::spawn(async move {
                let _permit = permit;
                let result = webseed_fetch(&client, &shared.meta, &url, index).await;
                if let (Ok(data), Some(b)) = (&result, &shared.down) {
                    b.acquire(data.len()).await;
                }
                let mut st = shared.state.lock().unwrap();
                match result {
                    Ok(data) => {
                        let len = data.len() as u64;
                        shared.bytes_down.fetch_add(len, Ordering::SeqCst);
                        shared.webseed_bytes.fetch_add(len, Ordering::SeqCst);
                        match st.store.put_piece(index, &data) {
                            Ok(BlockOutcome::Verified) => {
                                st.pieces_from_webseed += 1;
                                st.on_verified(index, &shared.status);
                            }
                            Ok(_) | Err(_) => st.pending.clear(index),
                        }
                    }
                    Err(e) => {
                        warn!(piece = index, %url, error = %e, "web seed fetch failed");
                        if matches!(e, WebseedError::CorruptPiece(_)) {
                            st.webseed_corrupt += 1;
                        }
                        st.webseed_failures[index] += 1;
                        st.pending.clear(index);
                    }
                }
                drop(st);
                shared.changed.notify_waiters();
            });
        }
        tokio::select! {
            _ = tokio::time::sleep(Duration::from_millis(100)) => {}
            _ = stopped(&mut stop) => return,
        }
    }
}

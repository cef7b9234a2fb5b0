//! One peer connection: handshake, registration with the node, and the
//! request/serve loop.

use std::collections::HashSet;
use std::io::ErrorKind;
use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use tokio::io::AsyncWriteExt;
use tokio::net::tcp::OwnedWriteHalf;
use tokio::net::TcpStream;
use tokio::sync::{mpsc, Notify};
use tracing::{debug, warn};

use super::node::{stopped, SessionEntry, Shared, State};
use super::wire::{encode_handshake, read_handshake, read_message, write_message, Message, WireError, BLOCK_SIZE};
use super::{rarest_first, Bitfield, BlockOutcome, PeerError};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const TICK: Duration = Duration::from_millis(250);
const DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

type BlockKey = (u32, u32, u32);

pub(crate) enum Outgoing {
    Msg(Message),
    /// Send a block of a piece we hold, subject to the upload limit.
    Serve(BlockKey),
}

pub(crate) async fn run_session(shared: Arc<Shared>, stream: TcpStream, outbound: bool) -> Result<(), PeerError> {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let ours = encode_handshake(&shared.info_hash, &shared.peer_id);
    let exchange = async {
        if outbound {
            wr.write_all(&ours).await?;
        }
        let theirs = read_handshake(&mut rd).await?.expect_swarm(&shared.info_hash)?;
        if !outbound {
            wr.write_all(&ours).await?;
        }
        Ok::<_, PeerError>(theirs)
    };
    let theirs = tokio::time::timeout(HANDSHAKE_TIMEOUT, exchange)
        .await
        .map_err(|_| PeerError::PeerStalled)??;
    if theirs.peer_id == shared.peer_id {
        return Ok(());
    }

    let (tx, rx) = mpsc::unbounded_channel();
    let close = Arc::new(Notify::new());
    let id = shared.next_session.fetch_add(1, Ordering::SeqCst);
    if !register(&shared, id, theirs.peer_id, outbound, tx.clone(), close.clone()) {
        debug!("dropping duplicate connection");
        return Ok(());
    }

    let cancelled = Arc::new(Mutex::new(HashSet::new()));
    let writer = tokio::spawn(write_loop(shared.clone(), wr, rx, cancelled.clone()));
    let (in_tx, mut in_rx) = mpsc::channel(64);
    let reader = tokio::spawn(async move {
        loop {
            let m = read_message(&mut rd).await;
            let end = m.is_err();
            if in_tx.send(m).await.is_err() || end {
                break;
            }
        }
    });

    let mut session = Session {
        shared: shared.clone(),
        id,
        out: tx,
        cancelled,
        peer_choking: true,
        am_interested: false,
        in_flight: Vec::new(),
        assigned: Vec::new(),
        last_data: Instant::now(),
        retiring: false,
    };
    session.fill();
    let mut stop = shared.shutdown.subscribe();
    let mut tick = tokio::time::interval(TICK);
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut retired_at: Option<Instant> = None;
    // Ok(true): retired gracefully, so flush and drain before closing.
    let result = loop {
        if retired_at.is_some() && session.in_flight.is_empty() {
            break Ok(true);
        }
        tokio::select! {
            m = in_rx.recv() => match m {
                Some(Ok(m)) => {
                    if let Err(e) = session.handle(m).await {
                        break Err(e);
                    }
                }
                Some(Err(WireError::Io(e))) if e.kind() == ErrorKind::UnexpectedEof => break Ok(false),
                Some(Err(e)) => break Err(e.into()),
                None => break Ok(false),
            },
            _ = close.notified(), if retired_at.is_none() => {
                retired_at = Some(Instant::now());
                session.retire();
            }
            _ = stopped(&mut stop) => break Ok(false),
            _ = shared.changed.notified() => session.fill(),
            _ = tick.tick() => {
                if writer.is_finished() {
                    break Ok(false);
                }
                if retired_at.is_some_and(|t| t.elapsed() > shared.limits.peer_timeout) {
                    break Ok(false);
                }
                if let Err(e) = session.on_tick() {
                    break Err(e);
                }
            }
        }
    };
    session.cleanup();
    drop(session);
    if let Ok(true) = result {
        // The writer flushes its queue and half-closes once the last sender
        // is gone; then read to EOF so nothing the peer already sent is lost.
        let _ = tokio::time::timeout(DRAIN_TIMEOUT, writer).await;
        let drain = async {
            while let Some(Ok(m)) = in_rx.recv().await {
                if let Message::Piece { data, .. } = m {
                    shared.bytes_down.fetch_add(data.len() as u64, Ordering::SeqCst);
                }
            }
        };
        let _ = tokio::time::timeout(DRAIN_TIMEOUT, drain).await;
    } else {
        writer.abort();
    }
    reader.abort();
    result.map(|_| ())
}

/// Add the session to the node. Of two connections between the same pair of
/// peers, both sides keep the one dialled by the smaller peer id.
fn register(
    shared: &Shared,
    id: u64,
    their_id: [u8; 20],
    outbound: bool,
    tx: mpsc::UnboundedSender<Outgoing>,
    close: Arc<Notify>,
) -> bool {
    let mut st = shared.state.lock().unwrap();
    let initiator = if outbound { shared.peer_id } else { their_id };
    let keeper = shared.peer_id.min(their_id);
    if let Some(dup) = st.sessions.values().find(|s| s.their_id == their_id) {
        if dup.outbound == outbound || initiator != keeper {
            return false;
        }
        dup.close.notify_one();
    }
    let n = st.store.piece_count();
    let unchoked = st.unchoked < shared.limits.max_unchoked;
    if unchoked {
        st.unchoked += 1;
    } else {
        st.choked_queue.push_back(id);
    }
    if st.store.have().count() > 0 {
        let _ = tx.send(Outgoing::Msg(Message::Bitfield(st.store.have().as_bytes().to_vec())));
    }
    if unchoked {
        let _ = tx.send(Outgoing::Msg(Message::Unchoke));
    }
    st.sessions.insert(
        id,
        SessionEntry {
            their_id,
            outbound,
            bits: Bitfield::new(n),
            out: tx,
            close,
            unchoked,
            choking_us: true,
        },
    );
    st.ever_connected = true;
    true
}

async fn write_loop(
    shared: Arc<Shared>,
    mut wr: OwnedWriteHalf,
    mut rx: mpsc::UnboundedReceiver<Outgoing>,
    cancelled: Arc<Mutex<HashSet<BlockKey>>>,
) -> Result<(), WireError> {
    while let Some(item) = rx.recv().await {
        match item {
            Outgoing::Msg(m) => write_message(&mut wr, &m).await?,
            Outgoing::Serve(key @ (index, begin, length)) => {
                if cancelled.lock().unwrap().remove(&key) {
                    continue;
                }
                if let Some(b) = &shared.up {
                    b.acquire(length as usize).await;
                    if cancelled.lock().unwrap().remove(&key) {
                        continue;
                    }
                }
                let data = {
                    let st = shared.state.lock().unwrap();
                    st.store
                        .read_block(index as usize, u64::from(begin), length as usize)
                        .map(<[u8]>::to_vec)
                };
                let Some(data) = data else { continue };
                write_message(&mut wr, &Message::Piece { index, begin, data }).await?;
                shared.bytes_up.fetch_add(u64::from(length), Ordering::SeqCst);
            }
        }
    }
    wr.shutdown().await?;
    Ok(())
}

struct Session {
    shared: Arc<Shared>,
    id: u64,
    out: mpsc::UnboundedSender<Outgoing>,
    cancelled: Arc<Mutex<HashSet<BlockKey>>>,
    peer_choking: bool,
    am_interested: bool,
    in_flight: Vec<BlockKey>,
    /// Pieces this session has claimed in the node's pending set.
    assigned: Vec<usize>,
    last_data: Instant,
    /// Superseded by a duplicate connection: finish outstanding requests,
    /// keep serving, issue nothing new.
    retiring: bool,
}

/// Bitfields of unchoking, incomplete peers other than `id`, when `id` is a
/// seed; empty otherwise.
fn other_leechers(st: &State, id: u64) -> Vec<&Bitfield> {
    if !st.sessions.get(&id).is_some_and(|e| e.bits.is_complete()) {
        return Vec::new();
    }
    st.sessions
        .iter()
        .filter(|(&sid, s)| sid != id && !s.choking_us && !s.bits.is_complete())
        .map(|(_, s)| &s.bits)
        .collect()
}

fn protocol(msg: impl Into<String>) -> PeerError {
    PeerError::Protocol(msg.into())
}

impl Session {
    fn send(&self, m: Message) {
        let _ = self.out.send(Outgoing::Msg(m));
    }

    async fn handle(&mut self, m: Message) -> Result<(), PeerError> {
        let n = self.shared.meta.piece_count();
        match m {
            Message::KeepAlive | Message::Interested | Message::NotInterested => {}
            Message::Choke => {
                self.peer_choking = true;
                self.set_choking_us(true);
                self.release_all();
            }
            Message::Unchoke => {
                self.peer_choking = false;
                self.set_choking_us(false);
                self.fill();
            }
            Message::Have(i) => {
                let i = i as usize;
                if i >= n {
                    return Err(protocol(format!("have for piece {i} of {n}")));
                }
                {
                    let mut st = self.shared.state.lock().unwrap();
                    let st = &mut *st;
                    if let Some(entry) = st.sessions.get_mut(&self.id) {
                        if !entry.bits.has(i) {
                            entry.bits.set(i);
                            st.availability[i] += 1;
                        }
                    }
                }
                self.shared.changed.notify_waiters();
                self.fill();
            }
            Message::Bitfield(bytes) => {
                let bits = Bitfield::from_bytes(&bytes, n).map_err(|e| protocol(e.to_string()))?;
                {
                    let mut st = self.shared.state.lock().unwrap();
                    let Some(entry) = st.sessions.get_mut(&self.id) else {
                        return Ok(());
                    };
                    let old = std::mem::replace(&mut entry.bits, bits.clone());
                    st.remove_bits(&old);
                    st.add_bits(&bits);
                }
                self.fill();
            }
            Message::Request { index, begin, length } => {
                let i = index as usize;
                if i >= n
                    || length == 0
                    || length > BLOCK_SIZE
                    || u64::from(begin) + u64::from(length) > self.shared.meta.piece_size(i)
                {
                    return Err(protocol(format!("bad request {index}:{begin}+{length}")));
                }
                let st = self.shared.state.lock().unwrap();
                let unchoked = st.sessions.get(&self.id).is_some_and(|e| e.unchoked);
                if unchoked && st.store.have().has(i) {
                    self.cancelled.lock().unwrap().remove(&(index, begin, length));
                    let _ = self.out.send(Outgoing::Serve((index, begin, length)));
                }
            }
            Message::Piece { index, begin, data } => {
                let key = (index, begin, data.len() as u32);
                let solicited = match self.in_flight.iter().position(|k| *k == key) {
                    Some(p) => {
                        self.in_flight.swap_remove(p);
                        true
                    }
                    None => false,
                };
                if let Some(b) = &self.shared.down {
                    b.acquire(data.len()).await;
                }
                self.shared.bytes_down.fetch_add(data.len() as u64, Ordering::SeqCst);
                self.last_data = Instant::now();
                if solicited {
                    self.on_block(index as usize, u64::from(begin), &data)?;
                }
                self.fill();
            }
            Message::Cancel { index, begin, length } => {
                self.cancelled.lock().unwrap().insert((index, begin, length));
            }
        }
        Ok(())
    }

    fn on_block(&mut self, index: usize, begin: u64, data: &[u8]) -> Result<(), PeerError> {
        let mut st = self.shared.state.lock().unwrap();
        match st.store.on_block(index, begin, data)? {
            BlockOutcome::Verified => {
                st.pieces_from_peers += 1;
                st.on_verified(index, &self.shared.status);
                self.assigned.retain(|&p| p != index);
            }
            BlockOutcome::Corrupt => {
                warn!(piece = index, "piece failed verification; refetching");
                st.pending.clear(index);
                self.assigned.retain(|&p| p != index);
                self.in_flight.retain(|k| k.0 as usize != index);
                drop(st);
                self.shared.changed.notify_waiters();
            }
            BlockOutcome::Incomplete | BlockOutcome::AlreadyHave => {}
        }
        Ok(())
    }

    fn set_choking_us(&self, choking: bool) {
        if let Some(e) = self.shared.state.lock().unwrap().sessions.get_mut(&self.id) {
            e.choking_us = choking;
        }
    }

    /// Update interest and top the request pipeline up to its depth.
    ///
    /// A seed is only asked for pieces no unchoking non-seed peer holds, so
    /// a seed's upload goes to pieces nobody else can provide.
    fn fill(&mut self) {
        let depth = self.shared.limits.pipeline_depth.max(1);
        let mut requests = Vec::new();
        {
            let mut guard = self.shared.state.lock().unwrap();
            let st = &mut *guard;
            let Some(entry) = st.sessions.get(&self.id) else { return };
            if self.retiring {
                return;
            }
            let have = st.store.have();
            let interested = entry.bits.iter_set().any(|i| !have.has(i));
            if interested != self.am_interested {
                self.am_interested = interested;
                self.send(if interested {
                    Message::Interested
                } else {
                    Message::NotInterested
                });
            }
            if self.peer_choking || !interested {
                return;
            }
            // Hand pieces a leecher has since completed over to that leecher.
            let leechers = other_leechers(st, self.id);
            let mut dropped = Vec::new();
            self.assigned.retain(|&p| {
                let elsewhere = leechers.iter().any(|b| b.has(p));
                if elsewhere {
                    dropped.push(p);
                }
                !elsewhere
            });
            for &p in &dropped {
                st.pending.clear(p);
                for &(index, begin, length) in self.in_flight.iter().filter(|k| k.0 as usize == p) {
                    let _ = self.out.send(Outgoing::Msg(Message::Cancel { index, begin, length }));
                }
                self.in_flight.retain(|k| k.0 as usize != p);
            }
            if !dropped.is_empty() {
                self.shared.changed.notify_waiters();
            }
            let was_idle = self.in_flight.is_empty();
            while self.in_flight.len() < depth {
                let next = self.assigned.iter().find_map(|&p| {
                    st.store
                        .missing_blocks(p)
                        .into_iter()
                        .map(|(b, l)| (p as u32, b, l))
                        .find(|k| !self.in_flight.contains(k))
                });
                if let Some(k) = next {
                    self.in_flight.push(k);
                    requests.push(k);
                    continue;
                }
                let bits = &st.sessions[&self.id].bits;
                let leechers = other_leechers(st, self.id);
                let (have, pending) = (st.store.have(), &st.pending);
                let pick = rarest_first(&st.availability, self.shared.next_pick_seed(), |i| {
                    bits.has(i) && !have.has(i) && !pending.has(i) && !leechers.iter().any(|b| b.has(i))
                });
                match pick {
                    Some(p) => {
                        st.pending.set(p);
                        self.assigned.push(p);
                    }
                    None => break,
                }
            }
            if was_idle && !self.in_flight.is_empty() {
                self.last_data = Instant::now();
            }
        }
        for (index, begin, length) in requests {
            self.send(Message::Request { index, begin, length });
        }
    }

    fn on_tick(&mut self) -> Result<(), PeerError> {
        if !self.in_flight.is_empty() && self.last_data.elapsed() > self.shared.limits.peer_timeout {
            let mut st = self.shared.state.lock().unwrap();
            for &p in &self.assigned {
                st.stalled.set(p);
            }
            return Err(PeerError::PeerStalled);
        }
        self.fill();
        Ok(())
    }

    fn retire(&mut self) {
        self.retiring = true;
        // Other sessions must not count on this peer any more.
        self.set_choking_us(true);
        let mut st = self.shared.state.lock().unwrap();
        for p in self.assigned.drain(..) {
            st.pending.clear(p);
        }
        drop(st);
        self.shared.changed.notify_waiters();
    }

    fn release_all(&mut self) {
        let mut st = self.shared.state.lock().unwrap();
        for p in self.assigned.drain(..) {
            st.pending.clear(p);
        }
        self.in_flight.clear();
        drop(st);
        self.shared.changed.notify_waiters();
    }

    fn cleanup(&mut self) {
        self.release_all();
        let mut st = self.shared.state.lock().unwrap();
        if let Some(entry) = st.sessions.remove(&self.id) {
            st.remove_bits(&entry.bits);
            if entry.unchoked {
                st.unchoked -= 1;
                st.promote_choked();
            }
        }
        st.choked_queue.retain(|&i| i != self.id);
    }
}

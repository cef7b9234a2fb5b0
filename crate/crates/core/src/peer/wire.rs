//! Peer wire protocol: the 68-byte handshake and length-prefixed messages.
//!
//! ```text
//! handshake: <19><"BitTorrent protocol"><8 reserved zero bytes><info_hash><peer_id>
//! message:   <u32 big-endian length><u8 id><payload>     (keep-alive: length 0)
//! ```

use std::io;

use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::metainfo::Digest20;
use crate::tracker::PeerId;

pub const PROTOCOL: &[u8; 19] = b"BitTorrent protocol";
pub const HANDSHAKE_LEN: usize = 68;
/// Request granularity.
pub const BLOCK_SIZE: u32 = 16 * 1024;
/// Largest accepted length prefix: a full block plus the piece header.
pub const MAX_FRAME_LEN: usize = BLOCK_SIZE as usize + 13;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("handshake does not start with the BitTorrent protocol string")]
    BadMagic,
    #[error("peer is in swarm {0}, not ours")]
    WrongInfoHash(Digest20),
    #[error("unknown message id {0}")]
    UnknownId(u8),
    #[error("payload length {len} does not fit message id {id}")]
    LengthMismatch { id: u8, len: usize },
    #[error("frame of {0} bytes exceeds the maximum")]
    OversizeFrame(usize),
    #[error("input ends inside a frame")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handshake {
    pub info_hash: Digest20,
    pub peer_id: PeerId,
}

pub fn encode_handshake(info_hash: &Digest20, peer_id: &PeerId) -> [u8; HANDSHAKE_LEN] {
    let mut out = [0u8; HANDSHAKE_LEN];
    out[0] = 19;
    out[1..20].copy_from_slice(PROTOCOL);
    // 20..28 reserved, left zero
    out[28..48].copy_from_slice(info_hash.as_bytes());
    out[48..68].copy_from_slice(peer_id);
    out
}

pub fn decode_handshake(bytes: &[u8]) -> Result<Handshake, WireError> {
    if bytes.first().is_some_and(|&b| b != 19) {
        return Err(WireError::BadMagic);
    }
    if bytes.len() < HANDSHAKE_LEN {
        return Err(WireError::Truncated);
    }
    if &bytes[1..20] != PROTOCOL {
        return Err(WireError::BadMagic);
    }
    Ok(Handshake {
        info_hash: Digest20::from_slice(&bytes[28..48]).expect("20 bytes"),
        peer_id: bytes[48..68].try_into().expect("20 bytes"),
    })
}

impl Handshake {
    /// Session-level check that the remote side joined our swarm.
    pub fn expect_swarm(self, ours: &Digest20) -> Result<Handshake, WireError> {
        if self.info_hash == *ours {
            Ok(self)
        } else {
            Err(WireError::WrongInfoHash(self.info_hash))
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub enum Message {
    KeepAlive,
    Choke,
    Unchoke,
    Interested,
    NotInterested,
    Have(u32),
    Bitfield(Vec<u8>),
    Request { index: u32, begin: u32, length: u32 },
    Piece { index: u32, begin: u32, data: Vec<u8> },
    Cancel { index: u32, begin: u32, length: u32 },
}

impl std::fmt::Debug for Message {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Message::KeepAlive => write!(f, "KeepAlive"),
            Message::Choke => write!(f, "Choke"),
            Message::Unchoke => write!(f, "Unchoke"),
            Message::Interested => write!(f, "Interested"),
            Message::NotInterested => write!(f, "NotInterested"),
            Message::Have(i) => write!(f, "Have({i})"),
            Message::Bitfield(b) => write!(f, "Bitfield({} bytes)", b.len()),
            Message::Request { index, begin, length } => {
                write!(f, "Request({index}, {begin}, {length})")
            }
            Message::Piece { index, begin, data } => {
                write!(f, "Piece({index}, {begin}, {} bytes)", data.len())
            }
            Message::Cancel { index, begin, length } => {
                write!(f, "Cancel({index}, {begin}, {length})")
            }
        }
    }
}

impl Message {
    pub fn id(&self) -> Option<u8> {
        Some(match self {
            Message::KeepAlive => return None,
            Message::Choke => 0,
            Message::Unchoke => 1,
            Message::Interested => 2,
            Message::NotInterested => 3,
            Message::Have(_) => 4,
            Message::Bitfield(_) => 5,
            Message::Request { .. } => 6,
            Message::Piece { .. } => 7,
            Message::Cancel { .. } => 8,
        })
    }
}

/// Length prefix, id and payload.
pub fn frame_message(m: &Message) -> Vec<u8> {
    let mut body = Vec::new();
    if let Some(id) = m.id() {
        body.push(id);
    }
    match m {
        Message::Have(i) => body.extend_from_slice(&i.to_be_bytes()),
        Message::Bitfield(bits) => body.extend_from_slice(bits),
        Message::Request { index, begin, length } | Message::Cancel { index, begin, length } => {
            for v in [index, begin, length] {
                body.extend_from_slice(&v.to_be_bytes());
            }
        }
        Message::Piece { index, begin, data } => {
            body.extend_from_slice(&index.to_be_bytes());
            body.extend_from_slice(&begin.to_be_bytes());
            body.extend_from_slice(data);
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Parse exactly one complete frame, length prefix included.
pub fn parse_message(frame: &[u8]) -> Result<Message, WireError> {
    if frame.len() < 4 {
        return Err(WireError::Truncated);
    }
    let len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::OversizeFrame(len));
    }
    let body = &frame[4..];
    if body.len() < len {
        return Err(WireError::Truncated);
    }
    if body.len() > len {
        return Err(WireError::LengthMismatch {
            id: body.first().copied().unwrap_or(0),
            len: body.len(),
        });
    }
    parse_body(body)
}

/// Parse the bytes after the length prefix.
pub fn parse_body(body: &[u8]) -> Result<Message, WireError> {
    let Some((&id, payload)) = body.split_first() else {
        return Ok(Message::KeepAlive);
    };
    let u32_at = |i: usize| u32::from_be_bytes(payload[i..i + 4].try_into().unwrap());
    let expect = |n: usize| {
        if payload.len() == n {
            Ok(())
        } else {
            Err(WireError::LengthMismatch {
                id,
                len: payload.len(),
            })
        }
    };
    Ok(match id {
        0 => expect(0).map(|_| Message::Choke)?,
        1 => expect(0).map(|_| Message::Unchoke)?,
        2 => expect(0).map(|_| Message::Interested)?,
        3 => expect(0).map(|_| Message::NotInterested)?,
        4 => {
            expect(4)?;
            Message::Have(u32_at(0))
        }
        5 => Message::Bitfield(payload.to_vec()),
        6 | 8 => {
            expect(12)?;
            let (index, begin, length) = (u32_at(0), u32_at(4), u32_at(8));
            if id == 6 {
                Message::Request { index, begin, length }
            } else {
                Message::Cancel { index, begin, length }
            }
        }
        7 => {
            if payload.len() < 8 {
                return Err(WireError::LengthMismatch {
                    id,
                    len: payload.len(),
                });
            }
            Message::Piece {
                index: u32_at(0),
                begin: u32_at(4),
                data: payload[8..].to_vec(),
            }
        }
        other => return Err(WireError::UnknownId(other)),
    })
}

pub async fn read_handshake<R: AsyncRead + Unpin>(r: &mut R) -> Result<Handshake, WireError> {
    let mut buf = [0u8; HANDSHAKE_LEN];
    r.read_exact(&mut buf[..1]).await?;
    if buf[0] != 19 {
        return Err(WireError::BadMagic);
    }
    r.read_exact(&mut buf[1..]).await?;
    decode_handshake(&buf)
}

pub async fn read_message<R: AsyncRead + Unpin>(r: &mut R) -> Result<Message, WireError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).await?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::OversizeFrame(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    parse_body(&body)
}

pub async fn write_message<W: AsyncWrite + Unpin>(w: &mut W, m: &Message) -> Result<(), WireError> {
    w.write_all(&frame_message(m)).await?;
    Ok(())
}

//! Append-only ledger journal, one announce delta per line:
//! `timestamp info_hash_hex peer_id_hex up_delta down_delta`.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use super::{PeerId, TransferLedger};
use crate::metainfo::Digest20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JournalRecord {
    pub timestamp: u64,
    pub info_hash: Digest20,
    pub peer_id: PeerId,
    pub up_delta: u64,
    pub down_delta: u64,
}

impl fmt::Display for JournalRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.timestamp,
            self.info_hash.to_hex(),
            hex::encode(self.peer_id),
            self.up_delta,
            self.down_delta
        )
    }
}

impl FromStr for JournalRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        let [ts, hash, peer, up, down] = fields.as_slice() else {
            return Err(format!("expected 5 fields, found {}", fields.len()));
        };
        let mut peer_id = [0u8; 20];
        hex::decode_to_slice(peer, &mut peer_id).map_err(|e| format!("peer id: {e}"))?;
        Ok(JournalRecord {
            timestamp: ts.parse().map_err(|e| format!("timestamp: {e}"))?,
            info_hash: Digest20::from_hex(hash).ok_or("info hash is not 40 hex digits")?,
            peer_id,
            up_delta: up.parse().map_err(|e| format!("up delta: {e}"))?,
            down_delta: down.parse().map_err(|e| format!("down delta: {e}"))?,
        })
    }
}

#[derive(Debug)]
pub struct Journal {
    file: File,
}

impl Journal {
    pub fn open(path: &Path) -> io::Result<Journal> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Journal { file })
    }

    /// Write one record. The line reaches the OS before this returns.
    pub fn append(&mut self, record: &JournalRecord) -> io::Result<()> {
        let line = format!("{record}\n");
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

/// Sum every record into per-swarm ledgers.
pub fn replay_journal(
    path: &Path,
    origin_prefix: &[u8],
) -> io::Result<HashMap<Digest20, TransferLedger>> {
    let mut ledgers: HashMap<Digest20, TransferLedger> = HashMap::new();
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JournalRecord = line.parse().map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("journal line {}: {e}", n + 1))
        })?;
        ledgers
            .entry(rec.info_hash)
            .or_default()
            .add(rec.peer_id.starts_with(origin_prefix), rec.up_delta, rec.down_delta);
    }
    Ok(ledgers)
}

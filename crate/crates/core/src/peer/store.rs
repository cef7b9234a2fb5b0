//! In-memory piece assembly and verification.

use thiserror::Error;

use super::wire::BLOCK_SIZE;
use super::Bitfield;
use crate::metainfo::{Digest20, Metainfo};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StoreError {
    #[error("block {index}:{begin}+{len} is outside the piece")]
    OutOfBounds { index: usize, begin: u64, len: usize },
    #[error("block {index}:{begin} is not aligned to the {BLOCK_SIZE}-byte grid")]
    Misaligned { index: usize, begin: u64 },
    #[error("content length {got} does not match metainfo length {expected}")]
    WrongLength { expected: u64, got: u64 },
    #[error("content fails verification on pieces {0:?}")]
    ContentMismatch(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PieceState {
    Missing,
    /// Some blocks are present but the piece is not yet complete.
    Pending,
    Verified,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockOutcome {
    Incomplete,
    Verified,
    /// The assembled piece failed its digest and was reset to missing.
    Corrupt,
    /// The piece was already verified; the block was dropped.
    AlreadyHave,
}

pub struct PieceStore {
    piece_length: u64,
    total_length: u64,
    digests: Vec<Digest20>,
    data: Vec<u8>,
    states: Vec<PieceState>,
    blocks: Vec<Bitfield>,
    have: Bitfield,
    corrupt_events: u64,
}

impl PieceStore {
    pub fn new(meta: &Metainfo) -> Self {
        let n = meta.piece_count();
        let blocks = (0..n)
            .map(|i| Bitfield::new(meta.piece_size(i).div_ceil(u64::from(BLOCK_SIZE)) as usize))
            .collect();
        PieceStore {
            piece_length: meta.piece_length,
            total_length: meta.total_length,
            digests: meta.pieces.clone(),
            data: vec![0; meta.total_length as usize],
            states: vec![PieceState::Missing; n],
            blocks,
            have: Bitfield::new(n),
            corrupt_events: 0,
        }
    }

    /// A store holding `content`, which must verify completely.
    pub fn with_content(meta: &Metainfo, content: Vec<u8>) -> Result<Self, StoreError> {
        if content.len() as u64 != meta.total_length {
            return Err(StoreError::WrongLength {
                expected: meta.total_length,
                got: content.len() as u64,
            });
        }
        let mut store = PieceStore::new(meta);
        store.data = content;
        let mut failed = Vec::new();
        for i in 0..store.piece_count() {
            if Digest20::of(store.piece_bytes(i)) == store.digests[i] {
                store.mark_verified(i);
            } else {
                failed.push(i);
            }
        }
        if failed.is_empty() {
            Ok(store)
        } else {
            Err(StoreError::ContentMismatch(failed))
        }
    }

    pub fn piece_count(&self) -> usize {
        self.states.len()
    }

    pub fn piece_size(&self, index: usize) -> u64 {
        let start = index as u64 * self.piece_length;
        self.piece_length.min(self.total_length.saturating_sub(start))
    }

    fn piece_range(&self, index: usize) -> std::ops::Range<usize> {
        let start = (index as u64 * self.piece_length) as usize;
        start..start + self.piece_size(index) as usize
    }

    fn piece_bytes(&self, index: usize) -> &[u8] {
        &self.data[self.piece_range(index)]
    }

    pub fn state(&self, index: usize) -> PieceState {
        self.states[index]
    }

    pub fn have(&self) -> &Bitfield {
        &self.have
    }

    pub fn is_complete(&self) -> bool {
        self.have.is_complete()
    }

    pub fn corrupt_events(&self) -> u64 {
        self.corrupt_events
    }

    pub fn bytes_left(&self) -> u64 {
        (0..self.piece_count())
            .filter(|&i| !self.have.has(i))
            .map(|i| self.piece_size(i))
            .sum()
    }

    /// Blocks of `index` not yet received, as `(begin, length)`.
    pub fn missing_blocks(&self, index: usize) -> Vec<(u32, u32)> {
        let size = self.piece_size(index);
        let blocks = &self.blocks[index];
        (0..blocks.len())
            .filter(|&b| !blocks.has(b))
            .map(|b| {
                let begin = b as u64 * u64::from(BLOCK_SIZE);
                (begin as u32, (size - begin).min(u64::from(BLOCK_SIZE)) as u32)
            })
            .collect()
    }

    pub fn on_block(&mut self, index: usize, begin: u64, data: &[u8]) -> Result<BlockOutcome, StoreError> {
        if index >= self.piece_count() || begin + data.len() as u64 > self.piece_size(index) || data.is_empty() {
            return Err(StoreError::OutOfBounds {
                index,
                begin,
                len: data.len(),
            });
        }
        let block_size = u64::from(BLOCK_SIZE);
        let block = (begin / block_size) as usize;
        let expected_len = (self.piece_size(index) - begin).min(block_size);
        if !begin.is_multiple_of(block_size) || data.len() as u64 != expected_len {
            return Err(StoreError::Misaligned { index, begin });
        }
        if self.states[index] == PieceState::Verified {
            return Ok(BlockOutcome::AlreadyHave);
        }
        let start = self.piece_range(index).start + begin as usize;
        self.data[start..start + data.len()].copy_from_slice(data);
        self.blocks[index].set(block);
        self.states[index] = PieceState::Pending;
        if !self.blocks[index].is_complete() {
            return Ok(BlockOutcome::Incomplete);
        }
        Ok(self.check(index))
    }

    /// Install a whole piece at once (web-seed path).
    pub fn put_piece(&mut self, index: usize, data: &[u8]) -> Result<BlockOutcome, StoreError> {
        if index >= self.piece_count() || data.len() as u64 != self.piece_size(index) {
            return Err(StoreError::OutOfBounds {
                index,
                begin: 0,
                len: data.len(),
            });
        }
        if self.states[index] == PieceState::Verified {
            return Ok(BlockOutcome::AlreadyHave);
        }
        let range = self.piece_range(index);
        self.data[range].copy_from_slice(data);
        Ok(self.check(index))
    }

    fn check(&mut self, index: usize) -> BlockOutcome {
        if Digest20::of(self.piece_bytes(index)) == self.digests[index] {
            self.mark_verified(index);
            BlockOutcome::Verified
        } else {
            self.corrupt_events += 1;
            self.states[index] = PieceState::Missing;
            let n = self.blocks[index].len();
            self.blocks[index] = Bitfield::new(n);
            BlockOutcome::Corrupt
        }
    }

    fn mark_verified(&mut self, index: usize) {
        self.states[index] = PieceState::Verified;
        self.have.set(index);
        let n = self.blocks[index].len();
        self.blocks[index] = Bitfield::full(n);
    }

    /// A block of a verified piece, for serving requests.
    pub fn read_block(&self, index: usize, begin: u64, len: usize) -> Option<&[u8]> {
        if index >= self.piece_count()
            || self.states[index] != PieceState::Verified
            || begin + len as u64 > self.piece_size(index)
        {
            return None;
        }
        let start = self.piece_range(index).start + begin as usize;
        Some(&self.data[start..start + len])
    }

    pub fn content(&self) -> &[u8] {
        &self.data
    }
}

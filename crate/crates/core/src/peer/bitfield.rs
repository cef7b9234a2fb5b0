use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitfieldError {
    #[error("bitfield is {got} bytes, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("spare bits past piece {0} are set")]
    SpareBitsSet(usize),
}

/// Piece-possession bitmap, most significant bit first. Spare bits in the
/// last byte are always zero.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitfield {
    bytes: Vec<u8>,
    len: usize,
}

impl Bitfield {
    pub fn new(len: usize) -> Self {
        Bitfield {
            bytes: vec![0; len.div_ceil(8)],
            len,
        }
    }

    pub fn full(len: usize) -> Self {
        let mut b = Bitfield::new(len);
        for i in 0..len {
            b.set(i);
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self, BitfieldError> {
        let expected = len.div_ceil(8);
        if bytes.len() != expected {
            return Err(BitfieldError::WrongLength {
                expected,
                got: bytes.len(),
            });
        }
        let b = Bitfield {
            bytes: bytes.to_vec(),
            len,
        };
        if (len..expected * 8).any(|i| b.bit(i)) {
            return Err(BitfieldError::SpareBitsSet(len));
        }
        Ok(b)
    }

    fn bit(&self, i: usize) -> bool {
        self.bytes[i / 8] & (0x80 >> (i % 8)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn has(&self, i: usize) -> bool {
        i < self.len && self.bit(i)
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "piece {i} out of range");
        self.bytes[i / 8] |= 0x80 >> (i % 8);
    }

    pub fn clear(&mut self, i: usize) {
        assert!(i < self.len, "piece {i} out of range");
        self.bytes[i / 8] &= !(0x80 >> (i % 8));
    }

    pub fn count(&self) -> usize {
        self.bytes.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.count() == self.len
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len).filter(|&i| self.bit(i))
    }
}

impl fmt::Debug for Bitfield {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.len).map(|i| if self.bit(i) { '1' } else { '0' }).collect();
        write!(f, "Bitfield({s})")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msb_first_and_spare_bits() {
        let mut b = Bitfield::new(10);
        b.set(0);
        b.set(9);
        assert_eq!(b.as_bytes(), [0x80, 0x40]);
        assert_eq!(b.count(), 2);
        assert_eq!(Bitfield::from_bytes(&[0x80, 0x40], 10).unwrap(), b);
        assert_eq!(
            Bitfield::from_bytes(&[0x80, 0x60], 10),
            Err(BitfieldError::SpareBitsSet(10))
        );
        assert!(matches!(
            Bitfield::from_bytes(&[0x80], 10),
            Err(BitfieldError::WrongLength { .. })
        ));
        assert_eq!(Bitfield::full(10).as_bytes(), [0xff, 0xc0]);
        assert!(!b.has(10));
    }
}

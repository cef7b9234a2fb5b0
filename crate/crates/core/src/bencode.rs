//! Bencode encoding and decoding.
//!
//! The grammar is the classic one used by `.torrent` files and tracker
//! responses:
//!
//! * integers `i<base-10>e`, no leading zeros, no negative zero
//! * byte strings `<len>:<bytes>`
//! * lists `l...e`
//! * dictionaries `d...e` with byte-string keys in ascending raw-byte order
//!
//! Decoding is strict by default: unsorted or duplicate dictionary keys are
//! rejected, so that every accepted input re-encodes to the identical bytes.
//! [`DecodeOptions::lenient`] relaxes the ordering rule for interop.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Maximum nesting depth of lists and dictionaries.
pub const MAX_DEPTH: usize = 64;

/// A decoded bencode value.
#[derive(Clone, PartialEq, Eq, Hash)]
pub enum Value {
    Int(i64),
    Bytes(Vec<u8>),
    List(Vec<Value>),
    /// `BTreeMap<Vec<u8>, _>` iterates in raw-byte lexicographic order, which
    /// is exactly the order bencode requires.
    Dict(BTreeMap<Vec<u8>, Value>),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed bencode at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: &'static str },
    #[error("trailing bytes after value at offset {offset}")]
    TrailingBytes { offset: usize },
    #[error("nesting deeper than {MAX_DEPTH} at offset {offset}")]
    DepthExceeded { offset: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    /// Reject dictionaries whose keys are not strictly ascending.
    pub strict: bool,
}

impl DecodeOptions {
    pub const STRICT: DecodeOptions = DecodeOptions { strict: true };

    pub fn lenient() -> Self {
        DecodeOptions { strict: false }
    }
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self::STRICT
    }
}

impl Value {
    pub fn bytes(b: impl Into<Vec<u8>>) -> Value {
        Value::Bytes(b.into())
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        self.as_bytes().and_then(|b| std::str::from_utf8(b).ok())
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_dict(&self) -> Option<&BTreeMap<Vec<u8>, Value>> {
        match self {
            Value::Dict(d) => Some(d),
            _ => None,
        }
    }

    /// Dictionary lookup; `None` for missing keys and non-dictionaries.
    pub fn get(&self, key: &[u8]) -> Option<&Value> {
        self.as_dict().and_then(|d| d.get(key))
    }

    pub fn encode(&self) -> Vec<u8> {
        encode(self)
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(i) => write!(f, "{i}"),
            Value::Bytes(b) => match std::str::from_utf8(b) {
                Ok(s) => write!(f, "{s:?}"),
                Err(_) => write!(f, "<{}>", hex::encode(b)),
            },
            Value::List(l) => f.debug_list().entries(l).finish(),
            Value::Dict(d) => f
                .debug_map()
                .entries(d.iter().map(|(k, v)| (String::from_utf8_lossy(k), v)))
                .finish(),
        }
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Int(i)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Bytes(s.as_bytes().to_vec())
    }
}

impl From<Vec<u8>> for Value {
    fn from(b: Vec<u8>) -> Self {
        Value::Bytes(b)
    }
}

/// Builder for dictionaries with string keys.
#[derive(Default)]
pub struct DictBuilder(BTreeMap<Vec<u8>, Value>);

impl DictBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.0.insert(key.as_bytes().to_vec(), value.into());
        self
    }

    pub fn build(self) -> Value {
        Value::Dict(self.0)
    }
}

/// Canonical serialization.
pub fn encode(value: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(value, &mut out);
    out
}

pub fn encode_into(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Int(i) => {
            out.push(b'i');
            out.extend_from_slice(i.to_string().as_bytes());
            out.push(b'e');
        }
        Value::Bytes(b) => encode_bytes(b, out),
        Value::List(items) => {
            out.push(b'l');
            for item in items {
                encode_into(item, out);
            }
            out.push(b'e');
        }
        Value::Dict(entries) => {
            out.push(b'd');
            for (k, v) in entries {
                encode_bytes(k, out);
                encode_into(v, out);
            }
            out.push(b'e');
        }
    }
}

fn encode_bytes(b: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(b.len().to_string().as_bytes());
    out.push(b':');
    out.extend_from_slice(b);
}

/// Strict decode of a complete input.
pub fn decode(input: &[u8]) -> Result<Value, DecodeError> {
    decode_with(input, DecodeOptions::STRICT)
}

pub fn decode_with(input: &[u8], opts: DecodeOptions) -> Result<Value, DecodeError> {
    let mut dec = Decoder {
        input,
        pos: 0,
        opts,
    };
    let value = dec.value(0)?;
    if dec.pos != input.len() {
        return Err(DecodeError::TrailingBytes { offset: dec.pos });
    }
    Ok(value)
}

struct Decoder<'a> {
    input: &'a [u8],
    pos: usize,
    opts: DecodeOptions,
}

impl<'a> Decoder<'a> {
    fn malformed<T>(&self, reason: &'static str) -> Result<T, DecodeError> {
        Err(DecodeError::Malformed {
            offset: self.pos,
            reason,
        })
    }

    fn peek(&self) -> Option<u8> {
        self.input.get(self.pos).copied()
    }

    fn value(&mut self, depth: usize) -> Result<Value, DecodeError> {
        match self.peek() {
            None => self.malformed("unexpected end of input"),
            Some(b'i') => self.int().map(Value::Int),
            Some(b'0'..=b'9') => self.byte_string().map(|b| Value::Bytes(b.to_vec())),
            Some(b'l') => {
                self.enter(depth)?;
                let mut items = Vec::new();
                loop {
                    match self.peek() {
                        Some(b'e') => {
                            self.pos += 1;
                            return Ok(Value::List(items));
                        }
                        None => return self.malformed("unterminated list"),
                        Some(_) => items.push(self.value(depth + 1)?),
                    }
                }
            }
            Some(b'd') => {
                self.enter(depth)?;
                let mut entries: BTreeMap<Vec<u8>, Value> = BTreeMap::new();
                let mut last_key: Option<&'a [u8]> = None;
                loop {
                    match self.peek() {
                        Some(b'e') => {
                            self.pos += 1;
                            return Ok(Value::Dict(entries));
                        }
                        None => return self.malformed("unterminated dictionary"),
                        Some(b'0'..=b'9') => {}
                        Some(_) => return self.malformed("dictionary key is not a byte string"),
                    }
                    let key_offset = self.pos;
                    let key = self.byte_string()?;
                    if let Some(prev) = last_key {
                        if key == prev {
                            return Err(DecodeError::Malformed {
                                offset: key_offset,
                                reason: "duplicate dictionary key",
                            });
                        }
                        if self.opts.strict && key < prev {
                            return Err(DecodeError::Malformed {
                                offset: key_offset,
                                reason: "dictionary keys not sorted",
                            });
                        }
                    }
                    if !self.opts.strict && entries.contains_key(key) {
                        return Err(DecodeError::Malformed {
                            offset: key_offset,
                            reason: "duplicate dictionary key",
                        });
                    }
                    let value = self.value(depth + 1)?;
                    entries.insert(key.to_vec(), value);
                    last_key = Some(key);
                }
            }
            Some(_) => self.malformed("unexpected token"),
        }
    }

    fn enter(&mut self, depth: usize) -> Result<(), DecodeError> {
        if depth >= MAX_DEPTH {
            return Err(DecodeError::DepthExceeded { offset: self.pos });
        }
        self.pos += 1;
        Ok(())
    }

    fn int(&mut self) -> Result<i64, DecodeError> {
        self.pos += 1;
        let start = self.pos;
        let Some(len) = self.input[start..].iter().position(|&b| b == b'e') else {
            return self.malformed("unterminated integer");
        };
        let digits = &self.input[start..start + len];
        let (negative, magnitude) = match digits.split_first() {
            Some((b'-', rest)) => (true, rest),
            _ => (false, digits),
        };
        if magnitude.is_empty() || !magnitude.iter().all(u8::is_ascii_digit) {
            return self.malformed("invalid integer digits");
        }
        if magnitude.len() > 1 && magnitude[0] == b'0' {
            return self.malformed("leading zero in integer");
        }
        if negative && magnitude == b"0" {
            return self.malformed("negative zero");
        }
        // Digits are ASCII, so this is valid UTF-8.
        let text = std::str::from_utf8(digits).expect("ascii digits");
        let Ok(n) = text.parse::<i64>() else {
            return self.malformed("integer out of 64-bit range");
        };
        self.pos = start + len + 1;
        Ok(n)
    }

    fn byte_string(&mut self) -> Result<&'a [u8], DecodeError> {
        let start = self.pos;
        let Some(len) = self.input[start..].iter().position(|&b| b == b':') else {
            return self.malformed("missing ':' after string length");
        };
        let digits = &self.input[start..start + len];
        if digits.is_empty() || !digits.iter().all(u8::is_ascii_digit) {
            return self.malformed("invalid string length");
        }
        if digits.len() > 1 && digits[0] == b'0' {
            return self.malformed("leading zero in string length");
        }
        let text = std::str::from_utf8(digits).expect("ascii digits");
        let body_start = start + len + 1;
        let remaining = self.input.len() - body_start;
        let input = self.input;
        let declared = match text.parse::<usize>() {
            Ok(n) if n <= remaining => n,
            _ => {
                self.pos = body_start;
                return self.malformed("string length exceeds input");
            }
        };
        self.pos = body_start + declared;
        Ok(&input[body_start..body_start + declared])
    }
}

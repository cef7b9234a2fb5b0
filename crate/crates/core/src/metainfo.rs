//! Single-file torrent metainfo: building, parsing, info-hash and content
//! verification.

use std::fmt;
use std::io::{self, Read};
use std::path::Path;

use sha1::{Digest, Sha1};
use thiserror::Error;

use crate::bencode::{self, DecodeError, DictBuilder, Value};

pub const MIN_PIECE_LENGTH: u64 = 16 * 1024;
pub const MAX_PIECE_LENGTH: u64 = 16 * 1024 * 1024;
pub const DEFAULT_PIECE_LENGTH: u64 = 256 * 1024;

/// A 20-byte SHA-1 digest. Identifies pieces and swarms.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Digest20(pub [u8; 20]);

impl Digest20 {
    pub fn of(data: &[u8]) -> Digest20 {
        Digest20(Sha1::digest(data).into())
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Digest20> {
        bytes.try_into().ok().map(Digest20)
    }

    pub fn from_hex(s: &str) -> Option<Digest20> {
        let mut out = [0u8; 20];
        hex::decode_to_slice(s, &mut out).ok()?;
        Some(Digest20(out))
    }

    pub fn as_bytes(&self) -> &[u8; 20] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Digest20 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest20 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest20({})", self.to_hex())
    }
}

#[derive(Debug, Error)]
pub enum MetainfoError {
    #[error("failed to read content: {0}")]
    ContentReadFailure(#[from] io::Error),
    #[error("piece length {0} must be a power of two between 16 KiB and 16 MiB")]
    InvalidPieceLength(u64),
    #[error(transparent)]
    Malformed(#[from] DecodeError),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unsupported metainfo shape: {0}")]
    UnsupportedShape(&'static str),
}

fn schema<T>(msg: impl Into<String>) -> Result<T, MetainfoError> {
    Err(MetainfoError::SchemaViolation(msg.into()))
}

pub fn validate_piece_length(piece_length: u64) -> Result<(), MetainfoError> {
    if piece_length.is_power_of_two()
        && (MIN_PIECE_LENGTH..=MAX_PIECE_LENGTH).contains(&piece_length)
    {
        Ok(())
    } else {
        Err(MetainfoError::InvalidPieceLength(piece_length))
    }
}

/// Number of pieces for a given content length.
pub fn piece_count_for(total_length: u64, piece_length: u64) -> usize {
    total_length.div_ceil(piece_length) as usize
}

#[derive(Clone, PartialEq, Eq)]
pub struct Metainfo {
    pub announce: String,
    pub name: String,
    pub piece_length: u64,
    pub pieces: Vec<Digest20>,
    pub total_length: u64,
    pub webseeds: Vec<String>,
}

impl fmt::Debug for Metainfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Metainfo")
            .field("announce", &self.announce)
            .field("name", &self.name)
            .field("piece_length", &self.piece_length)
            .field("pieces", &self.pieces.len())
            .field("total_length", &self.total_length)
            .field("webseeds", &self.webseeds)
            .finish()
    }
}

impl Metainfo {
    pub fn piece_count(&self) -> usize {
        self.pieces.len()
    }

    /// Byte offset of the first byte of piece `index`.
    pub fn piece_offset(&self, index: usize) -> u64 {
        index as u64 * self.piece_length
    }

    /// Length of piece `index`; only the last piece may be short.
    pub fn piece_size(&self, index: usize) -> u64 {
        let start = self.piece_offset(index);
        self.piece_length.min(self.total_length.saturating_sub(start))
    }

    pub fn info_dict(&self) -> Value {
        let mut pieces = Vec::with_capacity(self.pieces.len() * 20);
        for p in &self.pieces {
            pieces.extend_from_slice(&p.0);
        }
        DictBuilder::new()
            .insert("length", self.total_length as i64)
            .insert("name", self.name.as_str())
            .insert("piece length", self.piece_length as i64)
            .insert("pieces", pieces)
            .build()
    }

    /// SHA-1 of the canonical bencoding of the info dictionary.
    pub fn info_hash(&self) -> Digest20 {
        Digest20::of(&self.info_dict().encode())
    }

    pub fn to_value(&self) -> Value {
        let mut root = DictBuilder::new()
            .insert("announce", self.announce.as_str())
            .insert("info", self.info_dict());
        if !self.webseeds.is_empty() {
            root = root.insert(
                "url-list",
                Value::List(self.webseeds.iter().map(|u| Value::from(u.as_str())).collect()),
            );
        }
        root.build()
    }

    /// Bytes of the `.torrent` file.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_value().encode()
    }

    pub fn from_bytes(b: &[u8]) -> Result<Metainfo, MetainfoError> {
        parse_metainfo(b)
    }
}

/// Hash consecutive `piece_length` slices of `content`.
pub fn build_metainfo(
    mut content: impl Read,
    name: &str,
    piece_length: u64,
    announce: &str,
    webseeds: &[String],
) -> Result<Metainfo, MetainfoError> {
    validate_piece_length(piece_length)?;
    let mut pieces = Vec::new();
    let mut total_length = 0u64;
    let mut buf = vec![0u8; piece_length as usize];
    loop {
        let n = read_full(&mut content, &mut buf)?;
        if n == 0 {
            break;
        }
        total_length += n as u64;
        pieces.push(Digest20::of(&buf[..n]));
        if n < buf.len() {
            break;
        }
    }
    Ok(Metainfo {
        announce: announce.to_owned(),
        name: name.to_owned(),
        piece_length,
        pieces,
        total_length,
        webseeds: webseeds.to_vec(),
    })
}

/// Build from a file on disk, naming the torrent after the file.
pub fn build_from_path(
    path: &Path,
    piece_length: u64,
    announce: &str,
    webseeds: &[String],
) -> Result<Metainfo, MetainfoError> {
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| {
            MetainfoError::ContentReadFailure(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} has no usable file name", path.display()),
            ))
        })?
        .to_owned();
    let file = std::fs::File::open(path)?;
    build_metainfo(io::BufReader::new(file), &name, piece_length, announce, webseeds)
}

/// Fill `buf` as far as the reader allows. Returns bytes read.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

pub fn parse_metainfo(b: &[u8]) -> Result<Metainfo, MetainfoError> {
    let root = bencode::decode(b)?;
    if root.as_dict().is_none() {
        return schema("top level is not a dictionary");
    }
    let announce = match root.get(b"announce") {
        Some(v) => match v.as_str() {
            Some(s) => s.to_owned(),
            None => return schema("`announce` is not a UTF-8 string"),
        },
        None => return schema("missing `announce`"),
    };
    let Some(info) = root.get(b"info") else {
        return schema("missing `info`");
    };
    if info.as_dict().is_none() {
        return schema("`info` is not a dictionary");
    }
    if info.get(b"files").is_some() {
        return Err(MetainfoError::UnsupportedShape("multi-file torrents are not supported"));
    }
    let name = match info.get(b"name") {
        Some(v) => match v.as_str() {
            Some(s) => s.to_owned(),
            None => return schema("`name` is not a UTF-8 string"),
        },
        None => return schema("missing `name`"),
    };
    let piece_length = non_negative(info, b"piece length")?;
    validate_piece_length(piece_length)?;
    let total_length = non_negative(info, b"length")?;
    let raw = match info.get(b"pieces") {
        Some(v) => match v.as_bytes() {
            Some(b) => b,
            None => return schema("`pieces` is not a byte string"),
        },
        None => return schema("missing `pieces`"),
    };
    if raw.len() % 20 != 0 {
        return schema("`pieces` length is not a multiple of 20");
    }
    let pieces: Vec<Digest20> = raw
        .chunks_exact(20)
        .map(|c| Digest20::from_slice(c).expect("20-byte chunk"))
        .collect();
    if pieces.len() != piece_count_for(total_length, piece_length) {
        return schema(format!(
            "{} piece digests for length {} and piece length {}",
            pieces.len(),
            total_length,
            piece_length
        ));
    }
    let webseeds = match root.get(b"url-list") {
        None => Vec::new(),
        Some(v @ Value::Bytes(_)) => vec![url_string(v)?],
        Some(Value::List(items)) => items.iter().map(url_string).collect::<Result<_, _>>()?,
        Some(_) => return schema("`url-list` must be a string or a list of strings"),
    };
    Ok(Metainfo {
        announce,
        name,
        piece_length,
        pieces,
        total_length,
        webseeds,
    })
}

fn non_negative(dict: &Value, key: &[u8]) -> Result<u64, MetainfoError> {
    let label = String::from_utf8_lossy(key);
    match dict.get(key) {
        Some(Value::Int(i)) if *i >= 0 => Ok(*i as u64),
        Some(Value::Int(_)) => schema(format!("`{label}` is negative")),
        Some(_) => schema(format!("`{label}` is not an integer")),
        None => schema(format!("missing `{label}`")),
    }
}

fn url_string(v: &Value) -> Result<String, MetainfoError> {
    match v.as_str() {
        Some(s) => Ok(s.to_owned()),
        None => schema("`url-list` entry is not a UTF-8 string"),
    }
}

/// Outcome of checking content against the piece digests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PieceReport {
    pub passed: Vec<bool>,
    pub verified_bytes: u64,
    /// Bytes found past `total_length`.
    pub excess_bytes: u64,
}

impl PieceReport {
    pub fn all_passed(&self) -> bool {
        self.passed.iter().all(|&p| p) && self.excess_bytes == 0
    }

    pub fn failed_pieces(&self) -> Vec<usize> {
        self.passed
            .iter()
            .enumerate()
            .filter(|(_, &ok)| !ok)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn verify_content(m: &Metainfo, mut content: impl Read) -> Result<PieceReport, MetainfoError> {
    let mut passed = Vec::with_capacity(m.piece_count());
    let mut verified_bytes = 0;
    let mut buf = vec![0u8; m.piece_length as usize];
    for (i, digest) in m.pieces.iter().enumerate() {
        let want = m.piece_size(i) as usize;
        let got = read_full(&mut content, &mut buf[..want])?;
        let ok = got == want && Digest20::of(&buf[..want]) == *digest;
        if ok {
            verified_bytes += want as u64;
        }
        passed.push(ok);
    }
    let mut excess_bytes = 0u64;
    loop {
        let n = read_full(&mut content, &mut buf)?;
        excess_bytes += n as u64;
        if n < buf.len() {
            break;
        }
    }
    // Overlong content means the final piece does not match what was shared.
    if excess_bytes > 0 {
        if let Some(last) = passed.last_mut() {
            if *last {
                *last = false;
                verified_bytes -= m.piece_size(m.piece_count() - 1);
            }
        }
    }
    Ok(PieceReport {
        passed,
        verified_bytes,
        excess_bytes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const KIB16: u64 = 16 * 1024;

    fn build(content: &[u8], piece_length: u64) -> Metainfo {
        build_metainfo(content, "a", piece_length, "http://t/announce", &[]).unwrap()
    }

    #[test]
    fn empty_content_has_no_pieces() {
        let m = build(b"", KIB16);
        assert_eq!(m.total_length, 0);
        assert!(m.pieces.is_empty());
        assert!(verify_content(&m, &b""[..]).unwrap().all_passed());
    }

    #[test]
    fn zero_piece_digest() {
        // hashlib.sha1(bytes(16384))
        let m = build(&[0u8; 16384], KIB16);
        assert_eq!(m.pieces.len(), 1);
        assert_eq!(m.pieces[0].to_hex(), "897256b6709e1a4da9daba92b6bde39ccfccd8c1");
    }

    #[test]
    fn short_trailing_piece() {
        let m = build(&[0u8; 16385], KIB16);
        assert_eq!(m.pieces.len(), 2);
        // hashlib.sha1(bytes(1))
        assert_eq!(m.pieces[1].to_hex(), "5ba93c9db0cff93f52b521d7420e43f6eda2784f");
        assert_eq!(m.piece_size(0), KIB16);
        assert_eq!(m.piece_size(1), 1);
    }

    #[test]
    fn piece_length_validation() {
        for bad in [0, 1, 8192, 3 * KIB16, 32 * 1024 * 1024] {
            assert!(matches!(
                validate_piece_length(bad),
                Err(MetainfoError::InvalidPieceLength(_))
            ));
        }
        for good in [KIB16, DEFAULT_PIECE_LENGTH, MAX_PIECE_LENGTH] {
            validate_piece_length(good).unwrap();
        }
    }

    #[test]
    fn url_list_accepts_single_string() {
        let raw = b"d8:announce8:http://t4:infod6:lengthi0e4:name1:a12:piece lengthi16384e6:pieces0:e8:url-list11:http://seede";
        let m = parse_metainfo(raw).unwrap();
        assert_eq!(m.webseeds, vec!["http://seed".to_string()]);
        // Always emitted as a list.
        let again = m.to_bytes();
        assert!(again.windows(13).any(|w| w == b"8:url-listl11"));
    }

    #[test]
    fn schema_errors() {
        let missing_pieces = b"d8:announce1:x4:infod6:lengthi0e4:name1:a12:piece lengthi16384eee";
        assert!(matches!(
            parse_metainfo(missing_pieces),
            Err(MetainfoError::SchemaViolation(_))
        ));
        let multi = b"d8:announce1:x4:infod5:filesle4:name1:a12:piece lengthi16384e6:pieces0:ee";
        assert!(matches!(parse_metainfo(multi), Err(MetainfoError::UnsupportedShape(_))));
        let bad_count = b"d8:announce1:x4:infod6:lengthi1e4:name1:a12:piece lengthi16384e6:pieces0:ee";
        assert!(matches!(parse_metainfo(bad_count), Err(MetainfoError::SchemaViolation(_))));
        assert!(matches!(parse_metainfo(b"i1e"), Err(MetainfoError::SchemaViolation(_))));
        assert!(matches!(parse_metainfo(b"d"), Err(MetainfoError::Malformed(_))));
    }

    #[test]
    fn verify_detects_truncation_and_excess() {
        let content: Vec<u8> = (0..(3 * KIB16 as usize)).map(|i| (i % 251) as u8).collect();
        let m = build(&content, KIB16);
        let truncated = verify_content(&m, &content[..KIB16 as usize + 10]).unwrap();
        assert_eq!(truncated.passed, vec![true, false, false]);
        assert_eq!(truncated.verified_bytes, KIB16);

        let mut long = content.clone();
        long.push(7);
        let report = verify_content(&m, &long[..]).unwrap();
        assert_eq!(report.passed, vec![true, true, false]);
        assert_eq!(report.excess_bytes, 1);
        assert!(!report.all_passed());
    }
}

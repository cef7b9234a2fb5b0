//! Fetching pieces from a plain HTTP server with range requests.

use percent_encoding::{AsciiSet, NON_ALPHANUMERIC};
use reqwest::header::RANGE;
use reqwest::StatusCode;
use thiserror::Error;

use crate::metainfo::{Digest20, Metainfo};

#[derive(Debug, Error)]
pub enum WebseedError {
    #[error("HTTP request failed: {0}")]
    HttpFailure(String),
    #[error("piece {0} does not match its digest")]
    CorruptPiece(usize),
    #[error("piece index {index} out of range ({count} pieces)")]
    IndexOutOfRange { index: usize, count: usize },
}

/// Byte range `[start, end]` (inclusive) covering piece `index`.
pub fn piece_range(meta: &Metainfo, index: usize) -> (u64, u64) {
    let start = meta.piece_offset(index);
    let end = (start + meta.piece_length).min(meta.total_length);
    (start, end - 1)
}

const PATH_SEGMENT: &AsciiSet = &NON_ALPHANUMERIC.remove(b'.').remove(b'-').remove(b'_').remove(b'~');

/// A base URL ending in `/` names a directory holding the file.
pub fn webseed_url(base: &str, name: &str) -> String {
    if base.ends_with('/') {
        format!("{base}{}", percent_encoding::utf8_percent_encode(name, PATH_SEGMENT))
    } else {
        base.to_owned()
    }
}

pub async fn webseed_fetch(
    client: &reqwest::Client,
    meta: &Metainfo,
    base_url: &str,
    index: usize,
) -> Result<Vec<u8>, WebseedError> {
    if index >= meta.piece_count() {
        return Err(WebseedError::IndexOutOfRange {
            index,
            count: meta.piece_count(),
        });
    }
    let (start, end) = piece_range(meta, index);
    let url = webseed_url(base_url, &meta.name);
    let resp = client
        .get(&url)
        .header(RANGE, format!("bytes={start}-{end}"))
        .send()
        .await
        .map_err(|e| WebseedError::HttpFailure(e.to_string()))?;
    let status = resp.status();
    let body = resp
        .bytes()
        .await
        .map_err(|e| WebseedError::HttpFailure(e.to_string()))?;
    let want = (end - start + 1) as usize;
    let piece = match status {
        StatusCode::PARTIAL_CONTENT if body.len() == want => body.to_vec(),
        StatusCode::OK if body.len() as u64 > end => body[start as usize..=end as usize].to_vec(),
        StatusCode::PARTIAL_CONTENT | StatusCode::OK => {
            return Err(WebseedError::HttpFailure(format!(
                "{url}: truncated body ({} bytes) for piece {index}",
                body.len()
            )))
        }
        other => return Err(WebseedError::HttpFailure(format!("{url}: status {other}"))),
    };
    if Digest20::of(&piece) != meta.pieces[index] {
        return Err(WebseedError::CorruptPiece(index));
    }
    Ok(piece)
}

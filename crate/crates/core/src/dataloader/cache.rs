//! Flat binary cache of token ids.
//!
//! ```text
//! 0   8  magic b"KDLMTOKS"
//! 8   4  u32 LE vocabulary size
//! 12  8  u64 LE id count N
//! 20  4N u32 LE ids
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;

pub const MAGIC: &[u8; 8] = b"KDLMTOKS";

pub fn encode_token_cache(ids: &[u32], vocab: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * ids.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&vocab.to_le_bytes());
    out.extend_from_slice(&(ids.len() as u64).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_token_cache(bytes: &[u8]) -> Result<(Vec<u32>, u32)> {
    let bad = |d: String| Error::Format {
        what: "token cache",
        detail: d,
    };
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let vocab = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() != count * 4 {
        return Err(bad(format!("expected {count} ids, found {} bytes", body.len())));
    }
    let ids: Vec<u32> = body.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: vocab as usize });
    }
    Ok((ids, vocab))
}

pub fn write_token_cache(path: &Path, ids: &[u32], vocab: u32) -> Result<()> {
    write_atomic(path, &encode_token_cache(ids, vocab))
}

pub fn read_token_cache(path: &Path) -> Result<(Vec<u32>, u32)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_token_cache(&bytes)
}

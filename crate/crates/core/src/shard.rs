//! `MIOF` shard files.
//!
//! All integers little-endian.
//!
//! ```text
//! header  (48 bytes)
//!   0   4   magic "MIOF"
//!   4   4   version (1)
//!   8   4   window W
//!   12  4   record count N
//!   16  32  SHA-256 of the vocabulary layout JSON
//! table   (N x 16 bytes)
//!   0   8   record offset from file start
//!   8   4   record length
//!   12  4   CRC-32 of the record bytes
//! record
//!   0   4   source type (0..4)
//!   4   4   boundary count B (>= 1, first entry 0)
//!   8   4B  boundaries
//!   ..  4W  token ids
//!   ..  ceil(W/8) loss mask, least significant bit first
//! ```

use crate::error::{Error, Result};
use crate::mix::SourceType;
use crate::packer::PackedBatch;
use crate::vocab::{TokenId, VocabLayout};

pub const MAGIC: &[u8; 4] = b"MIOF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 48;
pub const TABLE_ENTRY_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardRecord {
    pub source: SourceType,
    pub batch: PackedBatch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shard {
    pub window: usize,
    pub layout_digest: [u8; 32],
    pub records: Vec<ShardRecord>,
}

fn encode_record(source: SourceType, batch: &PackedBatch) -> Vec<u8> {
    let w = batch.window();
    let mut out = Vec::with_capacity(8 + 4 * batch.boundaries().len() + 4 * w + w.div_ceil(8));
    out.extend_from_slice(&(source.index() as u32).to_le_bytes());
    out.extend_from_slice(&(batch.boundaries().len() as u32).to_le_bytes());
    for b in batch.boundaries() {
        out.extend_from_slice(&b.to_le_bytes());
    }
    for t in batch.tokens() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let mut mask = vec![0u8; w.div_ceil(8)];
    for (i, &m) in batch.loss_mask().iter().enumerate() {
        if m {
            mask[i / 8] |= 1 << (i % 8);
        }
    }
    out.extend_from_slice(&mask);
    out
}

pub fn encode_shard(records: &[ShardRecord], window: usize, layout: &VocabLayout) -> Result<Vec<u8>> {
    if window == 0 || window > u32::MAX as usize {
        return Err(Error::InvalidConfiguration(format!("window {window} unsupported")));
    }
    let bodies: Vec<Vec<u8>> = records
        .iter()
        .map(|r| {
            if r.batch.window() != window {
                return Err(Error::InvalidInput(format!(
                    "batch window {} differs from shard window {window}",
                    r.batch.window()
                )));
            }
            Ok(encode_record(r.source, &r.batch))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(window as u32).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    out.extend_from_slice(&layout.digest());
    let mut offset = (HEADER_LEN + TABLE_ENTRY_LEN * bodies.len()) as u64;
    for body in &bodies {
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
        offset += body.len() as u64;
    }
    for body in &bodies {
        out.extend_from_slice(body);
    }
    Ok(out)
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::ChecksumFailure { offset: offset as u64, reason: reason.into() }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decodes and fully re-validates a shard. When `layout` is given its
/// digest must match the header and the pad id is taken from it.
pub fn decode_shard(bytes: &[u8], layout: &VocabLayout) -> Result<Shard> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(0, "file shorter than shard header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt(0, "missing MIOF magic"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(corrupt(4, format!("unsupported version {version}")));
    }
    let window = u32_at(bytes, 8) as usize;
    if window == 0 {
        return Err(corrupt(8, "zero window"));
    }
    let count = u32_at(bytes, 12) as usize;
    let mut digest = [0u8; 32];
    digest.copy_from_slice(&bytes[16..48]);
    if digest != layout.digest() {
        return Err(Error::InvalidConfiguration(
            "shard was written with a different vocabulary layout".into(),
        ));
    }
    let table_end = count
        .checked_mul(TABLE_ENTRY_LEN)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .filter(|&n| n <= bytes.len())
        .ok_or_else(|| corrupt(12, format!("record table for {count} records exceeds file")))?;

    let pad = layout.pad_id();
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * TABLE_ENTRY_LEN;
        let offset = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        let len = u32_at(bytes, at + 8) as usize;
        let crc = u32_at(bytes, at + 12);
        let start = usize::try_from(offset)
            .ok()
            .filter(|&s| s >= table_end)
            .ok_or_else(|| corrupt(at, format!("record {i} offset {offset} out of range")))?;
        let body = start
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .map(|e| &bytes[start..e])
            .ok_or_else(|| corrupt(at, format!("record {i} overruns the file")))?;
        if crc32fast::hash(body) != crc {
            return Err(corrupt(start, format!("record {i} checksum mismatch")));
        }
        records.push(decode_record(body, window, pad).map_err(|e| match e {
            Error::ChecksumFailure { offset, reason } => corrupt(start + offset as usize, reason),
            Error::InvalidRecord(reason) => corrupt(start, format!("record {i}: {reason}")),
            other => other,
        })?);
    }
    Ok(Shard { window, layout_digest: digest, records })
}

fn decode_record(body: &[u8], window: usize, pad: TokenId) -> Result<ShardRecord> {
    if body.len() < 8 {
        return Err(corrupt(0, "record shorter than its header"));
    }
    let source = SourceType::from_index(u32_at(body, 0) as usize)
        .ok_or_else(|| corrupt(0, format!("unknown source type {}", u32_at(body, 0))))?;
    let nb = u32_at(body, 4) as usize;
    if nb == 0 || nb > window + 1 {
        return Err(corrupt(4, format!("boundary count {nb} invalid for window {window}")));
    }
    let expected = 8 + 4 * nb + 4 * window + window.div_ceil(8);
    if body.len() != expected {
        return Err(corrupt(0, format!("record is {} bytes, expected {expected}", body.len())));
    }
    let words = |from: usize, n: usize| -> Vec<u32> { (0..n).map(|k| u32_at(body, from + 4 * k)).collect() };
    let boundaries = words(8, nb);
    let tok_at = 8 + 4 * nb;
    let tokens = words(tok_at, window);
    let mask_at = tok_at + 4 * window;
    let loss_mask = (0..window).map(|i| body[mask_at + i / 8] >> (i % 8) & 1 == 1).collect();
    let batch = PackedBatch::from_parts(tokens, boundaries, loss_mask, pad)?;
    Ok(ShardRecord { source, batch })
}

//! One-time per-corpus density cache.
//!
//! Normalized visual densities are quantized to 4-bit codes and packed two
//! per byte. Layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       8           magic "HEEDCACH"
//! 8       4           version (u32) = 1
//! 12      4           n_samples (u32)
//! 16      20 * n      index: sample_id (u64), offset (u64), n_positions (u32)
//! ...                 zero padding to a multiple of 64
//!                     payload blocks, one per sample, each starting at a
//!                     multiple of 64 and zero-padded to the next one
//! ```
//!
//! Within a block the earlier position of each pair sits in the low nibble;
//! an odd position count leaves the final high nibble zero. An empty corpus
//! is just the 16-byte header.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"HEEDCACH";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;
const HEADER_LEN: usize = 16;
const INDEX_ENTRY_LEN: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("value {0} outside [0, 1] cannot be quantized")]
    OutOfRange(f64),
    #[error("nibble code {0} exceeds 15")]
    BadCode(u8),
    #[error("duplicate sample id {0}")]
    DuplicateSample(u64),
    #[error("sample {0} has no positions")]
    EmptyEntry(u64),
    #[error("sample {0} has too many positions for a u32 count")]
    TooManyPositions(u64),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported cache version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("misaligned offset {offset} for index entry {index}")]
    MisalignedOffset { index: usize, offset: u64 },
    #[error("offset {offset} for index entry {index} overlaps the previous block")]
    OverlappingOffset { index: usize, offset: u64 },
}

/// Quantizes a normalized density to a 4-bit code, rounding half away from zero.
pub fn quantize4(rho_tilde: f64) -> Result<u8, CacheError> {
    if !(0.0..=1.0).contains(&rho_tilde) {
        return Err(CacheError::OutOfRange(rho_tilde));
    }
    Ok((rho_tilde * 15.0).round() as u8)
}

pub fn dequantize4(code: u8) -> f64 {
    f64::from(code) / 15.0
}

/// Quantized densities of one sample's visual positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub sample_id: u64,
    codes: Vec<u8>,
}

impl CacheEntry {
    pub fn from_codes(sample_id: u64, codes: Vec<u8>) -> Result<Self, CacheError> {
        if let Some(&c) = codes.iter().find(|&&c| c > 15) {
            return Err(CacheError::BadCode(c));
        }
        if codes.is_empty() {
            return Err(CacheError::EmptyEntry(sample_id));
        }
        if u32::try_from(codes.len()).is_err() {
            return Err(CacheError::TooManyPositions(sample_id));
        }
        Ok(Self { sample_id, codes })
    }

    pub fn from_rho_tilde(sample_id: u64, rho_tilde: &[f64]) -> Result<Self, CacheError> {
        let codes = rho_tilde
            .iter()
            .map(|&r| quantize4(r))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_codes(sample_id, codes)
    }

    pub fn n_positions(&self) -> u32 {
        self.codes.len() as u32
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn dequantized(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| dequantize4(c)).collect()
    }

    fn packed(&self) -> impl Iterator<Item = u8> + '_ {
        self.codes
            .chunks(2)
            .map(|pair| pair[0] | (pair.get(1).copied().unwrap_or(0) << 4))
    }
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn payload_start(n_samples: usize) -> usize {
    let header = HEADER_LEN + INDEX_ENTRY_LEN * n_samples;
    if n_samples == 0 {
        header
    } else {
        align_up(header)
    }
}

/// Size in bytes of a cache holding samples with the given position counts.
pub fn file_size(position_counts: impl IntoIterator<Item = u64>) -> u64 {
    let mut n = 0u64;
    let mut payload = 0u64;
    for c in position_counts {
        n += 1;
        payload += c.div_ceil(2).div_ceil(ALIGN as u64) * ALIGN as u64;
    }
    payload_start(n as usize) as u64 + payload
}

/// Encodes a corpus. Sample ids must be unique.
pub fn encode_cache(entries: &[CacheEntry]) -> Result<Vec<u8>, CacheError> {
    let mut seen = HashSet::with_capacity(entries.len());
    for e in entries {
        if !seen.insert(e.sample_id) {
            return Err(CacheError::DuplicateSample(e.sample_id));
        }
    }

    let n = entries.len();
    let total = file_size(entries.iter().map(|e| u64::from(e.n_positions()))) as usize;
    let mut out = Vec::with_capacity(total);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());

    let mut offset = payload_start(n);
    for e in entries {
        out.extend_from_slice(&e.sample_id.to_le_bytes());
        out.extend_from_slice(&(offset as u64).to_le_bytes());
        out.extend_from_slice(&e.n_positions().to_le_bytes());
        offset += align_up(e.codes.len().div_ceil(2));
    }
    out.resize(payload_start(n), 0);

    for e in entries {
        out.extend(e.packed());
        out.resize(align_up(out.len()), 0);
    }
    debug_assert_eq!(out.len(), total);
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, CacheError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(CacheError::Truncated {
            needed: at + 4,
            available: bytes.len(),
        })
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64, CacheError> {
    bytes
        .get(at..at + 8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
        .ok_or(CacheError::Truncated {
            needed: at + 8,
            available: bytes.len(),
        })
}

/// Decodes a corpus written by [`encode_cache`].
pub fn decode_cache(bytes: &[u8]) -> Result<Vec<CacheEntry>, CacheError> {
    if bytes.len() < MAGIC.len() {
        return Err(CacheError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(CacheError::BadMagic);
    }
    let version = read_u32(bytes, 8)?;
    if version != VERSION {
        return Err(CacheError::UnsupportedVersion(version));
    }
    let n = read_u32(bytes, 12)? as usize;
    let index_end = HEADER_LEN + INDEX_ENTRY_LEN * n;
    if bytes.len() < index_end {
        return Err(CacheError::Truncated {
            needed: index_end,
            available: bytes.len(),
        });
    }

    let mut entries = Vec::with_capacity(n);
    let mut next_free = payload_start(n) as u64;
    for i in 0..n {
        let at = HEADER_LEN + INDEX_ENTRY_LEN * i;
        let sample_id = read_u64(bytes, at)?;
        let offset = read_u64(bytes, at + 8)?;
        let count = read_u32(bytes, at + 16)? as usize;
        if offset % ALIGN as u64 != 0 {
            return Err(CacheError::MisalignedOffset { index: i, offset });
        }
        if offset < next_free {
            return Err(CacheError::OverlappingOffset { index: i, offset });
        }
        if count == 0 {
            return Err(CacheError::EmptyEntry(sample_id));
        }
        let block_len = count.div_ceil(2);
        let start = usize::try_from(offset).map_err(|_| CacheError::Truncated {
            needed: usize::MAX,
            available: bytes.len(),
        })?;
        let block = bytes
            .get(start..start + block_len)
            .ok_or(CacheError::Truncated {
                needed: start + block_len,
                available: bytes.len(),
            })?;
        let mut codes = Vec::with_capacity(count);
        for (k, &b) in block.iter().enumerate() {
            codes.push(b & 0x0f);
            if 2 * k + 1 < count {
                codes.push(b >> 4);
            }
        }
        next_free = offset + align_up(block_len) as u64;
        entries.push(CacheEntry { sample_id, codes });
    }
    Ok(entries)
}

/// Decoded cache with lookup by sample id.
#[derive(Debug, Clone, Default)]
pub struct DensityCache {
    entries: Vec<CacheEntry>,
    by_id: HashMap<u64, usize>,
}

impl DensityCache {
    pub fn from_entries(entries: Vec<CacheEntry>) -> Self {
        let by_id = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.sample_id, i))
            .collect();
        Self { entries, by_id }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CacheError> {
        decode_cache(bytes).map(Self::from_entries)
    }

    pub fn get(&self, sample_id: u64) -> Option<&CacheEntry> {
        self.by_id.get(&sample_id).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

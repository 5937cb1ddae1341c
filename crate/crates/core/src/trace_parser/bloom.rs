//! Fixed-size Bloom filter over trace ids.
//!
//! Positions come from double hashing: the SHA-256 digest of the id gives two
//! 64-bit words `h1`, `h2` and probe `i` is `(h1 + i * h2) mod m`.

use std::f64::consts::LN_2;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ids::PatternId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BloomError {
    #[error("bad bloom encoding: {0}")]
    Encoding(String),
}

/// Max insertions for `bits` bits at false-positive rate `fpp`:
/// `n = floor(-m * ln(2)^2 / ln(p))`.
pub fn optimal_capacity(bits: u64, fpp: f64) -> u64 {
    ((-(bits as f64) * LN_2 * LN_2) / fpp.ln()).floor().max(1.0) as u64
}

/// `k = round(m / n * ln 2)`, at least one.
pub fn optimal_hashes(bits: u64, capacity: u64) -> u32 {
    ((bits as f64 / capacity as f64) * LN_2).round().max(1.0) as u32
}

/// Expected false-positive rate after `n` insertions.
pub fn expected_fpp(bits: u64, hashes: u32, n: u64) -> f64 {
    (1.0 - (-(hashes as f64) * n as f64 / bits as f64).exp()).powi(hashes as i32)
}

/// Pre-hashed key, reusable across filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BloomKey {
    h1: u64,
    h2: u64,
}

impl BloomKey {
    pub fn of(id: &str) -> BloomKey {
        let d = Sha256::digest(id.as_bytes());
        let mut a = [0u8; 8];
        let mut b = [0u8; 8];
        a.copy_from_slice(&d[..8]);
        b.copy_from_slice(&d[8..16]);
        BloomKey {
            h1: u64::from_le_bytes(a),
            h2: u64::from_le_bytes(b) | 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomFilter {
    words: Vec<u64>,
    bits: u64,
    hashes: u32,
    inserted: u64,
}

impl BloomFilter {
    pub fn new(bits: u64, hashes: u32) -> BloomFilter {
        let bits = bits.max(64);
        BloomFilter {
            words: vec![0; bits.div_ceil(64) as usize],
            bits,
            hashes: hashes.max(1),
            inserted: 0,
        }
    }

    pub fn with_bytes(bytes: usize, hashes: u32) -> BloomFilter {
        BloomFilter::new(bytes as u64 * 8, hashes)
    }

    fn probes(&self, key: BloomKey) -> impl Iterator<Item = u64> + '_ {
        (0..self.hashes as u64).map(move |i| key.h1.wrapping_add(i.wrapping_mul(key.h2)) % self.bits)
    }

    pub fn insert(&mut self, key: BloomKey) {
        for p in self.probes(key).collect::<Vec<_>>() {
            self.words[(p / 64) as usize] |= 1 << (p % 64);
        }
        self.inserted += 1;
    }

    pub fn contains(&self, key: BloomKey) -> bool {
        self.probes(key)
            .all(|p| self.words[(p / 64) as usize] & (1 << (p % 64)) != 0)
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn hashes(&self) -> u32 {
        self.hashes
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn byte_len(&self) -> usize {
        self.bits.div_ceil(8) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.byte_len());
        out
    }

    pub fn from_bytes(bytes: &[u8], hashes: u32, inserted: u64) -> BloomFilter {
        let mut f = BloomFilter::with_bytes(bytes.len(), hashes);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut w = [0u8; 8];
            w[..chunk.len()].copy_from_slice(chunk);
            f.words[i] = u64::from_le_bytes(w);
        }
        f.inserted = inserted;
        f
    }
}

/// A full (or end-of-run) filter handed to the collector. Sealed filters never
/// change; `seq_no` counts seals per topology pattern on one agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBloom {
    pub topo_id: PatternId,
    pub seq_no: u64,
    pub filter: BloomFilter,
}

/// Wire form: bit array in base64.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBloomRecord {
    pub topo_id: PatternId,
    pub seq_no: u64,
    pub bits: String,
    pub k: u32,
    pub inserted_count: u64,
}

impl SealedBloom {
    pub fn to_record(&self) -> SealedBloomRecord {
        SealedBloomRecord {
            topo_id: self.topo_id,
            seq_no: self.seq_no,
            bits: STANDARD.encode(self.filter.to_bytes()),
            k: self.filter.hashes(),
            inserted_count: self.filter.inserted(),
        }
    }

    pub fn from_record(r: &SealedBloomRecord) -> Result<SealedBloom, BloomError> {
        let bytes = STANDARD
            .decode(&r.bits)
            .map_err(|e| BloomError::Encoding(e.to_string()))?;
        if bytes.is_empty() || r.k == 0 {
            return Err(BloomError::Encoding("empty filter".into()));
        }
        Ok(SealedBloom {
            topo_id: r.topo_id,
            seq_no: r.seq_no,
            filter: BloomFilter::from_bytes(&bytes, r.k, r.inserted_count),
        })
    }
}

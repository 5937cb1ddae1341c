//! Store directory layout.
//!
//! ```text
//! MANIFEST                  format version
//! patterns.dict             span patterns, one JSON record per line
//! topo.dict                 topology patterns, one JSON record per line
//! blooms/<topo_id>/<seq>.bf sealed filters, binary
//! params.log                parameter emissions, length-prefixed binary
//! sampled.idx               sampled-trace index, one JSON record per line
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::{BackendError, SampledEntry, StoredBloom, TraceStore};
use crate::agent::{Emission, ParamBlock};
use crate::collector::PatternRecord;
use crate::ids::PatternId;
use crate::trace_parser::BloomFilter;
use crate::wire::{Reader, Writer};

pub const MANIFEST: &str = "mint-store 1\n";

pub(crate) fn dict_line<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string(v).expect("dictionary records serialize");
    s.push('\n');
    s
}

pub fn encode_bloom(b: &StoredBloom) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&b.agent_id)
        .u64(b.agent_seq)
        .u32(b.filter.hashes())
        .u64(b.filter.inserted())
        .bytes(&b.filter.to_bytes());
    w.finish()
}

pub fn decode_bloom(topo_id: PatternId, seq: u64, bytes: &[u8]) -> Result<StoredBloom, crate::wire::WireError> {
    let mut r = Reader::new(bytes);
    let agent_id = r.str()?;
    let agent_seq = r.u64()?;
    let k = r.u32()?;
    let inserted = r.u64()?;
    let bits = r.bytes()?;
    Ok(StoredBloom {
        topo_id,
        seq,
        agent_id,
        agent_seq,
        filter: BloomFilter::from_bytes(bits, k, inserted),
    })
}

/// `u32 length | agent_id | trace_id | partial | block count | blocks`.
pub fn encode_emission(e: &Emission) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&e.agent_id).str(&e.trace_id).u8(e.partial as u8).u32(e.blocks.len() as u32);
    for b in &e.blocks {
        b.write(&mut w);
    }
    let body = w.finish();
    let mut out = (body.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(&body);
    out
}

fn decode_emission(r: &mut Reader<'_>) -> Result<Emission, crate::wire::WireError> {
    let _len = r.u32()?;
    let agent_id = r.str()?;
    let trace_id = r.str()?;
    let partial = r.u8()? != 0;
    let n = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        blocks.push(ParamBlock::read(r)?);
    }
    Ok(Emission {
        trace_id,
        agent_id,
        blocks,
        partial,
    })
}

fn corrupt(file: &str, detail: impl ToString) -> BackendError {
    BackendError::Corrupt {
        file: file.to_owned(),
        detail: detail.to_string(),
    }
}

impl TraceStore {
    pub fn save(&self, dir: &Path) -> Result<(), BackendError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("MANIFEST"), MANIFEST)?;
        let mut f = fs::File::create(dir.join("patterns.dict"))?;
        for p in self.span_patterns() {
            f.write_all(dict_line(p).as_bytes())?;
        }
        let mut f = fs::File::create(dir.join("topo.dict"))?;
        for t in self.topo_patterns() {
            f.write_all(dict_line(t).as_bytes())?;
        }
        for b in self.blooms() {
            let d = dir.join("blooms").join(b.topo_id.to_string());
            fs::create_dir_all(&d)?;
            fs::write(d.join(format!("{}.bf", b.seq)), encode_bloom(b))?;
        }
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("params.log"))?);
        for e in self.emissions() {
            f.write_all(&encode_emission(e))?;
        }
        f.flush()?;
        let mut f = fs::File::create(dir.join("sampled.idx"))?;
        for e in self.sampled_entries() {
            f.write_all(dict_line(e).as_bytes())?;
        }
        Ok(())
    }

    pub fn open(dir: &Path) -> Result<TraceStore, BackendError> {
        let manifest = fs::read_to_string(dir.join("MANIFEST"))?;
        if manifest != MANIFEST {
            return Err(BackendError::Version(manifest.trim().to_owned()));
        }
        let mut store = TraceStore::new();
        for line in fs::read_to_string(dir.join("patterns.dict"))?.lines() {
            let r = serde_json::from_str(line).map_err(|e| corrupt("patterns.dict", e))?;
            store.add_pattern(PatternRecord::Span(r));
        }
        for line in fs::read_to_string(dir.join("topo.dict"))?.lines() {
            let r = serde_json::from_str(line).map_err(|e| corrupt("topo.dict", e))?;
            store.add_pattern(PatternRecord::Topo(r));
        }
        let bloom_dir = dir.join("blooms");
        if bloom_dir.exists() {
            let mut topos: Vec<_> = fs::read_dir(&bloom_dir)?.collect::<Result<_, _>>()?;
            topos.sort_by_key(|e| e.file_name());
            for t in topos {
                let name = t.file_name().to_string_lossy().into_owned();
                let topo_id: PatternId = name.parse().map_err(|e| corrupt(&name, e))?;
                let mut seqs: Vec<(u64, std::path::PathBuf)> = Vec::new();
                for f in fs::read_dir(t.path())? {
                    let p = f?.path();
                    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    let seq = stem.parse().map_err(|e| corrupt(&p.display().to_string(), e))?;
                    seqs.push((seq, p));
                }
                seqs.sort();
                for (i, (seq, p)) in seqs.into_iter().enumerate() {
                    let file = p.display().to_string();
                    if seq != i as u64 {
                        return Err(corrupt(&file, "gap in bloom sequence"));
                    }
                    let b = decode_bloom(topo_id, seq, &fs::read(&p)?).map_err(|e| corrupt(&file, e))?;
                    store.add_bloom(&b.agent_id, topo_id, b.agent_seq, b.filter);
                }
            }
        }
        let log = fs::read(dir.join("params.log"))?;
        let mut r = Reader::new(&log);
        while !r.is_done() {
            let e = decode_emission(&mut r).map_err(|e| corrupt("params.log", e))?;
            store.add_emission(e);
        }
        let mut index: Vec<SampledEntry> = Vec::new();
        for line in fs::read_to_string(dir.join("sampled.idx"))?.lines() {
            index.push(serde_json::from_str(line).map_err(|e| corrupt("sampled.idx", e))?);
        }
        let rebuilt: Vec<&SampledEntry> = store.sampled_entries().collect();
        if rebuilt.len() != index.len() || rebuilt.iter().zip(&index).any(|(a, b)| *a != b) {
            return Err(corrupt("sampled.idx", "index disagrees with params.log"));
        }
        Ok(store)
    }
}

//! Byte-bounded FIFO of parameter blocks.

use std::collections::{HashMap, VecDeque};

use thiserror::Error;

use crate::span_parser::SpanParams;
use crate::wire::{read_span_params, Reader, WireError, Writer};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BufferError {
    #[error("block of {size} bytes exceeds buffer capacity {capacity}")]
    BlockTooLarge { size: usize, capacity: usize },
}

/// Parameters of every span of one trace on one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub trace_id: String,
    pub agent_id: String,
    pub spans: Vec<SpanParams>,
    pub created_at: u64,
    byte_size: usize,
}

impl ParamBlock {
    pub fn new(trace_id: String, agent_id: String, spans: Vec<SpanParams>, created_at: u64) -> Self {
        let mut b = ParamBlock {
            trace_id,
            agent_id,
            spans,
            created_at,
            byte_size: 0,
        };
        b.byte_size = b.encode().len();
        b
    }

    /// Size of the binary encoding.
    pub fn byte_size(&self) -> usize {
        self.byte_size
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.finish()
    }

    pub fn write(&self, w: &mut Writer) {
        w.str(&self.trace_id).str(&self.agent_id).u64(self.created_at);
        w.u32(self.spans.len() as u32);
        for s in &self.spans {
            crate::wire::write_span_params(w, s);
        }
    }

    pub fn read(r: &mut Reader<'_>) -> Result<ParamBlock, WireError> {
        let start = r.pos();
        let trace_id = r.str()?;
        let agent_id = r.str()?;
        let created_at = r.u64()?;
        let n = r.u32()? as usize;
        let mut spans = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            spans.push(read_span_params(r)?);
        }
        Ok(ParamBlock {
            trace_id,
            agent_id,
            spans,
            created_at,
            byte_size: r.pos() - start,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<ParamBlock, WireError> {
        ParamBlock::read(&mut Reader::new(bytes))
    }
}

/// FIFO queue of blocks holding at most `capacity` bytes. Overflow pops the
/// oldest blocks.
#[derive(Debug, Clone)]
pub struct ParamsBuffer {
    queue: VecDeque<ParamBlock>,
    capacity: usize,
    current: usize,
    resident: HashMap<String, usize>,
}

impl ParamsBuffer {
    pub fn new(capacity: usize) -> Self {
        ParamsBuffer {
            queue: VecDeque::new(),
            capacity,
            current: 0,
            resident: HashMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn current_bytes(&self) -> usize {
        self.current
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Appends `block`, then evicts from the front until it fits. Returns the
    /// evicted blocks, oldest first.
    pub fn push(&mut self, block: ParamBlock) -> Result<Vec<ParamBlock>, BufferError> {
        if block.byte_size() > self.capacity {
            return Err(BufferError::BlockTooLarge {
                size: block.byte_size(),
                capacity: self.capacity,
            });
        }
        self.current += block.byte_size();
        *self.resident.entry(block.trace_id.clone()).or_default() += 1;
        self.queue.push_back(block);
        let mut evicted = Vec::new();
        while self.current > self.capacity {
            let old = self.queue.pop_front().expect("over capacity implies non-empty");
            self.forget(&old);
            evicted.push(old);
        }
        Ok(evicted)
    }

    fn forget(&mut self, block: &ParamBlock) {
        self.current -= block.byte_size();
        if let Some(n) = self.resident.get_mut(&block.trace_id) {
            *n -= 1;
            if *n == 0 {
                self.resident.remove(&block.trace_id);
            }
        }
    }

    pub fn contains(&self, trace_id: &str) -> bool {
        self.resident.contains_key(trace_id)
    }

    /// Removes and returns every block of `trace_id`, oldest first.
    pub fn take(&mut self, trace_id: &str) -> Vec<ParamBlock> {
        if !self.contains(trace_id) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut keep = VecDeque::with_capacity(self.queue.len());
        for b in self.queue.drain(..) {
            if b.trace_id == trace_id {
                out.push(b);
            } else {
                keep.push_back(b);
            }
        }
        self.queue = keep;
        for b in &out {
            self.current -= b.byte_size();
        }
        self.resident.remove(trace_id);
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamBlock> {
        self.queue.iter()
    }
}

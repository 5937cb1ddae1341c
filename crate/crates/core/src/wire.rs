//! Length-prefixed binary encoding shared by parameter blocks, envelopes and
//! the on-disk parameter log. All integers are little-endian.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ids::PatternId;
use crate::span_parser::{NumericParam, Param, SpanParams};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input at byte {0}")]
    Truncated(usize),
    #[error("invalid utf-8 at byte {0}")]
    Utf8(usize),
    #[error("unknown tag {tag} at byte {at}")]
    Tag { tag: u8, at: usize },
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn opt_str(&mut self, v: Option<&str>) -> &mut Self {
        match v {
            Some(s) => self.u8(1).str(s),
            None => self.u8(0),
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(WireError::Truncated(self.pos))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        self.u64().map(f64::from_bits)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        let at = self.pos;
        let b = self.bytes()?;
        std::str::from_utf8(b).map(str::to_owned).map_err(|_| WireError::Utf8(at))
    }

    pub fn opt_str(&mut self) -> Result<Option<String>, WireError> {
        let at = self.pos;
        match self.u8()? {
            0 => Ok(None),
            1 => self.str().map(Some),
            tag => Err(WireError::Tag { tag, at }),
        }
    }
}

pub fn write_span_params(w: &mut Writer, p: &SpanParams) {
    w.str(&p.span_id).opt_str(p.parent_span_id.as_deref()).u64(p.pattern_id.0);
    w.u32(p.metadata.len() as u32);
    for (k, v) in &p.metadata {
        w.str(k).str(v);
    }
    w.u32(p.params.len() as u32);
    for param in &p.params {
        match param {
            Param::Str(s) => w.u8(0).str(s),
            Param::Num(NumericParam::Residual(r)) => w.u8(1).f64(*r),
            Param::Num(NumericParam::Raw(d)) => w.u8(2).f64(*d),
        };
    }
}

pub fn read_span_params(r: &mut Reader<'_>) -> Result<SpanParams, WireError> {
    let span_id = r.str()?;
    let parent_span_id = r.opt_str()?;
    let pattern_id = PatternId(r.u64()?);
    let mut metadata = BTreeMap::new();
    for _ in 0..r.u32()? {
        let k = r.str()?;
        metadata.insert(k, r.str()?);
    }
    let n = r.u32()? as usize;
    let mut params = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let at = r.pos();
        params.push(match r.u8()? {
            0 => Param::Str(r.str()?),
            1 => Param::Num(NumericParam::Residual(r.f64()?)),
            2 => Param::Num(NumericParam::Raw(r.f64()?)),
            tag => return Err(WireError::Tag { tag, at }),
        });
    }
    Ok(SpanParams {
        span_id,
        parent_span_id,
        pattern_id,
        metadata,
        params,
    })
}

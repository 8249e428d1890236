//! Binary checkpoint.
//!
//! ```text
//! magic    b"LFCKPT\0\0"
//! version  u32
//! config   u32 length + UTF-8 JSON of the encoder config
//! cursor   u64 next round, u64 phase
//! count    u32
//! tensor   u16 name length + name ("layer/param"), u8 rank, u64 dims,
//!          f32 values
//! ```
//!
//! Every integer and float is little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::ParamId;
use crate::encoder::{param_name, EncoderConfig, LayeredEncoder};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"LFCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cursor {
    /// First round not yet applied.
    pub next_round: u64,
    pub phase: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoder: LayeredEncoder,
    pub cursor: Cursor,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let config = serde_json::to_vec(self.encoder.config()).expect("config is serializable");
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&self.cursor.next_round.to_le_bytes());
        out.extend_from_slice(&self.cursor.phase.to_le_bytes());
        let params: Vec<_> = self.encoder.params().collect();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            let name = p.id.to_string();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(r.error(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(8, &format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let at = r.pos;
        let config: EncoderConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| r.error(at, &format!("bad config: {e}")))?;
        let cursor = Cursor { next_round: r.u64()?, phase: r.u64()? };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.error(at, "tensor name is not UTF-8"))?;
            let id = parse_id(name).ok_or_else(|| r.error(at, &format!("unknown tensor `{name}`")))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.error(at, "tensor too large"))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push((id, Tensor::new(shape, data).map_err(|e| r.error(at, &e.to_string()))?));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos as u64, "trailing bytes"));
        }
        Ok(Checkpoint { encoder: LayeredEncoder::from_tensors(config, tensors)?, cursor })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_id(name: &str) -> Option<ParamId> {
    let (layer, param) = name.split_once('/')?;
    let layer: usize = layer.parse().ok()?;
    Some(ParamId::new(layer, param_name(layer, param)?))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: impl TryInto<u64>, message: &str) -> Error {
        Error::Format { offset: offset.try_into().unwrap_or(u64::MAX), message: message.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(self.pos, &format!("truncated: wanted {n} more bytes")));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

//! Binary training checkpoints.
//!
//! Layout (little-endian): magic `SHNF`, `u32` version, `u8` value width in
//! bytes, `u32`-prefixed config text, `u32`-prefixed data directory, `u64`
//! iteration, `u32` tensor count, then per tensor a `u32`-prefixed name, `u32`
//! rank and `u64` dims. Raw values follow: all parameters in table order, then
//! the Adam first moments, then the second moments.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::training::{Params, Precision, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"SHNF";
pub const VERSION: u32 = 1;

/// Header fields readable without knowing the value type.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub value_bytes: u8,
    pub config: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub iter: u64,
    pub table: Vec<(String, Vec<usize>)>,
    /// Byte offset of the first value.
    blob_start: usize,
}

impl CheckpointHeader {
    pub fn precision(&self) -> Result<Precision> {
        match self.value_bytes {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            b => Err(Error::CheckpointShape(format!("unsupported value width {b}"))),
        }
    }

    fn n_values(&self) -> usize {
        self.table.iter().map(|t| t.1.iter().product::<usize>()).sum()
    }

    fn expected_len(&self) -> usize {
        self.blob_start + 3 * self.n_values() * self.value_bytes as usize
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_checkpoint<T: Real>(state: &TrainState<T>, data_dir: Option<&Path>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    put_str(&mut out, &state.config.to_kv());
    put_str(&mut out, &data_dir.map(|p| p.to_string_lossy().into_owned()).unwrap_or_default());
    out.extend_from_slice(&state.iter.to_le_bytes());
    let tensors = state.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, _) in &tensors {
        put_str(&mut out, name);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in [&state.params, &state.m, &state.v] {
        for (_, _, vals) in p.tensors() {
            for &v in vals {
                v.write_le(&mut out);
            }
        }
    }
    out
}

pub fn save_checkpoint<T: Real>(state: &TrainState<T>, data_dir: Option<&Path>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state, data_dir)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated {
                expected: self.pos + n,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::CheckpointShape("non-UTF-8 text in header".into()))
    }
}

pub fn decode_header(buf: &[u8]) -> Result<CheckpointHeader> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() >= 4 && &buf[..4] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            expected: VERSION,
            found: version,
        });
    }
    let value_bytes = r.take(1)?[0];
    let config = TrainConfig::from_kv(&r.string()?)
        .map_err(|e| Error::CheckpointShape(format!("config echo: {e}")))?;
    let data = r.string()?;
    let iter = r.u64()?;
    let n = r.u32()? as usize;
    let mut table = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let header = CheckpointHeader {
        value_bytes,
        config,
        data_dir: (!data.is_empty()).then(|| PathBuf::from(data)),
        iter,
        table,
        blob_start: r.pos,
    };
    header.precision()?;
    Ok(header)
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&buf)
}

pub fn decode_checkpoint<T: Real>(buf: &[u8]) -> Result<(TrainState<T>, CheckpointHeader)> {
    let header = decode_header(buf)?;
    if header.value_bytes as usize != T::BYTES {
        return Err(Error::CheckpointShape(format!(
            "checkpoint holds {}-byte values, {}-byte requested",
            header.value_bytes,
            T::BYTES
        )));
    }
    if buf.len() < header.expected_len() {
        return Err(Error::CheckpointTruncated {
            expected: header.expected_len(),
            found: buf.len(),
        });
    }
    let n_views = header
        .table
        .iter()
        .find(|t| t.0 == crate::training::CRF_TENSOR)
        .and_then(|t| t.1.first().copied())
        .ok_or_else(|| Error::CheckpointShape("no response-curve tensor".into()))?;
    let mut state = TrainState::<T>::new(header.config.clone(), n_views)
        .map_err(|e| Error::CheckpointShape(e.to_string()))?;
    let expect: Vec<(String, Vec<usize>)> = state
        .params
        .tensors()
        .into_iter()
        .map(|(n, d, _)| (n, d))
        .collect();
    if expect != header.table {
        let diff = expect
            .iter()
            .zip(&header.table)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| format!("expected {} tensors, found {}", expect.len(), header.table.len()));
        return Err(Error::CheckpointShape(diff));
    }
    let mut pos = header.blob_start;
    let fill = |p: &mut Params<T>, pos: &mut usize| {
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v = T::read_le(&buf[*pos..*pos + T::BYTES]);
                *pos += T::BYTES;
            }
        }
    };
    fill(&mut state.params, &mut pos);
    fill(&mut state.m, &mut pos);
    fill(&mut state.v, &mut pos);
    state.iter = header.iter;
    Ok((state, header))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(TrainState<T>, CheckpointHeader)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf)
}

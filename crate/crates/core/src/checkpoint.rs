//! `STRMCKPT` checkpoint files and the shared tensor record encoding.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"STRMCKPT"
//! version  u16
//! config   u32 byte length + canonical JSON text
//! count    u32 number of tensor records
//! record   u32 name length, name bytes (UTF-8),
//!          u32 rank, u32 per dim,
//!          u8 dtype tag (0 = f32, 1 = f64),
//!          row-major payload
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, StormError};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::ParamSet;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STRMCKPT";
pub const VERSION: u16 = 1;

pub fn write_tensor_record<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>, dtype: DType) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype.tag());
    for &v in t.data() {
        match dtype {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

/// Cursor over a byte buffer that reports truncation against a file path.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn seek(&mut self, pos: usize) {
        self.pos = pos;
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(StormError::format(self.path, format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn fail(&self, reason: impl Into<String>) -> StormError {
        StormError::format(self.path, reason)
    }
}

pub(crate) fn read_tensor_record<T: Scalar>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.bytes(name_len)?)
        .map_err(|_| r.fail("tensor name is not UTF-8"))?
        .to_string();
    let rank = r.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| r.fail(format!("unknown dtype for {name}")))?;
    let n: usize = shape.iter().product();
    let raw = r.bytes(n * dtype.width())?;
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((name, Tensor::new(shape, data)?))
}

pub fn encode_checkpoint<T: Scalar>(params: &ModelParams<T>, dtype: DType) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&params.config)
        .map_err(|e| StormError::Config(format!("config serialization: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for (name, t) in params.params.iter() {
        write_tensor_record(&mut out, name, t, dtype);
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelParams<T>> {
    let mut r = Reader::new(bytes, path);
    if r.bytes(8)? != MAGIC {
        return Err(r.fail("bad magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.bytes(len)?).map_err(|_| r.fail("config is not UTF-8"))?;
    let config: ModelConfig =
        serde_json::from_str(text).map_err(|e| r.fail(format!("config JSON: {e}")))?;
    let count = r.u32()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let (name, t) = read_tensor_record(&mut r)?;
        set.push(name, t);
    }
    if !r.at_end() {
        return Err(r.fail("trailing bytes"));
    }
    ModelParams::from_parts(config, set)
}

/// Writes a checkpoint; parameters are stored at `dtype` precision.
pub fn save_checkpoint<T: Scalar>(path: &Path, params: &ModelParams<T>, dtype: DType) -> Result<()> {
    let bytes = encode_checkpoint(params, dtype)?;
    let mut f = fs::File::create(path).map_err(|e| StormError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| StormError::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| StormError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

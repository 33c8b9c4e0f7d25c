//! Binary model checkpoints. The format is deliberately plain: a magic tag
//! and version, the model shape, the hash of the vocabulary the model was
//! trained with, then every tensor by name with little-endian values in a
//! fixed canonical order. Loading verifies the full layout, rejects trailing
//! or missing bytes, and reproduces the saved parameters bit for bit.

use std::path::Path;

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{DimFix, ModelConfig, Seq2Seq};
use crate::tensor::{Precision, Rng, Scalar, TensorSet};

const MAGIC: [u8; 4] = *b"SRLM";
const VERSION: u32 = 1;

/// A loaded model in whichever precision the file declared.
#[derive(Debug, Clone)]
pub enum ModelAny {
    F32(Seq2Seq<f32>),
    F64(Seq2Seq<f64>),
}

impl ModelAny {
    pub fn precision(&self) -> Precision {
        match self {
            ModelAny::F32(_) => Precision::F32,
            ModelAny::F64(_) => Precision::F64,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            ModelAny::F32(m) => m.cfg,
            ModelAny::F64(m) => m.cfg,
        }
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim_u32(v: usize, what: &str) -> u32 {
    u32::try_from(v).unwrap_or_else(|_| panic!("{what} of {v} does not fit a checkpoint field"))
}

/// Serialize a model plus the vocabulary hash it was trained against.
pub fn encode_model<F: Scalar>(model: &Seq2Seq<F>, vocab_hash: u64) -> Vec<u8> {
    let cfg = model.cfg;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    push_u32(&mut out, VERSION);
    out.push(F::BYTE_WIDTH as u8);
    out.push(cfg.dim_fix.code());
    out.push(cfg.reverse_source as u8);
    push_u32(&mut out, dim_u32(cfg.num_layers, "layer count"));
    push_u32(&mut out, dim_u32(cfg.residual_every, "skip interval"));
    push_u32(&mut out, dim_u32(cfg.hidden, "hidden size"));
    push_u32(&mut out, dim_u32(cfg.vocab_size, "vocabulary size"));
    out.extend_from_slice(&vocab_hash.to_le_bytes());
    push_u32(&mut out, dim_u32(model.tensor_count(), "tensor count"));
    for idx in 0..model.tensor_count() {
        let (name, rows, cols) = model.tensor_shape(idx);
        push_u32(&mut out, dim_u32(name.len(), "tensor name length"));
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, dim_u32(rows, "tensor rows"));
        push_u32(&mut out, dim_u32(cols, "tensor cols"));
        for &v in model.tensor_at(idx) {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}

struct Header {
    precision: u8,
    cfg: ModelConfig,
    vocab_hash: u64,
}

fn read_header(r: &mut Reader<'_>) -> Result<Header> {
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads {VERSION}"
        )));
    }
    let precision = r.u8()?;
    if precision != 4 && precision != 8 {
        return Err(Error::Checkpoint(format!("unknown precision byte {precision}")));
    }
    let dim_fix = DimFix::from_code(r.u8()?)?;
    let reverse_source = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad source-order byte {other}"))),
    };
    let num_layers = r.u32()? as usize;
    let residual_every = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let vocab_size = r.u32()? as usize;
    let vocab_hash = r.u64()?;
    let cfg = ModelConfig {
        vocab_size,
        hidden,
        num_layers,
        residual_every,
        dim_fix,
        reverse_source,
    };
    cfg.validate()
        .map_err(|e| Error::Checkpoint(format!("checkpoint declares an invalid model: {e}")))?;
    Ok(Header { precision, cfg, vocab_hash })
}

fn decode_body<F: Scalar>(r: &mut Reader<'_>, cfg: ModelConfig) -> Result<Seq2Seq<F>> {
    // A zero model of the declared shape, then filled tensor by tensor.
    let mut model = Seq2Seq::<F>::init(cfg, &mut Rng::new(0), 0.0, 0.0)
        .map_err(|e| Error::Checkpoint(format!("cannot shape the declared model: {e}")))?;
    let count = r.u32()? as usize;
    if count != model.tensor_count() {
        return Err(Error::Checkpoint(format!(
            "checkpoint lists {count} tensors, the declared shape has {}",
            model.tensor_count()
        )));
    }
    for idx in 0..count {
        let (want_name, want_rows, want_cols) = model.tensor_shape(idx);
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not valid text".into()))?;
        if name != want_name {
            return Err(Error::Checkpoint(format!(
                "tensor {idx} is named '{name}', expected '{want_name}'"
            )));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if rows != want_rows || cols != want_cols {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' is {rows}x{cols}, expected {want_rows}x{want_cols}"
            )));
        }
        let dst = model.tensor_at_mut(idx);
        debug_assert_eq!(dst.len(), rows * cols);
        for slot in dst.iter_mut() {
            *slot = F::read_le(r.take(F::BYTE_WIDTH)?);
        }
    }
    Ok(model)
}

/// Parse a checkpoint in a known precision. The file's precision must match.
pub fn decode_model<F: Scalar>(bytes: &[u8]) -> Result<(Seq2Seq<F>, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    if header.precision as usize != F::BYTE_WIDTH {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {}-byte values, expected {}-byte {}",
            header.precision,
            F::BYTE_WIDTH,
            F::PRECISION
        )));
    }
    let model = decode_body::<F>(&mut r, header.cfg)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((model, header.vocab_hash))
}

/// Parse a checkpoint in whichever precision it declares.
pub fn decode_any(bytes: &[u8]) -> Result<(ModelAny, u64)> {
    let mut r = Reader { bytes, pos: 0 };
    let header = read_header(&mut r)?;
    match header.precision {
        4 => decode_model::<f32>(bytes).map(|(m, h)| (ModelAny::F32(m), h)),
        8 => decode_model::<f64>(bytes).map(|(m, h)| (ModelAny::F64(m), h)),
        other => Err(Error::Checkpoint(format!("unknown precision byte {other}"))),
    }
}

pub fn save_model<F: Scalar>(path: &Path, model: &Seq2Seq<F>, vocab_hash: u64) -> Result<()> {
    std::fs::write(path, encode_model(model, vocab_hash))?;
    Ok(())
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<(Seq2Seq<F>, u64)> {
    decode_model(&std::fs::read(path)?)
}

pub fn load_model_any(path: &Path) -> Result<(ModelAny, u64)> {
    decode_any(&std::fs::read(path)?)
}

/// A model only makes sense with the vocabulary it was trained on.
pub fn check_vocab(stored_hash: u64, vocab: &Vocab) -> Result<()> {
    if stored_hash != vocab.hash() {
        return Err(Error::Checkpoint(format!(
            "vocabulary mismatch: checkpoint was trained with hash {stored_hash:016x}, \
             the supplied vocabulary hashes to {:016x}",
            vocab.hash()
        )));
    }
    Ok(())
}

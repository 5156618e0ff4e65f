//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "RSEGCKPT" | u32 version | u8 paths | u8 learned embedding
//! u64 x 8: embed_dim lstm_hidden mlp_hidden classes conv_channels
//!          feature_channels head_hidden category_hidden
//! f64 threshold
//! u64 vocabulary size, then per token u32 byte length + UTF-8 bytes,
//! then vocabulary x embed_dim f64 vectors
//! u64 block count, then per block u64 length + f64 values
//! ```
//!
//! Blocks follow the order of [`Weights`](crate::model::Weights).

use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::embedding::EmbeddingTable;
use crate::model::{Model, ModelConfig, Paths};
use crate::nn::Params;
use crate::synth::rng_from_seed;

pub const MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(model.paths.code());
    out.push(u8::from(model.learn_embedding));
    for v in [
        c.embed_dim,
        c.lstm_hidden,
        c.mlp_hidden,
        c.classes,
        c.conv_channels,
        c.feature_channels,
        c.head_hidden,
        c.category_hidden,
    ] {
        put_u64(&mut out, v);
    }
    out.extend_from_slice(&c.threshold.to_le_bytes());

    let table = &model.embedding;
    put_u64(&mut out, table.len());
    for t in table.tokens() {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(t.as_bytes());
    }
    put_f64s(&mut out, table.raw_vectors());

    let blocks = model.weights.blocks();
    put_u64(&mut out, blocks.len());
    for b in blocks {
        put_u64(&mut out, b.len());
        put_f64s(&mut out, b);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let v =
            usize::try_from(v).map_err(|_| CheckpointError::Corrupt("length overflow".into()))?;
        // no block can be larger than the file itself
        if v > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!("implausible length {v}")));
        }
        Ok(v)
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let corrupt = |m: String| CheckpointError::Corrupt(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let paths_code = r.u8()?;
    let paths = Paths::from_code(paths_code)
        .ok_or_else(|| corrupt(format!("unknown paths code {paths_code}")))?;
    let learn_embedding = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(corrupt(format!("bad embedding flag {v}"))),
    };
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.len()?;
    }
    let config = ModelConfig {
        embed_dim: dims[0],
        lstm_hidden: dims[1],
        mlp_hidden: dims[2],
        classes: dims[3],
        conv_channels: dims[4],
        feature_channels: dims[5],
        head_hidden: dims[6],
        category_hidden: dims[7],
        threshold: r.f64()?,
    };

    let vocab = r.len()?;
    let mut tokens = Vec::with_capacity(vocab);
    for _ in 0..vocab {
        let n = r.u32()? as usize;
        let t =
            std::str::from_utf8(r.take(n)?).map_err(|_| corrupt("token is not UTF-8".into()))?;
        tokens.push(t.to_string());
    }
    let vectors = r.f64s(vocab * config.embed_dim)?;
    let rows = vectors
        .chunks(config.embed_dim.max(1))
        .map(<[f64]>::to_vec)
        .collect();
    let table = EmbeddingTable::from_rows(tokens, rows).map_err(|e| corrupt(e.to_string()))?;

    let mut model = Model::new(
        config,
        paths,
        Arc::new(table),
        learn_embedding,
        &mut rng_from_seed(0),
    )
    .map_err(|e| corrupt(e.to_string()))?;
    let count = r.len()?;
    let expected = model.weights.shapes();
    if count != expected.len() {
        return Err(corrupt(format!(
            "expected {} parameter blocks, found {count}",
            expected.len()
        )));
    }
    for (i, block) in model.weights.blocks_mut().into_iter().enumerate() {
        let n = r.len()?;
        if n != block.len() {
            return Err(corrupt(format!(
                "block {i} has {n} values, expected {}",
                block.len()
            )));
        }
        for v in block.iter_mut() {
            *v = r.f64()?;
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes".into()));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<(), CheckpointError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(model))?;
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

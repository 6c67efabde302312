//! `SPFM` model checkpoints.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SPFM"
//! 4       4     u32 version (1)
//! 8       4     u32 section count (3)
//! 12      20*n  section table: [u8; 4] tag, u64 offset, u64 length
//!               sections: CONF, WGHT, MASK, in that order
//! CONF          9 x u32: n_layers, hidden_dim, ffw_dim, n_heads, n_clusters,
//!               input_dim, positional kind (0 sinusoidal, 1 conv),
//!               conv kernel, conv groups
//! WGHT          every tensor in declared order as row-major f32 LE
//! MASK          one LSB-first bit stream, zero padded to a whole byte:
//!               head mask (n_layers x n_heads), row mask
//!               (n_layers x ffw_dim), then per block the q, k, v, o, ffw1,
//!               ffw2 keep-masks (weight row-major, then bias)
//! ```
//! All integers are little-endian.

use std::path::Path;

use super::{Masks, ModelConfig, Positional, Real, TransformerModel, Weights};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPFM";
pub const CHECKPOINT_VERSION: u32 = 1;
const SECTIONS: [&[u8; 4]; 3] = [b"CONF", b"WGHT", b"MASK"];

fn config_bytes(cfg: &ModelConfig) -> Vec<u8> {
    let (kind, kernel, groups) = match cfg.positional {
        Positional::Sinusoidal => (0u32, 0u32, 0u32),
        Positional::Conv { kernel, groups } => (1, kernel as u32, groups as u32),
    };
    [
        cfg.n_layers as u32,
        cfg.hidden_dim as u32,
        cfg.ffw_dim as u32,
        cfg.n_heads as u32,
        cfg.n_clusters as u32,
        cfg.input_dim as u32,
        kind,
        kernel,
        groups,
    ]
    .iter()
    .flat_map(|v| v.to_le_bytes())
    .collect()
}

fn mask_bits(m: &Masks) -> impl Iterator<Item = bool> + '_ {
    m.heads
        .iter()
        .chain(m.rows.iter())
        .chain(
            m.blocks
                .iter()
                .flat_map(|b| b.iter())
                .flat_map(|lm| lm.weight.iter().chain(lm.bias.iter())),
        )
        .copied()
}

fn pack(bits: impl Iterator<Item = bool>) -> Vec<u8> {
    let mut out = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 8 == 0 {
            out.push(0);
        }
        if b {
            *out.last_mut().expect("pushed") |= 1 << (i % 8);
        }
    }
    out
}

pub fn encode_checkpoint<T: Real>(model: &TransformerModel<T>) -> Vec<u8> {
    let conf = config_bytes(&model.config);
    let weights: Vec<u8> = model
        .weights
        .tensors()
        .iter()
        .flat_map(|t| t.iter().map(|v| (v.as_f64() as f32).to_le_bytes()).collect::<Vec<_>>())
        .flatten()
        .collect();
    let masks = pack(mask_bits(&model.masks));
    let header = 12 + 20 * SECTIONS.len();
    let mut out = Vec::with_capacity(header + conf.len() + weights.len() + masks.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(SECTIONS.len() as u32).to_le_bytes());
    let mut offset = header as u64;
    for (tag, body) in SECTIONS.iter().zip([&conf, &weights, &masks]) {
        out.extend_from_slice(*tag);
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        offset += body.len() as u64;
    }
    out.extend_from_slice(&conf);
    out.extend_from_slice(&weights);
    out.extend_from_slice(&masks);
    out
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<TransformerModel<T>> {
    let bad = |msg: String| Error::Format(format!("checkpoint: {msg}"));
    let mut r = Reader::new(bytes, "checkpoint");
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    if n != SECTIONS.len() {
        return Err(bad(format!("expected {} sections, found {n}", SECTIONS.len())));
    }
    let mut spans = Vec::with_capacity(n);
    for want in SECTIONS {
        let tag = r.take(4)?;
        if tag != want {
            return Err(bad(format!("section tag {:?}, expected {:?}", tag, want)));
        }
        let off = r.u64()? as usize;
        let len = r.u64()? as usize;
        let end = off.checked_add(len).filter(|&e| e <= bytes.len());
        if end.is_none() {
            return Err(bad("section extends past end of file".into()));
        }
        spans.push(&bytes[off..off + len]);
    }
    let total: usize = 12 + 20 * n + spans.iter().map(|s| s.len()).sum::<usize>();
    if total != bytes.len() {
        return Err(bad(format!("{} trailing or missing bytes", bytes.len() as i64 - total as i64)));
    }

    let mut c = Reader::new(spans[0], "checkpoint CONF");
    let mut field = || -> Result<usize> { Ok(c.u32()? as usize) };
    let (n_layers, hidden_dim, ffw_dim, n_heads, n_clusters, input_dim) = (field()?, field()?, field()?, field()?, field()?, field()?);
    let positional = match (field()?, field()?, field()?) {
        (0, _, _) => Positional::Sinusoidal,
        (1, kernel, groups) => Positional::Conv { kernel, groups },
        (k, _, _) => return Err(bad(format!("unknown positional kind {k}"))),
    };
    if c.remaining() != 0 {
        return Err(bad("CONF section has extra bytes".into()));
    }
    let config = ModelConfig {
        n_layers,
        hidden_dim,
        ffw_dim,
        n_heads,
        n_clusters,
        input_dim,
        positional,
    };
    config.validate()?;

    let mut weights = Weights::<T>::zeros(&config);
    let expected = weights.parameter_count() * 4;
    if spans[1].len() != expected {
        return Err(bad(format!("WGHT holds {} bytes, config needs {expected}", spans[1].len())));
    }
    let mut w = Reader::new(spans[1], "checkpoint WGHT");
    for mut t in weights.tensors_mut() {
        for v in t.iter_mut() {
            *v = T::lit(f64::from(w.f32()?));
        }
    }

    let mut masks = Masks::all(&config);
    let n_bits = mask_bits(&masks).count();
    if spans[2].len() != n_bits.div_ceil(8) {
        return Err(bad(format!(
            "MASK holds {} bytes, config needs {}",
            spans[2].len(),
            n_bits.div_ceil(8)
        )));
    }
    let bit = |i: usize| spans[2][i / 8] >> (i % 8) & 1 == 1;
    let mut i = 0;
    let mut next = || {
        let b = bit(i);
        i += 1;
        b
    };
    masks.heads.iter_mut().for_each(|m| *m = next());
    masks.rows.iter_mut().for_each(|m| *m = next());
    for lm in masks.blocks.iter_mut().flat_map(|b| b.iter_mut()) {
        lm.weight.iter_mut().for_each(|m| *m = next());
        lm.bias.iter_mut().for_each(|m| *m = next());
    }
    let mut model = TransformerModel { config, weights, masks };
    model.apply_masks();
    Ok(model)
}

pub fn write_checkpoint<T: Real>(model: &TransformerModel<T>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn read_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<TransformerModel<T>> {
    decode_checkpoint(&read_bytes(path)?)
}

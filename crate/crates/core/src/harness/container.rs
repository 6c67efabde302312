//! `SPEB` embedding containers, one file per stimulus.
//!
//! ```text
//! 0   4  magic "SPEB"
//! 4   4  u32 version (1)
//! 8   4  u32 n_layers
//! 12  4  u32 n_frames
//! 16  4  u32 dim
//! 20  .. f32 LE, layer-major, then frame, then feature
//! ```
//! Trailing bytes are an error, as is a short payload.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic, Reader};

pub const CONTAINER_MAGIC: &[u8; 4] = b"SPEB";
pub const CONTAINER_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Per-layer `n_frames x dim` frames at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTensor {
    pub layers: Vec<Array2<f32>>,
}

impl EmbeddingTensor {
    pub fn from_f64(layers: &[Array2<f64>]) -> Result<Self> {
        let t = Self {
            layers: layers.iter().map(|l| l.mapv(|v| v as f32)).collect(),
        };
        t.shape()?;
        Ok(t)
    }

    pub fn to_f64(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| l.mapv(f64::from)).collect()
    }

    /// `(n_layers, n_frames, dim)`; every layer must share one shape.
    pub fn shape(&self) -> Result<(usize, usize, usize)> {
        let first = self
            .layers
            .first()
            .ok_or_else(|| Error::EmptyInput("container with no layers".into()))?;
        let (t, d) = first.dim();
        if let Some(bad) = self.layers.iter().find(|l| l.dim() != (t, d)) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.ncols(),
                context: "container layers must share shape",
            });
        }
        Ok((self.layers.len(), t, d))
    }
}

fn header_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

pub fn encode_container(t: &EmbeddingTensor) -> Result<Vec<u8>> {
    let (l, n, d) = t.shape()?;
    let count = l
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::Format("container size overflows".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * count);
    out.extend_from_slice(CONTAINER_MAGIC);
    for v in [
        CONTAINER_VERSION,
        header_u32(l, "n_layers")?,
        header_u32(n, "n_frames")?,
        header_u32(d, "dim")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for layer in &t.layers {
        for v in layer.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_container(bytes: &[u8]) -> Result<EmbeddingTensor> {
    let mut r = Reader::new(bytes, "SPEB container");
    if r.take(4)? != CONTAINER_MAGIC {
        return Err(Error::Format("not an SPEB container (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported SPEB version {version}")));
    }
    let (l, n, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if l == 0 {
        return Err(Error::Format("SPEB container declares zero layers".into()));
    }
    let payload = l
        .checked_mul(n)
        .and_then(|x| x.checked_mul(d))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("SPEB dimensions {l}x{n}x{d} overflow")))?;
    if r.remaining() != payload {
        return Err(Error::Format(format!(
            "SPEB payload is {} bytes, header implies {payload}",
            r.remaining()
        )));
    }
    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        let mut vals = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            vals.push(r.f32()?);
        }
        layers.push(Array2::from_shape_vec((n, d), vals).expect("sized above"));
    }
    Ok(EmbeddingTensor { layers })
}

pub fn write_container(t: &EmbeddingTensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_container(t)?)
}

pub fn read_container(path: impl AsRef<Path>) -> Result<EmbeddingTensor> {
    decode_container(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EmbeddingTensor {
        EmbeddingTensor {
            layers: (0..3)
                .map(|l| Array2::from_shape_fn((4, 2), |(t, d)| (l * 100 + t * 10 + d) as f32 * 0.5 - 7.25))
                .collect(),
        }
    }

    #[test]
    fn layout_is_layer_frame_feature() {
        let bytes = encode_container(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"SPEB");
        assert_eq!(bytes.len(), 20 + 3 * 4 * 2 * 4);
        let at = |i: usize| f32::from_le_bytes(bytes[20 + 4 * i..24 + 4 * i].try_into().unwrap());
        // layer 1, frame 2, feature 1
        assert_eq!(at(8 + 2 * 2 + 1), (100 + 20 + 1) as f32 * 0.5 - 7.25);
    }

    #[test]
    fn truncation_and_trailing_bytes_fail() {
        let bytes = encode_container(&sample()).unwrap();
        for cut in [0, 3, 10, 19, 20, bytes.len() - 1] {
            assert!(matches!(decode_container(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_container(&long).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(decode_container(&v2).is_err());
    }

    #[test]
    fn huge_header_is_rejected_not_allocated() {
        let mut bytes = b"SPEB".to_vec();
        for v in [1u32, u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(decode_container(&bytes), Err(Error::Format(_))));
    }
}

//! Flat binary parameter snapshots.
//!
//! Layout: 8-byte magic, little-endian u32 header length, JSON header
//! (model config, dtype, tensor names and shapes in canonical order), then
//! the raw element data of each tensor back to back, little-endian, at the
//! dtype's width. Half-precision elements are stored as their 16 bit
//! patterns, so a round trip is bit-exact for every dtype.

use super::{tensor_shapes, ModelConfig, NnError, ParamSet};
use crate::tensor::{f16_bits_to_f32, f32_to_f16_bits, Dtype, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{self, Read, Write};

const MAGIC: &[u8; 8] = b"GRPARAM1";

#[derive(Debug, thiserror::Error)]
pub enum SerializeError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: not a parameter snapshot")]
    BadMagic,
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("header does not match model config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] NnError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: Dtype,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn write_elements(w: &mut impl Write, t: &Tensor) -> io::Result<()> {
    match t.dtype() {
        Dtype::F64 => {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::F32 => {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F16E => {
            for &v in t.data() {
                w.write_all(&f32_to_f16_bits(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_elements(r: &mut impl Read, shape: &[usize], dtype: Dtype) -> io::Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    match dtype {
        Dtype::F64 => {
            let mut buf = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
        }
        Dtype::F32 => {
            let mut buf = [0u8; 4];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f32::from_le_bytes(buf) as f64);
            }
        }
        Dtype::F16E => {
            let mut buf = [0u8; 2];
            for _ in 0..n {
                r.read_exact(&mut buf)?;
                data.push(f16_bits_to_f32(u16::from_le_bytes(buf)) as f64);
            }
        }
    }
    Ok(Tensor::from_vec(shape, dtype, data))
}

pub fn save_params(params: &ParamSet, w: &mut impl Write) -> Result<(), SerializeError> {
    let tensors = params.tensors();
    let header = Header {
        config: params.config.clone(),
        dtype: params.dtype(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, t) in tensors {
        write_elements(w, t)?;
    }
    Ok(())
}

pub fn load_params(r: &mut impl Read) -> Result<ParamSet, SerializeError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SerializeError::BadMagic);
    }
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let mut json = vec![0u8; u32::from_le_bytes(len_buf) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    header.config.validate()?;

    let expected = tensor_shapes(&header.config);
    if header.tensors.len() != expected.len() {
        return Err(SerializeError::Mismatch(format!(
            "expected {} tensors, header lists {}",
            expected.len(),
            header.tensors.len()
        )));
    }
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(SerializeError::Mismatch(format!(
                "tensor {} with shape {:?}, expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
    }

    let mut params = ParamSet::init(&header.config, header.dtype, 0)?;
    for (_, t) in params.tensors_mut() {
        *t = read_elements(r, t.shape(), header.dtype)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;
    use std::io::Cursor;

    fn round_trip(dtype: Dtype) {
        let cfg = ModelConfig::desk();
        let params = ParamSet::init(&cfg, dtype, 123).unwrap();
        let mut buf = Vec::new();
        save_params(&params, &mut buf).unwrap();
        let loaded = load_params(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(loaded.fingerprint(), params.fingerprint());
        // Write again: byte-identical.
        let mut buf2 = Vec::new();
        save_params(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn round_trip_f64() {
        round_trip(Dtype::F64);
    }

    #[test]
    fn round_trip_f32() {
        round_trip(Dtype::F32);
    }

    #[test]
    fn round_trip_f16() {
        round_trip(Dtype::F16E);
    }

    #[test]
    fn element_width_matches_dtype() {
        let cfg = ModelConfig::desk();
        for (dtype, width) in [(Dtype::F64, 8), (Dtype::F32, 4), (Dtype::F16E, 2)] {
            let params = ParamSet::init(&cfg, dtype, 1).unwrap();
            let mut buf = Vec::new();
            save_params(&params, &mut buf).unwrap();
            // Total = magic + len + header + elements * width.
            let mut cur = Cursor::new(&buf);
            let mut m = [0u8; 8];
            cur.read_exact(&mut m).unwrap();
            let mut l = [0u8; 4];
            cur.read_exact(&mut l).unwrap();
            let hlen = u32::from_le_bytes(l) as usize;
            let payload = buf.len() - 12 - hlen;
            assert_eq!(payload as u64, params.num_params() * width);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTAPARM\x00\x00\x00\x00".to_vec();
        assert!(matches!(
            load_params(&mut Cursor::new(&buf)),
            Err(SerializeError::BadMagic)
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let cfg = ModelConfig::desk();
        let params = ParamSet::init(&cfg, Dtype::F32, 9).unwrap();
        let mut buf = Vec::new();
        save_params(&params, &mut buf).unwrap();
        buf.truncate(buf.len() - 10);
        assert!(matches!(
            load_params(&mut Cursor::new(&buf)),
            Err(SerializeError::Io(_))
        ));
    }
}

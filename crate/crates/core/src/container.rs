//! Binary container for checkpoints and indexes.
//!
//! Layout: the 8-byte magic, a little-endian `u32` version, a `u64` header
//! length, a JSON header (kind, free-form metadata, array names and dims),
//! then every array's values as little-endian `f64` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Record;
use crate::encoder::{CrossEncoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KDISTIL\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArrayHeader {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, dims: &[usize], values: Vec<f64>) -> Result<()> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Format(format!(
                "array {name}: dims {dims:?} do not match {} values",
                values.len()
            )));
        }
        self.arrays.push(NamedArray {
            name: name.to_string(),
            dims: dims.to_vec(),
            values,
        });
        Ok(())
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("missing array {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|a| ArrayHeader {
                    name: a.name.clone(),
                    dims: a.dims.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let n_values: usize = self.arrays.iter().map(|a| a.values.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for a in &self.arrays {
            for v in &a.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(fail("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| fail("truncated"))?;
        if body.len() < hlen {
            return Err(fail("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Format(e.to_string()))?;
        let mut data = &body[hlen..];
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for a in header.arrays {
            let n: usize = a.dims.iter().product();
            if data.len() < 8 * n {
                return Err(Error::Format(format!("array {} truncated", a.name)));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            arrays.push(NamedArray {
                name: a.name,
                dims: a.dims,
                values,
            });
        }
        if !data.is_empty() {
            return Err(fail("trailing bytes"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    fn expect_kind(self, kind: &str) -> Result<Self> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a {kind} container, found {}",
                self.kind
            )));
        }
        Ok(self)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over a model's configuration, parameter names and values.
pub fn fingerprint(config: &EncoderConfig, params: &[(String, kd_autograd::Tensor)]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serialises"));
    for (name, t) in params {
        h.update(name.as_bytes());
        for v in t.data().iter() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

pub fn encoder_fingerprint(encoder: &Encoder) -> String {
    fingerprint(encoder.config(), &encoder.named_params())
}

/// SHA-256 over passage ids and tokens.
pub fn corpus_hash(corpus: &[Record]) -> String {
    let mut h = Sha256::new();
    for r in corpus {
        h.update(r.id.to_le_bytes());
        h.update((r.token_ids.len() as u64).to_le_bytes());
        for t in &r.token_ids {
            h.update(t.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn params_container(
    kind: &str,
    config: &EncoderConfig,
    params: &[(String, kd_autograd::Tensor)],
) -> Result<Container> {
    let meta = serde_json::to_value(config).map_err(|e| Error::Format(e.to_string()))?;
    let mut c = Container::new(kind, meta);
    for (name, t) in params {
        c.push(name, t.shape(), t.to_vec())?;
    }
    Ok(c)
}

fn checked_values(
    c: &Container,
    expected: &[(String, kd_autograd::Tensor)],
) -> Result<Vec<(String, Vec<f64>)>> {
    if c.arrays.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} arrays, configuration expects {}",
            c.arrays.len(),
            expected.len()
        )));
    }
    expected
        .iter()
        .map(|(name, t)| {
            let a = c.array(name)?;
            if a.dims != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint dims {:?}, configuration expects {:?}",
                    a.dims,
                    t.shape()
                )));
            }
            Ok((name.clone(), a.values.clone()))
        })
        .collect()
}

fn config_of(c: &Container) -> Result<EncoderConfig> {
    let cfg: EncoderConfig =
        serde_json::from_value(c.meta.clone()).map_err(|e| Error::Format(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn encoder_to_container(encoder: &Encoder) -> Result<Container> {
    params_container("encoder", encoder.config(), &encoder.named_params())
}

pub fn encoder_from_container(c: Container) -> Result<Encoder> {
    let c = c.expect_kind("encoder")?;
    let mut enc = Encoder::new(config_of(&c)?, &mut kd_autograd::RngState::new(0))?;
    let values = checked_values(&c, &enc.named_params())?;
    enc.load_values(&values)?;
    Ok(enc)
}

pub fn save_encoder(path: &Path, encoder: &Encoder) -> Result<()> {
    encoder_to_container(encoder)?.write(path)
}

pub fn load_encoder(path: &Path) -> Result<Encoder> {
    encoder_from_container(Container::read(path)?)
}

pub fn save_cross_encoder(path: &Path, model: &CrossEncoder) -> Result<()> {
    params_container("cross_encoder", model.config(), &model.named_params())?.write(path)
}

pub fn load_cross_encoder(path: &Path) -> Result<CrossEncoder> {
    let c = Container::read(path)?.expect_kind("cross_encoder")?;
    let mut model = CrossEncoder::new(config_of(&c)?, &mut kd_autograd::RngState::new(0))?;
    let values = checked_values(&c, &model.named_params())?;
    model.load_values(&values)?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use kd_autograd::RngState;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_len: 16,
            dropout_p: 0.1,
        }
    }

    #[test]
    fn bytes_round_trip() {
        let mut c = Container::new("test", serde_json::json!({"a": 1}));
        c.push(
            "x",
            &[2, 3],
            vec![1.0, -2.5, 3.0, f64::MIN_POSITIVE, 0.0, -0.0],
        )
        .unwrap();
        c.push("empty", &[0], vec![]).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        let mut bytes = c.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(c.clone().push("bad", &[2], vec![1.0]).is_err());
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let enc = Encoder::new(tiny(), &mut RngState::new(3)).unwrap();
        save_encoder(&path, &enc).unwrap();
        let back = load_encoder(&path).unwrap();
        assert_eq!(encoder_fingerprint(&enc), encoder_fingerprint(&back));
        for ((n1, a), (n2, b)) in enc.named_params().iter().zip(back.named_params()) {
            assert_eq!(n1, &n2);
            assert_eq!(a.to_vec(), b.to_vec());
        }
        let ce = CrossEncoder::new(tiny(), &mut RngState::new(4)).unwrap();
        let cpath = dir.path().join("ce.ckpt");
        save_cross_encoder(&cpath, &ce).unwrap();
        let ce2 = load_cross_encoder(&cpath).unwrap();
        assert_eq!(
            fingerprint(ce.config(), &ce.named_params()),
            fingerprint(ce2.config(), &ce2.named_params())
        );
        assert!(load_encoder(&cpath).is_err(), "kind mismatch");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let enc = Encoder::new(tiny(), &mut RngState::new(3)).unwrap();
        let mut c = encoder_to_container(&enc).unwrap();
        let mut cfg = tiny();
        cfg.d_ff = 32;
        c.meta = serde_json::to_value(&cfg).unwrap();
        assert!(matches!(encoder_from_container(c), Err(Error::Format(_))));
    }

    #[test]
    fn fingerprint_tracks_values() {
        let enc = Encoder::new(tiny(), &mut RngState::new(3)).unwrap();
        let before = encoder_fingerprint(&enc);
        enc.params()[0].data_mut()[0] += 1e-12;
        assert_ne!(before, encoder_fingerprint(&enc));
    }
}

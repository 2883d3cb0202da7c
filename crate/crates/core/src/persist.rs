//! Binary model file.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "NNDR"            4 bytes
//! version           u32 (= 1)
//! loss kind         u8  (0 tsne, 1 largevis, 2 umap)
//! created           u64 unix seconds (0 when written deterministically)
//! input_dim         u32
//! layer count       u32
//! per layer         u32 in, u32 out, u8 activation (0 leaky-relu, 1 linear), f64 slope
//! config length     u32, then that many bytes of `key = value` text
//! scaler flag       u8; if 1: input_dim f64 minima, input_dim f64 ranges
//! parameters        per layer: weights (out x in, row-major) then bias, f64
//! ```
//!
//! The file must end exactly after the last parameter.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array1, Array2};

use crate::dataio::MinMaxScaler;
use crate::error::{Error, Result};
use crate::network::{Activation, EncoderNet, Layer};
use crate::trainer::{EmbeddingModel, LossKind, TrainConfig};

pub const MAGIC: &[u8; 4] = b"NNDR";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode_model(model: &EmbeddingModel, timestamp: u64) -> Vec<u8> {
    let net = &model.net;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(model.config.loss_kind.tag());
    out.extend_from_slice(&timestamp.to_le_bytes());
    out.extend_from_slice(&(net.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(net.layers().len() as u32).to_le_bytes());
    for layer in net.layers() {
        out.extend_from_slice(&(layer.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.output_dim() as u32).to_le_bytes());
        let (tag, slope) = match layer.activation {
            Activation::LeakyRelu(s) => (0u8, s),
            Activation::Linear => (1u8, 0.0),
        };
        out.push(tag);
        out.extend_from_slice(&slope.to_le_bytes());
    }
    let cfg = model.config.to_kv_string();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    match &model.scaler {
        Some(s) => {
            out.push(1);
            for v in s.mins.iter().chain(&s.ranges) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        None => out.push(0),
    }
    for layer in net.layers() {
        for v in layer.weights.iter().chain(layer.bias.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Corrupt(format!("file ends while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt(what.into()))?, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// Decoded model and the creation timestamp stored with it.
pub fn decode_model(bytes: &[u8]) -> Result<(EmbeddingModel, u64)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::BadMagic(format!("expected \"NNDR\", found {got:?}")));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let tag = r.u8("loss kind")?;
    let loss_kind = LossKind::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("unknown loss kind tag {tag}")))?;
    let timestamp = r.u64("timestamp")?;
    let input_dim = r.u32("input dimension")? as usize;
    let n_layers = r.u32("layer count")? as usize;
    if n_layers == 0 || n_layers > 1024 {
        return Err(Error::Corrupt(format!("implausible layer count {n_layers}")));
    }
    let mut specs = Vec::with_capacity(n_layers);
    for t in 0..n_layers {
        let fan_in = r.u32("layer spec")? as usize;
        let fan_out = r.u32("layer spec")? as usize;
        let act = match r.u8("activation")? {
            0 => Activation::LeakyRelu(r.f64("slope")?),
            1 => {
                r.f64("slope")?;
                Activation::Linear
            }
            other => return Err(Error::Corrupt(format!("layer {t}: unknown activation tag {other}"))),
        };
        specs.push((fan_in, fan_out, act));
    }
    if specs[0].0 != input_dim {
        return Err(Error::Corrupt(format!(
            "input_dim {input_dim} disagrees with first layer width {}",
            specs[0].0
        )));
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|_| Error::Corrupt("config text is not UTF-8".into()))?;
    let mut config = TrainConfig::from_kv_str(cfg_text).map_err(|e| Error::Corrupt(format!("config: {e}")))?;
    config.loss_kind = loss_kind;
    let scaler = match r.u8("scaler flag")? {
        0 => None,
        1 => Some(MinMaxScaler {
            mins: r.f64s(input_dim, "scaler")?,
            ranges: r.f64s(input_dim, "scaler")?,
        }),
        other => return Err(Error::Corrupt(format!("bad scaler flag {other}"))),
    };
    let expected: usize = specs.iter().map(|&(i, o, _)| i * o + o).sum::<usize>() * 8;
    let remaining = bytes.len() - r.pos;
    if remaining != expected {
        return Err(Error::Corrupt(format!(
            "layer specs need {expected} parameter bytes, file has {remaining}"
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for &(fan_in, fan_out, activation) in &specs {
        let w = r.f64s(fan_in * fan_out, "weights")?;
        let b = r.f64s(fan_out, "bias")?;
        layers.push(Layer {
            weights: Array2::from_shape_vec((fan_out, fan_in), w).expect("sized above"),
            bias: Array1::from(b),
            activation,
        });
    }
    let net = EncoderNet::from_layers(layers).map_err(|e| Error::Corrupt(e.to_string()))?;
    Ok((EmbeddingModel { net, config, scaler }, timestamp))
}

/// Writes the model. With `config.deterministic` the timestamp is stored as 0
/// so identical runs give identical files.
pub fn save_model(model: &EmbeddingModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let timestamp = if model.config.deterministic {
        0
    } else {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs())
    };
    fs::write(path, encode_model(model, timestamp)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<EmbeddingModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_model(&bytes)?.0)
}

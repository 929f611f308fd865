//! Checkpoint byte format.
//!
//! A text manifest followed by a little-endian `f64` payload:
//!
//! ```text
//! bridgerec-ckpt-v1
//! model num_items=20 dim=128 blocks=4 max_len=50 dropout=0.2 num_clusters=0 mu=0.1 sigma=0.01 lambda=100
//! meta schedule gmax
//! tensor item_embeddings f64 20x128 0 20480
//! extra cluster.centers f64 2x64 20480 1024
//! end
//! <payload>
//! ```
//!
//! Offsets and lengths are in bytes, relative to the start of the payload.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use thiserror::Error;

use crate::model::{ConnectivityInputConfig, ModelConfig, ModelError, ParamStore, SdifRec};
use crate::tensor::Tensor;
use crate::Scalar;

pub const VERSION: &str = "bridgerec-ckpt-v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (expected header {VERSION})")]
    Header,
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("payload truncated or misaligned for {0}")]
    Payload(String),
    #[error("missing tensor {0}")]
    Missing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid metadata {0:?}")]
    Meta(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: SdifRec,
    /// Free-form key/value pairs; neither may contain whitespace.
    pub meta: Vec<(String, String)>,
    /// Tensors stored alongside the model (cluster centers, assignments).
    pub extras: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(model: SdifRec) -> Self {
        Self { model, meta: Vec::new(), extras: Vec::new() }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.into(), value)),
        }
    }

    pub fn extra(&self, name: &str) -> Option<&Tensor> {
        self.extras.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let c = self.model.config();
        let mut manifest = format!(
            "{VERSION}\nmodel num_items={} dim={} blocks={} max_len={} dropout={:?} num_clusters={} mu={:?} sigma={:?} lambda={:?}\n",
            c.num_items, c.dim, c.blocks, c.max_len, c.dropout, c.num_clusters, c.input.mu, c.input.sigma, c.input.lambda
        );
        for (k, v) in &self.meta {
            if k.is_empty() || v.is_empty() || k.contains(char::is_whitespace) || v.contains(char::is_whitespace) {
                return Err(CheckpointError::Meta(format!("{k}={v}")));
            }
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let params = self.model.params();
        let mut entries: Vec<(&str, &str, &Tensor)> =
            params.ids().map(|id| ("tensor", params.name(id), params.get(id))).collect();
        entries.extend(self.extras.iter().map(|(n, t)| ("extra", n.as_str(), t)));
        let mut offset = 0usize;
        for (kind, name, t) in &entries {
            if name.contains(char::is_whitespace) {
                return Err(CheckpointError::Meta(name.to_string()));
            }
            let shape: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let bytes = t.len() * 8;
            manifest.push_str(&format!("{kind} {name} f64 {} {offset} {bytes}\n", shape.join("x")));
            offset += bytes;
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for (_, _, t) in &entries {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut pos = 0usize;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or(CheckpointError::Header)?;
            let line = core::str::from_utf8(&rest[..nl]).map_err(|_| CheckpointError::Header)?;
            pos += nl + 1;
            if lines.is_empty() && line != VERSION {
                return Err(CheckpointError::Header);
            }
            if line == "end" {
                break;
            }
            lines.push(line);
        }
        let payload = &bytes[pos..];
        let err = |line: usize, msg: &str| CheckpointError::Manifest { line: line + 1, msg: msg.into() };

        let mut config = None;
        let mut meta = Vec::new();
        let mut tensors = Vec::new();
        let mut extras = Vec::new();
        for (i, line) in lines.iter().enumerate().skip(1) {
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("model") => config = Some(parse_config(parts).map_err(|m| err(i, &m))?),
                Some("meta") => {
                    let (Some(k), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(err(i, "meta needs a key and a value"));
                    };
                    meta.push((k.into(), v.into()));
                }
                Some(kind @ ("tensor" | "extra")) => {
                    let fields: Vec<&str> = parts.collect();
                    let [name, dtype, shape, offset, len] = fields[..] else {
                        return Err(err(i, "tensor line needs name, dtype, shape, offset, length"));
                    };
                    if dtype != "f64" {
                        return Err(err(i, "unsupported dtype"));
                    }
                    let shape: Vec<usize> =
                        shape.split('x').map(str::parse).collect::<Result<_, _>>().map_err(|_| err(i, "bad shape"))?;
                    let offset: usize = offset.parse().map_err(|_| err(i, "bad offset"))?;
                    let len: usize = len.parse().map_err(|_| err(i, "bad length"))?;
                    let count: usize = shape.iter().product();
                    let end = offset.checked_add(len).filter(|&e| e <= payload.len());
                    if count * 8 != len || end.is_none() {
                        return Err(CheckpointError::Payload(name.into()));
                    }
                    let data = payload[offset..offset + len]
                        .chunks_exact(8)
                        .map(|c| Scalar::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect();
                    let t = Tensor::new(shape, data).map_err(|_| CheckpointError::Payload(name.into()))?;
                    if kind == "tensor" {
                        tensors.push((String::from(name), t));
                    } else {
                        extras.push((String::from(name), t));
                    }
                }
                _ => return Err(err(i, "unknown record")),
            }
        }
        let config = config.ok_or_else(|| err(0, "missing model line"))?;
        let mut model = SdifRec::new(config, 0)?;
        let mut store: ParamStore = model.params().clone();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let (_, t) =
                tensors.iter().find(|(n, _)| *n == name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::Payload(name));
            }
            *store.get_mut(id) = t.clone();
        }
        if tensors.len() != store.len() {
            return Err(CheckpointError::Manifest { line: 0, msg: "unexpected extra model tensors".into() });
        }
        model.replace_params(store)?;
        Ok(Self { model, meta, extras })
    }
}

fn parse_config<'a>(parts: impl Iterator<Item = &'a str>) -> Result<ModelConfig, String> {
    let mut c = ModelConfig::new(1);
    let mut input = ConnectivityInputConfig::default();
    for kv in parts {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("expected key=value, got {kv}"))?;
        let bad = || format!("bad value for {k}");
        match k {
            "num_items" => c.num_items = v.parse().map_err(|_| bad())?,
            "dim" => c.dim = v.parse().map_err(|_| bad())?,
            "blocks" => c.blocks = v.parse().map_err(|_| bad())?,
            "max_len" => c.max_len = v.parse().map_err(|_| bad())?,
            "dropout" => c.dropout = v.parse().map_err(|_| bad())?,
            "num_clusters" => c.num_clusters = v.parse().map_err(|_| bad())?,
            "mu" => input.mu = v.parse().map_err(|_| bad())?,
            "sigma" => input.sigma = v.parse().map_err(|_| bad())?,
            "lambda" => input.lambda = v.parse().map_err(|_| bad())?,
            _ => return Err(format!("unknown model field {k}")),
        }
    }
    c.input = input;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use alloc::vec;

    fn model() -> SdifRec {
        let cfg = ModelConfig { dim: 6, blocks: 1, max_len: 4, num_clusters: 2, ..ModelConfig::new(5) };
        SdifRec::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut ck = Checkpoint::new(model());
        ck.set_meta("schedule", "vp");
        ck.set_meta("beta1", 20.0);
        ck.extras.push(("cluster.centers".into(), Tensor::matrix(2, 2, vec![1.0, 0.1, -0.3, 1e-300]).unwrap()));
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.model.config(), ck.model.config());
        for id in ck.model.params().ids() {
            assert_eq!(back.model.params().get(id), ck.model.params().get(id));
        }
        assert_eq!(back.meta("schedule"), Some("vp"));
        assert_eq!(back.meta("beta1"), Some("20"));
        assert_eq!(back.extra("cluster.centers"), ck.extra("cluster.centers"));
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert_eq!(Checkpoint::decode(b"hello\nend\n").err(), Some(CheckpointError::Header));
        let bytes = Checkpoint::new(model()).encode().unwrap();
        assert!(matches!(Checkpoint::decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Payload(_))));
        let mut ck = Checkpoint::new(model());
        ck.set_meta("bad key", "x");
        assert!(ck.encode().is_err());
    }
}

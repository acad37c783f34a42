//! Parameter files: u64 LE header length, a JSON header, then every tensor
//! as little-endian f32 in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const FORMAT: &str = "egoloc-params";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    /// What the parameters belong to, e.g. `stage1`.
    pub kind: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub tensors: Vec<TensorMeta>,
    /// Free-form training facts such as the final loss.
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub params: ParamSet,
}

/// SHA-256 hex of the canonical (sorted-key, compact) JSON of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let text = serde_json::to_string(&canonical(v))?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

fn canonical(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(m) => {
            let sorted: std::collections::BTreeMap<String, Value> = m.into_iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

impl Checkpoint {
    /// Quantizes `params` through f32 so the saved file reloads exactly.
    pub fn new<C: Serialize>(kind: &str, config: &C, params: &ParamSet, meta: serde_json::Value) -> Result<Self> {
        let mut params = params.clone();
        params.quantize_f32();
        let tensors = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| TensorMeta { name: n.clone(), shape: t.shape().to_vec() })
            .collect();
        Ok(Self {
            header: Header {
                format: FORMAT.into(),
                version: VERSION,
                kind: kind.into(),
                config: canonical(serde_json::to_value(config)?),
                config_hash: config_hash(config)?,
                tensors,
                meta,
            },
            params,
        })
    }

    pub fn config<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        serde_json::from_value(self.header.config.clone()).map_err(|e| Error::Compat(format!("checkpoint config: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let head = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + head.len() + self.params.count() * 4);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("checkpoint: {m}"));
        ensure!(bytes.len() >= 8, Data, "checkpoint: truncated header length");
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let head = bytes.get(8..8 + n).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(head).map_err(|e| Error::Data(format!("checkpoint header: {e}")))?;
        ensure!(header.format == FORMAT, Compat, "not a parameter file (format {:?})", header.format);
        ensure!(header.version == VERSION, Compat, "unsupported checkpoint version {}", header.version);
        let mut blob = &bytes[8 + n..];
        let mut params = ParamSet::new();
        for m in &header.tensors {
            let len: usize = m.shape.iter().product();
            ensure!(blob.len() >= len * 4, Data, "checkpoint: blob too short for {}", m.name);
            let data = blob[..len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            blob = &blob[len * 4..];
            params.push(m.name.clone(), Tensor::new(m.shape.clone(), data)?);
        }
        ensure!(blob.is_empty(), Data, "checkpoint: {} trailing bytes", blob.len());
        Ok(Self { header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        ensure!(self.header.kind == kind, Compat, "expected a {kind} checkpoint, found {}", self.header.kind);
        Ok(())
    }
}

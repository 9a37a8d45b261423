//! Binary container shared by checkpoints and datasets.
//!
//! Layout: the 4-byte magic `BDGX`, a little-endian `u32` header length, the
//! UTF-8 JSON header, then the tensor blobs concatenated in manifest order.
//! Blob offsets in the manifest are relative to the first blob byte. Model
//! parameters are stored as little-endian `f32`; exact data (datasets,
//! normalizer statistics) may use `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensornet::{Activation, Mlp, Tensor};

pub const MAGIC: &[u8; 4] = b"BDGX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: String,
    pub meta: Value,
    tensors: Vec<(String, Dtype, Tensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, tensor: Tensor) {
        self.tensors.push((name.into(), dtype, tensor));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, _, t)| t)
            .ok_or_else(|| Error::Format(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _, _)| n == name)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!(
                "expected a `{kind}` container, found `{}`",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut blob = Vec::new();
        for (name, dtype, t) in &self.tensors {
            let offset = blob.len();
            match dtype {
                Dtype::F32 => {
                    for &v in t.data() {
                        blob.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                Dtype::F64 => {
                    for &v in t.data() {
                        blob.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: *dtype,
                offset,
                length: blob.len() - offset,
            });
        }
        let header = Header {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header.len() + blob.len());
        out.extend_from_slice(MAGIC);
        let len = u32::try_from(header.len())
            .map_err(|_| Error::Format("header larger than 4 GiB".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_end = 8usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        let header: Header = serde_json::from_slice(&bytes[8..header_end])?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        let blob = &bytes[header_end..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let count: usize = e.shape.iter().product();
            if e.length != count * e.dtype.width() {
                return Err(Error::Format(format!(
                    "tensor `{}` length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
            let raw = blob
                .get(e.offset..e.offset + e.length)
                .ok_or_else(|| Error::Format(format!("truncated blob for `{}`", e.name)))?;
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            tensors.push((e.name, e.dtype, Tensor::new(e.shape, data)?));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Store a network under `prefix` as `f32` weights plus a meta record.
    pub fn push_mlp(&mut self, prefix: &str, net: &Mlp) {
        for (i, layer) in net.layers().iter().enumerate() {
            self.push(format!("{prefix}.w{i}"), Dtype::F32, layer.weight.clone());
            self.push(format!("{prefix}.b{i}"), Dtype::F32, layer.bias.clone());
        }
        if let Value::Object(map) = &mut self.meta {
            map.insert(
                format!("{prefix}.arch"),
                serde_json::json!({
                    "layer_sizes": net.layer_sizes(),
                    "activation": net.activation(),
                    "output_activation": net.output_activation(),
                }),
            );
        }
    }

    pub fn read_mlp(&self, prefix: &str) -> Result<Mlp> {
        #[derive(Deserialize)]
        struct Arch {
            layer_sizes: Vec<usize>,
            activation: Activation,
            output_activation: Activation,
        }
        let arch = self
            .meta
            .get(format!("{prefix}.arch"))
            .ok_or_else(|| Error::Format(format!("missing architecture for `{prefix}`")))?;
        let arch: Arch = serde_json::from_value(arch.clone())?;
        let mut net = Mlp::zeros(&arch.layer_sizes, arch.activation, arch.output_activation)?;
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            let w = self.get(&format!("{prefix}.w{i}"))?;
            let b = self.get(&format!("{prefix}.b{i}"))?;
            layer.weight.check_same_shape(w, &format!("{prefix}.w{i}"))?;
            layer.bias.check_same_shape(b, &format!("{prefix}.b{i}"))?;
            layer.weight = w.clone();
            layer.bias = b.clone();
        }
        Ok(net)
    }

    pub fn push_vec(&mut self, name: &str, values: &[f64]) {
        self.push(
            name,
            Dtype::F64,
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
        );
    }

    pub fn read_vec(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.get(name)?.data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_mixed_dtypes() {
        let mut c = Container::new("test", serde_json::json!({"x": 1}));
        c.push("a", Dtype::F64, Tensor::new(vec![2], vec![0.1, -3.5]).unwrap());
        c.push("b", Dtype::F32, Tensor::new(vec![1, 1], vec![0.25]).unwrap());
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.get("a").unwrap().data(), &[0.1, -3.5]);
        assert_eq!(back.get("b").unwrap().data(), &[0.25]);
    }

    #[test]
    fn truncated_file_rejected() {
        let mut c = Container::new("test", Value::Null);
        c.push("a", Dtype::F64, Tensor::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
    }

    #[test]
    fn version_mismatch_rejected() {
        let c = Container::new("test", Value::Null);
        let bytes = c.to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes[8..]).replace("\"version\":1", "\"version\":9");
        let mut patched = bytes[..8].to_vec();
        patched.extend_from_slice(text.as_bytes());
        assert!(matches!(
            Container::from_bytes(&patched),
            Err(Error::Version { found: 9, .. })
        ));
    }

    #[test]
    fn mlp_round_trip_within_f32_precision() {
        let net = Mlp::new(
            &[3, 16, 2],
            Activation::Tanh,
            Activation::Identity,
            &mut Rng::seed_from(5),
        )
        .unwrap();
        let mut c = Container::new("model", serde_json::json!({}));
        c.push_mlp("net", &net);
        let back = Container::from_bytes(&c.to_bytes().unwrap())
            .unwrap()
            .read_mlp("net")
            .unwrap();
        let x = Tensor::from_rows(&[[0.3, -1.0, 2.0]]).unwrap();
        let (a, b) = (net.forward(&x).unwrap(), back.forward(&x).unwrap());
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-6 * u.abs().max(1.0));
        }
    }
}

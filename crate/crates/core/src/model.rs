//! Trained state (DCF parameters plus the feature adapter) and its checkpoint file.
//!
//! Layout: `u64` little-endian header length, a JSON header naming every
//! tensor and its shape in order, then all tensors as little-endian `f32`.
//! The frozen text proxy is not stored; it is rebuilt from the seed.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dcf::{DcfConfig, DcfModel};
use crate::error::{Error, Result};
use crate::numgrad::Mat;
use crate::params::ParamStore;
use crate::trainer::{AdapterConfig, AdapterParams};

pub const CHECKPOINT_VERSION: &str = "abound-checkpoint/1";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dcf: DcfModel,
    pub adapter: AdapterParams,
    pub adapter_config: AdapterConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: String,
    seed: u64,
    classes: Vec<String>,
    dcf: DcfConfig,
    adapter: AdapterConfig,
    tensors: Vec<TensorEntry>,
}

impl Model {
    pub fn new(dcf_config: DcfConfig, adapter_config: AdapterConfig, classes: Vec<String>, seed: u64) -> Result<Self> {
        adapter_config.validate()?;
        let dcf = DcfModel::new(dcf_config, classes, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(5);
        let adapter = AdapterParams::new(dcf.config.dim, &adapter_config, &mut rng);
        Ok(Self {
            dcf,
            adapter,
            adapter_config,
            seed,
        })
    }

    fn tensors(&self) -> Vec<(&str, &Mat)> {
        let mut out: Vec<(&str, &Mat)> = self.dcf.params.iter().collect();
        out.push(("adapter.a", &self.adapter.a));
        out.push(("adapter.b", &self.adapter.b));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.tensors();
        let header = Header {
            version: CHECKPOINT_VERSION.to_string(),
            seed: self.seed,
            classes: self.dcf.classes.clone(),
            dcf: self.dcf.config.clone(),
            adapter: self.adapter_config,
            tensors: tensors
                .iter()
                .map(|(n, m)| TensorEntry {
                    name: n.to_string(),
                    shape: [m.rows, m.cols],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + 4 * tensors.iter().map(|t| t.1.len()).sum::<usize>());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, m) in tensors {
            for &x in &m.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let bad = |msg: &str| Error::format(file, msg);
        let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(|| bad("truncated header length"))?.try_into().unwrap();
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header length overflows"))?;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|source| Error::Json {
            file: file.to_string(),
            source,
        })?;
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::VersionError {
                found: header.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut body = &bytes[8 + hlen..];
        let expected: usize = header.tensors.iter().map(|t| t.shape[0] * t.shape[1] * 4).sum();
        if body.len() != expected {
            return Err(bad(&format!("expected {expected} tensor bytes, found {}", body.len())));
        }
        let mut mats = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n = t.shape[0] * t.shape[1];
            let (chunk, rest) = body.split_at(4 * n);
            body = rest;
            let data = chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            mats.push((t.name.clone(), Mat::from_vec(t.shape[0], t.shape[1], data)));
        }

        let b = mats.pop().filter(|m| m.0 == "adapter.b").ok_or_else(|| bad("missing adapter.b"))?;
        let a = mats.pop().filter(|m| m.0 == "adapter.a").ok_or_else(|| bad("missing adapter.a"))?;
        header.adapter.validate()?;
        if a.1.shape() != (header.dcf.dim, header.adapter.rank) || b.1.shape() != (header.adapter.rank, header.dcf.dim) {
            return Err(bad("adapter shapes do not match the header"));
        }
        let mut params = ParamStore::new();
        for (name, m) in mats {
            params.push(name, m);
        }
        let dcf = DcfModel::from_parts(header.dcf, header.classes, header.seed, params)
            .map_err(|e| match e {
                Error::FormatError { msg, .. } => bad(&msg),
                other => other,
            })?;
        Ok(Self {
            dcf,
            adapter: AdapterParams {
                a: a.1,
                b: b.1,
                scaling: header.adapter.scaling(),
                dropout: header.adapter.dropout,
            },
            adapter_config: header.adapter,
            seed: header.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Every tensor rounded through `f32`, matching a save/load round trip.
    pub fn rounded(&self) -> Self {
        let mut m = self.clone();
        let r = |x: &mut Mat| x.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        m.dcf.params.values_mut().iter_mut().for_each(r);
        r(&mut m.adapter.a);
        r(&mut m.adapter.b);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        let cfg = DcfConfig {
            dim: 8,
            shared_tokens: 2,
            class_tokens: 1,
            experts: 2,
            depth: 3,
            modulator_hidden: 4,
            ..DcfConfig::default()
        };
        Model::new(cfg, AdapterConfig::default(), vec!["a".into(), "b".into()], 4).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = tiny();
        let bytes = m.to_bytes();
        let back = Model::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, m.rounded());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = tiny();
        let mut bytes = m.to_bytes();
        bytes.pop();
        assert!(matches!(Model::from_bytes(&bytes, "x"), Err(Error::FormatError { .. })));
        let mut bytes = m.to_bytes();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(bytes[8..8 + hlen].to_vec()).unwrap();
        let swapped = header.replace("abound-checkpoint/1", "abound-checkpoint/9");
        bytes.splice(8..8 + hlen, swapped.into_bytes());
        assert!(matches!(Model::from_bytes(&bytes, "x"), Err(Error::VersionError { .. })));
    }

    #[test]
    fn proxy_is_rebuilt_from_the_seed() {
        let m = tiny();
        let back = Model::from_bytes(&m.to_bytes(), "mem").unwrap();
        assert_eq!(back.dcf.proxy, m.dcf.proxy);
    }
}

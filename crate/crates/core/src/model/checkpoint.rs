//! Self-describing binary checkpoint container.
//!
//! Layout: magic `LSCP`, format version (u32 LE), header length (u64 LE),
//! JSON header, then the raw f64 little-endian array payload. The header
//! carries step, configs, RNG state, optimizer metadata, and an array
//! table (name, shape, byte offset, length) so files are readable without
//! this crate. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, RecurrenceSpec};
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LSCP";
const VERSION: u32 = 1;

pub type Params = BTreeMap<String, Tensor>;

/// First and second Adam moment estimates plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl AdamMoments {
    pub fn zeros_like(params: &Params) -> Self {
        let zero = |p: &Params| {
            p.iter()
                .map(|(k, t)| {
                    let (r, c) = t.dims2();
                    (k.clone(), Tensor::zeros(r, c))
                })
                .collect()
        };
        AdamMoments {
            t: 0,
            m: zero(params),
            v: zero(params),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub model_config: ModelConfig,
    pub recurrence: RecurrenceSpec,
    pub params: Params,
    pub moments: Option<AdamMoments>,
    pub rng: RngState,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    step: u64,
    model: ModelConfig,
    recurrence: RecurrenceSpec,
    rng: RngState,
    config_hash: String,
    adam_t: Option<u64>,
    arrays: Vec<ArrayEntry>,
}

fn push_arrays(
    prefix: &str,
    params: &Params,
    entries: &mut Vec<ArrayEntry>,
    payload: &mut Vec<u8>,
) {
    for (name, t) in params {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ArrayEntry {
            name: format!("{prefix}{name}"),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
    }
}

fn take_arrays(
    prefix: &str,
    entries: &[ArrayEntry],
    payload: &[u8],
) -> Result<Params> {
    let mut out = Params::new();
    for e in entries.iter().filter(|e| e.name.starts_with(prefix)) {
        let start = e.offset as usize;
        let end = start + e.len as usize * 8;
        let bytes = payload
            .get(start..end)
            .ok_or_else(|| Error::Checkpoint(format!("array {} out of bounds", e.name)))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Checkpoint(format!("array {}: {err}", e.name)))?;
        out.insert(e.name[prefix.len()..].to_string(), t);
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        push_arrays("param.", &self.params, &mut entries, &mut payload);
        if let Some(m) = &self.moments {
            push_arrays("adam_m.", &m.m, &mut entries, &mut payload);
            push_arrays("adam_v.", &m.v, &mut entries, &mut payload);
        }
        let header = Header {
            step: self.step,
            model: self.model_config.clone(),
            recurrence: self.recurrence.clone(),
            rng: self.rng.clone(),
            config_hash: self.config_hash.clone(),
            adam_t: self.moments.as_ref().map(|m| m.t),
            arrays: entries,
        };
        let header_bytes = serde_json::to_vec(&header)
            .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

        let mut f = std::fs::File::create(path)?;
        f.write_all(MAGIC)?;
        f.write_all(&VERSION.to_le_bytes())?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut v4 = [0u8; 4];
        f.read_exact(&mut v4)?;
        let version = u32::from_le_bytes(v4);
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut l8 = [0u8; 8];
        f.read_exact(&mut l8)?;
        let header_len = u64::from_le_bytes(l8) as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let mut payload = Vec::new();
        f.read_to_end(&mut payload)?;

        let params = take_arrays("param.", &header.arrays, &payload)?;
        if params.is_empty() {
            return Err(Error::Checkpoint("checkpoint holds no parameters".into()));
        }
        let moments = match header.adam_t {
            Some(t) => {
                let m = take_arrays("adam_m.", &header.arrays, &payload)?;
                let v = take_arrays("adam_v.", &header.arrays, &payload)?;
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Checkpoint(
                        "optimizer moments do not cover all parameters".into(),
                    ));
                }
                Some(AdamMoments { t, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            step: header.step,
            model_config: header.model,
            recurrence: header.recurrence,
            params,
            moments,
            rng: header.rng,
            config_hash: header.config_hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_params() -> Params {
        let mut rng = crate::rng::seeded(7);
        let mut p = Params::new();
        p.insert(
            "w".into(),
            Tensor::matrix(3, 4, (0..12).map(|_| rng.gen::<f64>()).collect()).unwrap(),
        );
        p.insert(
            "b".into(),
            Tensor::matrix(1, 4, (0..4).map(|_| rng.gen::<f64>()).collect()).unwrap(),
        );
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lsc");
        let params = small_params();
        let ck = Checkpoint {
            step: 42,
            model_config: ModelConfig::desk(),
            recurrence: RecurrenceSpec::desk_paired(),
            moments: Some(AdamMoments::zeros_like(&params)),
            params,
            rng: RngState::capture(&crate::rng::seeded(3)),
            config_hash: "abc123".into(),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, back);
        // Same content twice -> identical bytes on disk.
        let path2 = dir.path().join("y.lsc");
        ck.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.lsc");
        let params = small_params();
        let ck = Checkpoint {
            step: 1,
            model_config: ModelConfig::desk(),
            recurrence: RecurrenceSpec::desk_paired(),
            moments: None,
            params,
            rng: RngState::capture(&crate::rng::seeded(3)),
            config_hash: String::new(),
        };
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }
}

//! Binary checkpoint format.
//!
//! ```text
//! GPQ1\n
//! version=1
//! seed=<u64>
//! iteration=<u64>
//! model.<field>=<value>          (every ModelConfig field)
//! meta.<key>=<value>             (free-form run metadata)
//! alive=<i,j,...>
//! retired=<i,j,...>
//! array=<name>:<d0>x<d1>...      (one per tensor, payload order)
//! end
//! <payload: little-endian f32 arrays, concatenated>
//! ```
//!
//! The last array, `bank.retired_points`, holds the final position of each
//! pruned reference point in `retired` order.

use crate::bench::write_atomic;
use crate::detector::{Detector, ModelConfig, QueryBank, RetiredQuery};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"GPQ1";
pub const VERSION: u32 = 1;
const RETIRED: &str = "bank.retired_points";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Detector,
    pub seed: u64,
    pub iteration: u64,
    /// Extra `key=value` metadata, kept in order.
    pub meta: Vec<(String, String)>,
}

fn model_fields(c: &ModelConfig) -> [(&'static str, usize); 8] {
    [
        ("num_queries", c.num_queries),
        ("grid", c.grid),
        ("embed_dim", c.embed_dim),
        ("heads", c.heads),
        ("ffn_dim", c.ffn_dim),
        ("layers", c.layers),
        ("num_classes", c.num_classes),
        ("frequencies", c.frequencies),
    ]
}

fn join(v: impl IntoIterator<Item = usize>) -> String {
    v.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn new(model: Detector, seed: u64, iteration: u64) -> Self {
        Checkpoint {
            model,
            seed,
            iteration,
            meta: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from("\n");
        writeln!(header, "version={VERSION}").unwrap();
        writeln!(header, "seed={}", self.seed).unwrap();
        writeln!(header, "iteration={}", self.iteration).unwrap();
        for (k, v) in model_fields(&self.model.config) {
            writeln!(header, "model.{k}={v}").unwrap();
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::InvalidArgument(format!("metadata entry `{k}` cannot be stored")));
            }
            writeln!(header, "meta.{k}={v}").unwrap();
        }
        let bank = &self.model.bank;
        writeln!(header, "alive={}", join(bank.alive().iter().copied())).unwrap();
        writeln!(header, "retired={}", join(bank.retired().iter().map(|r| r.index))).unwrap();
        let mut payload = Vec::new();
        let mut push = |header: &mut String, name: &str, t: &Tensor| {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(header, "array={name}:{}", dims.join("x")).unwrap();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        self.model.visit(&mut |name, t| push(&mut header, &name, t));
        let retired: Vec<f32> = bank.retired().iter().flat_map(|r| r.point).collect();
        push(&mut header, RETIRED, &Tensor::new(vec![bank.retired().len(), 2], retired)?);
        header.push_str("end\n");
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let end = rest
            .windows(5)
            .position(|w| w == b"\nend\n")
            .ok_or_else(|| Error::Corrupt("header has no end marker".into()))?;
        let header = std::str::from_utf8(&rest[..end + 1]).map_err(|_| Error::Corrupt("header is not UTF-8".into()))?;
        let payload = &rest[end + 5..];

        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        let mut meta = Vec::new();
        let mut arrays: Vec<(String, Vec<usize>)> = Vec::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Corrupt(format!("header line `{line}`")))?;
            if k == "array" {
                let (name, dims) = v
                    .split_once(':')
                    .ok_or_else(|| Error::Corrupt(format!("array entry `{v}`")))?;
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Corrupt(format!("array shape `{dims}`")))?;
                arrays.push((name.to_string(), shape));
            } else if let Some(key) = k.strip_prefix("meta.") {
                meta.push((key.to_string(), v.to_string()));
            } else {
                fields.insert(k, v);
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Corrupt(format!("missing `{k}`")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| Error::Corrupt(format!("bad `{k}`"))) };
        let version = num("version")?;
        if version != u64::from(VERSION) {
            return Err(Error::UnsupportedVersion(u32::try_from(version).unwrap_or(u32::MAX)));
        }

        let expected: usize = arrays.iter().map(|(_, s)| 4 * s.iter().product::<usize>()).sum();
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Corrupt(format!("{} trailing payload bytes", payload.len() - expected)));
        }

        let mut config = ModelConfig::default();
        for (k, _) in model_fields(&config) {
            let v = num(&format!("model.{k}"))? as usize;
            match k {
                "num_queries" => config.num_queries = v,
                "grid" => config.grid = v,
                "embed_dim" => config.embed_dim = v,
                "heads" => config.heads = v,
                "ffn_dim" => config.ffn_dim = v,
                "layers" => config.layers = v,
                "num_classes" => config.num_classes = v,
                _ => config.frequencies = v,
            }
        }
        config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
        let list = |k: &str| -> Result<Vec<usize>> {
            let v = get(k)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|s| s.parse().map_err(|_| Error::Corrupt(format!("bad index in `{k}`"))))
                .collect()
        };
        let alive = list("alive")?;
        let retired_idx = list("retired")?;

        let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut offset = 0;
        for (name, shape) in arrays {
            let n: usize = shape.iter().product();
            let data = payload[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset += 4 * n;
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| Error::Corrupt(format!("missing array `{name}`")));
        let points = take(RETIRED)?;
        if points.shape() != [retired_idx.len(), 2] {
            return Err(Error::Corrupt("retired point count".into()));
        }
        let retired = retired_idx
            .iter()
            .enumerate()
            .map(|(i, &index)| RetiredQuery {
                index,
                point: [points.at(i, 0), points.at(i, 1)],
            })
            .collect();

        let mut model = Detector::new(config, 0)?;
        let ref_points = take("bank.ref_points")?;
        model.bank = QueryBank::from_parts(
            ref_points,
            model.bank.embed.clone(),
            alive,
            config.num_queries,
            retired,
            config.frequencies,
        )
        .map_err(|e| Error::Corrupt(e.to_string()))?;
        let mut err = None;
        model.visit_mut(&mut |name, t| {
            if name == "bank.ref_points" {
                return;
            }
            match take(&name) {
                Ok(v) if v.shape() == t.shape() => *t = v,
                Ok(v) => {
                    err.get_or_insert(Error::Corrupt(format!("array `{name}` has shape {:?}", v.shape())));
                }
                Err(e) => {
                    err.get_or_insert(e);
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Corrupt(format!("unknown array `{extra}`")));
        }
        Ok(Checkpoint {
            model,
            seed: num("seed")?,
            iteration: num("iteration")?,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

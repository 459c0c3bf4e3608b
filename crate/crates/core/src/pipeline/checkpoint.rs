//! Binary checkpoint container.
//!
//! Layout, all integers little-endian `u32`:
//! `"SDCN"`, version, hyperparameter block length, `key=value\n` lines,
//! tensor count, then per tensor: name length, name, rank, extents, `f32` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Value};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, ParamSet, Tensor};
use crate::objective::STAGES;
use crate::refiner::Backbone;

pub const MAGIC: &[u8; 4] = b"SDCN";
pub const FORMAT_VERSION: u32 = 1;

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    /// Frozen backbone weights, stored so that externally supplied weights
    /// survive a round trip.
    pub backbone: ParamSet<f32>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, adam: Option<&AdamState<f32>>) -> Self {
        let optimizer = adam.map(|a| {
            let pick = |ts: &[Tensor<f32>]| {
                let mut set = ParamSet::new();
                for (name, t) in model.params.names().zip(ts) {
                    set.insert(name, t.clone());
                }
                set
            };
            OptimizerState {
                t: a.t,
                m: pick(&a.m),
                v: pick(&a.v),
            }
        });
        Self {
            config: model.config.clone(),
            params: model.params.clone(),
            backbone: model.backbone.weights().clone(),
            optimizer,
        }
    }

    /// Rebuild the model, checking every expected tensor against the config.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let template = Model::<f32>::new(self.config.clone())?;
        let mut params = ParamSet::new();
        for (name, t) in template.params.iter() {
            let stored = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` missing")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config implies {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name, stored.clone());
        }
        if let Some(extra) = self.params.names().find(|n| template.params.get(n).is_none()) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        let backbone = Backbone::with_weights(self.config.backbone.clone(), self.backbone.clone())?;
        Ok(Model {
            config: self.config.clone(),
            params,
            backbone,
        })
    }

    /// Adam state aligned with the model's parameter order.
    pub fn adam_state(&self, config: AdamConfig) -> Option<AdamState<f32>> {
        let o = self.optimizer.as_ref()?;
        let m = self.params.names().map(|n| o.m.get(n).cloned()).collect::<Option<Vec<_>>>()?;
        let v = self.params.names().map(|n| o.v.get(n).cloned()).collect::<Option<Vec<_>>>()?;
        Some(AdamState { config, m, v, t: o.t })
    }

    fn hyperparameters(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let value = serde_json::to_value(&self.config).expect("config serializes");
        flatten("", &value, &mut out);
        out.push(("stage_count".into(), STAGES.to_string()));
        if let Some(o) = &self.optimizer {
            out.push(("adam.t".into(), o.t.to_string()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_u32(&mut buf, FORMAT_VERSION);
        let block: String = self
            .hyperparameters()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_u32(&mut buf, block.len() as u32);
        buf.extend_from_slice(block.as_bytes());

        let mut tensors: Vec<(String, &Tensor<f32>)> = Vec::new();
        tensors.extend(self.params.iter().map(|(n, t)| (n.to_owned(), t)));
        tensors.extend(self.backbone.iter().map(|(n, t)| (n.to_owned(), t)));
        if let Some(o) = &self.optimizer {
            tensors.extend(o.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            tensors.extend(o.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        put_u32(&mut buf, tensors.len() as u32);
        for (name, t) in tensors {
            put_u32(&mut buf, name.len() as u32);
            buf.extend_from_slice(name.as_bytes());
            put_u32(&mut buf, t.rank() as u32);
            for &d in t.shape() {
                put_u32(&mut buf, d as u32);
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (hyper, tensors) = parse(bytes)?;
        let mut optimizer_t = None;
        let mut flat = Vec::new();
        for (k, v) in hyper {
            match k.as_str() {
                "stage_count" => {
                    if v != STAGES.to_string() {
                        return Err(Error::Checkpoint(format!("stage_count {v}, expected {STAGES}")));
                    }
                }
                "adam.t" => {
                    optimizer_t = Some(
                        v.parse()
                            .map_err(|_| Error::Checkpoint(format!("bad adam.t `{v}`")))?,
                    )
                }
                _ => flat.push((k, v)),
            }
        }
        let config: ModelConfig = serde_json::from_value(unflatten(&flat)?)
            .map_err(|e| Error::Checkpoint(format!("hyperparameters: {e}")))?;

        let (mut params, mut backbone) = (ParamSet::new(), ParamSet::new());
        let (mut m, mut v) = (ParamSet::new(), ParamSet::new());
        for (name, t) in tensors {
            if let Some(n) = name.strip_prefix(ADAM_M) {
                m.insert(n, t);
            } else if let Some(n) = name.strip_prefix(ADAM_V) {
                v.insert(n, t);
            } else if name.starts_with("backbone.") {
                backbone.insert(name, t);
            } else {
                params.insert(name, t);
            }
        }
        let optimizer = optimizer_t.map(|t| OptimizerState { t, m, v });
        Ok(Self {
            config,
            params,
            backbone,
            optimizer,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

/// Every tensor in a container file, e.g. to override backbone weights.
pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, tensors) = parse(&bytes)?;
    let mut set = ParamSet::new();
    for (n, t) in tensors {
        set.insert(n, t);
    }
    Ok(set)
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        leaf => out.push((prefix.to_owned(), leaf.to_string())),
    }
}

fn unflatten(pairs: &[(String, String)]) -> Result<Value> {
    let mut root = Map::new();
    for (key, raw) in pairs {
        let leaf: Value = serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("hyperparameter `{key}`: {e}")))?;
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| Error::Checkpoint(format!("hyperparameter `{key}` conflicts")))?;
        }
        node.insert(parts[parts.len() - 1].to_owned(), leaf);
    }
    Ok(Value::Object(root))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

type Parsed = (BTreeMap<String, String>, Vec<(String, Tensor<f32>)>);

fn parse(bytes: &[u8]) -> Result<Parsed> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("bad magic, not a checkpoint file".into()));
    }
    let version = r.u32().ok_or_else(|| bad("truncated header".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, this build reads {FORMAT_VERSION}")));
    }
    let len = r.u32().ok_or_else(|| bad("truncated header".into()))? as usize;
    let block = r.take(len).ok_or_else(|| bad("truncated hyperparameter block".into()))?;
    let block = std::str::from_utf8(block).map_err(|_| bad("hyperparameter block is not UTF-8".into()))?;
    let mut hyper = BTreeMap::new();
    for line in block.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed hyperparameter line `{line}`")))?;
        hyper.insert(k.to_owned(), v.to_owned());
    }

    let count = r.u32().ok_or_else(|| bad("truncated before tensor table".into()))? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        let after = || match tensors.last() {
            Some((n, _)) => format!("tensor {} of {count} (after `{n}`) is missing", i + 1),
            None => format!("tensor 1 of {count} is missing"),
        };
        let name_len = r.u32().ok_or_else(|| bad(after()))? as usize;
        let name = r.take(name_len).ok_or_else(|| bad(after()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad(format!("tensor {} has a non-UTF-8 name", i + 1)))?;
        let truncated = || bad(format!("tensor `{name}` is truncated"));
        let rank = r.u32().ok_or_else(truncated)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32().ok_or_else(truncated)? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4).ok_or_else(truncated)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes after tensor table", bytes.len() - r.pos)));
    }
    Ok((hyper, tensors))
}

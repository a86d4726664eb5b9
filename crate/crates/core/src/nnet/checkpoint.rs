//! "CDP1" checkpoint files.
//!
//! ```text
//! "CDP1"
//! u32 len, model config text (key = value)
//! u32 len, metadata text (key = value)
//! u32 record count
//! per record: u16 name len, name, u8 kind, u32 len, CDT1 tensor
//! ```
//! Record kinds: 0 encoder, 1 decoder, 2 head, 3 Adam first moment,
//! 4 Adam second moment. All integers little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::model::{layout_shapes, Model, ModelConfig};
use super::params::{ParamSet, Partition};
use crate::cdt::{self, StoredTensor};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CDP1";

const KIND_ADAM_M: u8 = 3;
const KIND_ADAM_V: u8 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub adam: Option<AdamState>,
    /// Free-form provenance (mask parameters, parent digest, epoch, ...).
    pub meta: IndexMap<String, String>,
}

fn partition_kind(p: Partition) -> u8 {
    match p {
        Partition::Encoder => 0,
        Partition::Decoder => 1,
        Partition::Head => 2,
    }
}

fn kind_partition(k: u8, offset: usize) -> Result<Partition> {
    match k {
        0 => Ok(Partition::Encoder),
        1 => Ok(Partition::Decoder),
        2 => Ok(Partition::Head),
        other => Err(Error::format(offset, format!("unknown record kind {other}"))),
    }
}

/// Records hold at most 4 dims; conv kernels fold their trailing dims.
fn fold(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    if s.len() <= 4 {
        return t.clone();
    }
    let shape = [s[0], s[1], s[2], s[3..].iter().product()];
    t.clone().reshape(&shape).expect("same element count")
}

fn unfold(cfg: &ModelConfig, set: ParamSet<f32>) -> Result<ParamSet<f32>> {
    let shapes: HashMap<String, Vec<usize>> = layout_shapes(cfg).into_iter().collect();
    let mut out = ParamSet::new();
    for (name, e) in set.iter() {
        let mut t = e.tensor.clone();
        if let Some(shape) = shapes.get(name) {
            if t.shape() != shape.as_slice() && t.len() == shape.iter().product::<usize>() {
                t = t.reshape(shape)?;
            }
        }
        out.insert(name, t, e.partition);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.pos, format!("truncated {what}"))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_model(model: &Model<f32>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            adam: None,
            meta: IndexMap::new(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let cfg = self.config.to_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::Data(format!("metadata entry {k:?} cannot be stored")));
            }
            meta.push_str(&format!("{k} = {v}\n"));
        }
        if let Some(adam) = &self.adam {
            meta.push_str(&format!("adam_step = {}\n", adam.step));
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());

        let mut records: Vec<(&str, u8, &Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, e)| (n, partition_kind(e.partition), &e.tensor))
            .collect();
        if let Some(adam) = &self.adam {
            records.extend(adam.m.iter().map(|(n, e)| (n, KIND_ADAM_M, &e.tensor)));
            records.extend(adam.v.iter().map(|(n, e)| (n, KIND_ADAM_V, &e.tensor)));
        }
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, kind, tensor) in records {
            let name_len =
                u16::try_from(name.len()).map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(kind);
            let body = cdt::encode(&StoredTensor::Real32(fold(tensor)))?;
            out.extend_from_slice(&(body.len() as u32).to_le_bytes());
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let config = ModelConfig::from_text(&cur.text("config")?)?;
        let mut meta = IndexMap::new();
        let mut adam_step = None;
        let meta_at = cur.pos;
        let meta_text = cur.text("metadata")?;
        let kv = KeyValues::parse(&meta_text).map_err(|e| Error::format(meta_at, e.to_string()))?;
        let mut kv = kv;
        if let Some(step) = kv.take_parsed::<u64>("adam_step")? {
            adam_step = Some(step);
        }
        // everything else is opaque provenance
        for line in meta_text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                let k = k.trim();
                if k != "adam_step" {
                    meta.insert(k.to_string(), v.trim().to_string());
                }
            }
        }

        let count = cur.u32("record count")? as usize;
        let mut params = ParamSet::new();
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for _ in 0..count {
            let name_len = cur.u16("record name length")? as usize;
            let name_at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len, "record name")?)
                .map_err(|_| Error::format(name_at, "record name is not UTF-8"))?
                .to_string();
            let kind_at = cur.pos;
            let kind = cur.u8("record kind")?;
            let len = cur.u32("record length")? as usize;
            let body_at = cur.pos;
            let body = cur.take(len, "record tensor")?;
            let tensor = cdt::decode(body)
                .map_err(|e| match e {
                    Error::Format { offset, msg } => Error::format(body_at + offset, msg),
                    other => other,
                })?
                .into_real32()?;
            match kind {
                KIND_ADAM_M | KIND_ADAM_V => {
                    let partition = params
                        .get(&name)
                        .map(|e| e.partition)
                        .ok_or_else(|| Error::format(name_at, format!("optimizer state for unknown {name}")))?;
                    let target = if kind == KIND_ADAM_M { &mut m } else { &mut v };
                    target.insert(&name, tensor, partition);
                }
                k => {
                    if params.get(&name).is_some() {
                        return Err(Error::format(name_at, format!("duplicate parameter {name}")));
                    }
                    params.insert(&name, tensor, kind_partition(k, kind_at)?);
                }
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::format(cur.pos, "trailing bytes after records"));
        }
        let params = unfold(&config, params)?;
        let adam = match adam_step {
            Some(step) => Some(AdamState {
                step,
                m: unfold(&config, m)?,
                v: unfold(&config, v)?,
            }),
            None if m.is_empty() && v.is_empty() => None,
            None => return Err(Error::format(meta_at, "optimizer moments without adam_step")),
        };
        let ckpt = Self {
            config,
            params,
            adam,
            meta,
        };
        ckpt.model()?; // layout check
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Digest of the serialized checkpoint.
    pub fn digest(&self) -> u64 {
        cdt::digest64(&self.to_bytes().expect("serializable checkpoint"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;

    fn small() -> Checkpoint {
        let cfg = ModelConfig {
            channels: 4,
            encoder_depth: 1,
            decoder_depth: 1,
            cr: 2,
            height: 4,
            width: 4,
            ..ModelConfig::default()
        };
        let model = Model::<f32>::build(cfg, &mut derive_stream(1, "init")).unwrap();
        let mut ck = Checkpoint::from_model(&model);
        ck.meta.insert("mask_seed".into(), "7".into());
        ck
    }

    #[test]
    fn round_trip_bit_exact() {
        let mut ck = small();
        let mut m = ck.params.zeros_like();
        m.at_mut(0).tensor.data_mut()[0] = 0.25;
        ck.adam = Some(AdamState {
            step: 12,
            m,
            v: ck.params.zeros_like(),
        });
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = small().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }
}

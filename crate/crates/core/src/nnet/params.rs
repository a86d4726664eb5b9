use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which part of the network a tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Partition {
    Encoder,
    Decoder,
    Head,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Encoder, Partition::Decoder, Partition::Head];

    pub fn as_str(&self) -> &'static str {
        match self {
            Partition::Encoder => "encoder",
            Partition::Decoder => "decoder",
            Partition::Head => "head",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Partition::Encoder),
            "decoder" => Ok(Partition::Decoder),
            "head" => Ok(Partition::Head),
            other => Err(Error::Config(format!("unknown partition tag {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub partition: Partition,
}

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor; names must be unique.
    pub fn insert(&mut self, name: &str, tensor: Tensor<T>, partition: Partition) -> usize {
        let (idx, old) = self
            .entries
            .insert_full(name.to_string(), ParamEntry { tensor, partition });
        assert!(old.is_none(), "duplicate parameter name {name}");
        idx
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn at(&self, idx: usize) -> (&str, &ParamEntry<T>) {
        let (k, v) = self.entries.get_index(idx).expect("parameter index");
        (k.as_str(), v)
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut ParamEntry<T> {
        self.entries.get_index_mut(idx).expect("parameter index").1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove_partition(&mut self, partition: Partition) {
        self.entries.retain(|_, e| e.partition != partition);
    }

    /// Same names and partitions, all-zero tensors.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: Tensor::zeros(e.tensor.shape()),
                            partition: e.partition,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            partition: e.partition,
                        },
                    )
                })
                .collect(),
        }
    }

    /// SHA-256-derived digest over names and exact values of the
    /// selected partition (all tensors when `None`).
    pub fn digest(&self, partition: Option<Partition>) -> u64 {
        let mut h = Sha256::new();
        for (name, e) in self.iter() {
            if partition.is_some_and(|p| p != e.partition) {
                continue;
            }
            h.update(name.as_bytes());
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        let full = h.finalize();
        u64::from_le_bytes(full[..8].try_into().unwrap())
    }

    /// All values flattened in parameter order.
    pub fn flat(&self) -> Vec<T> {
        self.entries
            .values()
            .flat_map(|e| e.tensor.data().iter().copied())
            .collect()
    }
}

//! Named parameter storage with stable ordering.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Parameters in registration order, addressable by canonical dotted names
/// such as `encoder.stage3.block0.attn.qkv.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.len())
            .sum()
    }

    /// Scalar counts grouped by the first `depth` dot-separated name segments.
    pub fn count_report(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (_, name, t) in self.iter() {
            let key: Vec<&str> = name.split('.').take(depth).collect();
            *out.entry(key.join(".")).or_insert(0) += t.len();
        }
        out
    }

    /// FNV-1a over names, shapes and the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (_, name, t) in self.iter() {
            feed(name.as_bytes());
            feed(&(t.rows() as u64).to_le_bytes());
            feed(&(t.cols() as u64).to_le_bytes());
            for v in t.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`]. Parameters that did
/// not take part in a computation have no entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Grads {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn set(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    /// Value of one gradient entry, zero for absent gradients.
    pub fn entry(&self, id: ParamId, index: usize) -> f64 {
        self.get(id).map_or(0.0, |t| t.data()[index])
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (Some(m), Some(t)) => m.add_assign(t),
                (None, Some(t)) => *mine = Some(t.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    /// Drops gradients of parameters for which `keep` is false.
    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    /// Ids with a gradient present.
    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn global_norm(&self) -> f64 {
        libm::sqrt(
            self.grads
                .iter()
                .flatten()
                .flat_map(|t| t.data())
                .map(|v| v * v)
                .sum::<f64>(),
        )
    }
}

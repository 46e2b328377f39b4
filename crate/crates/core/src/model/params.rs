use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which side of the bundle owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Target embedding and pre-softmax projection, used by both models.
    Shared,
    Nmt,
    Lm,
}

impl ParamGroup {
    pub fn of_name(name: &str) -> Self {
        if name.starts_with("shared.") {
            Self::Shared
        } else if name.starts_with("lm.") {
            Self::Lm
        } else {
            Self::Nmt
        }
    }
}

/// Named parameter tensors in registration order. Each parameter has exactly
/// one storage slot; models refer to it by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub(crate) fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {}", name);
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        ParamGroup::of_name(&self.names[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every
    /// parameter selected by `filter`.
    pub fn checksum(&self, filter: impl Fn(ParamGroup) -> bool) -> String {
        let mut h = Sha256::new();
        for (id, name, value) in self.iter() {
            if !filter(self.group(id)) {
                continue;
            }
            h.update(name.as_bytes());
            for &d in value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Which parameters become gradient-carrying leaves in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    /// Shared tables plus NMT-only parameters.
    NmtSide,
}

impl Trainable {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            Self::None => false,
            Self::All => true,
            Self::NmtSide => group != ParamGroup::Lm,
        }
    }
}

/// Lazily materialises parameters as graph leaves, once per graph.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    trainable: Trainable,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: Trainable) -> Self {
        Self { store, vars: vec![None; store.len()], trainable }
    }

    pub fn var(&mut self, g: &mut Graph, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = g.leaf(value, self.trainable.includes(self.store.group(id)));
        self.vars[id.0] = Some(v);
        v
    }

    /// Leaf bound to `id` in this graph, if the forward pass touched it.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }

    /// Gradients of every bound, trainable parameter after `g.backward`.
    pub fn gradients(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| g.grad(v))).collect()
    }
}

//! Named parameter collections with role and kind tags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Encoder,
    Projector,
    Predictor,
    /// Downstream linear head used by the evaluation protocols.
    Classifier,
}

impl Role {
    pub fn from_name(name: &str) -> Option<Role> {
        match name.split('.').next()? {
            "encoder" => Some(Role::Encoder),
            "projector" => Some(Role::Projector),
            "predictor" => Some(Role::Predictor),
            "classifier" => Some(Role::Classifier),
            _ => None,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Role::Encoder => 0,
            Role::Projector => 1,
            Role::Predictor => 2,
            Role::Classifier => 3,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Role> {
        [Role::Encoder, Role::Projector, Role::Predictor, Role::Classifier]
            .into_iter()
            .find(|r| r.code() == code)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Learnable,
    RunningStatistic,
}

/// Which network a weight set belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Online,
    Target2,
    Target3,
}

impl Branch {
    pub(crate) fn code(self) -> u8 {
        match self {
            Branch::Online => 0,
            Branch::Target2 => 1,
            Branch::Target3 => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Branch> {
        [Branch::Online, Branch::Target2, Branch::Target3].into_iter().find(|b| b.code() == code)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub role: Role,
    pub kind: Kind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WeightError {
    #[error("entry `{0}` missing")]
    Missing(String),
    #[error("unexpected entry `{0}`")]
    Unexpected(String),
    #[error("entry `{name}` has shape {left:?}, expected {right:?}")]
    Shape { name: String, left: Vec<usize>, right: Vec<usize> },
}

/// Parameters and running statistics of one branch, stored in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet {
    pub branch: Branch,
    entries: BTreeMap<String, Entry>,
}

impl WeightSet {
    pub fn new(branch: Branch) -> Self {
        Self { branch, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Entry> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Entry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Entry)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn learnable_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|(_, e)| e.kind == Kind::Learnable).map(|(n, _)| n.as_str())
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.entries.values().filter(|e| e.role == role).count()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    /// Copy restricted to the given roles, keeping the branch tag.
    pub fn filter_roles(&self, roles: &[Role]) -> WeightSet {
        WeightSet {
            branch: self.branch,
            entries: self
                .entries
                .iter()
                .filter(|(_, e)| roles.contains(&e.role))
                .map(|(n, e)| (n.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn with_branch(mut self, branch: Branch) -> WeightSet {
        self.branch = branch;
        self
    }

    /// Adds every entry of `other`, replacing same-named ones.
    pub fn merge(&mut self, other: &WeightSet) {
        for (n, e) in &other.entries {
            self.entries.insert(n.clone(), e.clone());
        }
    }

    /// `f32` view for the compute kernels.
    pub fn to_store(&self) -> ParamStore {
        let mut store = ParamStore::default();
        self.extend_store(&mut store);
        store
    }

    pub fn extend_store(&self, store: &mut ParamStore) {
        for (n, e) in &self.entries {
            store.insert(n.clone(), e.data.iter().map(|&v| v as f32).collect());
        }
    }

    /// Checks that names and shapes over `roles` agree with `other`.
    pub fn check_congruent(&self, other: &WeightSet, roles: &[Role]) -> Result<(), WeightError> {
        let mine: BTreeMap<_, _> = self.entries.iter().filter(|(_, e)| roles.contains(&e.role)).collect();
        let theirs: BTreeMap<_, _> = other.entries.iter().filter(|(_, e)| roles.contains(&e.role)).collect();
        for (name, e) in &mine {
            match theirs.get(name) {
                None => return Err(WeightError::Missing((*name).clone())),
                Some(o) if o.shape != e.shape || o.kind != e.kind => {
                    return Err(WeightError::Shape {
                        name: (*name).clone(),
                        left: e.shape.clone(),
                        right: o.shape.clone(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = theirs.keys().find(|n| !mine.contains_key(*n)) {
            return Err(WeightError::Unexpected((*extra).clone()));
        }
        Ok(())
    }

    /// Checks that gradients are keyed exactly by this set's learnables.
    pub fn check_gradient_keys(&self, grads: &Gradients) -> Result<(), WeightError> {
        for name in self.learnable_names() {
            let entry = &self.entries[name];
            match grads.get(name) {
                None => return Err(WeightError::Missing(name.to_string())),
                Some(g) if g.len() != entry.data.len() => {
                    return Err(WeightError::Shape {
                        name: name.to_string(),
                        left: vec![g.len()],
                        right: entry.shape.clone(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = grads
            .names()
            .find(|n| self.entries.get(*n).map(|e| e.kind != Kind::Learnable).unwrap_or(true))
        {
            return Err(WeightError::Unexpected(extra.to_string()));
        }
        Ok(())
    }

    /// SHA-256 over names, tags, shapes and the exact bit patterns of every value.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, e) in &self.entries {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update([e.role.code(), matches!(e.kind, Kind::Learnable) as u8]);
            for d in &e.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &e.data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.data.iter().all(|v| v.is_finite()))
    }
}

//! Attribute records, the cross-scheme equivalence partition, and the
//! requirement check used during report verification.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{Encode, Encoder};
use crate::ids::{AttributeId, DeviceId, TeeSchemeTag};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("attribute {scheme}/{label} already registered")]
    DuplicateAttribute { scheme: TeeSchemeTag, label: String },
    #[error("unknown attribute {0}")]
    UnknownAttribute(AttributeId),
    #[error("no attribute labelled {scheme}/{label}")]
    UnknownLabel { scheme: TeeSchemeTag, label: String },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub id: AttributeId,
    pub scheme: TeeSchemeTag,
    pub label: String,
}

impl Encode for Attribute {
    fn encode_into(&self, out: &mut Encoder) {
        out.field(&self.id).field(&self.scheme).str(&self.label);
    }
}

/// Union-find over attribute ids. Union by rank; ties keep the smaller id
/// as root so every validator builds the same forest.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EquivalencePartition {
    parent: Vec<u32>,
    rank: Vec<u8>,
    // Smallest member of the class rooted at each index.
    least: Vec<u32>,
}

impl EquivalencePartition {
    fn push(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        self.rank.push(0);
        self.least.push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    fn root(&self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            x = self.parent[x as usize];
        }
        x
    }

    fn root_compress(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.root_compress(a), self.root_compress(b));
        if ra == rb {
            return;
        }
        let (hi, lo) = match self.rank[ra as usize].cmp(&self.rank[rb as usize]) {
            std::cmp::Ordering::Greater => (ra, rb),
            std::cmp::Ordering::Less => (rb, ra),
            std::cmp::Ordering::Equal => {
                let (keep, merge) = if ra < rb { (ra, rb) } else { (rb, ra) };
                self.rank[keep as usize] += 1;
                (keep, merge)
            }
        };
        self.parent[lo as usize] = hi;
        self.least[hi as usize] = self.least[hi as usize].min(self.least[lo as usize]);
    }

    /// Smallest id in the class of `x`; a path-independent class label.
    fn representative(&self, x: u32) -> u32 {
        self.least[self.root(x) as usize]
    }
}

/// Requirements in the requester's own attribute vocabulary.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementList {
    pub required: Vec<AttributeId>,
    #[serde(default)]
    pub target_device: Option<DeviceId>,
}

impl Encode for RequirementList {
    fn encode_into(&self, out: &mut Encoder) {
        out.list(&self.required).option(&self.target_device);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SatisfactionResult {
    pub satisfied: bool,
    /// Requirement → lowest-id reported attribute in its class.
    pub witnesses: BTreeMap<AttributeId, AttributeId>,
    /// Requirements with no equivalent reported attribute, ascending.
    pub missing: Vec<AttributeId>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    attributes: Vec<Attribute>,
    by_label: BTreeMap<(TeeSchemeTag, String), AttributeId>,
    partition: EquivalencePartition,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_attribute(
        &mut self,
        scheme: &TeeSchemeTag,
        label: &str,
    ) -> Result<AttributeId, RegistryError> {
        let key = (scheme.clone(), label.to_string());
        if self.by_label.contains_key(&key) {
            return Err(RegistryError::DuplicateAttribute {
                scheme: scheme.clone(),
                label: label.to_string(),
            });
        }
        let id = AttributeId(self.partition.push());
        self.attributes.push(Attribute {
            id,
            scheme: scheme.clone(),
            label: label.to_string(),
        });
        self.by_label.insert(key, id);
        Ok(id)
    }

    fn check(&self, id: AttributeId) -> Result<u32, RegistryError> {
        if (id.0 as usize) < self.attributes.len() {
            Ok(id.0)
        } else {
            Err(RegistryError::UnknownAttribute(id))
        }
    }

    pub fn declare_equivalence(&mut self, a: AttributeId, b: AttributeId) -> Result<(), RegistryError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        self.partition.union(a, b);
        Ok(())
    }

    pub fn same_class(&self, a: AttributeId, b: AttributeId) -> Result<bool, RegistryError> {
        let (a, b) = (self.check(a)?, self.check(b)?);
        Ok(self.partition.representative(a) == self.partition.representative(b))
    }

    /// Every requirement needs at least one reported attribute in its class.
    pub fn satisfies(
        &self,
        lst: &RequirementList,
        reported: &[AttributeId],
    ) -> Result<SatisfactionResult, RegistryError> {
        let mut by_class: BTreeMap<u32, AttributeId> = BTreeMap::new();
        for &r in reported {
            let rep = self.partition.representative(self.check(r)?);
            by_class
                .entry(rep)
                .and_modify(|w| *w = (*w).min(r))
                .or_insert(r);
        }
        let mut witnesses = BTreeMap::new();
        let mut missing = BTreeSet::new();
        for &req in &lst.required {
            let rep = self.partition.representative(self.check(req)?);
            match by_class.get(&rep) {
                Some(&w) => {
                    witnesses.insert(req, w);
                }
                None => {
                    missing.insert(req);
                }
            }
        }
        Ok(SatisfactionResult {
            satisfied: missing.is_empty(),
            witnesses,
            missing: missing.into_iter().collect(),
        })
    }

    pub fn id_of(&self, scheme: &TeeSchemeTag, label: &str) -> Result<AttributeId, RegistryError> {
        self.by_label
            .get(&(scheme.clone(), label.to_string()))
            .copied()
            .ok_or_else(|| RegistryError::UnknownLabel {
                scheme: scheme.clone(),
                label: label.to_string(),
            })
    }

    pub fn attribute(&self, id: AttributeId) -> Result<&Attribute, RegistryError> {
        self.attributes
            .get(id.0 as usize)
            .ok_or(RegistryError::UnknownAttribute(id))
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn contains(&self, id: AttributeId) -> bool {
        (id.0 as usize) < self.attributes.len()
    }

    /// All ids registered under `scheme`, ascending.
    pub fn vocabulary(&self, scheme: &TeeSchemeTag) -> Vec<AttributeId> {
        self.attributes
            .iter()
            .filter(|a| &a.scheme == scheme)
            .map(|a| a.id)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }
}

impl Encode for Registry {
    fn encode_into(&self, out: &mut Encoder) {
        out.list(&self.attributes);
        let classes: Vec<u32> = (0..self.attributes.len() as u32)
            .map(|i| self.partition.representative(i))
            .collect();
        out.list(&classes);
    }
}

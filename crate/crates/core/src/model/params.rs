use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::diffmath::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Parameter partition used to route updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Backbone,
    Adapter,
    SegHead,
    RecHead,
    MaskToken,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Backbone,
        Group::Adapter,
        Group::SegHead,
        Group::RecHead,
        Group::MaskToken,
    ];

    /// Stable on-disk tag.
    pub fn tag(self) -> u8 {
        match self {
            Group::Backbone => 0,
            Group::Adapter => 1,
            Group::SegHead => 2,
            Group::RecHead => 3,
            Group::MaskToken => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Group> {
        Group::ALL.into_iter().find(|g| g.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::Adapter => "adapter",
            Group::SegHead => "seg_head",
            Group::RecHead => "rec_head",
            Group::MaskToken => "mask_token",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter group '{s}'")))
    }
}

/// Small set of [`Group`]s.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const fn empty() -> Self {
        GroupSet(0)
    }

    pub fn all() -> Self {
        Group::ALL.into_iter().collect()
    }

    pub fn only(g: Group) -> Self {
        GroupSet(1 << g.tag())
    }

    pub fn with(self, g: Group) -> Self {
        GroupSet(self.0 | (1 << g.tag()))
    }

    pub fn contains(self, g: Group) -> bool {
        self.0 & (1 << g.tag()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Group> {
        Group::ALL.into_iter().filter(move |g| self.contains(*g))
    }
}

impl FromIterator<Group> for GroupSet {
    fn from_iter<I: IntoIterator<Item = Group>>(iter: I) -> Self {
        iter.into_iter().fold(GroupSet::empty(), GroupSet::with)
    }
}

impl fmt::Display for GroupSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.iter().map(Group::name).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for GroupSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(Group::from_str)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub group: Group,
}

/// Named parameters, each tagged with exactly one group. Iteration order is
/// lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParams(vec![name.to_string()]))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, group: Group) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter '{name}'"
            )));
        }
        self.params.insert(name, Param { tensor, group });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn group(&self, name: &str) -> Option<Group> {
        self.params.get(name).map(|p| p.group)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Scalar count per group; every group appears, possibly with 0.
    pub fn count_by_group(&self) -> BTreeMap<Group, usize> {
        let mut counts: BTreeMap<Group, usize> = Group::ALL.iter().map(|g| (*g, 0)).collect();
        for p in self.params.values() {
            *counts.entry(p.group).or_default() += p.tensor.numel();
        }
        counts
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    /// Copy restricted to the given groups.
    pub fn subset(&self, groups: GroupSet) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(_, p)| groups.contains(p.group))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in self.params.values_mut() {
            p.tensor.set_requires_grad(flag);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Copies every parameter onto the tape as a leaf, keeping its `requires_grad` flag.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), tape.leaf(p.tensor.clone())))
                .collect(),
        }
    }

    /// Adds tape gradients of bound leaves into the parameters' grad slots.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        for (name, var) in &bound.vars {
            if let (Some(p), Some(g)) = (self.params.get_mut(name), tape.grad(*var)) {
                p.tensor.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Byte image of every parameter in the given groups, for bit-exact comparisons.
    pub fn group_bytes(&self, groups: GroupSet) -> Vec<u8> {
        self.params
            .values()
            .filter(|p| groups.contains(p.group))
            .flat_map(|p| p.tensor.to_le_bytes())
            .collect()
    }

    /// Names present in `self` but absent from `other`.
    pub fn missing_from(&self, other: &ParamStore) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| !other.params.contains_key(*k))
            .cloned()
            .collect()
    }
}

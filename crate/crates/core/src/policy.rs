//! Authorization hook consulted before any state transition.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::records::OpKind;

/// Decides whether `actor` may perform `op`. Implementations must be pure.
pub trait Authorizer: Send + Sync + std::fmt::Debug {
    fn authorize(&self, actor: &str, op: OpKind) -> bool;
}

/// Per-operation allow lists. An operation without a list admits every
/// named actor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllowList {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub update: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollback: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune: Option<BTreeSet<String>>,
}

impl AllowList {
    pub fn allow_all() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<OpKind, Vec<&str>>) -> Self {
        let mut out = Self::default();
        for (op, actors) in map {
            *out.slot_mut(op) = Some(actors.into_iter().map(str::to_owned).collect());
        }
        out
    }

    fn slot(&self, op: OpKind) -> &Option<BTreeSet<String>> {
        match op {
            OpKind::Update => &self.update,
            OpKind::Snapshot => &self.snapshot,
            OpKind::Rollback => &self.rollback,
            OpKind::Prune => &self.prune,
        }
    }

    fn slot_mut(&mut self, op: OpKind) -> &mut Option<BTreeSet<String>> {
        match op {
            OpKind::Update => &mut self.update,
            OpKind::Snapshot => &mut self.snapshot,
            OpKind::Rollback => &mut self.rollback,
            OpKind::Prune => &mut self.prune,
        }
    }
}

impl Authorizer for AllowList {
    fn authorize(&self, actor: &str, op: OpKind) -> bool {
        !actor.is_empty() && self.slot(op).as_ref().is_none_or(|set| set.contains(actor))
    }
}

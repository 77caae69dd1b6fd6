//! Read-only audit queries, each pinned to one checkpoint and answered only
//! from leaves verified under it.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::digest::Digest;
use crate::error::{Error, Ineligibility, Result};
use crate::hardware_root::HardwareRoot;
use crate::monitor::Monitor;
use crate::records::{AuditKind, ObjectId, Record, SnapshotEntry, Tombstone, TxId, VersionEntry, VersionRef};
use crate::state::{aggregate_root, AuthoritativeCheckpoint, HeadTracking, PadId, PerPad, StateStore, Verified};

/// One head change of an object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LineageEvent {
    pub object: ObjectId,
    pub version: u64,
    /// Catalog leaf at which the head changed.
    pub leaf_index: u64,
    pub timestamp: u64,
    pub txid: TxId,
    /// Justification recorded with the committing transaction's intent.
    pub description: String,
    pub origin: Option<u64>,
    /// First earlier version of this object with the same content.
    pub content_origin: Option<u64>,
    pub content_digest: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotListing {
    pub tag: String,
    pub members: Vec<VersionRef>,
    pub txid: TxId,
    pub timestamp: u64,
    pub leaf_index: u64,
    pub pruned_members: Vec<VersionRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityReport {
    pub target: VersionRef,
    pub checkpoint_counter: u64,
    pub in_catalog: bool,
    pub catalog_proof: Option<Verified<VersionEntry>>,
    pub tombstoned: bool,
    pub tombstone: Option<Verified<Tombstone>>,
    pub tag: Option<String>,
    pub in_snapshot: Option<bool>,
    pub snapshot_proof: Option<Verified<SnapshotEntry>>,
    pub eligible: bool,
    pub reason: Option<Ineligibility>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreReport {
    pub counter: u64,
    pub root: Digest,
    pub pad_sizes: PerPad<u64>,
    pub leaves_checked: u64,
    /// Intents with no completion: aborted transactions.
    pub unmatched_intents: Vec<TxId>,
}

/// True iff the seal verifies, the counter equals the hardware counter and
/// the root aggregates the recorded dictionary roots.
pub fn verify_checkpoint(hw: &HardwareRoot, chk: &AuthoritativeCheckpoint) -> bool {
    chk.root == aggregate_root(&chk.pad_roots.catalog, &chk.pad_roots.registry, &chk.pad_roots.log)
        && hw.verify_seal(&chk.seal, &chk.root, chk.counter)
        && chk.counter == hw.counter_read()
}

/// Audit queries over a store pinned to a verified checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct Audit<'a> {
    store: &'a StateStore,
    at: &'a AuthoritativeCheckpoint,
}

impl<'a> Audit<'a> {
    /// Pins `store` to `at`, which must be the current checkpoint.
    pub fn pinned(store: &'a StateStore, at: &'a AuthoritativeCheckpoint, hw: &HardwareRoot) -> Result<Self> {
        if !verify_checkpoint(hw, at) {
            return Err(Error::RollbackDetected {
                checkpoint_counter: at.counter,
                hardware_counter: hw.counter_read(),
            });
        }
        Ok(Self { store, at })
    }

    pub fn checkpoint(&self) -> &AuthoritativeCheckpoint {
        self.at
    }

    /// Verified chronological head changes of `object`. Only the k catalog
    /// leaves naming the object are visited, each checked by inclusion
    /// proof, so the cost is O(k log n).
    pub fn reconstruct_lineage(&self, object: &ObjectId) -> Result<Vec<LineageEvent>> {
        let size = self.at.pad_sizes.catalog;
        let mode = self.store.head_tracking();
        let mut events = Vec::new();
        let mut current: Option<u64> = None;
        let mut first_seen: HashMap<Digest, u64> = HashMap::new();
        let mut descriptions: HashMap<TxId, String> = HashMap::new();
        for &k in self.store.object_leaves(object).iter().take_while(|&&k| k < size) {
            let rec = self.store.verified(PadId::Catalog, k, self.at)?.value;
            let entry = match (mode, rec) {
                (HeadTracking::PointerLeaves, Record::Head(h)) if &h.object == object => {
                    if h.head_version == current {
                        continue;
                    }
                    current = h.head_version;
                    let Some(j) = h.head_version else { continue };
                    self.store
                        .version_entry(&VersionRef::new(object.clone(), j), self.at)?
                        .ok_or_else(|| Error::tamper(PadId::Catalog, k, format!("head names missing version {j}")))?
                        .value
                }
                (HeadTracking::VersionMetadata, Record::Version(e)) if &e.object == object => {
                    if Some(e.version) == current {
                        continue;
                    }
                    current = Some(e.version);
                    e
                }
                (HeadTracking::VersionMetadata, Record::Tombstone(t)) if &t.object == object => {
                    if Some(t.version) == current {
                        current = None;
                    }
                    continue;
                }
                (_, other) if other.object() == Some(object) => continue,
                _ => return Err(Error::tamper(PadId::Catalog, k, format!("leaf does not name {object}"))),
            };
            let content_origin = first_seen.get(&entry.content_digest).copied();
            if content_origin.is_none() {
                first_seen.insert(entry.content_digest, entry.version);
            }
            let description = match descriptions.get(&entry.txid) {
                Some(d) => d.clone(),
                None => {
                    let d = self.description(entry.txid, k)?;
                    descriptions.insert(entry.txid, d.clone());
                    d
                }
            };
            events.push(LineageEvent {
                object: object.clone(),
                version: entry.version,
                leaf_index: k,
                timestamp: entry.timestamp,
                txid: entry.txid,
                description,
                origin: entry.origin,
                content_origin,
                content_digest: entry.content_digest,
            });
        }
        Ok(events)
    }

    fn description(&self, txid: TxId, leaf: u64) -> Result<String> {
        match self.store.intent(txid, self.at)? {
            Some(i) => Ok(i.value.justification),
            None => Err(Error::tamper(
                PadId::Catalog,
                leaf,
                format!("transaction {txid} has no intent record in the log"),
            )),
        }
    }

    /// Every snapshot in registry order, each verified, with members that
    /// have since been tombstoned.
    pub fn list_snapshots(&self) -> Result<Vec<SnapshotListing>> {
        let mut out = Vec::new();
        for k in 0..self.at.pad_sizes.registry {
            let v = self.store.verified(PadId::Registry, k, self.at)?;
            let Record::Snapshot(s) = v.value else {
                return Err(Error::tamper(PadId::Registry, k, "registry leaf is not a snapshot entry"));
            };
            let mut pruned_members = Vec::new();
            for m in &s.members {
                if self.store.tombstone(m, self.at)?.is_some() {
                    pruned_members.push(m.clone());
                }
            }
            out.push(SnapshotListing {
                tag: s.tag,
                members: s.members,
                txid: s.txid,
                timestamp: s.timestamp,
                leaf_index: k,
                pruned_members,
            });
        }
        Ok(out)
    }

    /// Whether `target` may be rolled back to, optionally as a member of
    /// snapshot `tag`. Negative answers rest on a scan of the verified
    /// catalog prefix.
    pub fn check_eligibility(&self, target: &VersionRef, tag: Option<&str>) -> Result<EligibilityReport> {
        self.store.verify_prefixes(self.at)?;
        let catalog_proof = self.store.version_entry(target, self.at)?;
        let tombstone = self.store.tombstone(target, self.at)?;
        let (in_snapshot, snapshot_proof) = match tag {
            None => (None, None),
            Some(t) => match self.store.snapshot(t, self.at)? {
                Some(s) => (Some(s.value.members.contains(target)), Some(s)),
                None => (Some(false), None),
            },
        };
        let reason = if catalog_proof.is_none() {
            Some(if self.store.versions_of(&target.object).is_empty() {
                Ineligibility::UnknownObject
            } else {
                Ineligibility::UnknownVersion
            })
        } else if tombstone.is_some() {
            Some(Ineligibility::DeAuthorized)
        } else if in_snapshot == Some(false) {
            Some(if snapshot_proof.is_none() {
                Ineligibility::UnknownTag
            } else {
                Ineligibility::UnknownVersion
            })
        } else {
            None
        };
        Ok(EligibilityReport {
            target: target.clone(),
            checkpoint_counter: self.at.counter,
            in_catalog: catalog_proof.is_some(),
            catalog_proof,
            tombstoned: tombstone.is_some(),
            tombstone,
            tag: tag.map(str::to_owned),
            in_snapshot,
            snapshot_proof,
            eligible: reason.is_none(),
            reason,
        })
    }

    /// Replays all three committed prefixes: roots, record decoding, and
    /// intent/completion pairing.
    pub fn verify_store(&self) -> Result<StoreReport> {
        self.store.verify_prefixes(self.at)?;
        let mut checked = 0;
        for id in [PadId::Catalog, PadId::Registry] {
            for k in 0..self.at.pad_sizes[id] {
                self.store.verified(id, k, self.at)?;
                checked += 1;
            }
        }
        let mut open: Vec<TxId> = Vec::new();
        let mut intents: HashMap<TxId, crate::records::OpKind> = HashMap::new();
        let mut completed: HashSet<TxId> = HashSet::new();
        for k in 0..self.at.pad_sizes.log {
            let Record::Audit(a) = self.store.verified(PadId::Log, k, self.at)?.value else {
                return Err(Error::tamper(PadId::Log, k, "log leaf is not an audit record"));
            };
            checked += 1;
            match a.kind {
                AuditKind::Intent => {
                    intents.insert(a.txid, a.op);
                    open.push(a.txid);
                }
                AuditKind::Completion => {
                    if intents.get(&a.txid) != Some(&a.op) || !completed.insert(a.txid) {
                        return Err(Error::tamper(PadId::Log, k, format!("completion for {} has no matching intent", a.txid)));
                    }
                    open.retain(|t| *t != a.txid);
                }
            }
        }
        Ok(StoreReport {
            counter: self.at.counter,
            root: self.at.root,
            pad_sizes: self.at.pad_sizes,
            leaves_checked: checked,
            unmatched_intents: open,
        })
    }
}

impl Monitor {
    /// Runs audit queries against the monitor's current checkpoint.
    pub fn audit<R>(&self, f: impl FnOnce(&Audit<'_>) -> Result<R>) -> Result<R> {
        self.view(|store, at| Audit::pinned(store, at, self.hardware()).and_then(|a| f(&a)))?
    }
}

fn opt(v: Option<u64>) -> String {
    v.map_or_else(|| "-".to_owned(), |v| v.to_string())
}

/// Line-oriented rendering with a fixed field order, one event per line.
pub fn lineage_text(events: &[LineageEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let _ = writeln!(
            out,
            "object={} version={} leaf={} ts={} txid={} origin={} content_origin={} digest={} desc={:?}",
            e.object,
            e.version,
            e.leaf_index,
            e.timestamp,
            e.txid,
            opt(e.origin),
            opt(e.content_origin),
            e.content_digest,
            e.description
        );
    }
    out
}

pub fn snapshots_text(listings: &[SnapshotListing]) -> String {
    let mut out = String::new();
    for s in listings {
        let members: Vec<String> = s.members.iter().map(|m| m.to_string()).collect();
        let pruned: Vec<String> = s.pruned_members.iter().map(|m| m.to_string()).collect();
        let _ = writeln!(
            out,
            "tag={} txid={} ts={} members={} pruned={}",
            s.tag,
            s.txid,
            s.timestamp,
            members.join(","),
            if pruned.is_empty() { "-".to_owned() } else { pruned.join(",") }
        );
    }
    out
}

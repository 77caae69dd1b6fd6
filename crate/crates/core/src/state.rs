//! The three dictionaries, the authoritative checkpoint, and the derived
//! lookup index.
//!
//! The catalog holds version entries, head pointers and tombstones, the
//! registry holds snapshot bindings, and the log holds intent/completion
//! records. Their roots aggregate into one root that is sealed together with
//! the hardware counter.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::ops::{Index as IndexOp, IndexMut};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::digest::Digest;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::hardware_root::{HardwareRoot, Seal};
use crate::merkle::{self, InclusionProof, Pad, PadRoot, PadTail};
use crate::records::{
    AuditKind, AuditRecord, HeadPointer, ObjectId, Record, SnapshotEntry, Tombstone, TxId,
    VersionEntry, VersionRef,
};

pub const CATALOG_FILE: &str = "catalog.pad";
pub const REGISTRY_FILE: &str = "registry.pad";
pub const LOG_FILE: &str = "log.pad";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RGCHKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_LEN: usize = 8 + 4 + 32 + 8 + 32 + 3 * 8 + 3 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadId {
    /// Object versions, heads and tombstones.
    Catalog,
    /// Snapshot tag bindings.
    Registry,
    /// Intent and completion records.
    Log,
}

impl PadId {
    pub const ALL: [PadId; 3] = [PadId::Catalog, PadId::Registry, PadId::Log];

    pub fn file_name(self) -> &'static str {
        match self {
            Self::Catalog => CATALOG_FILE,
            Self::Registry => REGISTRY_FILE,
            Self::Log => LOG_FILE,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Catalog => "catalog",
            Self::Registry => "registry",
            Self::Log => "log",
        }
    }
}

impl fmt::Display for PadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One value per dictionary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerPad<T> {
    pub catalog: T,
    pub registry: T,
    pub log: T,
}

impl<T> PerPad<T> {
    pub fn from_fn(mut f: impl FnMut(PadId) -> T) -> Self {
        Self {
            catalog: f(PadId::Catalog),
            registry: f(PadId::Registry),
            log: f(PadId::Log),
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> PerPad<U> {
        PerPad {
            catalog: f(&self.catalog),
            registry: f(&self.registry),
            log: f(&self.log),
        }
    }
}

impl PerPad<u64> {
    pub fn total(&self) -> u64 {
        self.catalog + self.registry + self.log
    }
}

impl<T> IndexOp<PadId> for PerPad<T> {
    type Output = T;
    fn index(&self, id: PadId) -> &T {
        match id {
            PadId::Catalog => &self.catalog,
            PadId::Registry => &self.registry,
            PadId::Log => &self.log,
        }
    }
}

impl<T> IndexMut<PadId> for PerPad<T> {
    fn index_mut(&mut self, id: PadId) -> &mut T {
        match id {
            PadId::Catalog => &mut self.catalog,
            PadId::Registry => &mut self.registry,
            PadId::Log => &mut self.log,
        }
    }
}

/// Why the stored state cannot be served as current without recovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Ambiguity {
    /// A verifiable checkpoint claims a counter above the hardware counter.
    Ahead { checkpoint: u64, hardware: u64 },
    /// The newest verifiable checkpoint is older than the hardware counter.
    Behind { checkpoint: u64, hardware: u64 },
    /// Two different checkpoints verify at the hardware counter.
    Multiple { counter: u64 },
    /// No checkpoint verifies at all.
    None { hardware: u64 },
    /// The previous process died with a transaction in flight.
    Interrupted { hardware: u64 },
    /// A dictionary holds leaves past the committed size.
    UncommittedSuffix { pad: PadId, committed: u64, found: u64 },
}

/// Domain-separated aggregate of the three dictionary roots.
pub fn aggregate_root(hv: &Digest, hs: &Digest, hl: &Digest) -> Digest {
    Digest::of_parts(&[b"ROOT", hv.as_bytes(), hs.as_bytes(), hl.as_bytes()])
}

/// Sealed root and counter plus the dictionary sizes and roots it covers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthoritativeCheckpoint {
    pub root: Digest,
    pub counter: u64,
    pub seal: Seal,
    pub pad_sizes: PerPad<u64>,
    pub pad_roots: PerPad<Digest>,
}

impl AuthoritativeCheckpoint {
    pub fn from_roots(roots: &PerPad<PadRoot>, counter: u64, hw: &HardwareRoot) -> Self {
        let pad_roots = roots.map(|r| r.digest);
        let root = aggregate_root(&pad_roots.catalog, &pad_roots.registry, &pad_roots.log);
        Self {
            root,
            counter,
            seal: hw.seal(root, counter),
            pad_sizes: roots.map(|r| r.size),
            pad_roots,
        }
    }

    pub fn pad_root(&self, pad: PadId) -> PadRoot {
        PadRoot {
            digest: self.pad_roots[pad],
            size: self.pad_sizes[pad],
        }
    }

    /// The aggregate matches the recorded dictionary roots.
    pub fn is_well_formed(&self) -> bool {
        self.root == aggregate_root(&self.pad_roots.catalog, &self.pad_roots.registry, &self.pad_roots.log)
            && self.seal.root == self.root
            && self.seal.counter == self.counter
    }

    /// Seal and aggregate both verify; freshness is the caller's concern.
    pub fn is_authentic(&self, hw: &HardwareRoot) -> bool {
        self.is_well_formed() && hw.verify_seal(&self.seal, &self.root, self.counter)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.raw(CHECKPOINT_MAGIC)
            .u32(CHECKPOINT_VERSION)
            .digest(&self.root)
            .u64(self.counter)
            .raw(&self.seal.tag);
        for id in PadId::ALL {
            e.u64(self.pad_sizes[id]);
        }
        for id in PadId::ALL {
            e.digest(&self.pad_roots[id]);
        }
        e.finish()
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, DecodeError> {
        let mut d = Decoder::new(bytes);
        if d.raw(8)? != CHECKPOINT_MAGIC {
            return Err(DecodeError::Invalid("bad checkpoint magic".into()));
        }
        let version = d.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DecodeError::Invalid(format!("checkpoint version {version}")));
        }
        let root = d.digest()?;
        let counter = d.u64()?;
        let tag: [u8; 32] = d.raw(32)?.try_into().unwrap();
        let mut pad_sizes = PerPad::default();
        for id in PadId::ALL {
            pad_sizes[id] = d.u64()?;
        }
        let mut pad_roots = PerPad::default();
        for id in PadId::ALL {
            pad_roots[id] = d.digest()?;
        }
        d.finish()?;
        Ok(Self {
            root,
            counter,
            seal: Seal { tag, counter, root },
            pad_sizes,
            pad_roots,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    A,
    B,
}

impl Slot {
    pub fn file_name(self) -> &'static str {
        match self {
            Slot::A => "checkpoint.a",
            Slot::B => "checkpoint.b",
        }
    }

    pub fn other(self) -> Slot {
        match self {
            Slot::A => Slot::B,
            Slot::B => Slot::A,
        }
    }
}

/// How a catalog records the live head of each object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadTracking {
    /// A head-pointer leaf accompanies every version entry.
    #[default]
    PointerLeaves,
    /// The object's latest catalog leaf decides the head: a version entry
    /// names it, a tombstone of that version clears it. No extra leaves.
    VersionMetadata,
}

/// An answer backed by an inclusion proof under the authoritative root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verified<T> {
    pub value: T,
    pub leaf_index: u64,
    pub proof: InclusionProof,
}

impl<T> Verified<T> {
    fn map<U>(self, f: impl FnOnce(T) -> U) -> Verified<U> {
        Verified {
            value: f(self.value),
            leaf_index: self.leaf_index,
            proof: self.proof,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct HeadSlot {
    version: Option<u64>,
    leaf: u64,
}

/// Rebuildable lookup cache from keys to leaf indices. Never trusted on its
/// own: every answer is re-verified against the checkpoint.
#[derive(Debug, Default)]
struct Index {
    applied: PerPad<u64>,
    versions: HashMap<VersionRef, u64>,
    by_object: BTreeMap<ObjectId, Vec<u64>>,
    /// Catalog leaves naming each object, in append order.
    object_leaves: HashMap<ObjectId, Vec<u64>>,
    heads: HashMap<ObjectId, HeadSlot>,
    tombstones: HashMap<VersionRef, u64>,
    digest_refs: HashMap<Digest, BTreeSet<VersionRef>>,
    snapshots: HashMap<String, u64>,
    intents: HashMap<TxId, u64>,
    completions: HashMap<TxId, u64>,
    idempotency: HashMap<String, TxId>,
}

impl Index {
    fn apply(&mut self, mode: HeadTracking, pad: PadId, idx: u64, rec: Record) -> Result<()> {
        let wrong_kind = || Error::tamper(pad, idx, "record kind does not belong in this dictionary");
        if let (PadId::Catalog, Some(o)) = (pad, rec.object()) {
            self.object_leaves.entry(o.clone()).or_default().push(idx);
        }
        match (pad, rec) {
            (PadId::Catalog, Record::Version(v)) => {
                let vr = VersionRef::new(v.object.clone(), v.version);
                if self.versions.insert(vr.clone(), idx).is_some() {
                    return Err(Error::tamper(pad, idx, format!("duplicate version entry {vr}")));
                }
                self.by_object.entry(v.object.clone()).or_default().push(v.version);
                self.digest_refs.entry(v.content_digest).or_default().insert(vr);
                if mode == HeadTracking::VersionMetadata {
                    self.heads.insert(
                        v.object,
                        HeadSlot {
                            version: Some(v.version),
                            leaf: idx,
                        },
                    );
                }
            }
            (PadId::Catalog, Record::Head(h)) => {
                if mode != HeadTracking::PointerLeaves {
                    return Err(Error::Config(
                        "store records head-pointer leaves but head tracking is version-metadata".into(),
                    ));
                }
                self.heads.insert(
                    h.object,
                    HeadSlot {
                        version: h.head_version,
                        leaf: idx,
                    },
                );
            }
            (PadId::Catalog, Record::Tombstone(t)) => {
                let vr = VersionRef::new(t.object.clone(), t.version);
                if self.tombstones.insert(vr, idx).is_some() {
                    return Err(Error::tamper(pad, idx, "duplicate tombstone"));
                }
                if mode == HeadTracking::VersionMetadata {
                    if let Some(h) = self.heads.get_mut(&t.object) {
                        if h.version == Some(t.version) {
                            *h = HeadSlot {
                                version: None,
                                leaf: idx,
                            };
                        }
                    }
                }
            }
            (PadId::Registry, Record::Snapshot(s)) => {
                if self.snapshots.insert(s.tag.clone(), idx).is_some() {
                    return Err(Error::tamper(pad, idx, format!("duplicate snapshot tag {:?}", s.tag)));
                }
            }
            (PadId::Log, Record::Audit(a)) => match a.kind {
                AuditKind::Intent => {
                    self.intents.insert(a.txid, idx);
                    if let Some(key) = a.idempotency_key {
                        self.idempotency.insert(key, a.txid);
                    }
                }
                AuditKind::Completion => {
                    self.completions.insert(a.txid, idx);
                }
            },
            _ => return Err(wrong_kind()),
        }
        self.applied[pad] = idx + 1;
        Ok(())
    }
}

/// The three dictionaries on untrusted storage plus the checkpoint slots.
#[derive(Debug)]
pub struct StateStore {
    dir: PathBuf,
    mode: HeadTracking,
    pads: PerPad<Pad>,
    index: Index,
    current_slot: Option<Slot>,
}

impl StateStore {
    /// Opens (creating if needed) the dictionary files under `dir`. The
    /// lookup index is empty until [`StateStore::rebuild_index`].
    pub fn open(dir: impl AsRef<Path>, mode: HeadTracking) -> Result<Self> {
        let dir = dir.as_ref().to_owned();
        fsutil::create_dir(&dir)?;
        let catalog = Pad::open(dir.join(CATALOG_FILE))?;
        let registry = Pad::open(dir.join(REGISTRY_FILE))?;
        let log = Pad::open(dir.join(LOG_FILE))?;
        Ok(Self {
            dir,
            mode,
            pads: PerPad {
                catalog,
                registry,
                log,
            },
            index: Index::default(),
            current_slot: None,
        })
    }

    /// Read-only view pinned to the checkpoint that verifies against the
    /// hardware counter. Leaves are not pre-verified; each query verifies
    /// the leaves it uses.
    pub fn open_for_audit(
        dir: impl AsRef<Path>,
        mode: HeadTracking,
        hw: &HardwareRoot,
    ) -> Result<(Self, AuthoritativeCheckpoint)> {
        let mut store = Self::open(dir, mode)?;
        let chk = match store.load_latest_checkpoint(hw) {
            Ok(chk) => chk,
            Err(Error::RecoveryNeeded(Ambiguity::UncommittedSuffix { .. }))
            | Err(Error::RecoveryNeeded(Ambiguity::Interrupted { .. })) => {
                store.current_candidate(hw)?
            }
            Err(Error::RecoveryNeeded(Ambiguity::Behind { checkpoint, hardware })) => {
                return Err(Error::RollbackDetected {
                    checkpoint_counter: checkpoint,
                    hardware_counter: hardware,
                });
            }
            Err(e) => return Err(e),
        };
        for id in PadId::ALL {
            if store.pads[id].size() < chk.pad_sizes[id] {
                return Err(Error::TamperDetected {
                    pad: Some(id),
                    index: Some(store.pads[id].size()),
                    detail: format!(
                        "{} holds {} leaves, checkpoint commits {}",
                        id,
                        store.pads[id].size(),
                        chk.pad_sizes[id]
                    ),
                });
            }
        }
        store.rebuild_index(&chk)?;
        Ok((store, chk))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn head_tracking(&self) -> HeadTracking {
        self.mode
    }

    pub fn pad(&self, id: PadId) -> &Pad {
        &self.pads[id]
    }

    pub fn sizes(&self) -> PerPad<u64> {
        self.pads.map(Pad::size)
    }

    pub fn roots(&self) -> PerPad<PadRoot> {
        self.pads.map(Pad::root)
    }

    pub fn aggregate(&self) -> Digest {
        let r = self.roots();
        aggregate_root(&r.catalog.digest, &r.registry.digest, &r.log.digest)
    }

    /// Bytes of dictionary and checkpoint files on disk.
    pub fn metadata_bytes(&self) -> u64 {
        let pads: u64 = PadId::ALL.iter().map(|&id| self.pads[id].byte_len()).sum();
        let slots: u64 = [Slot::A, Slot::B]
            .iter()
            .filter_map(|s| std::fs::metadata(self.dir.join(s.file_name())).ok())
            .map(|m| m.len())
            .sum();
        pads + slots
    }

    /// Appends a record at the next index of `pad`, without syncing.
    pub(crate) fn append(&mut self, pad: PadId, rec: &Record) -> Result<u64> {
        let index = self.pads[pad].size();
        self.pads[pad].append(rec.to_leaf(index))?;
        Ok(index)
    }

    pub(crate) fn sync(&mut self, pad: PadId) -> Result<()> {
        self.pads[pad].sync()
    }

    // ---- checkpoints -------------------------------------------------

    fn slot_path(&self, slot: Slot) -> PathBuf {
        self.dir.join(slot.file_name())
    }

    /// Reads both slots; entries that fail to decode are skipped.
    pub fn read_checkpoints(&self) -> Result<Vec<(Slot, AuthoritativeCheckpoint)>> {
        let mut out = Vec::new();
        for slot in [Slot::A, Slot::B] {
            if let Some(bytes) = fsutil::read_optional(&self.slot_path(slot))? {
                if let Ok(chk) = AuthoritativeCheckpoint::decode(&bytes) {
                    out.push((slot, chk));
                }
            }
        }
        Ok(out)
    }

    /// Checkpoints whose seal and aggregate verify, newest first.
    pub fn authentic_checkpoints(&self, hw: &HardwareRoot) -> Result<Vec<(Slot, AuthoritativeCheckpoint)>> {
        let mut v: Vec<_> = self
            .read_checkpoints()?
            .into_iter()
            .filter(|(_, c)| c.is_authentic(hw))
            .collect();
        v.sort_by_key(|(_, c)| std::cmp::Reverse(c.counter));
        Ok(v)
    }

    fn current_candidate(&mut self, hw: &HardwareRoot) -> Result<AuthoritativeCheckpoint> {
        let h = hw.counter_read();
        let (slot, chk) = self
            .authentic_checkpoints(hw)?
            .into_iter()
            .find(|(_, c)| c.counter == h)
            .ok_or(Error::RecoveryNeeded(Ambiguity::None { hardware: h }))?;
        self.current_slot = Some(slot);
        Ok(chk)
    }

    /// Durably writes `chk` into the slot that does not hold the current
    /// checkpoint, so the previous one survives until the next write.
    /// `mid_write` runs after the temp file is synced and before the rename.
    pub(crate) fn persist_checkpoint(
        &mut self,
        chk: &AuthoritativeCheckpoint,
        mid_write: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        let slot = self.current_slot.map_or(Slot::A, Slot::other);
        fsutil::atomic_write_with(&self.slot_path(slot), &chk.encode(), mid_write)?;
        self.current_slot = Some(slot);
        Ok(())
    }

    /// Marks `slot` as holding the current checkpoint, so the next write
    /// goes to the other one.
    pub(crate) fn set_current_slot(&mut self, slot: Slot) {
        self.current_slot = Some(slot);
    }

    /// Returns the checkpoint that verifies at the hardware counter and
    /// exactly matches the dictionaries, or classifies why there is none.
    pub fn load_latest_checkpoint(&mut self, hw: &HardwareRoot) -> Result<AuthoritativeCheckpoint> {
        let h = hw.counter_read();
        let cands = self.authentic_checkpoints(hw)?;
        if hw.transaction_in_flight() {
            return Err(Error::RecoveryNeeded(Ambiguity::Interrupted { hardware: h }));
        }
        if let Some((_, c)) = cands.iter().find(|(_, c)| c.counter > h) {
            return Err(Error::RecoveryNeeded(Ambiguity::Ahead {
                checkpoint: c.counter,
                hardware: h,
            }));
        }
        let at_h: Vec<_> = cands.iter().filter(|(_, c)| c.counter == h).collect();
        if at_h.len() > 1 && at_h[0].1 != at_h[1].1 {
            return Err(Error::RecoveryNeeded(Ambiguity::Multiple { counter: h }));
        }
        if let Some((slot, chk)) = at_h.first() {
            self.check_pads_against(chk)?;
            self.current_slot = Some(*slot);
            return Ok(chk.clone());
        }
        if let Some((_, c)) = cands.first() {
            return Err(Error::RecoveryNeeded(Ambiguity::Behind {
                checkpoint: c.counter,
                hardware: h,
            }));
        }
        Err(Error::RecoveryNeeded(Ambiguity::None { hardware: h }))
    }

    /// The dictionaries must hold at least the committed prefix with the
    /// committed roots; extra leaves mean an uncommitted suffix.
    fn check_pads_against(&self, chk: &AuthoritativeCheckpoint) -> Result<()> {
        self.verify_prefixes(chk)?;
        for id in PadId::ALL {
            let pad = &self.pads[id];
            if pad.size() > chk.pad_sizes[id] || *pad.tail() != PadTail::Clean {
                return Err(Error::RecoveryNeeded(Ambiguity::UncommittedSuffix {
                    pad: id,
                    committed: chk.pad_sizes[id],
                    found: pad.size(),
                }));
            }
        }
        Ok(())
    }

    /// Each dictionary's prefix at the checkpoint's size hashes to the
    /// checkpoint's root.
    pub fn verify_prefixes(&self, chk: &AuthoritativeCheckpoint) -> Result<()> {
        for id in PadId::ALL {
            let pad = &self.pads[id];
            let size = chk.pad_sizes[id];
            if pad.size() < size {
                return Err(Error::TamperDetected {
                    pad: Some(id),
                    index: Some(pad.size()),
                    detail: format!("{id} holds {} leaves, checkpoint commits {size}", pad.size()),
                });
            }
            if pad.root_at(size)?.digest != chk.pad_roots[id] {
                return Err(Error::TamperDetected {
                    pad: Some(id),
                    index: None,
                    detail: format!("{id} prefix of {size} leaves does not match the sealed root"),
                });
            }
        }
        Ok(())
    }

    /// Whether the log prefix committed by `chk` ends with a completion
    /// record (or is empty), i.e. no transaction is half-recorded.
    pub fn log_fully_paired(&self, chk: &AuthoritativeCheckpoint) -> bool {
        let size = chk.pad_sizes.log;
        if size == 0 {
            return true;
        }
        self.pads.log.leaf(size - 1).is_some_and(|l| l.kind == merkle::LeafKind::CompletionRecord)
    }

    /// Drops every leaf beyond the sizes committed by `chk`.
    pub(crate) fn truncate_to(&mut self, chk: &AuthoritativeCheckpoint) -> Result<()> {
        for id in PadId::ALL {
            self.pads[id].truncate(chk.pad_sizes[id])?;
        }
        if self.index.applied.catalog > chk.pad_sizes.catalog
            || self.index.applied.registry > chk.pad_sizes.registry
            || self.index.applied.log > chk.pad_sizes.log
        {
            self.index = Index::default();
        }
        Ok(())
    }

    // ---- derived index -----------------------------------------------

    /// Discards the lookup index and rebuilds it from the committed prefix.
    pub fn rebuild_index(&mut self, chk: &AuthoritativeCheckpoint) -> Result<()> {
        self.index = Index::default();
        self.advance_index(&chk.pad_sizes)
    }

    /// Feeds leaves up to `sizes` into the lookup index.
    pub(crate) fn advance_index(&mut self, sizes: &PerPad<u64>) -> Result<()> {
        for id in PadId::ALL {
            let start = self.index.applied[id];
            for idx in start..sizes[id] {
                let leaf = self.pads[id]
                    .leaf(idx)
                    .ok_or_else(|| Error::tamper(id, idx, "committed leaf missing"))?;
                let rec = Record::from_leaf(leaf).map_err(|e| Error::tamper(id, idx, e.to_string()))?;
                self.index.apply(self.mode, id, idx, rec)?;
            }
        }
        Ok(())
    }

    // ---- verified lookups --------------------------------------------

    /// Returns the record at `index`, checked by inclusion proof against the
    /// dictionary root recorded in `at`.
    pub fn verified(&self, pad: PadId, index: u64, at: &AuthoritativeCheckpoint) -> Result<Verified<Record>> {
        let root = at.pad_root(pad);
        if index >= root.size {
            return Err(Error::tamper(pad, index, "leaf beyond the committed size"));
        }
        let leaf = self.pads[pad]
            .leaf(index)
            .ok_or_else(|| Error::tamper(pad, index, "committed leaf missing"))?;
        let proof = self.pads[pad].prove_inclusion(index, root.size)?;
        if !merkle::verify_inclusion(&proof, leaf, &root) {
            return Err(Error::tamper(pad, index, "inclusion proof does not verify under the sealed root"));
        }
        let value = Record::from_leaf(leaf).map_err(|e| Error::tamper(pad, index, e.to_string()))?;
        Ok(Verified {
            value,
            leaf_index: index,
            proof,
        })
    }

    fn indexed<T>(
        &self,
        pad: PadId,
        idx: Option<u64>,
        at: &AuthoritativeCheckpoint,
        pick: impl FnOnce(Record) -> Option<T>,
    ) -> Result<Option<Verified<T>>> {
        let Some(idx) = idx.filter(|&i| i < at.pad_sizes[pad]) else {
            return Ok(None);
        };
        let v = self.verified(pad, idx, at)?;
        let leaf_index = v.leaf_index;
        match pick(v.value.clone()) {
            Some(t) => Ok(Some(v.map(|_| t))),
            None => Err(Error::tamper(pad, leaf_index, "index points at a record of the wrong kind")),
        }
    }

    pub fn version_entry(&self, vr: &VersionRef, at: &AuthoritativeCheckpoint) -> Result<Option<Verified<VersionEntry>>> {
        let v = self.indexed(PadId::Catalog, self.index.versions.get(vr).copied(), at, |r| match r {
            Record::Version(e) => Some(e),
            _ => None,
        })?;
        match v {
            Some(v) if v.value.object != vr.object || v.value.version != vr.version => Err(Error::tamper(
                PadId::Catalog,
                v.leaf_index,
                format!("index maps {vr} to a different version"),
            )),
            v => Ok(v),
        }
    }

    pub fn tombstone(&self, vr: &VersionRef, at: &AuthoritativeCheckpoint) -> Result<Option<Verified<Tombstone>>> {
        self.indexed(PadId::Catalog, self.index.tombstones.get(vr).copied(), at, |r| match r {
            Record::Tombstone(t) if t.object == vr.object && t.version == vr.version => Some(t),
            _ => None,
        })
    }

    pub fn snapshot(&self, tag: &str, at: &AuthoritativeCheckpoint) -> Result<Option<Verified<SnapshotEntry>>> {
        self.indexed(PadId::Registry, self.index.snapshots.get(tag).copied(), at, |r| match r {
            Record::Snapshot(s) if s.tag == tag => Some(s),
            _ => None,
        })
    }

    pub fn head_pointer(&self, object: &ObjectId, at: &AuthoritativeCheckpoint) -> Result<Option<Verified<HeadPointer>>> {
        if self.mode != HeadTracking::PointerLeaves {
            return Ok(None);
        }
        let idx = self.index.heads.get(object).map(|h| h.leaf);
        self.indexed(PadId::Catalog, idx, at, |r| match r {
            Record::Head(h) if &h.object == object => Some(h),
            _ => None,
        })
    }

    /// Live head of `object` as (version, content digest), each part
    /// verified under `at`. `None` if never written or cleared by pruning.
    pub fn current_head(&self, object: &ObjectId, at: &AuthoritativeCheckpoint) -> Result<Option<(u64, Digest)>> {
        let version = match self.mode {
            HeadTracking::PointerLeaves => match self.head_pointer(object, at)? {
                Some(h) => h.value.head_version,
                None => None,
            },
            HeadTracking::VersionMetadata => {
                let Some(slot) = self.index.heads.get(object).filter(|h| h.leaf < at.pad_sizes.catalog) else {
                    return Ok(None);
                };
                let rec = self.verified(PadId::Catalog, slot.leaf, at)?;
                match rec.value {
                    Record::Version(e) if &e.object == object => Some(e.version),
                    Record::Tombstone(t) if &t.object == object => None,
                    _ => return Err(Error::tamper(PadId::Catalog, slot.leaf, "head index points at a foreign record")),
                }
            }
        };
        let Some(version) = version else {
            return Ok(None);
        };
        let entry = self
            .version_entry(&VersionRef::new(object.clone(), version), at)?
            .ok_or_else(|| Error::TamperDetected {
                pad: Some(PadId::Catalog),
                index: None,
                detail: format!("head of {object} names missing version {version}"),
            })?;
        Ok(Some((version, entry.value.content_digest)))
    }

    /// Head version according to the index alone, for request validation
    /// inside the monitor before the verified lookup.
    pub(crate) fn indexed_head(&self, object: &ObjectId) -> Option<u64> {
        self.index.heads.get(object).and_then(|h| h.version)
    }

    pub fn objects(&self) -> impl Iterator<Item = &ObjectId> {
        self.index.by_object.keys()
    }

    pub fn versions_of(&self, object: &ObjectId) -> &[u64] {
        self.index.by_object.get(object).map_or(&[], Vec::as_slice)
    }

    /// Catalog leaves that name `object`.
    pub fn object_leaves(&self, object: &ObjectId) -> &[u64] {
        self.index.object_leaves.get(object).map_or(&[], Vec::as_slice)
    }

    pub fn is_tombstoned(&self, vr: &VersionRef) -> bool {
        self.index.tombstones.contains_key(vr)
    }

    /// Snapshot tags in registry order.
    pub fn snapshot_tags(&self) -> Vec<String> {
        let mut v: Vec<_> = self.index.snapshots.iter().collect();
        v.sort_by_key(|(_, &i)| i);
        v.into_iter().map(|(t, _)| t.clone()).collect()
    }

    /// Versions referencing `digest` that carry no tombstone.
    pub fn live_references(&self, digest: &Digest) -> Vec<VersionRef> {
        self.index
            .digest_refs
            .get(digest)
            .map(|refs| refs.iter().filter(|r| !self.index.tombstones.contains_key(r)).cloned().collect())
            .unwrap_or_default()
    }

    pub fn is_referenced(&self, digest: &Digest) -> bool {
        self.index.digest_refs.contains_key(digest)
    }

    /// Transaction previously committed under `key`, if any.
    pub fn idempotent_txid(&self, key: &str) -> Option<TxId> {
        self.index
            .idempotency
            .get(key)
            .copied()
            .filter(|t| self.index.completions.contains_key(t))
    }

    /// Intent record for `txid`, verified under `at`.
    pub fn intent(&self, txid: TxId, at: &AuthoritativeCheckpoint) -> Result<Option<Verified<AuditRecord>>> {
        self.indexed(PadId::Log, self.index.intents.get(&txid).copied(), at, |r| match r {
            Record::Audit(a) if a.kind == AuditKind::Intent && a.txid == txid => Some(a),
            _ => None,
        })
    }

    pub fn completion(&self, txid: TxId, at: &AuthoritativeCheckpoint) -> Result<Option<Verified<AuditRecord>>> {
        self.indexed(PadId::Log, self.index.completions.get(&txid).copied(), at, |r| match r {
            Record::Audit(a) if a.kind == AuditKind::Completion && a.txid == txid => Some(a),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::TxId;

    fn hw(dir: &Path) -> HardwareRoot {
        HardwareRoot::open(dir.join("trusted")).unwrap()
    }

    #[test]
    fn aggregate_is_order_sensitive_and_matches_byte_oracle() {
        let (a, b, c) = (Digest::of(b"a"), Digest::of(b"b"), Digest::of(b"c"));
        assert_ne!(aggregate_root(&a, &b, &c), aggregate_root(&b, &a, &c));
        assert_eq!(aggregate_root(&a, &b, &c), aggregate_root(&a, &b, &c));
        let mut buf = b"ROOT".to_vec();
        for d in [a, b, c] {
            buf.extend_from_slice(&d.0);
        }
        use sha2::Digest as _;
        let expect: [u8; 32] = sha2::Sha256::digest(&buf).into();
        assert_eq!(aggregate_root(&a, &b, &c).0, expect);
    }

    #[test]
    fn checkpoint_encoding_round_trips_at_fixed_length() {
        let tmp = tempfile::tempdir().unwrap();
        let hw = hw(tmp.path());
        let store = StateStore::open(tmp.path().join("u"), HeadTracking::PointerLeaves).unwrap();
        let chk = AuthoritativeCheckpoint::from_roots(&store.roots(), 7, &hw);
        let bytes = chk.encode();
        assert_eq!(bytes.len(), CHECKPOINT_LEN);
        assert_eq!(AuthoritativeCheckpoint::decode(&bytes).unwrap(), chk);
        assert!(chk.is_authentic(&hw));
        let mut bad = bytes.clone();
        bad[20] ^= 1;
        let forged = AuthoritativeCheckpoint::decode(&bad).unwrap();
        assert!(!forged.is_authentic(&hw));
    }

    fn record(obj: &str, version: u64) -> Record {
        Record::Version(VersionEntry {
            object: ObjectId::new(obj).unwrap(),
            version,
            content_digest: Digest::of(obj.as_bytes()),
            origin: None,
            txid: TxId(version as u128),
            timestamp: 0,
        })
    }

    #[test]
    fn load_classifies_ahead_behind_and_suffix() {
        let tmp = tempfile::tempdir().unwrap();
        let hw = hw(tmp.path());
        let mut store = StateStore::open(tmp.path().join("u"), HeadTracking::VersionMetadata).unwrap();
        assert!(matches!(
            store.load_latest_checkpoint(&hw),
            Err(Error::RecoveryNeeded(Ambiguity::None { hardware: 0 }))
        ));
        let genesis = AuthoritativeCheckpoint::from_roots(&store.roots(), 0, &hw);
        store.persist_checkpoint(&genesis, || Ok(())).unwrap();
        assert_eq!(store.load_latest_checkpoint(&hw).unwrap(), genesis);

        store.append(PadId::Catalog, &record("A", 1)).unwrap();
        assert!(matches!(
            store.load_latest_checkpoint(&hw),
            Err(Error::RecoveryNeeded(Ambiguity::UncommittedSuffix { pad: PadId::Catalog, .. }))
        ));

        let next = AuthoritativeCheckpoint::from_roots(&store.roots(), 1, &hw);
        store.persist_checkpoint(&next, || Ok(())).unwrap();
        assert!(matches!(
            store.load_latest_checkpoint(&hw),
            Err(Error::RecoveryNeeded(Ambiguity::Ahead { checkpoint: 1, hardware: 0 }))
        ));
        hw.counter_increment().unwrap();
        assert_eq!(store.load_latest_checkpoint(&hw).unwrap(), next);
        hw.counter_increment().unwrap();
        assert!(matches!(
            store.load_latest_checkpoint(&hw),
            Err(Error::RecoveryNeeded(Ambiguity::Behind { checkpoint: 1, hardware: 2 }))
        ));
    }

    #[test]
    fn both_slots_are_kept() {
        let tmp = tempfile::tempdir().unwrap();
        let hw = hw(tmp.path());
        let mut store = StateStore::open(tmp.path().join("u"), HeadTracking::VersionMetadata).unwrap();
        for c in 0..3 {
            let chk = AuthoritativeCheckpoint::from_roots(&store.roots(), c, &hw);
            store.persist_checkpoint(&chk, || Ok(())).unwrap();
        }
        let counters: BTreeSet<u64> = store.read_checkpoints().unwrap().into_iter().map(|(_, c)| c.counter).collect();
        assert_eq!(counters, BTreeSet::from([1, 2]));
    }

    #[test]
    fn verified_lookup_detects_swapped_leaf_file() {
        let tmp = tempfile::tempdir().unwrap();
        let hw = hw(tmp.path());
        let udir = tmp.path().join("u");
        let mut store = StateStore::open(&udir, HeadTracking::VersionMetadata).unwrap();
        store.append(PadId::Catalog, &record("A", 1)).unwrap();
        let chk = AuthoritativeCheckpoint::from_roots(&store.roots(), 0, &hw);
        store.rebuild_index(&chk).unwrap();
        let a = ObjectId::new("A").unwrap();
        assert_eq!(store.current_head(&a, &chk).unwrap(), Some((1, Digest::of(b"A"))));
        drop(store);

        std::fs::remove_file(udir.join(CATALOG_FILE)).unwrap();
        let mut store = StateStore::open(&udir, HeadTracking::VersionMetadata).unwrap();
        store.append(PadId::Catalog, &record("B", 1)).unwrap();
        let mut forged = record("A", 1);
        if let Record::Version(v) = &mut forged {
            v.content_digest = Digest::of(b"evil");
        }
        store.pads.catalog = Pad::in_memory();
        store.append(PadId::Catalog, &forged).unwrap();
        store.rebuild_index(&chk).unwrap();
        assert!(store.current_head(&a, &chk).unwrap_err().is_tamper());
        assert!(store.verify_prefixes(&chk).unwrap_err().is_tamper());
    }
}

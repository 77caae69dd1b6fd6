//! The reference monitor: the only component that mutates state.
//!
//! Every transition runs the same write-ahead protocol: intent record,
//! validation, dictionary appends, completion record, seal at the next
//! counter value, checkpoint publication, counter advance. A crash anywhere
//! leaves the trusted in-flight flag set, and the next open recovers by
//! picking a fully-paired checkpoint and advancing the counter by two.

use std::collections::{BTreeSet, HashSet};
use std::sync::{Mutex, RwLock, RwLockReadGuard, RwLockWriteGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::config::{Config, RecoveryPolicy};
use crate::content_store::ContentStore;
use crate::digest::Digest;
use crate::error::{Error, Ineligibility, Result};
use crate::hardware_root::HardwareRoot;
use crate::policy::Authorizer;
use crate::records::{
    validate_tag, AuditKind, AuditRecord, AuditScope, HeadPointer, ObjectId, OpKind, PruneReason,
    PruneReasonKind, Record, SnapshotEntry, TargetMode, Tombstone, TxId, VersionEntry, VersionRef,
};
use crate::state::{Ambiguity, AuthoritativeCheckpoint, HeadTracking, PadId, PerPad, StateStore};

pub const HOOK_INTENT_BEFORE: &str = "intent.before_append";
pub const HOOK_INTENT_AFTER: &str = "intent.after_append";
pub const HOOK_VALIDATE_AFTER: &str = "validate.after";
pub const HOOK_CATALOG_BEFORE: &str = "catalog.before_append";
pub const HOOK_CATALOG_MID: &str = "catalog.mid_append";
pub const HOOK_CATALOG_AFTER: &str = "catalog.after_append";
pub const HOOK_REGISTRY_AFTER: &str = "registry.after_append";
pub const HOOK_COMPLETION_BEFORE: &str = "completion.before_append";
pub const HOOK_COMPLETION_AFTER: &str = "completion.after_append";
pub const HOOK_SEAL_AFTER: &str = "seal.after";
pub const HOOK_CHECKPOINT_MID: &str = "checkpoint.mid_write";
pub const HOOK_CHECKPOINT_AFTER: &str = "checkpoint.after_persist";
pub const HOOK_COUNTER_AFTER: &str = "counter.after_advance";
pub const HOOK_RECOVERY_TRUNCATED: &str = "recovery.after_truncate";
pub const HOOK_RECOVERY_PERSISTED: &str = "recovery.after_persist";

/// Protocol step boundaries of a transaction, in execution order. Every
/// operation passes all of them, whether or not the step appends leaves.
pub const PROTOCOL_HOOKS: [&str; 12] = [
    HOOK_INTENT_BEFORE,
    HOOK_INTENT_AFTER,
    HOOK_VALIDATE_AFTER,
    HOOK_CATALOG_BEFORE,
    HOOK_CATALOG_MID,
    HOOK_CATALOG_AFTER,
    HOOK_REGISTRY_AFTER,
    HOOK_COMPLETION_BEFORE,
    HOOK_COMPLETION_AFTER,
    HOOK_SEAL_AFTER,
    HOOK_CHECKPOINT_MID,
    HOOK_CHECKPOINT_AFTER,
];

/// Environment variable naming a hook at which the process aborts.
pub const CRASH_HOOK_ENV: &str = "ROLLGUARD_CRASH_HOOK";

/// Actor recorded for prunes made by the configured retention window.
pub const RETENTION_ACTOR: &str = "retention";

const DETERMINISTIC_EPOCH_US: u64 = 1_700_000_000_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashAction {
    /// Kill the process on the spot.
    Abort,
    /// Fail the operation and refuse further use until reopened.
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashPlan {
    pub hook: String,
    pub action: CrashAction,
}

impl CrashPlan {
    pub fn abort_at(hook: impl Into<String>) -> Self {
        Self {
            hook: hook.into(),
            action: CrashAction::Abort,
        }
    }

    pub fn error_at(hook: impl Into<String>) -> Self {
        Self {
            hook: hook.into(),
            action: CrashAction::Error,
        }
    }

    pub fn from_env() -> Option<Self> {
        std::env::var(CRASH_HOOK_ENV)
            .ok()
            .filter(|h| !h.is_empty())
            .map(Self::abort_at)
    }
}

/// New object bytes, or a digest already present in the content store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Content {
    Bytes(#[serde(with = "b64")] Vec<u8>),
    Digest(Digest),
}

mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

impl Content {
    pub fn bytes(b: impl Into<Vec<u8>>) -> Self {
        Content::Bytes(b.into())
    }

    pub fn base64(&self) -> Option<String> {
        match self {
            Content::Bytes(b) => Some(base64::engine::general_purpose::STANDARD.encode(b)),
            Content::Digest(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Change {
    pub object: ObjectId,
    pub content: Content,
}

impl Change {
    pub fn new(object: ObjectId, bytes: impl Into<Vec<u8>>) -> Self {
        Self {
            object,
            content: Content::Bytes(bytes.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotSpec {
    pub tag: String,
    /// Objects to bind. Empty means the objects changed by the update.
    #[serde(default)]
    pub members: Vec<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateRequest {
    pub changes: Vec<Change>,
    #[serde(default)]
    pub snapshot: Option<SnapshotSpec>,
    pub actor: String,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

impl UpdateRequest {
    pub fn new(actor: impl Into<String>, changes: Vec<Change>) -> Self {
        Self {
            changes,
            snapshot: None,
            actor: actor.into(),
            justification: String::new(),
            idempotency_key: None,
        }
    }

    pub fn justify(mut self, j: impl Into<String>) -> Self {
        self.justification = j.into();
        self
    }

    pub fn with_snapshot(mut self, tag: impl Into<String>, members: Vec<ObjectId>) -> Self {
        self.snapshot = Some(SnapshotSpec {
            tag: tag.into(),
            members,
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotRequest {
    pub tag: String,
    pub members: Vec<ObjectId>,
    pub actor: String,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

impl SnapshotRequest {
    pub fn new(actor: impl Into<String>, tag: impl Into<String>, members: Vec<ObjectId>) -> Self {
        Self {
            tag: tag.into(),
            members,
            actor: actor.into(),
            justification: String::new(),
            idempotency_key: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RollbackRequest {
    pub mode: TargetMode,
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub targets: Vec<VersionRef>,
    pub actor: String,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

impl RollbackRequest {
    pub fn to_snapshot(actor: impl Into<String>, tag: impl Into<String>) -> Self {
        Self {
            mode: TargetMode::Snapshot,
            tag: Some(tag.into()),
            targets: Vec::new(),
            actor: actor.into(),
            justification: String::new(),
            idempotency_key: None,
        }
    }

    pub fn selective(actor: impl Into<String>, targets: Vec<VersionRef>) -> Self {
        Self {
            mode: TargetMode::Selective,
            tag: None,
            targets,
            actor: actor.into(),
            justification: String::new(),
            idempotency_key: None,
        }
    }

    pub fn justify(mut self, j: impl Into<String>) -> Self {
        self.justification = j.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneRequest {
    pub mode: TargetMode,
    #[serde(default)]
    pub tag: Option<String>,
    #[serde(default)]
    pub targets: Vec<VersionRef>,
    pub reason: PruneReason,
    pub actor: String,
    #[serde(default)]
    pub justification: String,
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

impl PruneRequest {
    pub fn selective(actor: impl Into<String>, targets: Vec<VersionRef>, reason: PruneReason) -> Self {
        Self {
            mode: TargetMode::Selective,
            tag: None,
            targets,
            reason,
            actor: actor.into(),
            justification: String::new(),
            idempotency_key: None,
        }
    }

    pub fn snapshot(actor: impl Into<String>, tag: impl Into<String>, reason: PruneReason) -> Self {
        Self {
            mode: TargetMode::Snapshot,
            tag: Some(tag.into()),
            targets: Vec::new(),
            reason,
            actor: actor.into(),
            justification: String::new(),
            idempotency_key: None,
        }
    }

    pub fn justify(mut self, j: impl Into<String>) -> Self {
        self.justification = j.into();
        self
    }
}

/// Result of a committed (or replayed) transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TxOutcome {
    pub txid: TxId,
    pub op: OpKind,
    pub checkpoint: AuthoritativeCheckpoint,
    /// Leaves appended to each dictionary by this transaction.
    pub appended: PerPad<u64>,
    /// Versions created (update, rollback), bound (snapshot) or
    /// de-authorized (prune).
    pub versions: Vec<VersionRef>,
    /// Blobs deleted after a prune committed.
    pub reclaimed: Vec<Digest>,
    /// True when an idempotency key matched an earlier commit and nothing
    /// new was written.
    pub replayed: bool,
}

impl TxOutcome {
    pub fn counter(&self) -> u64 {
        self.checkpoint.counter
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub ambiguity: Ambiguity,
    pub hardware_before: u64,
    pub hardware_after: u64,
    /// Counter of the checkpoint whose state was kept.
    pub recovered_from: u64,
    /// Leaves discarded from each dictionary.
    pub discarded: PerPad<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StorageUsage {
    pub content_bytes: u64,
    pub metadata_bytes: u64,
}

struct Inner {
    store: StateStore,
    current: AuthoritativeCheckpoint,
    poisoned: bool,
}

/// What a transaction appends once validation has passed.
#[derive(Default)]
struct TxPlan {
    catalog: Vec<Record>,
    registry: Option<Record>,
    affected: Vec<VersionRef>,
    /// Digests to reclaim after commit if nothing live references them.
    reclaim: Vec<Digest>,
}

struct TxMeta {
    txid: TxId,
    version: u64,
    timestamp: u64,
}

pub struct Monitor {
    config: Config,
    hw: HardwareRoot,
    content: ContentStore,
    authorizer: Box<dyn Authorizer>,
    inner: RwLock<Inner>,
    crash: Mutex<Option<CrashPlan>>,
    recovery: Option<RecoveryReport>,
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor")
            .field("trusted", &self.hw.dir())
            .field("counter", &self.hw.counter_read())
            .finish_non_exhaustive()
    }
}

fn now_micros() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as u64)
        .unwrap_or(0)
}

fn require(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidRequest(msg()))
    }
}

fn validate_common(actor: &str, key: &Option<String>) -> Result<()> {
    require(!actor.is_empty(), || "actor must not be empty".into())?;
    if let Some(k) = key {
        require(!k.is_empty() && k.len() <= 256, || "idempotency key must be 1..=256 bytes".into())?;
    }
    Ok(())
}

fn validate_targets(mode: TargetMode, tag: &Option<String>, targets: &[VersionRef], unique_objects: bool) -> Result<()> {
    match mode {
        TargetMode::Snapshot => {
            let tag = tag.as_deref().ok_or_else(|| Error::InvalidRequest("snapshot mode requires a tag".into()))?;
            validate_tag(tag).map_err(Error::InvalidRequest)?;
            require(targets.is_empty(), || "snapshot mode takes no explicit targets".into())
        }
        TargetMode::Selective => {
            require(tag.is_none(), || "selective mode takes no tag".into())?;
            require(!targets.is_empty(), || "selective mode requires targets".into())?;
            if unique_objects {
                let objs: HashSet<_> = targets.iter().map(|t| &t.object).collect();
                require(objs.len() == targets.len(), || "targets name an object more than once".into())
            } else {
                let refs: HashSet<_> = targets.iter().collect();
                require(refs.len() == targets.len(), || "duplicate targets".into())
            }
        }
    }
}

impl Monitor {
    /// Opens the store described by `config`, initializing a fresh store and
    /// running recovery if the previous process did not shut down cleanly.
    pub fn open(config: Config) -> Result<Self> {
        let authorizer = Box::new(config.policy.clone());
        Self::open_with(config, authorizer, None)
    }

    /// As [`Monitor::open`], with a custom authorizer and a crash plan armed
    /// before recovery runs.
    pub fn open_with(config: Config, authorizer: Box<dyn Authorizer>, crash: Option<CrashPlan>) -> Result<Self> {
        let hw = HardwareRoot::open(config.trusted_dir()?)?;
        let untrusted = config.untrusted_dir()?;
        let content = ContentStore::open(untrusted.join("content"))?;
        let store = StateStore::open(&untrusted, config.monitor.head_tracking)?;
        let mut m = Monitor {
            hw,
            content,
            authorizer,
            crash: Mutex::new(crash),
            recovery: None,
            inner: RwLock::new(Inner {
                current: placeholder_checkpoint(),
                store,
                poisoned: true,
            }),
            config,
        };
        m.startup()?;
        Ok(m)
    }

    fn startup(&mut self) -> Result<()> {
        let inner = self.inner.get_mut().unwrap();
        let loaded = inner.store.load_latest_checkpoint(&self.hw);
        let chk = match loaded {
            Ok(chk) => chk,
            Err(Error::RecoveryNeeded(Ambiguity::Behind { checkpoint, hardware })) => {
                return Err(Error::RollbackDetected {
                    checkpoint_counter: checkpoint,
                    hardware_counter: hardware,
                });
            }
            Err(Error::RecoveryNeeded(Ambiguity::None { hardware: 0 }))
                if inner.store.sizes().total() == 0 && inner.store.read_checkpoints()?.is_empty() =>
            {
                let genesis = AuthoritativeCheckpoint::from_roots(&inner.store.roots(), 0, &self.hw);
                inner.store.persist_checkpoint(&genesis, || Ok(()))?;
                genesis
            }
            Err(Error::RecoveryNeeded(amb)) => {
                if self.config.monitor.recovery_policy == RecoveryPolicy::Halt {
                    return Err(Error::Unrecoverable(format!("recovery required ({amb:?}) and policy is halt")));
                }
                let crash = self.crash.lock().unwrap().clone();
                let (chk, report) = recover(&mut inner.store, &self.hw, amb, &|h| fire(&crash, h))?;
                self.recovery = Some(report);
                chk
            }
            Err(e) => return Err(e),
        };
        inner.store.rebuild_index(&chk)?;
        inner.current = chk;
        inner.poisoned = false;
        Ok(())
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn hardware(&self) -> &HardwareRoot {
        &self.hw
    }

    pub fn content(&self) -> &ContentStore {
        &self.content
    }

    pub fn head_tracking(&self) -> HeadTracking {
        self.config.monitor.head_tracking
    }

    /// Report of the recovery performed by this open, if any.
    pub fn last_recovery(&self) -> Option<&RecoveryReport> {
        self.recovery.as_ref()
    }

    pub fn set_crash_plan(&self, plan: Option<CrashPlan>) {
        *self.crash.lock().unwrap() = plan;
    }

    fn hook(&self, name: &'static str) -> Result<()> {
        let plan = self.crash.lock().unwrap().clone();
        fire(&plan, name)
    }

    fn read(&self) -> Result<RwLockReadGuard<'_, Inner>> {
        let g = self.inner.read().unwrap_or_else(|e| e.into_inner());
        if g.poisoned {
            return Err(Error::Poisoned);
        }
        Ok(g)
    }

    fn write(&self) -> Result<RwLockWriteGuard<'_, Inner>> {
        let g = self.inner.write().unwrap_or_else(|e| e.into_inner());
        if g.poisoned {
            return Err(Error::Poisoned);
        }
        Ok(g)
    }

    // ---- reads -------------------------------------------------------

    pub fn checkpoint(&self) -> Result<AuthoritativeCheckpoint> {
        Ok(self.read()?.current.clone())
    }

    pub fn counter(&self) -> u64 {
        self.hw.counter_read()
    }

    /// Runs `f` against the store pinned to the current checkpoint. Writers
    /// wait until `f` returns.
    pub fn view<R>(&self, f: impl FnOnce(&StateStore, &AuthoritativeCheckpoint) -> R) -> Result<R> {
        let g = self.read()?;
        Ok(f(&g.store, &g.current))
    }

    pub fn head(&self, object: &ObjectId) -> Result<Option<(u64, Digest)>> {
        let g = self.read()?;
        g.store.current_head(object, &g.current)
    }

    /// Current bytes of `object`: head verified under the root, then the
    /// bytes verified against the head's digest.
    pub fn read_object(&self, object: &ObjectId) -> Result<Option<(u64, Vec<u8>)>> {
        let Some((v, digest)) = self.head(object)? else {
            return Ok(None);
        };
        Ok(Some((v, self.content.get_verified(&digest)?)))
    }

    pub fn read_version(&self, vr: &VersionRef) -> Result<Vec<u8>> {
        let entry = {
            let g = self.read()?;
            g.store
                .version_entry(vr, &g.current)?
                .ok_or_else(|| Error::ineligible(Ineligibility::UnknownVersion, vr.to_string()))?
        };
        self.content.get_verified(&entry.value.content_digest)
    }

    pub fn storage_usage(&self) -> Result<StorageUsage> {
        let g = self.read()?;
        Ok(StorageUsage {
            content_bytes: self.content.total_bytes(),
            metadata_bytes: g.store.metadata_bytes(),
        })
    }

    // ---- transactions ------------------------------------------------

    pub fn state_update(&self, req: UpdateRequest) -> Result<TxOutcome> {
        validate_common(&req.actor, &req.idempotency_key)?;
        require(!req.changes.is_empty(), || "update needs at least one change".into())?;
        let objs: HashSet<_> = req.changes.iter().map(|c| &c.object).collect();
        require(objs.len() == req.changes.len(), || "update names an object more than once".into())?;
        if let Some(s) = &req.snapshot {
            validate_tag(&s.tag).map_err(Error::InvalidRequest)?;
            let m: HashSet<_> = s.members.iter().collect();
            require(m.len() == s.members.len(), || "snapshot names an object more than once".into())?;
        }
        let snapshots = req.snapshot.is_some();
        let mut g = self.write()?;
        let out = self.update_locked(&mut g, req)?;
        if snapshots {
            self.enforce_retention(&mut g)?;
        }
        Ok(out)
    }

    fn update_locked(&self, g: &mut Inner, req: UpdateRequest) -> Result<TxOutcome> {
        let changed: Vec<ObjectId> = req.changes.iter().map(|c| c.object.clone()).collect();
        let snap = req.snapshot.as_ref().map(|s| {
            let members = if s.members.is_empty() { changed.clone() } else { s.members.clone() };
            (s.tag.clone(), members)
        });
        let scope = |store: &StateStore, _: &AuthoritativeCheckpoint, meta: &TxMeta| AuditScope::Update {
            objects: changed.clone(),
            version: meta.version,
            snapshot_tag: snap.as_ref().map(|s| s.0.clone()),
            snapshot_members: snap
                .as_ref()
                .map(|(_, members)| {
                    members
                        .iter()
                        .filter_map(|o| {
                            let v = if changed.contains(o) { Some(meta.version) } else { store.indexed_head(o) };
                            v.map(|v| VersionRef::new(o.clone(), v))
                        })
                        .collect()
                })
                .unwrap_or_default(),
        };
        let mode = g.store.head_tracking();
        let plan = |store: &StateStore, at: &AuthoritativeCheckpoint, meta: &TxMeta| -> Result<TxPlan> {
            let mut plan = TxPlan::default();
            if let Some((tag, members)) = &snap {
                if store.snapshot(tag, at)?.is_some() {
                    return Err(Error::ineligible(Ineligibility::DuplicateTag, tag.clone()));
                }
                let mut bound = Vec::new();
                for o in members {
                    if changed.contains(o) {
                        bound.push(VersionRef::new(o.clone(), meta.version));
                    } else {
                        bound.push(live_head(store, at, o)?);
                    }
                }
                plan.registry = Some(Record::Snapshot(SnapshotEntry {
                    tag: tag.clone(),
                    members: bound,
                    txid: meta.txid,
                    timestamp: meta.timestamp,
                }));
            }
            for c in &req.changes {
                let digest = match &c.content {
                    Content::Bytes(b) => self.content.put(b)?,
                    Content::Digest(d) => {
                        self.content.get_verified(d).map_err(|e| match e {
                            Error::NotFound(d) => Error::InvalidRequest(format!("content {d} is not in the store")),
                            e => e,
                        })?;
                        *d
                    }
                };
                let origin = store.current_head(&c.object, at)?.map(|(v, _)| v);
                push_version(&mut plan, mode, &c.object, meta, digest, origin);
            }
            Ok(plan)
        };
        self.execute(g, OpKind::Update, &req.actor, &req.justification, &req.idempotency_key, scope, plan)
    }

    pub fn take_snapshot(&self, req: SnapshotRequest) -> Result<TxOutcome> {
        validate_common(&req.actor, &req.idempotency_key)?;
        validate_tag(&req.tag).map_err(Error::InvalidRequest)?;
        require(!req.members.is_empty(), || "snapshot needs at least one member".into())?;
        let m: HashSet<_> = req.members.iter().collect();
        require(m.len() == req.members.len(), || "snapshot names an object more than once".into())?;
        let mut g = self.write()?;
        let scope = |store: &StateStore, _: &AuthoritativeCheckpoint, _: &TxMeta| AuditScope::Snapshot {
            tag: req.tag.clone(),
            members: req
                .members
                .iter()
                .filter_map(|o| store.indexed_head(o).map(|v| VersionRef::new(o.clone(), v)))
                .collect(),
        };
        let plan = |store: &StateStore, at: &AuthoritativeCheckpoint, meta: &TxMeta| -> Result<TxPlan> {
            if store.snapshot(&req.tag, at)?.is_some() {
                return Err(Error::ineligible(Ineligibility::DuplicateTag, req.tag.clone()));
            }
            let members = req
                .members
                .iter()
                .map(|o| live_head(store, at, o))
                .collect::<Result<Vec<_>>>()?;
            Ok(TxPlan {
                registry: Some(Record::Snapshot(SnapshotEntry {
                    tag: req.tag.clone(),
                    members,
                    txid: meta.txid,
                    timestamp: meta.timestamp,
                })),
                ..TxPlan::default()
            })
        };
        let out = self.execute(&mut g, OpKind::Snapshot, &req.actor, &req.justification, &req.idempotency_key, scope, plan)?;
        self.enforce_retention(&mut g)?;
        Ok(out)
    }

    pub fn rollback(&self, req: RollbackRequest) -> Result<TxOutcome> {
        validate_common(&req.actor, &req.idempotency_key)?;
        validate_targets(req.mode, &req.tag, &req.targets, true)?;
        let mut g = self.write()?;
        let scope = |store: &StateStore, at: &AuthoritativeCheckpoint, _: &TxMeta| {
            let objects: Vec<ObjectId> = match req.mode {
                TargetMode::Selective => req.targets.iter().map(|t| t.object.clone()).collect(),
                TargetMode::Snapshot => {
                    let tag = req.tag.as_deref().unwrap_or_default();
                    store
                        .snapshot(tag, at)
                        .ok()
                        .flatten()
                        .map(|s| s.value.members.into_iter().map(|m| m.object).collect())
                        .unwrap_or_default()
                }
            };
            AuditScope::Rollback {
                mode: req.mode,
                tag: req.tag.clone(),
                targets: req.targets.clone(),
                prior_heads: objects.into_iter().map(|o| {
                    let h = store.indexed_head(&o);
                    (o, h)
                }).collect(),
            }
        };
        let mode = g.store.head_tracking();
        let plan = |store: &StateStore, at: &AuthoritativeCheckpoint, meta: &TxMeta| -> Result<TxPlan> {
            let targets = resolve_targets(store, at, req.mode, &req.tag, &req.targets)?;
            let mut plan = TxPlan::default();
            for t in &targets {
                let entry = eligible_version(store, at, t, Ineligibility::DeAuthorized)?;
                self.content.get_verified(&entry.content_digest)?;
                push_version(&mut plan, mode, &t.object, meta, entry.content_digest, Some(t.version));
            }
            Ok(plan)
        };
        self.execute(&mut g, OpKind::Rollback, &req.actor, &req.justification, &req.idempotency_key, scope, plan)
    }

    pub fn prune(&self, req: PruneRequest) -> Result<TxOutcome> {
        validate_common(&req.actor, &req.idempotency_key)?;
        validate_targets(req.mode, &req.tag, &req.targets, false)?;
        let mut g = self.write()?;
        self.prune_locked(&mut g, req)
    }

    fn prune_locked(&self, g: &mut Inner, req: PruneRequest) -> Result<TxOutcome> {
        let scope = |_: &StateStore, _: &AuthoritativeCheckpoint, _: &TxMeta| AuditScope::Prune {
            mode: req.mode,
            tag: req.tag.clone(),
            targets: req.targets.clone(),
            reason: req.reason.clone(),
        };
        let mode = g.store.head_tracking();
        let plan = |store: &StateStore, at: &AuthoritativeCheckpoint, meta: &TxMeta| -> Result<TxPlan> {
            let targets = resolve_targets(store, at, req.mode, &req.tag, &req.targets)?;
            let mut plan = TxPlan::default();
            for t in targets {
                let entry = eligible_version(store, at, &t, Ineligibility::AlreadyPruned)?;
                plan.catalog.push(Record::Tombstone(Tombstone {
                    object: t.object.clone(),
                    version: t.version,
                    reason: req.reason.clone(),
                    txid: meta.txid,
                    justification: req.justification.clone(),
                    timestamp: meta.timestamp,
                }));
                let is_head = store.current_head(&t.object, at)?.is_some_and(|(v, _)| v == t.version);
                if is_head && mode == HeadTracking::PointerLeaves {
                    plan.catalog.push(Record::Head(HeadPointer {
                        object: t.object.clone(),
                        head_version: None,
                        txid: meta.txid,
                    }));
                }
                plan.reclaim.push(entry.content_digest);
                plan.affected.push(t);
            }
            Ok(plan)
        };
        self.execute(g, OpKind::Prune, &req.actor, &req.justification, &req.idempotency_key, scope, plan)
    }

    /// Prunes every version bound only by snapshots older than the `keep`
    /// most recent ones, sparing current heads. Returns `None` when nothing
    /// is due.
    pub fn apply_retention(&self, keep: usize, actor: &str) -> Result<Option<TxOutcome>> {
        validate_common(actor, &None)?;
        let mut g = self.write()?;
        self.retention_locked(&mut g, keep, actor)
    }

    // Configured retention after a commit that created a snapshot.
    fn enforce_retention(&self, g: &mut Inner) -> Result<()> {
        if let Some(keep) = self.config.monitor.retention_snapshots {
            self.retention_locked(g, keep, RETENTION_ACTOR)?;
        }
        Ok(())
    }

    fn retention_locked(&self, g: &mut Inner, keep: usize, actor: &str) -> Result<Option<TxOutcome>> {
        let targets = {
            let at = g.current.clone();
            let store = &g.store;
            let tags = store.snapshot_tags();
            let split = tags.len().saturating_sub(keep);
            let mut retained = HashSet::new();
            for tag in &tags[split..] {
                if let Some(s) = store.snapshot(tag, &at)? {
                    retained.extend(s.value.members);
                }
            }
            let mut due = BTreeSet::new();
            for tag in &tags[..split] {
                let Some(s) = store.snapshot(tag, &at)? else { continue };
                for m in s.value.members {
                    let head = store.current_head(&m.object, &at)?.map(|(v, _)| v);
                    if !retained.contains(&m) && !store.is_tombstoned(&m) && head != Some(m.version) {
                        due.insert(m);
                    }
                }
            }
            due.into_iter().collect::<Vec<_>>()
        };
        if targets.is_empty() {
            return Ok(None);
        }
        let req = PruneRequest::selective(actor, targets, PruneReason::new(PruneReasonKind::RetentionExpired, format!("keep {keep} snapshots")))
            .justify(format!("retention window of {keep} snapshots"));
        self.prune_locked(g, req).map(Some)
    }

    /// Deletes a blob that no untombstoned version references. Unknown
    /// digests are a no-op.
    pub fn reclaim(&self, digest: &Digest) -> Result<bool> {
        let g = self.write()?;
        let live = g.store.live_references(digest);
        if let Some(r) = live.first() {
            return Err(Error::ineligible(Ineligibility::StillReferenced, format!("{digest} is live in {r}")));
        }
        self.content.remove(digest)
    }

    #[allow(clippy::too_many_arguments)]
    fn execute(
        &self,
        g: &mut Inner,
        op: OpKind,
        actor: &str,
        justification: &str,
        key: &Option<String>,
        scope: impl FnOnce(&StateStore, &AuthoritativeCheckpoint, &TxMeta) -> AuditScope,
        plan: impl FnOnce(&StateStore, &AuthoritativeCheckpoint, &TxMeta) -> Result<TxPlan>,
    ) -> Result<TxOutcome> {
        if let Some(k) = key {
            if let Some(out) = self.replay(g, op, k)? {
                return Ok(out);
            }
        }
        let c = g.current.counter;
        debug_assert_eq!(c, self.hw.counter_read());
        let meta = if self.config.monitor.deterministic {
            TxMeta {
                txid: TxId(((c as u128) << 64) | g.store.pad(PadId::Log).size() as u128),
                version: c + 1,
                timestamp: DETERMINISTIC_EPOCH_US + (c + 1) * 1_000_000,
            }
        } else {
            TxMeta {
                txid: TxId(rand::random()),
                version: c + 1,
                timestamp: now_micros(),
            }
        };
        let intent = AuditRecord {
            kind: AuditKind::Intent,
            txid: meta.txid,
            op,
            prior_root: g.current.root,
            actor: actor.to_owned(),
            justification: justification.to_owned(),
            scope: scope(&g.store, &g.current, &meta),
            timestamp: meta.timestamp,
            idempotency_key: key.clone(),
        };

        self.hw.begin_transaction()?;
        let result = self.run_protocol(g, op, intent, &meta, plan);
        match &result {
            Ok(_) => {}
            Err(Aborted(_)) => {}
            Err(Failed(_)) => g.poisoned = true,
        }
        result.map_err(TxError::into_inner)
    }

    fn run_protocol(
        &self,
        g: &mut Inner,
        op: OpKind,
        intent: AuditRecord,
        meta: &TxMeta,
        plan: impl FnOnce(&StateStore, &AuthoritativeCheckpoint, &TxMeta) -> Result<TxPlan>,
    ) -> std::result::Result<TxOutcome, TxError> {
        let before = g.store.sizes();
        let prior_root = intent.prior_root;

        self.hook(HOOK_INTENT_BEFORE).map_err(Failed)?;
        g.store.append(PadId::Log, &Record::Audit(intent.clone())).map_err(Failed)?;
        g.store.sync(PadId::Log).map_err(Failed)?;
        self.hook(HOOK_INTENT_AFTER).map_err(Failed)?;

        if !self.authorizer.authorize(&intent.actor, op) {
            self.hw.abort_transaction().map_err(Failed)?;
            return Err(Aborted(Error::PolicyDenied {
                actor: intent.actor,
                op: op.name(),
            }));
        }
        let plan = match plan(&g.store, &g.current, meta) {
            Ok(p) => p,
            Err(e) => {
                self.hw.abort_transaction().map_err(Failed)?;
                return Err(Aborted(e));
            }
        };
        self.hook(HOOK_VALIDATE_AFTER).map_err(Failed)?;

        self.hook(HOOK_CATALOG_BEFORE).map_err(Failed)?;
        for (i, rec) in plan.catalog.iter().enumerate() {
            g.store.append(PadId::Catalog, rec).map_err(Failed)?;
            if i == 0 {
                self.hook(HOOK_CATALOG_MID).map_err(Failed)?;
            }
        }
        if plan.catalog.is_empty() {
            self.hook(HOOK_CATALOG_MID).map_err(Failed)?;
        }
        g.store.sync(PadId::Catalog).map_err(Failed)?;
        self.hook(HOOK_CATALOG_AFTER).map_err(Failed)?;

        if let Some(rec) = &plan.registry {
            g.store.append(PadId::Registry, rec).map_err(Failed)?;
            g.store.sync(PadId::Registry).map_err(Failed)?;
        }
        self.hook(HOOK_REGISTRY_AFTER).map_err(Failed)?;

        let affected = match (&plan.registry, op) {
            (Some(Record::Snapshot(s)), OpKind::Snapshot) => s.members.clone(),
            _ => plan.affected.clone(),
        };
        let completion = AuditRecord {
            kind: AuditKind::Completion,
            txid: meta.txid,
            op,
            prior_root,
            actor: intent.actor.clone(),
            justification: intent.justification.clone(),
            scope: AuditScope::Completed {
                version: meta.version,
                affected: affected.clone(),
            },
            timestamp: meta.timestamp,
            idempotency_key: intent.idempotency_key.clone(),
        };
        self.hook(HOOK_COMPLETION_BEFORE).map_err(Failed)?;
        g.store.append(PadId::Log, &Record::Audit(completion)).map_err(Failed)?;
        g.store.sync(PadId::Log).map_err(Failed)?;
        self.hook(HOOK_COMPLETION_AFTER).map_err(Failed)?;

        let chk = AuthoritativeCheckpoint::from_roots(&g.store.roots(), meta.version, &self.hw);
        self.hook(HOOK_SEAL_AFTER).map_err(Failed)?;
        g.store
            .persist_checkpoint(&chk, || self.hook(HOOK_CHECKPOINT_MID))
            .map_err(Failed)?;
        self.hook(HOOK_CHECKPOINT_AFTER).map_err(Failed)?;
        let advanced = self.hw.counter_increment().map_err(Failed)?;
        debug_assert_eq!(advanced, meta.version);
        g.current = chk.clone();
        self.hook(HOOK_COUNTER_AFTER).map_err(Failed)?;

        g.store.advance_index(&chk.pad_sizes).map_err(Failed)?;
        let mut reclaimed = Vec::new();
        for d in &plan.reclaim {
            if g.store.live_references(d).is_empty() && self.content.remove(d).map_err(Failed)? {
                reclaimed.push(*d);
            }
        }
        let after = g.store.sizes();
        Ok(TxOutcome {
            txid: meta.txid,
            op,
            checkpoint: chk,
            appended: PerPad::from_fn(|id| after[id] - before[id]),
            versions: affected,
            reclaimed,
            replayed: false,
        })
    }

    fn replay(&self, g: &Inner, op: OpKind, key: &str) -> Result<Option<TxOutcome>> {
        let Some(txid) = g.store.idempotent_txid(key) else {
            return Ok(None);
        };
        let completion = g
            .store
            .completion(txid, &g.current)?
            .ok_or_else(|| Error::InvalidRequest(format!("idempotency key {key:?} has no committed transaction")))?
            .value;
        if completion.op != op {
            return Err(Error::InvalidRequest(format!(
                "idempotency key {key:?} was used for a {} transaction",
                completion.op.name()
            )));
        }
        let AuditScope::Completed { affected, .. } = completion.scope else {
            return Err(Error::tamper(PadId::Log, 0, "completion record without completion scope"));
        };
        Ok(Some(TxOutcome {
            txid,
            op,
            checkpoint: g.current.clone(),
            appended: PerPad::default(),
            versions: affected,
            reclaimed: Vec::new(),
            replayed: true,
        }))
    }
}

enum TxError {
    /// Validation failed after the intent was logged; state is consistent.
    Aborted(Error),
    /// Failure after appends began; the monitor must be reopened.
    Failed(Error),
}
use TxError::{Aborted, Failed};

impl TxError {
    fn into_inner(self) -> Error {
        match self {
            Aborted(e) | Failed(e) => e,
        }
    }
}

fn fire(plan: &Option<CrashPlan>, name: &'static str) -> Result<()> {
    match plan {
        Some(p) if p.hook == name => match p.action {
            CrashAction::Abort => std::process::abort(),
            CrashAction::Error => Err(Error::CrashInjected(name)),
        },
        _ => Ok(()),
    }
}

fn placeholder_checkpoint() -> AuthoritativeCheckpoint {
    AuthoritativeCheckpoint {
        root: Digest::default(),
        counter: 0,
        seal: crate::hardware_root::Seal {
            tag: [0; 32],
            counter: 0,
            root: Digest::default(),
        },
        pad_sizes: PerPad::default(),
        pad_roots: PerPad::default(),
    }
}

fn push_version(plan: &mut TxPlan, mode: HeadTracking, object: &ObjectId, meta: &TxMeta, digest: Digest, origin: Option<u64>) {
    plan.catalog.push(Record::Version(VersionEntry {
        object: object.clone(),
        version: meta.version,
        content_digest: digest,
        origin,
        txid: meta.txid,
        timestamp: meta.timestamp,
    }));
    if mode == HeadTracking::PointerLeaves {
        plan.catalog.push(Record::Head(HeadPointer {
            object: object.clone(),
            head_version: Some(meta.version),
            txid: meta.txid,
        }));
    }
    plan.affected.push(VersionRef::new(object.clone(), meta.version));
}

fn live_head(store: &StateStore, at: &AuthoritativeCheckpoint, o: &ObjectId) -> Result<VersionRef> {
    match store.current_head(o, at)? {
        Some((v, _)) => Ok(VersionRef::new(o.clone(), v)),
        None if store.versions_of(o).is_empty() => Err(Error::ineligible(Ineligibility::UnknownObject, o.to_string())),
        None => Err(Error::ineligible(Ineligibility::NoLiveHead, o.to_string())),
    }
}

fn resolve_targets(
    store: &StateStore,
    at: &AuthoritativeCheckpoint,
    mode: TargetMode,
    tag: &Option<String>,
    targets: &[VersionRef],
) -> Result<Vec<VersionRef>> {
    match mode {
        TargetMode::Selective => Ok(targets.to_vec()),
        TargetMode::Snapshot => {
            let tag = tag.as_deref().unwrap_or_default();
            store
                .snapshot(tag, at)?
                .map(|s| s.value.members)
                .ok_or_else(|| Error::ineligible(Ineligibility::UnknownTag, tag.to_owned()))
        }
    }
}

/// The version exists under `at` and carries no tombstone; `tombstoned` is
/// the reason reported otherwise.
fn eligible_version(
    store: &StateStore,
    at: &AuthoritativeCheckpoint,
    t: &VersionRef,
    tombstoned: Ineligibility,
) -> Result<VersionEntry> {
    let Some(entry) = store.version_entry(t, at)? else {
        let reason = if store.versions_of(&t.object).is_empty() {
            Ineligibility::UnknownObject
        } else {
            Ineligibility::UnknownVersion
        };
        return Err(Error::ineligible(reason, t.to_string()));
    };
    if store.tombstone(t, at)?.is_some() {
        return Err(Error::ineligible(tombstoned, t.to_string()));
    }
    Ok(entry.value)
}

/// Picks the newest authentic checkpoint in `[h, h + 2]` whose dictionary
/// prefixes verify and whose log ends in a completion, discards everything
/// after it, re-seals it at `h + 2`, persists that, and only then advances
/// the counter by two.
fn recover(
    store: &mut StateStore,
    hw: &HardwareRoot,
    ambiguity: Ambiguity,
    hook: &dyn Fn(&'static str) -> Result<()>,
) -> Result<(AuthoritativeCheckpoint, RecoveryReport)> {
    let h = hw.counter_read();
    let cands = store.authentic_checkpoints(hw)?;
    let chosen = cands
        .iter()
        .filter(|(_, c)| c.counter >= h && c.counter <= h + 2)
        .find(|(_, c)| store.verify_prefixes(c).is_ok() && store.log_fully_paired(c))
        .cloned();
    let Some((slot, chosen)) = chosen else {
        if let Some((_, older)) = cands.iter().find(|(_, c)| c.counter < h) {
            return Err(Error::RollbackDetected {
                checkpoint_counter: older.counter,
                hardware_counter: h,
            });
        }
        return Err(Error::Unrecoverable(format!(
            "no authentic checkpoint within two steps of counter {h} ({ambiguity:?})"
        )));
    };
    let before = store.sizes();
    store.truncate_to(&chosen)?;
    hook(HOOK_RECOVERY_TRUNCATED)?;
    let resealed = AuthoritativeCheckpoint::from_roots(&store.roots(), h + 2, hw);
    store.set_current_slot(slot);
    store.persist_checkpoint(&resealed, || Ok(()))?;
    hook(HOOK_RECOVERY_PERSISTED)?;
    let after = hw.counter_double_increment()?;
    Ok((
        resealed,
        RecoveryReport {
            ambiguity,
            hardware_before: h,
            hardware_after: after,
            recovered_from: chosen.counter,
            discarded: PerPad::from_fn(|id| before[id] - chosen.pad_sizes[id]),
        },
    ))
}

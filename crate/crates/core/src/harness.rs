//! Simulated attackers and crash injection.
//!
//! Everything here acts only on untrusted storage or on the monitor process
//! itself. The trusted directory is never modified, except by the monitor.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::digest::Digest;
use crate::error::{Error, Ineligibility, Result};
use crate::hardware_root::Seal;
use crate::merkle::{LeafKind, PadLeaf};
use crate::monitor::{
    Change, CrashPlan, Monitor, PruneRequest, RollbackRequest, SnapshotRequest, TxOutcome, UpdateRequest,
    CRASH_HOOK_ENV, HOOK_CHECKPOINT_AFTER, PROTOCOL_HOOKS,
};
use crate::records::{ObjectId, OpKind, PruneReason, PruneReasonKind, VersionRef};
use crate::state::{AuthoritativeCheckpoint, HeadTracking, PadId, PerPad, Slot, StateStore};

const PAD_HEADER_LEN: usize = 16;

/// Byte-exact copy of every file below the untrusted directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorageSnapshot {
    files: BTreeMap<PathBuf, Vec<u8>>,
}

impl StorageSnapshot {
    pub fn capture(untrusted: impl AsRef<Path>) -> Result<Self> {
        let root = untrusted.as_ref();
        let mut files = BTreeMap::new();
        for entry in walkdir::WalkDir::new(root) {
            let entry = entry.map_err(|e| Error::Io {
                path: root.to_owned(),
                source: e.into(),
            })?;
            if entry.file_type().is_file() {
                let rel = entry.path().strip_prefix(root).expect("walk stays below root").to_owned();
                let bytes = fs::read(entry.path()).map_err(Error::io(entry.path()))?;
                files.insert(rel, bytes);
            }
        }
        Ok(Self { files })
    }

    /// Makes the directory match the snapshot exactly.
    pub fn restore(&self, untrusted: impl AsRef<Path>) -> Result<()> {
        self.restore_matching(untrusted, |_| true)
    }

    /// Restores only paths accepted by `select`; other files are untouched.
    pub fn restore_matching(&self, untrusted: impl AsRef<Path>, select: impl Fn(&Path) -> bool) -> Result<()> {
        let root = untrusted.as_ref();
        let existing = if root.exists() { Self::capture(root)?.files } else { BTreeMap::new() };
        for path in existing.keys() {
            if select(path) && !self.files.contains_key(path) {
                let full = root.join(path);
                fs::remove_file(&full).map_err(Error::io(&full))?;
            }
        }
        for (path, bytes) in &self.files {
            if !select(path) {
                continue;
            }
            let full = root.join(path);
            if let Some(parent) = full.parent() {
                fs::create_dir_all(parent).map_err(Error::io(parent))?;
            }
            fs::write(&full, bytes).map_err(Error::io(&full))?;
        }
        Ok(())
    }

    pub fn files(&self) -> impl Iterator<Item = (&Path, &[u8])> {
        self.files.iter().map(|(p, b)| (p.as_path(), b.as_slice()))
    }

    pub fn total_bytes(&self) -> u64 {
        self.files.values().map(|b| b.len() as u64).sum()
    }
}

pub fn snapshot_untrusted(config: &Config) -> Result<StorageSnapshot> {
    StorageSnapshot::capture(config.untrusted_dir()?)
}

pub fn restore_untrusted(config: &Config, snapshot: &StorageSnapshot) -> Result<()> {
    snapshot.restore(config.untrusted_dir()?)
}

fn copy_tree(from: &Path, to: &Path) -> Result<()> {
    StorageSnapshot::capture(from)?.restore(to)
}

/// Byte mutation applied to a leaf file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mutation {
    /// XOR one byte of the record (length prefix included), position taken
    /// modulo the record length.
    FlipByte { at: usize },
    /// Cut the file at the start of the leaf, dropping it and all later ones.
    Truncate,
    /// Append a well-formed leaf after the last one. The index is ignored.
    AppendRogue,
}

/// Byte ranges of each length-prefixed record in a leaf file.
fn record_spans(bytes: &[u8]) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut pos = PAD_HEADER_LEN;
    while pos + 4 <= bytes.len() {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        if pos + 4 + len > bytes.len() {
            break;
        }
        spans.push(pos..pos + 4 + len);
        pos += 4 + len;
    }
    spans
}

pub fn pad_path(untrusted: &Path, pad: PadId) -> PathBuf {
    untrusted.join(pad.file_name())
}

/// Number of complete records in a leaf file.
pub fn leaf_count(untrusted: &Path, pad: PadId) -> Result<u64> {
    let path = pad_path(untrusted, pad);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    Ok(record_spans(&bytes).len() as u64)
}

pub fn tamper_leaf(untrusted: &Path, pad: PadId, index: u64, mutation: Mutation) -> Result<()> {
    let path = pad_path(untrusted, pad);
    let mut bytes = fs::read(&path).map_err(Error::io(&path))?;
    let spans = record_spans(&bytes);
    let span = |i: u64| {
        spans
            .get(i as usize)
            .cloned()
            .ok_or(Error::OutOfRange { start: i, end: i + 1, size: spans.len() as u64 })
    };
    match mutation {
        Mutation::FlipByte { at } => {
            let s = span(index)?;
            bytes[s.start + at % s.len()] ^= 0x01;
        }
        Mutation::Truncate => {
            let s = span(index)?;
            bytes.truncate(s.start);
        }
        Mutation::AppendRogue => {
            let leaf = PadLeaf::new(LeafKind::VersionEntry, spans.len() as u64, b"rogue".to_vec()).encode();
            bytes.extend_from_slice(&(leaf.len() as u32).to_le_bytes());
            bytes.extend_from_slice(&leaf);
        }
    }
    fs::write(&path, bytes).map_err(Error::io(&path))
}

/// Overwrites both checkpoint slots with `chk` under a random tag. The
/// harness holds no key, so this is the best an outsider can do.
pub fn forge_checkpoint(untrusted: &Path, chk: &AuthoritativeCheckpoint) -> Result<()> {
    let forged = AuthoritativeCheckpoint {
        seal: Seal {
            tag: rand::random(),
            counter: chk.counter,
            root: chk.root,
        },
        ..chk.clone()
    };
    for slot in [Slot::A, Slot::B] {
        let path = untrusted.join(slot.file_name());
        fs::write(&path, forged.encode()).map_err(Error::io(&path))?;
    }
    Ok(())
}

/// One state-changing call, in a form that can cross a process boundary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", content = "request", rename_all = "snake_case")]
pub enum OpSpec {
    Update(UpdateRequest),
    Snapshot(SnapshotRequest),
    Rollback(RollbackRequest),
    Prune(PruneRequest),
}

impl OpSpec {
    pub fn kind(&self) -> OpKind {
        match self {
            OpSpec::Update(_) => OpKind::Update,
            OpSpec::Snapshot(_) => OpKind::Snapshot,
            OpSpec::Rollback(_) => OpKind::Rollback,
            OpSpec::Prune(_) => OpKind::Prune,
        }
    }

    pub fn apply(&self, m: &Monitor) -> Result<TxOutcome> {
        match self.clone() {
            OpSpec::Update(r) => m.state_update(r),
            OpSpec::Snapshot(r) => m.take_snapshot(r),
            OpSpec::Rollback(r) => m.rollback(r),
            OpSpec::Prune(r) => m.prune(r),
        }
    }
}

/// Input of the child process used for crash injection.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecRequest {
    pub config: String,
    pub op: OpSpec,
}

/// Observable state compared across crash and reference runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StateFingerprint {
    pub heads: BTreeMap<ObjectId, Option<(u64, Digest)>>,
    pub pad_sizes: PerPad<u64>,
    pub pad_roots: PerPad<Digest>,
    pub root: Digest,
}

pub fn fingerprint(m: &Monitor) -> Result<StateFingerprint> {
    m.view(|store, at| {
        let mut heads = BTreeMap::new();
        for o in store.objects() {
            heads.insert(o.clone(), store.current_head(o, at)?);
        }
        Ok(StateFingerprint {
            heads,
            pad_sizes: at.pad_sizes,
            pad_roots: at.pad_roots,
            root: at.root,
        })
    })?
}

/// How a crash at a hook is produced.
#[derive(Debug, Clone)]
pub enum CrashRunner {
    /// The hook returns an error and the monitor is dropped.
    InProcess,
    /// A child process aborts at the hook. `program` is invoked with `args`
    /// and reads an [`ExecRequest`] as JSON on stdin.
    ChildProcess { program: PathBuf, args: Vec<String> },
}

impl CrashRunner {
    /// Runs `op` against the store and crashes at `hook`. Fails if the
    /// operation completed instead.
    pub fn crash(&self, config: &Config, op: &OpSpec, hook: &str) -> Result<()> {
        match self {
            CrashRunner::InProcess => {
                let m = Monitor::open(config.clone())?;
                m.set_crash_plan(Some(CrashPlan::error_at(hook)));
                match op.apply(&m) {
                    Err(Error::CrashInjected(h)) if h == hook => Ok(()),
                    Err(e) => Err(e),
                    Ok(_) => Err(Error::InvalidRequest(format!("hook {hook} was not reached"))),
                }
            }
            CrashRunner::ChildProcess { program, args } => {
                let input = serde_json::to_vec(&ExecRequest {
                    config: config.to_toml(),
                    op: op.clone(),
                })
                .expect("exec request serializes");
                let mut child = Command::new(program)
                    .args(args)
                    .env(CRASH_HOOK_ENV, hook)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::null())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(Error::io(program))?;
                child
                    .stdin
                    .take()
                    .expect("piped stdin")
                    .write_all(&input)
                    .map_err(Error::io(program))?;
                let out = child.wait_with_output().map_err(Error::io(program))?;
                if aborted(&out.status) {
                    Ok(())
                } else {
                    Err(Error::InvalidRequest(format!(
                        "child did not abort at {hook}: {} {}",
                        out.status,
                        String::from_utf8_lossy(&out.stderr).trim()
                    )))
                }
            }
        }
    }
}

#[cfg(unix)]
fn aborted(status: &std::process::ExitStatus) -> bool {
    use std::os::unix::process::ExitStatusExt;
    status.signal() == Some(6)
}

#[cfg(not(unix))]
fn aborted(status: &std::process::ExitStatus) -> bool {
    !status.success()
}

/// Result of one crash-and-recover cycle.
#[derive(Debug, Clone, Serialize)]
pub struct CrashTrial {
    pub hook: String,
    pub op: OpKind,
    pub repetition: u32,
    pub counter_before: u64,
    pub counter_after: u64,
    pub prior: StateFingerprint,
    pub committed: StateFingerprint,
    pub observed: StateFingerprint,
}

impl CrashTrial {
    pub fn matches_prior(&self) -> bool {
        self.observed == self.prior
    }

    pub fn matches_committed(&self) -> bool {
        self.observed == self.committed
    }

    /// The recovered state is one of the two legal candidates and the
    /// counter moved by exactly two.
    pub fn consistent(&self) -> bool {
        (self.matches_prior() || self.matches_committed()) && self.counter_after == self.counter_before + 2
    }

    /// Only a crash after the checkpoint is published may keep the staged
    /// transaction.
    pub fn expected_commit(&self) -> bool {
        self.hook == HOOK_CHECKPOINT_AFTER
    }
}

impl fmt::Display for CrashTrial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let state = if self.matches_committed() {
            "committed"
        } else if self.matches_prior() {
            "prior"
        } else {
            "neither"
        };
        write!(
            f,
            "op={} hook={} rep={} counter={}->{} state={}",
            self.op.name(),
            self.hook,
            self.repetition,
            self.counter_before,
            self.counter_after,
            state
        )
    }
}

fn with_dirs(config: &Config, trusted: PathBuf, untrusted: PathBuf) -> Config {
    let mut c = config.clone();
    c.storage.root = None;
    c.storage.trusted_dir = Some(trusted);
    c.storage.untrusted_dir = Some(untrusted);
    c
}

/// Crashes `op` at `hook`, recovers, and compares the result against a
/// reference run of `op` on a copy of the store. `scratch` holds the copy.
pub fn crash_trial(config: &Config, op: &OpSpec, hook: &str, runner: &CrashRunner, scratch: &Path) -> Result<CrashTrial> {
    if !config.monitor.deterministic {
        return Err(Error::Config("crash trials need deterministic transaction ids".into()));
    }
    let (prior, counter_before) = {
        let m = Monitor::open(config.clone())?;
        (fingerprint(&m)?, m.counter())
    };

    let reference = with_dirs(config, scratch.join("trusted"), scratch.join("untrusted"));
    for (from, to) in [
        (config.trusted_dir()?, reference.trusted_dir()?),
        (config.untrusted_dir()?, reference.untrusted_dir()?),
    ] {
        if to.exists() {
            fs::remove_dir_all(&to).map_err(Error::io(&to))?;
        }
        copy_tree(&from, &to)?;
    }
    let committed = {
        let m = Monitor::open(reference)?;
        op.apply(&m)?;
        fingerprint(&m)?
    };

    runner.crash(config, op, hook)?;
    let m = Monitor::open(config.clone())?;
    Ok(CrashTrial {
        hook: hook.to_owned(),
        op: op.kind(),
        repetition: 0,
        counter_before,
        counter_after: m.counter(),
        prior,
        committed,
        observed: fingerprint(&m)?,
    })
}

fn obj(name: &str) -> ObjectId {
    ObjectId::new(name).expect("static object id")
}

/// History every crash-matrix cell starts from: three objects, a snapshot
/// named `base`, and enough spare versions of `C` to prune.
pub fn crash_matrix_setup() -> Vec<OpSpec> {
    let up = |pairs: &[(&str, &str)]| {
        OpSpec::Update(
            UpdateRequest::new("ci", pairs.iter().map(|(o, b)| Change::new(obj(o), b.as_bytes())).collect())
                .justify("setup"),
        )
    };
    vec![
        up(&[("A", "a1"), ("B", "b1"), ("C", "c1")]),
        OpSpec::Snapshot(SnapshotRequest::new("ci", "base", vec![obj("A"), obj("B")])),
        up(&[("A", "a2"), ("C", "c2")]),
        up(&[("C", "c3")]),
        up(&[("C", "c4")]),
        up(&[("C", "c5")]),
    ]
}

/// The operation of kind `op` attempted next in a crash-matrix cell. It is
/// always valid against the current state.
pub fn crash_matrix_op(m: &Monitor, op: OpKind) -> Result<OpSpec> {
    let c = m.counter();
    Ok(match op {
        OpKind::Update => OpSpec::Update(
            UpdateRequest::new(
                "ci",
                vec![Change::new(obj("A"), format!("a@{c}")), Change::new(obj("B"), format!("b@{c}"))],
            )
            .justify("crash trial"),
        ),
        OpKind::Snapshot => OpSpec::Snapshot(SnapshotRequest::new("ci", format!("s{c}"), vec![obj("A"), obj("B")])),
        OpKind::Rollback => OpSpec::Rollback(RollbackRequest::to_snapshot("ops", "base").justify("crash trial")),
        OpKind::Prune => {
            let target = m.view(|store, at| {
                let head = store.current_head(&obj("C"), at)?.map(|(v, _)| v);
                Ok::<_, Error>(
                    store
                        .versions_of(&obj("C"))
                        .iter()
                        .copied()
                        .find(|&v| Some(v) != head && !store.is_tombstoned(&VersionRef::new(obj("C"), v))),
                )
            })??;
            let target = target.ok_or_else(|| Error::InvalidRequest("no prunable version of C left".into()))?;
            OpSpec::Prune(
                PruneRequest::selective(
                    "ops",
                    vec![VersionRef::new(obj("C"), target)],
                    PruneReason::new(PruneReasonKind::Cve, "CVE-0000-0001"),
                )
                .justify("crash trial"),
            )
        }
    })
}

/// Every protocol hook against every operation kind, `repetitions` times
/// each, every cell in its own directory below `work`.
pub fn crash_matrix(
    work: &Path,
    head_tracking: HeadTracking,
    runner: &CrashRunner,
    repetitions: u32,
) -> Result<Vec<CrashTrial>> {
    let mut trials = Vec::new();
    for op in [OpKind::Update, OpKind::Snapshot, OpKind::Rollback, OpKind::Prune] {
        for hook in PROTOCOL_HOOKS {
            let cell = work.join(format!("{}-{}", op.name(), hook.replace('.', "-")));
            let config = Config::for_root(cell.join("store"))
                .with_head_tracking(head_tracking)
                .deterministic();
            {
                let m = Monitor::open(config.clone())?;
                for spec in crash_matrix_setup() {
                    spec.apply(&m)?;
                }
            }
            for rep in 0..repetitions {
                let spec = {
                    let m = Monitor::open(config.clone())?;
                    crash_matrix_op(&m, op)?
                };
                let mut trial = crash_trial(&config, &spec, hook, runner, &cell.join("reference"))?;
                trial.repetition = rep;
                trials.push(trial);
            }
        }
    }
    Ok(trials)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expected {
    /// Loading or auditing refuses the store.
    Detected,
    /// The monitor rejects the request and state does not move.
    Blocked,
    /// Recovery lands on a legal state with the counter advanced by two.
    RecoveredConsistent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Observed {
    Detected,
    Blocked,
    RecoveredConsistent,
    /// The attack went through.
    Undetected,
    /// Recovery ran but the result is not a legal state.
    Inconsistent,
}

impl Observed {
    fn satisfies(self, e: Expected) -> bool {
        matches!(
            (self, e),
            (Observed::Detected, Expected::Detected)
                | (Observed::Blocked, Expected::Blocked)
                | (Observed::RecoveredConsistent, Expected::RecoveredConsistent)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Attack {
    /// Roll all untrusted storage back to how it was after `after_ops`
    /// setup operations.
    ReplayStorage { after_ops: usize },
    /// Put back an old snapshot registry together with the checkpoints that
    /// vouched for it.
    SwapStaleListing { after_ops: usize },
    /// Ask the monitor to roll back to a pruned version.
    ResurrectPruned { target: VersionRef },
    TamperLeafFile { pad: PadId, index: u64, mutation: Mutation },
    /// Replay old storage and present its checkpoint under a made-up seal
    /// claiming the current counter.
    ForgeSeal { after_ops: usize },
    /// Crash the last setup operation at `hook`, `repetitions` times.
    CrashStage { hook: String, repetitions: u32 },
}

/// A scripted history, one attack on it, and the outcome it must have.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackScenario {
    pub name: String,
    #[serde(default)]
    pub head_tracking: HeadTracking,
    pub setup: Vec<OpSpec>,
    pub attack: Attack,
    pub expected: Expected,
}

/// A file of `[[scenario]]` tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: Vec<AttackScenario>,
}

impl ScenarioFile {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Verdict {
    pub name: String,
    pub expected: Expected,
    pub observed: Observed,
    pub detail: String,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.observed.satisfies(self.expected)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "scenario={} expected={:?} observed={:?} result={} detail={:?}",
            self.name,
            self.expected,
            self.observed,
            if self.passed() { "pass" } else { "FAIL" },
            self.detail
        )
    }
}

/// Errors by which the monitor or an auditor refuses a store.
pub fn is_detection(e: &Error) -> bool {
    matches!(
        e,
        Error::RollbackDetected { .. } | Error::TamperDetected { .. } | Error::Unrecoverable(_) | Error::IntegrityViolation(_)
    )
}

/// Both the monitor and a fresh auditor must refuse the store.
fn probe_refusal(config: &Config) -> Result<(Observed, String)> {
    let monitor = Monitor::open(config.clone());
    let hw = crate::hardware_root::HardwareRoot::open(config.trusted_dir()?)?;
    let audit = StateStore::open_for_audit(config.untrusted_dir()?, config.monitor.head_tracking, &hw);
    Ok(match (monitor, audit) {
        (Err(me), Err(ae)) if is_detection(&me) && is_detection(&ae) => (Observed::Detected, me.to_string()),
        (Err(me), Err(ae)) if is_detection(&me) => (Observed::Detected, format!("{me}; audit: {ae}")),
        (Err(me), Ok(_)) if is_detection(&me) => (Observed::Undetected, format!("monitor: {me}; audit accepted")),
        (Err(me), _) => (Observed::Undetected, format!("unexpected error {me}")),
        (Ok(m), _) => (Observed::Undetected, format!("store loaded at counter {}", m.counter())),
    })
}

/// Runs the setup in a fresh store under `root`, applies the attack, and
/// reports what happened.
pub fn run_scenario(s: &AttackScenario, root: &Path, runner: &CrashRunner) -> Result<Verdict> {
    let config = Config::for_root(root.join("store"))
        .with_head_tracking(s.head_tracking)
        .deterministic();
    let untrusted = config.untrusted_dir()?;
    let split = match &s.attack {
        Attack::CrashStage { .. } => s.setup.len().checked_sub(1).ok_or_else(|| {
            Error::InvalidRequest("crash staging needs at least one setup operation".into())
        })?,
        _ => s.setup.len(),
    };
    let capture_at = match &s.attack {
        Attack::ReplayStorage { after_ops } | Attack::SwapStaleListing { after_ops } | Attack::ForgeSeal { after_ops } => {
            Some(*after_ops)
        }
        _ => None,
    };
    let mut captured = None;
    {
        let m = Monitor::open(config.clone())?;
        for (i, op) in s.setup[..split].iter().enumerate() {
            if capture_at == Some(i) {
                captured = Some((StorageSnapshot::capture(&untrusted)?, m.checkpoint()?));
            }
            op.apply(&m)?;
        }
        if capture_at == Some(split) {
            captured = Some((StorageSnapshot::capture(&untrusted)?, m.checkpoint()?));
        }
    }
    let stale = || {
        captured
            .clone()
            .ok_or_else(|| Error::InvalidRequest(format!("after_ops exceeds the {split} setup operations")))
    };

    let (observed, detail) = match &s.attack {
        Attack::ReplayStorage { .. } => {
            stale()?.0.restore(&untrusted)?;
            probe_refusal(&config)?
        }
        Attack::SwapStaleListing { .. } => {
            let listing = |p: &Path| {
                p == Path::new(PadId::Registry.file_name())
                    || p == Path::new(Slot::A.file_name())
                    || p == Path::new(Slot::B.file_name())
            };
            stale()?.0.restore_matching(&untrusted, listing)?;
            probe_refusal(&config)?
        }
        Attack::ForgeSeal { .. } => {
            let (snap, chk) = stale()?;
            snap.restore(&untrusted)?;
            let h = crate::hardware_root::HardwareRoot::open(config.trusted_dir()?)?.counter_read();
            forge_checkpoint(&untrusted, &AuthoritativeCheckpoint { counter: h, ..chk })?;
            probe_refusal(&config)?
        }
        Attack::TamperLeafFile { pad, index, mutation } => {
            let before = {
                let m = Monitor::open(config.clone())?;
                (fingerprint(&m)?, m.counter())
            };
            tamper_leaf(&untrusted, *pad, *index, *mutation)?;
            match Monitor::open(config.clone()) {
                Err(e) if is_detection(&e) => probe_refusal(&config)?,
                Err(e) => (Observed::Undetected, format!("unexpected error {e}")),
                Ok(m) if m.last_recovery().is_some() => {
                    let after = fingerprint(&m)?;
                    if after == before.0 && m.counter() == before.1 + 2 {
                        (Observed::RecoveredConsistent, format!("recovered at counter {}", m.counter()))
                    } else {
                        (Observed::Inconsistent, format!("state changed across recovery at counter {}", m.counter()))
                    }
                }
                Ok(m) => (Observed::Undetected, format!("store loaded at counter {}", m.counter())),
            }
        }
        Attack::ResurrectPruned { target } => {
            let m = Monitor::open(config.clone())?;
            let before = (fingerprint(&m)?, m.counter());
            let mut attempts = vec![RollbackRequest::selective("ops", vec![target.clone()]).justify("resurrect")];
            for listing in m.audit(|a| a.list_snapshots())? {
                if listing.members.contains(target) {
                    attempts.push(RollbackRequest::to_snapshot("ops", listing.tag).justify("resurrect"));
                }
            }
            let mut outcome = (Observed::Blocked, String::new());
            for req in attempts {
                match m.rollback(req) {
                    Err(e) if e.ineligibility() == Some(&Ineligibility::DeAuthorized) => outcome.1 = e.to_string(),
                    Err(e) => {
                        outcome = (Observed::Undetected, format!("rejected for another reason: {e}"));
                        break;
                    }
                    Ok(out) => {
                        outcome = (Observed::Undetected, format!("committed at counter {}", out.counter()));
                        break;
                    }
                }
            }
            if outcome.0 == Observed::Blocked && (fingerprint(&m)?, m.counter()) != before {
                outcome = (Observed::Undetected, "state moved despite the rejection".into());
            }
            outcome
        }
        Attack::CrashStage { hook, repetitions } => {
            let op = &s.setup[split];
            let mut detail = Vec::new();
            let mut observed = Observed::RecoveredConsistent;
            for rep in 0..*repetitions {
                let trial = crash_trial(&config, op, hook, runner, &root.join("reference"))?;
                if !trial.consistent() || trial.matches_committed() != trial.expected_commit() {
                    observed = Observed::Inconsistent;
                }
                detail.push(format!("rep {rep}: {trial}"));
                if trial.matches_committed() {
                    break;
                }
            }
            (observed, detail.join("; "))
        }
    };
    Ok(Verdict {
        name: s.name.clone(),
        expected: s.expected,
        observed,
        detail,
    })
}

/// Seeded generator of valid operation histories over `obj0..objN`.
#[derive(Debug)]
pub struct HistoryGen {
    rng: StdRng,
    max_objects: usize,
    counter: u64,
    versions: BTreeMap<ObjectId, Vec<u64>>,
    heads: BTreeMap<ObjectId, Option<u64>>,
    pruned: BTreeSet<VersionRef>,
    snapshots: Vec<(String, Vec<VersionRef>)>,
}

impl HistoryGen {
    pub fn new(seed: u64, max_objects: usize) -> Self {
        Self {
            rng: StdRng::seed_from_u64(seed),
            max_objects: max_objects.max(1),
            counter: 0,
            versions: BTreeMap::new(),
            heads: BTreeMap::new(),
            pruned: BTreeSet::new(),
            snapshots: Vec::new(),
        }
    }

    /// A history of between one and `max_ops` operations.
    pub fn history(seed: u64, max_ops: usize, max_objects: usize) -> Vec<OpSpec> {
        let mut g = Self::new(seed, max_objects);
        let n = g.rng.random_range(1..=max_ops.max(1));
        (0..n).map(|i| g.next_op(i)).collect()
    }

    fn live_refs(&self) -> Vec<VersionRef> {
        self.versions
            .iter()
            .flat_map(|(o, vs)| vs.iter().map(move |&v| VersionRef::new(o.clone(), v)))
            .filter(|r| !self.pruned.contains(r))
            .collect()
    }

    fn live_snapshots(&self) -> Vec<usize> {
        (0..self.snapshots.len())
            .filter(|&i| self.snapshots[i].1.iter().all(|m| !self.pruned.contains(m)))
            .collect()
    }

    fn pick_refs(&mut self, max: usize, distinct_objects: bool) -> Vec<VersionRef> {
        let mut live = self.live_refs();
        let want = self.rng.random_range(1..=max);
        let mut out: Vec<VersionRef> = Vec::new();
        while out.len() < want && !live.is_empty() {
            let i = self.rng.random_range(0..live.len());
            let r = live.swap_remove(i);
            if !distinct_objects || out.iter().all(|o| o.object != r.object) {
                out.push(r);
            }
        }
        out
    }

    pub fn next_op(&mut self, step: usize) -> OpSpec {
        let justification = format!("step {step}");
        let version = self.counter + 1;
        let roll = if self.versions.is_empty() { 0 } else { self.rng.random_range(0..100) };
        let op = match roll {
            40..=54 => self.snapshot_op(version),
            55..=69 => self.rollback_selective(version, &justification),
            70..=79 => self.rollback_snapshot(version, &justification),
            80..=94 => self.prune_selective(&justification),
            95..=99 => self.prune_snapshot(&justification),
            _ => None,
        };
        let op = op.unwrap_or_else(|| self.update_op(version, &justification));
        self.counter = version;
        op
    }

    fn update_op(&mut self, version: u64, justification: &str) -> OpSpec {
        let k = self.rng.random_range(1..=self.max_objects.min(3));
        let mut names: Vec<usize> = (0..self.max_objects).collect();
        let mut changes = Vec::new();
        for _ in 0..k {
            let i = names.swap_remove(self.rng.random_range(0..names.len()));
            let o = ObjectId::new(format!("obj{i}")).expect("generated id");
            let body = if self.rng.random_bool(0.1) {
                "shared".to_owned()
            } else {
                format!("{o}:{}", self.rng.random_range(0..4))
            };
            self.versions.entry(o.clone()).or_default().push(version);
            self.heads.insert(o.clone(), Some(version));
            changes.push(Change::new(o, body));
        }
        let mut req = UpdateRequest::new("ci", changes).justify(justification);
        if self.rng.random_bool(0.1) {
            let tag = format!("rel{version}");
            self.snapshots.push((
                tag.clone(),
                req.changes.iter().map(|c| VersionRef::new(c.object.clone(), version)).collect(),
            ));
            req = req.with_snapshot(tag, vec![]);
        }
        OpSpec::Update(req)
    }

    fn snapshot_op(&mut self, version: u64) -> Option<OpSpec> {
        let live: Vec<(ObjectId, u64)> = self
            .heads
            .iter()
            .filter_map(|(o, h)| h.map(|v| (o.clone(), v)))
            .collect();
        if live.is_empty() {
            return None;
        }
        let members: Vec<(ObjectId, u64)> = live.iter().filter(|_| self.rng.random_bool(0.6)).cloned().collect();
        let members = if members.is_empty() { vec![live[0].clone()] } else { members };
        let tag = format!("t{version}");
        self.snapshots
            .push((tag.clone(), members.iter().map(|(o, v)| VersionRef::new(o.clone(), *v)).collect()));
        Some(OpSpec::Snapshot(SnapshotRequest::new(
            "ci",
            tag,
            members.into_iter().map(|(o, _)| o).collect(),
        )))
    }

    fn apply_rollback(&mut self, targets: &[VersionRef], version: u64) {
        for t in targets {
            self.versions.entry(t.object.clone()).or_default().push(version);
            self.heads.insert(t.object.clone(), Some(version));
        }
    }

    fn rollback_selective(&mut self, version: u64, justification: &str) -> Option<OpSpec> {
        let targets = self.pick_refs(2, true);
        if targets.is_empty() {
            return None;
        }
        self.apply_rollback(&targets, version);
        Some(OpSpec::Rollback(RollbackRequest::selective("ops", targets).justify(justification)))
    }

    fn rollback_snapshot(&mut self, version: u64, justification: &str) -> Option<OpSpec> {
        let &i = self.live_snapshots().choose(&mut self.rng)?;
        let (tag, members) = self.snapshots[i].clone();
        self.apply_rollback(&members, version);
        Some(OpSpec::Rollback(RollbackRequest::to_snapshot("ops", tag).justify(justification)))
    }

    fn apply_prune(&mut self, targets: &[VersionRef]) {
        for t in targets {
            self.pruned.insert(t.clone());
            if self.heads.get(&t.object) == Some(&Some(t.version)) {
                self.heads.insert(t.object.clone(), None);
            }
        }
    }

    fn reason(&mut self) -> PruneReason {
        let kind = *[PruneReasonKind::Cve, PruneReasonKind::Redaction, PruneReasonKind::RetentionExpired]
            .choose(&mut self.rng)
            .expect("non-empty");
        PruneReason::new(kind, "generated")
    }

    fn prune_selective(&mut self, justification: &str) -> Option<OpSpec> {
        let targets = self.pick_refs(2, false);
        if targets.is_empty() {
            return None;
        }
        self.apply_prune(&targets);
        let reason = self.reason();
        Some(OpSpec::Prune(PruneRequest::selective("ops", targets, reason).justify(justification)))
    }

    fn prune_snapshot(&mut self, justification: &str) -> Option<OpSpec> {
        let &i = self.live_snapshots().choose(&mut self.rng)?;
        let (tag, members) = self.snapshots[i].clone();
        self.apply_prune(&members);
        let reason = self.reason();
        Some(OpSpec::Prune(PruneRequest::snapshot("ops", tag, reason).justify(justification)))
    }
}

//! Typed records stored as leaves of the three dictionaries, and their
//! canonical payload encodings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{DecodeError, Decoder, Encoder};
use crate::digest::Digest;
use crate::merkle::{LeafKind, PadLeaf};

pub const MAX_OBJECT_ID_LEN: usize = 256;
pub const MAX_TAG_LEN: usize = 128;

/// Name of a persistent object: non-empty UTF-8, at most 256 bytes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ObjectId(String);

impl ObjectId {
    pub fn new(name: impl Into<String>) -> Result<Self, String> {
        let name = name.into();
        if name.is_empty() {
            return Err("object id must not be empty".into());
        }
        if name.len() > MAX_OBJECT_ID_LEN {
            return Err(format!("object id longer than {MAX_OBJECT_ID_LEN} bytes"));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ObjectId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        Self::new(s)
    }
}

impl From<ObjectId> for String {
    fn from(o: ObjectId) -> String {
        o.0
    }
}

impl FromStr for ObjectId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::new(s)
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

pub fn validate_tag(tag: &str) -> Result<(), String> {
    if tag.is_empty() {
        return Err("snapshot tag must not be empty".into());
    }
    if tag.len() > MAX_TAG_LEN {
        return Err(format!("snapshot tag longer than {MAX_TAG_LEN} bytes"));
    }
    Ok(())
}

/// 128-bit transaction identifier.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TxId(pub u128);

impl fmt::Display for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for TxId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TxId({self})")
    }
}

impl TryFrom<String> for TxId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        u128::from_str_radix(&s, 16).map(TxId).map_err(|e| e.to_string())
    }
}

impl From<TxId> for String {
    fn from(t: TxId) -> String {
        t.to_string()
    }
}

/// An (object, counter-version) pair.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VersionRef {
    pub object: ObjectId,
    pub version: u64,
}

impl VersionRef {
    pub fn new(object: ObjectId, version: u64) -> Self {
        Self { object, version }
    }
}

/// Parses `object@version`; the object part may itself contain `@`.
impl FromStr for VersionRef {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (o, v) = s.rsplit_once('@').ok_or_else(|| format!("expected object@version, got {s:?}"))?;
        let version = v.parse().map_err(|_| format!("bad version in {s:?}"))?;
        Ok(Self::new(ObjectId::new(o)?, version))
    }
}

impl fmt::Debug for VersionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.object, self.version)
    }
}

impl fmt::Display for VersionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.object, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionEntry {
    pub object: ObjectId,
    pub version: u64,
    pub content_digest: Digest,
    /// Prior head for forward updates, the reused version for rollbacks.
    pub origin: Option<u64>,
    pub txid: TxId,
    pub timestamp: u64,
}

/// Sets (or, with `None`, clears) the live head of an object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPointer {
    pub object: ObjectId,
    pub head_version: Option<u64>,
    pub txid: TxId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneReasonKind {
    RetentionExpired,
    Cve,
    Redaction,
    Other,
}

impl PruneReasonKind {
    fn to_u8(self) -> u8 {
        match self {
            Self::RetentionExpired => 1,
            Self::Cve => 2,
            Self::Redaction => 3,
            Self::Other => 4,
        }
    }

    fn from_u8(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            1 => Self::RetentionExpired,
            2 => Self::Cve,
            3 => Self::Redaction,
            4 => Self::Other,
            tag => return Err(DecodeError::InvalidTag { what: "prune reason", tag }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReason {
    pub kind: PruneReasonKind,
    #[serde(default)]
    pub detail: String,
}

impl PruneReason {
    pub fn new(kind: PruneReasonKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub object: ObjectId,
    pub version: u64,
    pub reason: PruneReason,
    pub txid: TxId,
    pub justification: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotEntry {
    pub tag: String,
    pub members: Vec<VersionRef>,
    pub txid: TxId,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuditKind {
    Intent,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Update,
    Snapshot,
    Rollback,
    Prune,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Update => "update",
            Self::Snapshot => "snapshot",
            Self::Rollback => "rollback",
            Self::Prune => "prune",
        }
    }

    fn to_u8(self) -> u8 {
        match self {
            Self::Update => 1,
            Self::Snapshot => 2,
            Self::Rollback => 3,
            Self::Prune => 4,
        }
    }

    fn from_u8(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            1 => Self::Update,
            2 => Self::Snapshot,
            3 => Self::Rollback,
            4 => Self::Prune,
            tag => return Err(DecodeError::InvalidTag { what: "operation", tag }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Snapshot,
    Selective,
}

impl TargetMode {
    fn to_u8(self) -> u8 {
        match self {
            Self::Snapshot => 1,
            Self::Selective => 2,
        }
    }

    fn from_u8(v: u8) -> Result<Self, DecodeError> {
        Ok(match v {
            1 => Self::Snapshot,
            2 => Self::Selective,
            tag => return Err(DecodeError::InvalidTag { what: "target mode", tag }),
        })
    }
}

/// Operation-specific part of an audit record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AuditScope {
    Update {
        objects: Vec<ObjectId>,
        version: u64,
        snapshot_tag: Option<String>,
        snapshot_members: Vec<VersionRef>,
    },
    Snapshot {
        tag: String,
        members: Vec<VersionRef>,
    },
    Rollback {
        mode: TargetMode,
        tag: Option<String>,
        targets: Vec<VersionRef>,
        /// Heads of the affected objects when the intent was recorded.
        prior_heads: Vec<(ObjectId, Option<u64>)>,
    },
    Prune {
        mode: TargetMode,
        tag: Option<String>,
        targets: Vec<VersionRef>,
        reason: PruneReason,
    },
    /// Completion scope: the counter-indexed versions created (update,
    /// rollback), bound (snapshot) or de-authorized (prune).
    Completed {
        version: u64,
        affected: Vec<VersionRef>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub kind: AuditKind,
    pub txid: TxId,
    pub op: OpKind,
    pub prior_root: Digest,
    pub actor: String,
    pub justification: String,
    pub scope: AuditScope,
    pub timestamp: u64,
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum Record {
    Version(VersionEntry),
    Head(HeadPointer),
    Tombstone(Tombstone),
    Snapshot(SnapshotEntry),
    Audit(AuditRecord),
}

fn enc_refs(e: &mut Encoder, refs: &[VersionRef]) {
    e.len(refs.len());
    for r in refs {
        e.str(r.object.as_str()).u64(r.version);
    }
}

fn dec_object(d: &mut Decoder<'_>) -> Result<ObjectId, DecodeError> {
    ObjectId::new(d.str()?).map_err(DecodeError::Invalid)
}

fn dec_refs(d: &mut Decoder<'_>) -> Result<Vec<VersionRef>, DecodeError> {
    let n = d.list_len()?;
    (0..n)
        .map(|_| Ok(VersionRef::new(dec_object(d)?, d.u64()?)))
        .collect()
}

fn enc_reason(e: &mut Encoder, r: &PruneReason) {
    e.u8(r.kind.to_u8()).str(&r.detail);
}

fn dec_reason(d: &mut Decoder<'_>) -> Result<PruneReason, DecodeError> {
    Ok(PruneReason {
        kind: PruneReasonKind::from_u8(d.u8()?)?,
        detail: d.str()?,
    })
}

impl AuditScope {
    fn encode(&self, e: &mut Encoder) {
        match self {
            Self::Update {
                objects,
                version,
                snapshot_tag,
                snapshot_members,
            } => {
                e.u8(1).len(objects.len());
                for o in objects {
                    e.str(o.as_str());
                }
                e.u64(*version).opt_str(snapshot_tag.as_deref());
                enc_refs(e, snapshot_members);
            }
            Self::Snapshot { tag, members } => {
                e.u8(2).str(tag);
                enc_refs(e, members);
            }
            Self::Rollback {
                mode,
                tag,
                targets,
                prior_heads,
            } => {
                e.u8(3).u8(mode.to_u8()).opt_str(tag.as_deref());
                enc_refs(e, targets);
                e.len(prior_heads.len());
                for (o, v) in prior_heads {
                    e.str(o.as_str()).opt_u64(*v);
                }
            }
            Self::Prune {
                mode,
                tag,
                targets,
                reason,
            } => {
                e.u8(4).u8(mode.to_u8()).opt_str(tag.as_deref());
                enc_refs(e, targets);
                enc_reason(e, reason);
            }
            Self::Completed { version, affected } => {
                e.u8(5).u64(*version);
                enc_refs(e, affected);
            }
        }
    }

    fn decode(d: &mut Decoder<'_>) -> Result<Self, DecodeError> {
        Ok(match d.u8()? {
            1 => {
                let n = d.list_len()?;
                let objects = (0..n).map(|_| dec_object(d)).collect::<Result<_, _>>()?;
                Self::Update {
                    objects,
                    version: d.u64()?,
                    snapshot_tag: d.opt_str()?,
                    snapshot_members: dec_refs(d)?,
                }
            }
            2 => Self::Snapshot {
                tag: d.str()?,
                members: dec_refs(d)?,
            },
            3 => {
                let mode = TargetMode::from_u8(d.u8()?)?;
                let tag = d.opt_str()?;
                let targets = dec_refs(d)?;
                let n = d.list_len()?;
                let prior_heads = (0..n)
                    .map(|_| Ok((dec_object(d)?, d.opt_u64()?)))
                    .collect::<Result<_, DecodeError>>()?;
                Self::Rollback {
                    mode,
                    tag,
                    targets,
                    prior_heads,
                }
            }
            4 => Self::Prune {
                mode: TargetMode::from_u8(d.u8()?)?,
                tag: d.opt_str()?,
                targets: dec_refs(d)?,
                reason: dec_reason(d)?,
            },
            5 => Self::Completed {
                version: d.u64()?,
                affected: dec_refs(d)?,
            },
            tag => return Err(DecodeError::InvalidTag { what: "audit scope", tag }),
        })
    }
}

impl Record {
    /// Object named by a catalog record.
    pub fn object(&self) -> Option<&ObjectId> {
        match self {
            Self::Version(v) => Some(&v.object),
            Self::Head(h) => Some(&h.object),
            Self::Tombstone(t) => Some(&t.object),
            Self::Snapshot(_) | Self::Audit(_) => None,
        }
    }

    pub fn kind(&self) -> LeafKind {
        match self {
            Self::Version(_) => LeafKind::VersionEntry,
            Self::Head(_) => LeafKind::HeadPointer,
            Self::Tombstone(_) => LeafKind::Tombstone,
            Self::Snapshot(_) => LeafKind::SnapshotEntry,
            Self::Audit(a) => match a.kind {
                AuditKind::Intent => LeafKind::IntentRecord,
                AuditKind::Completion => LeafKind::CompletionRecord,
            },
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        match self {
            Self::Version(v) => {
                e.str(v.object.as_str())
                    .u64(v.version)
                    .digest(&v.content_digest)
                    .opt_u64(v.origin)
                    .u128(v.txid.0)
                    .u64(v.timestamp);
            }
            Self::Head(h) => {
                e.str(h.object.as_str()).opt_u64(h.head_version).u128(h.txid.0);
            }
            Self::Tombstone(t) => {
                e.str(t.object.as_str()).u64(t.version);
                enc_reason(&mut e, &t.reason);
                e.u128(t.txid.0).str(&t.justification).u64(t.timestamp);
            }
            Self::Snapshot(s) => {
                e.str(&s.tag);
                enc_refs(&mut e, &s.members);
                e.u128(s.txid.0).u64(s.timestamp);
            }
            Self::Audit(a) => {
                e.u128(a.txid.0)
                    .u8(a.op.to_u8())
                    .digest(&a.prior_root)
                    .str(&a.actor)
                    .str(&a.justification);
                a.scope.encode(&mut e);
                e.u64(a.timestamp).opt_str(a.idempotency_key.as_deref());
            }
        }
        e.finish()
    }

    pub fn decode(kind: LeafKind, payload: &[u8]) -> Result<Self, DecodeError> {
        let mut d = Decoder::new(payload);
        let rec = match kind {
            LeafKind::VersionEntry => Self::Version(VersionEntry {
                object: dec_object(&mut d)?,
                version: d.u64()?,
                content_digest: d.digest()?,
                origin: d.opt_u64()?,
                txid: TxId(d.u128()?),
                timestamp: d.u64()?,
            }),
            LeafKind::HeadPointer => Self::Head(HeadPointer {
                object: dec_object(&mut d)?,
                head_version: d.opt_u64()?,
                txid: TxId(d.u128()?),
            }),
            LeafKind::Tombstone => Self::Tombstone(Tombstone {
                object: dec_object(&mut d)?,
                version: d.u64()?,
                reason: dec_reason(&mut d)?,
                txid: TxId(d.u128()?),
                justification: d.str()?,
                timestamp: d.u64()?,
            }),
            LeafKind::SnapshotEntry => Self::Snapshot(SnapshotEntry {
                tag: d.str()?,
                members: dec_refs(&mut d)?,
                txid: TxId(d.u128()?),
                timestamp: d.u64()?,
            }),
            LeafKind::IntentRecord | LeafKind::CompletionRecord => {
                let txid = TxId(d.u128()?);
                let op = OpKind::from_u8(d.u8()?)?;
                Self::Audit(AuditRecord {
                    kind: if kind == LeafKind::IntentRecord {
                        AuditKind::Intent
                    } else {
                        AuditKind::Completion
                    },
                    txid,
                    op,
                    prior_root: d.digest()?,
                    actor: d.str()?,
                    justification: d.str()?,
                    scope: AuditScope::decode(&mut d)?,
                    timestamp: d.u64()?,
                    idempotency_key: d.opt_str()?,
                })
            }
        };
        d.finish()?;
        Ok(rec)
    }

    pub fn to_leaf(&self, index: u64) -> PadLeaf {
        PadLeaf::new(self.kind(), index, self.encode_payload())
    }

    pub fn from_leaf(leaf: &PadLeaf) -> Result<Self, DecodeError> {
        Self::decode(leaf.kind, &leaf.payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obj(s: &str) -> ObjectId {
        ObjectId::new(s).unwrap()
    }

    #[test]
    fn object_id_bounds() {
        assert!(ObjectId::new("").is_err());
        assert!(ObjectId::new("x".repeat(256)).is_ok());
        assert!(ObjectId::new("x".repeat(257)).is_err());
        assert!(validate_tag("").is_err());
        assert!(validate_tag(&"t".repeat(129)).is_err());
    }

    #[test]
    fn version_ref_parses() {
        assert_eq!("A@3".parse::<VersionRef>().unwrap(), VersionRef::new(obj("A"), 3));
        assert_eq!("me@host@12".parse::<VersionRef>().unwrap(), VersionRef::new(obj("me@host"), 12));
        assert!("A".parse::<VersionRef>().is_err());
        assert!("@3".parse::<VersionRef>().is_err());
        assert!("A@x".parse::<VersionRef>().is_err());
    }

    fn samples() -> Vec<Record> {
        let tx = TxId(0xdead_beef);
        vec![
            Record::Version(VersionEntry {
                object: obj("A"),
                version: 3,
                content_digest: Digest::of(b"a"),
                origin: Some(1),
                txid: tx,
                timestamp: 99,
            }),
            Record::Head(HeadPointer {
                object: obj("A"),
                head_version: None,
                txid: tx,
            }),
            Record::Tombstone(Tombstone {
                object: obj("B"),
                version: 2,
                reason: PruneReason::new(PruneReasonKind::Cve, "CVE-2024-0001"),
                txid: tx,
                justification: "vulnerable".into(),
                timestamp: 5,
            }),
            Record::Snapshot(SnapshotEntry {
                tag: "release-1".into(),
                members: vec![VersionRef::new(obj("A"), 1), VersionRef::new(obj("B"), 2)],
                txid: tx,
                timestamp: 7,
            }),
            Record::Audit(AuditRecord {
                kind: AuditKind::Intent,
                txid: tx,
                op: OpKind::Rollback,
                prior_root: Digest::of(b"r"),
                actor: "ops".into(),
                justification: "bad deploy".into(),
                scope: AuditScope::Rollback {
                    mode: TargetMode::Selective,
                    tag: None,
                    targets: vec![VersionRef::new(obj("A"), 1)],
                    prior_heads: vec![(obj("A"), Some(3))],
                },
                timestamp: 8,
                idempotency_key: Some("k1".into()),
            }),
            Record::Audit(AuditRecord {
                kind: AuditKind::Completion,
                txid: tx,
                op: OpKind::Update,
                prior_root: Digest::of(b"r"),
                actor: "ci".into(),
                justification: String::new(),
                scope: AuditScope::Completed {
                    version: 4,
                    affected: vec![VersionRef::new(obj("A"), 4)],
                },
                timestamp: 8,
                idempotency_key: None,
            }),
        ]
    }

    #[test]
    fn every_record_kind_round_trips_through_a_leaf() {
        for (i, r) in samples().into_iter().enumerate() {
            let leaf = r.to_leaf(i as u64);
            let back = Record::from_leaf(&PadLeaf::decode(&leaf.encode()).unwrap()).unwrap();
            assert_eq!(back, r);
        }
    }

    #[test]
    fn trailing_payload_bytes_are_rejected() {
        let r = &samples()[0];
        let mut p = r.encode_payload();
        p.push(0);
        assert!(Record::decode(r.kind(), &p).is_err());
    }

    proptest! {
        #[test]
        fn version_encoding_is_injective(
            a in "[a-z]{1,8}", b in "[a-z]{1,8}",
            va in 0u64..50, vb in 0u64..50,
            oa in proptest::option::of(0u64..50), ob in proptest::option::of(0u64..50),
        ) {
            let mk = |o: &str, v, origin| Record::Version(VersionEntry {
                object: obj(o), version: v, content_digest: Digest::of(o.as_bytes()),
                origin, txid: TxId(1), timestamp: 0,
            });
            let ra = mk(&a, va, oa);
            let rb = mk(&b, vb, ob);
            prop_assert_eq!(ra == rb, ra.encode_payload() == rb.encode_payload());
        }
    }
}

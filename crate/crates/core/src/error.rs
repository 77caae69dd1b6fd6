use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::codec::DecodeError;
use crate::digest::Digest;
use crate::state::{Ambiguity, PadId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Why a request failed eligibility checks against the authoritative root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ineligibility {
    /// The target version carries a tombstone.
    DeAuthorized,
    /// A prune target is already tombstoned.
    AlreadyPruned,
    UnknownVersion,
    UnknownObject,
    UnknownTag,
    DuplicateTag,
    /// A snapshot member has no live head.
    NoLiveHead,
    /// The digest is still referenced by a live version.
    StillReferenced,
}

impl Ineligibility {
    /// Stable machine-readable reason string.
    pub fn code(&self) -> &'static str {
        match self {
            Self::DeAuthorized => "de-authorized",
            Self::AlreadyPruned => "already-pruned",
            Self::UnknownVersion => "unknown-version",
            Self::UnknownObject => "unknown-object",
            Self::UnknownTag => "unknown-tag",
            Self::DuplicateTag => "duplicate-tag",
            Self::NoLiveHead => "no-live-head",
            Self::StillReferenced => "still-referenced",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("actor {actor:?} is not authorized for {op}")]
    PolicyDenied { actor: String, op: &'static str },
    #[error("ineligible: {reason} ({detail})", reason = .reason.code())]
    Ineligible { reason: Ineligibility, detail: String },
    #[error("blob {0} not found")]
    NotFound(Digest),
    #[error("blob {0} failed integrity verification")]
    IntegrityViolation(Digest),
    #[error("tamper detected in {pad:?} at leaf {index:?}: {detail}")]
    TamperDetected {
        pad: Option<PadId>,
        index: Option<u64>,
        detail: String,
    },
    #[error("stale state refused: newest sealed checkpoint is at counter {checkpoint_counter}, hardware counter is {hardware_counter}")]
    RollbackDetected {
        checkpoint_counter: u64,
        hardware_counter: u64,
    },
    #[error("recovery required: {0:?}")]
    RecoveryNeeded(Ambiguity),
    #[error("unrecoverable without operator intervention: {0}")]
    Unrecoverable(String),
    #[error("trusted counter state is corrupted: {0}")]
    CounterCorrupted(String),
    #[error("monitor must be reopened after an interrupted transaction")]
    Poisoned,
    #[error("injected crash at hook {0}")]
    CrashInjected(&'static str),
    #[error("leaf index {got} does not match pad size {expected}")]
    IndexMismatch { expected: u64, got: u64 },
    #[error("range {start}..{end} out of bounds for size {size}")]
    OutOfRange { start: u64, end: u64, size: u64 },
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    pub(crate) fn tamper(pad: PadId, index: u64, detail: impl Into<String>) -> Self {
        Error::TamperDetected {
            pad: Some(pad),
            index: Some(index),
            detail: detail.into(),
        }
    }

    pub fn ineligible(reason: Ineligibility, detail: impl Into<String>) -> Self {
        Error::Ineligible {
            reason,
            detail: detail.into(),
        }
    }

    pub fn is_tamper(&self) -> bool {
        matches!(self, Error::TamperDetected { .. })
    }

    pub fn ineligibility(&self) -> Option<&Ineligibility> {
        match self {
            Error::Ineligible { reason, .. } => Some(reason),
            _ => None,
        }
    }
}

//! JSON wire types. Every body carries `schema`; unknown fields are rejected.

use serde::{Deserialize, Serialize};

use rollguard_core::audit::{EligibilityReport, LineageEvent, SnapshotListing, StoreReport};
use rollguard_core::monitor::TxOutcome;
use rollguard_core::records::{ObjectId, OpKind, TxId, VersionRef};
use rollguard_core::state::{AuthoritativeCheckpoint, PerPad};
use rollguard_core::{Digest, Error};

pub const SCHEMA_VERSION: u32 = 1;

/// Request wrapper for the state-changing endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope<T> {
    pub schema: u32,
    pub request: T,
}

impl<T> Envelope<T> {
    pub fn new(request: T) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            request,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxResponse {
    pub schema: u32,
    pub txid: TxId,
    pub op: OpKind,
    pub counter: u64,
    pub root: Digest,
    pub appended: PerPad<u64>,
    pub versions: Vec<VersionRef>,
    pub reclaimed: Vec<Digest>,
    pub replayed: bool,
}

impl From<TxOutcome> for TxResponse {
    fn from(o: TxOutcome) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            txid: o.txid,
            op: o.op,
            counter: o.checkpoint.counter,
            root: o.checkpoint.root,
            appended: o.appended,
            versions: o.versions,
            reclaimed: o.reclaimed,
            replayed: o.replayed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointResponse {
    pub schema: u32,
    pub counter: u64,
    pub root: Digest,
    pub pad_sizes: PerPad<u64>,
    pub pad_roots: PerPad<Digest>,
}

impl From<&AuthoritativeCheckpoint> for CheckpointResponse {
    fn from(c: &AuthoritativeCheckpoint) -> Self {
        Self {
            schema: SCHEMA_VERSION,
            counter: c.counter,
            root: c.root,
            pad_sizes: c.pad_sizes,
            pad_roots: c.pad_roots,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotsResponse {
    pub schema: u32,
    pub counter: u64,
    pub snapshots: Vec<SnapshotListing>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineageResponse {
    pub schema: u32,
    pub counter: u64,
    pub object: ObjectId,
    pub events: Vec<LineageEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EligibilityQuery {
    pub object: ObjectId,
    pub version: u64,
    #[serde(default)]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EligibilityResponse {
    pub schema: u32,
    pub report: EligibilityReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyResponse {
    pub schema: u32,
    pub report: StoreReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub schema: u32,
    /// Stable error class, e.g. `ineligible` or `tamper-detected`.
    pub code: String,
    /// Eligibility reason when `code` is `ineligible`.
    #[serde(default)]
    pub reason: Option<String>,
    pub message: String,
}

/// An error response: HTTP status plus body.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{status} {}: {}", body.code, body.message)]
pub struct ApiError {
    pub status: u16,
    pub body: ErrorBody,
}

impl ApiError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                schema: SCHEMA_VERSION,
                code: code.to_owned(),
                reason: None,
                message: message.into(),
            },
        }
    }

    pub fn bad_request(message: impl Into<String>) -> Self {
        Self::new(400, "invalid-request", message)
    }

    /// Whether the store failed verification, as opposed to the request
    /// being refused.
    pub fn is_integrity_failure(&self) -> bool {
        matches!(
            self.body.code.as_str(),
            "tamper-detected" | "rollback-detected" | "integrity-violation" | "unrecoverable"
        )
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, code) = match &e {
            Error::InvalidRequest(_) | Error::Decode(_) | Error::Config(_) | Error::OutOfRange { .. } => {
                (400, "invalid-request")
            }
            Error::PolicyDenied { .. } => (403, "policy-denied"),
            Error::NotFound(_) => (404, "not-found"),
            Error::Ineligible { reason, .. } => {
                let mut err = ApiError::new(409, "ineligible", message);
                err.body.reason = Some(reason.code().to_owned());
                return err;
            }
            Error::Poisoned | Error::RecoveryNeeded(_) | Error::CrashInjected(_) => (503, "recovery-required"),
            Error::TamperDetected { .. } => (500, "tamper-detected"),
            Error::RollbackDetected { .. } => (500, "rollback-detected"),
            Error::IntegrityViolation(_) => (500, "integrity-violation"),
            Error::Unrecoverable(_) => (500, "unrecoverable"),
            _ => (500, "internal"),
        };
        ApiError::new(status, code, message)
    }
}

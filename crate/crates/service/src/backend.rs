//! The operations the CLI and the HTTP server expose, over either a local
//! monitor or a remote service.

use rollguard_core::audit::{lineage_text, snapshots_text};
use rollguard_core::monitor::{Monitor, PruneRequest, RollbackRequest, SnapshotRequest, UpdateRequest};
use rollguard_core::records::{ObjectId, VersionRef};

use crate::api::{
    ApiError, CheckpointResponse, EligibilityQuery, EligibilityResponse, LineageResponse, SnapshotsResponse,
    TxResponse, VerifyResponse, SCHEMA_VERSION,
};

pub type ApiResult<T> = Result<T, ApiError>;

pub trait Backend {
    fn update(&self, req: UpdateRequest) -> ApiResult<TxResponse>;
    fn snapshot(&self, req: SnapshotRequest) -> ApiResult<TxResponse>;
    fn rollback(&self, req: RollbackRequest) -> ApiResult<TxResponse>;
    fn prune(&self, req: PruneRequest) -> ApiResult<TxResponse>;
    fn checkpoint(&self) -> ApiResult<CheckpointResponse>;
    fn snapshots(&self) -> ApiResult<SnapshotsResponse>;
    fn lineage(&self, object: &ObjectId) -> ApiResult<LineageResponse>;
    fn eligibility(&self, query: &EligibilityQuery) -> ApiResult<EligibilityResponse>;
    fn verify(&self) -> ApiResult<VerifyResponse>;
}

impl Backend for Monitor {
    fn update(&self, req: UpdateRequest) -> ApiResult<TxResponse> {
        Ok(self.state_update(req)?.into())
    }

    fn snapshot(&self, req: SnapshotRequest) -> ApiResult<TxResponse> {
        Ok(self.take_snapshot(req)?.into())
    }

    fn rollback(&self, req: RollbackRequest) -> ApiResult<TxResponse> {
        Ok(Monitor::rollback(self, req)?.into())
    }

    fn prune(&self, req: PruneRequest) -> ApiResult<TxResponse> {
        Ok(Monitor::prune(self, req)?.into())
    }

    fn checkpoint(&self) -> ApiResult<CheckpointResponse> {
        Ok((&Monitor::checkpoint(self)?).into())
    }

    fn snapshots(&self) -> ApiResult<SnapshotsResponse> {
        let (counter, snapshots) = self.audit(|a| Ok((a.checkpoint().counter, a.list_snapshots()?)))?;
        Ok(SnapshotsResponse {
            schema: SCHEMA_VERSION,
            counter,
            snapshots,
        })
    }

    fn lineage(&self, object: &ObjectId) -> ApiResult<LineageResponse> {
        let (counter, events) = self.audit(|a| Ok((a.checkpoint().counter, a.reconstruct_lineage(object)?)))?;
        Ok(LineageResponse {
            schema: SCHEMA_VERSION,
            counter,
            object: object.clone(),
            events,
        })
    }

    fn eligibility(&self, q: &EligibilityQuery) -> ApiResult<EligibilityResponse> {
        let target = VersionRef::new(q.object.clone(), q.version);
        let report = self.audit(|a| a.check_eligibility(&target, q.tag.as_deref()))?;
        Ok(EligibilityResponse {
            schema: SCHEMA_VERSION,
            report,
        })
    }

    fn verify(&self) -> ApiResult<VerifyResponse> {
        let report = self.audit(|a| a.verify_store())?;
        Ok(VerifyResponse {
            schema: SCHEMA_VERSION,
            report,
        })
    }
}

pub fn tx_text(r: &TxResponse) -> String {
    let versions: Vec<String> = r.versions.iter().map(|v| v.to_string()).collect();
    let mut out = format!(
        "{} committed txid={} counter={} root={} appended catalog={} registry={} log={}",
        r.op.name(),
        r.txid,
        r.counter,
        r.root,
        r.appended.catalog,
        r.appended.registry,
        r.appended.log
    );
    if r.replayed {
        out.push_str(" replayed=true");
    }
    if !versions.is_empty() {
        out.push_str(&format!(" versions={}", versions.join(",")));
    }
    if !r.reclaimed.is_empty() {
        out.push_str(&format!(" reclaimed={}", r.reclaimed.len()));
    }
    out
}

pub fn lineage_response_text(r: &LineageResponse) -> String {
    lineage_text(&r.events)
}

pub fn snapshots_response_text(r: &SnapshotsResponse) -> String {
    snapshots_text(&r.snapshots)
}

#![allow(dead_code)]

use rollguard_core::monitor::{Change, PruneRequest, RollbackRequest, SnapshotRequest, UpdateRequest};
use rollguard_core::records::{ObjectId, PruneReason, PruneReasonKind, VersionRef};
use rollguard_service::api::TxResponse;
use rollguard_service::backend::lineage_response_text;
use rollguard_service::Backend;

pub fn oid(s: &str) -> ObjectId {
    ObjectId::new(s).unwrap()
}

pub fn vr(s: &str) -> VersionRef {
    s.parse().unwrap()
}

/// Import, tag, regress, revert, withdraw.
pub fn release_scenario(b: &dyn Backend) -> Vec<TxResponse> {
    let mut out = Vec::new();
    out.push(
        b.update(
            UpdateRequest::new(
                "ci",
                vec![Change::new(oid("app"), "app v1"), Change::new(oid("lib"), "lib v1")],
            )
            .justify("initial import"),
        )
        .unwrap(),
    );
    let mut snap = SnapshotRequest::new("ci", "r1", vec![oid("app"), oid("lib")]);
    snap.justification = "release r1".into();
    out.push(b.snapshot(snap).unwrap());
    out.push(
        b.update(UpdateRequest::new("ci", vec![Change::new(oid("app"), "app v2")]).justify("ship v2"))
            .unwrap(),
    );
    out.push(
        b.rollback(RollbackRequest::selective("ops", vec![vr("app@1")]).justify("revert regression"))
            .unwrap(),
    );
    out.push(
        b.prune(
            PruneRequest::selective(
                "ops",
                vec![vr("app@3")],
                PruneReason::new(PruneReasonKind::Cve, "CVE-2026-0001"),
            )
            .justify("withdraw v2"),
        )
        .unwrap(),
    );
    out
}

/// Lineage of both objects, as the CLI prints it.
pub fn lineage_transcript(b: &dyn Backend) -> String {
    let mut out = String::new();
    for o in ["app", "lib"] {
        out.push_str(&lineage_response_text(&b.lineage(&oid(o)).unwrap()));
    }
    out
}

pub const GOLDEN_LINEAGE: &str = include_str!("../golden/lineage.txt");

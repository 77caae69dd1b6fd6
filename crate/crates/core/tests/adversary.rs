use std::path::Path;

use rollguard_core::config::Config;
use rollguard_core::harness::{
    crash_matrix, crash_matrix_setup, restore_untrusted, run_scenario, snapshot_untrusted, Attack,
    AttackScenario, CrashRunner, Expected, Mutation, OpSpec, ScenarioFile,
};
use rollguard_core::monitor::{Change, Monitor, PruneRequest, UpdateRequest, PROTOCOL_HOOKS};
use rollguard_core::records::{ObjectId, PruneReason, PruneReasonKind, VersionRef};
use rollguard_core::state::{HeadTracking, PadId};
use rollguard_core::Error;

fn obj(s: &str) -> ObjectId {
    ObjectId::new(s).unwrap()
}

fn ten_updates() -> Vec<OpSpec> {
    (0..10)
        .map(|i| OpSpec::Update(UpdateRequest::new("ci", vec![Change::new(obj("A"), format!("a{i}"))])))
        .collect()
}

fn with_prune() -> Vec<OpSpec> {
    let mut ops = crash_matrix_setup();
    ops.push(OpSpec::Prune(PruneRequest::selective(
        "ops",
        vec![VersionRef::new(obj("A"), 1)],
        PruneReason::new(PruneReasonKind::Cve, "CVE-2024-1"),
    )));
    ops
}

fn scenario(name: &str, setup: Vec<OpSpec>, attack: Attack, expected: Expected) -> AttackScenario {
    AttackScenario {
        name: name.into(),
        head_tracking: HeadTracking::PointerLeaves,
        setup,
        attack,
        expected,
    }
}

fn check(s: &AttackScenario) {
    let tmp = tempfile::tempdir().unwrap();
    let v = run_scenario(s, tmp.path(), &CrashRunner::InProcess).unwrap();
    assert!(v.passed(), "{v}");
}

#[test]
fn replayed_storage_is_detected() {
    for after in [0, 1, 5, 9] {
        check(&scenario("replay", ten_updates(), Attack::ReplayStorage { after_ops: after }, Expected::Detected));
    }
}

#[test]
fn replay_of_the_current_state_is_not_an_attack() {
    let tmp = tempfile::tempdir().unwrap();
    let s = scenario("noop", ten_updates(), Attack::ReplayStorage { after_ops: 10 }, Expected::Detected);
    let v = run_scenario(&s, tmp.path(), &CrashRunner::InProcess).unwrap();
    assert!(!v.passed());
}

#[test]
fn stale_listing_is_detected() {
    check(&scenario("stale-listing", with_prune(), Attack::SwapStaleListing { after_ops: 1 }, Expected::Detected));
}

#[test]
fn pruned_versions_stay_pruned() {
    check(&scenario(
        "resurrect",
        with_prune(),
        Attack::ResurrectPruned { target: VersionRef::new(obj("A"), 1) },
        Expected::Blocked,
    ));
}

#[test]
fn forged_seal_is_rejected() {
    check(&scenario("forge", ten_updates(), Attack::ForgeSeal { after_ops: 3 }, Expected::Detected));
    check(&scenario("forge-current", ten_updates(), Attack::ForgeSeal { after_ops: 10 }, Expected::Detected));
}

#[test]
fn tampered_leaves_are_detected() {
    for pad in [PadId::Catalog, PadId::Registry, PadId::Log] {
        for mutation in [Mutation::FlipByte { at: 0 }, Mutation::FlipByte { at: 9 }, Mutation::FlipByte { at: 40 }, Mutation::Truncate] {
            check(&scenario(
                "tamper",
                with_prune(),
                Attack::TamperLeafFile { pad, index: 0, mutation },
                Expected::Detected,
            ));
        }
    }
}

#[test]
fn rogue_leaf_is_dropped_by_recovery() {
    for pad in [PadId::Catalog, PadId::Log] {
        check(&scenario(
            "rogue",
            with_prune(),
            Attack::TamperLeafFile { pad, index: 0, mutation: Mutation::AppendRogue },
            Expected::RecoveredConsistent,
        ));
    }
}

#[test]
fn crash_staging_never_commits_early() {
    for hook in PROTOCOL_HOOKS {
        check(&scenario(
            "stage",
            with_prune(),
            Attack::CrashStage { hook: hook.into(), repetitions: 3 },
            Expected::RecoveredConsistent,
        ));
    }
}

#[test]
fn content_store_rollback_is_never_served_stale() {
    let tmp = tempfile::tempdir().unwrap();
    let config = Config::for_root(tmp.path()).deterministic();
    let m = Monitor::open(config.clone()).unwrap();
    m.state_update(UpdateRequest::new("ci", vec![Change::new(obj("A"), "old")])).unwrap();
    let snap = snapshot_untrusted(&config).unwrap();
    m.state_update(UpdateRequest::new("ci", vec![Change::new(obj("A"), "new")])).unwrap();
    let content = config.untrusted_dir().unwrap().join("content");
    snap.restore_matching(config.untrusted_dir().unwrap(), |p: &Path| p.starts_with("content")).unwrap();
    assert!(matches!(m.read_object(&obj("A")), Err(Error::NotFound(_))));
    assert_eq!(m.read_version(&VersionRef::new(obj("A"), 1)).unwrap(), b"old");

    let path = m.content().path_of(&rollguard_core::Digest::of(b"old"));
    std::fs::write(&path, b"new").unwrap();
    assert!(matches!(
        m.read_version(&VersionRef::new(obj("A"), 1)),
        Err(Error::IntegrityViolation(_))
    ));
    assert!(content.exists());
    drop(m);
    restore_untrusted(&config, &snap).unwrap();
    assert!(matches!(Monitor::open(config), Err(Error::RollbackDetected { .. })));
}

#[test]
fn scenario_file_parses() {
    let text = r#"
[[scenario]]
name = "replay after ten"
attack = { kind = "replay_storage", after_ops = 2 }
expected = "detected"
setup = [
  { op = "update", request = { actor = "ci", changes = [{ object = "A", content = { bytes = "YQ==" } }] } },
  { op = "update", request = { actor = "ci", changes = [{ object = "A", content = { bytes = "Yg==" } }] } },
  { op = "update", request = { actor = "ci", changes = [{ object = "A", content = { bytes = "Yw==" } }] } },
]

[[scenario]]
name = "flip catalog leaf"
head_tracking = "version_metadata"
attack = { kind = "tamper_leaf_file", pad = "catalog", index = 0, mutation = { kind = "flip_byte", at = 7 } }
expected = "detected"
setup = [
  { op = "update", request = { actor = "ci", changes = [{ object = "A", content = { bytes = "YQ==" } }] } },
]
"#;
    let file = ScenarioFile::from_toml(text).unwrap();
    assert_eq!(file.scenario.len(), 2);
    for s in &file.scenario {
        check(s);
    }
}

#[test]
fn in_process_crash_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let trials = crash_matrix(tmp.path(), HeadTracking::VersionMetadata, &CrashRunner::InProcess, 2).unwrap();
    assert_eq!(trials.len(), 12 * 4 * 2);
    for t in &trials {
        assert!(t.consistent(), "{t}");
        assert_eq!(t.matches_committed(), t.expected_commit(), "{t}");
    }
}

#[test]
fn auditor_refuses_a_replayed_store() {
    let tmp = tempfile::tempdir().unwrap();
    let config = Config::for_root(tmp.path()).deterministic();
    let m = Monitor::open(config.clone()).unwrap();
    m.state_update(UpdateRequest::new("ci", vec![Change::new(obj("A"), "a1")])).unwrap();
    let snap = snapshot_untrusted(&config).unwrap();
    m.state_update(UpdateRequest::new("ci", vec![Change::new(obj("A"), "a2")])).unwrap();
    drop(m);
    restore_untrusted(&config, &snap).unwrap();

    let hw = rollguard_core::hardware_root::HardwareRoot::open(config.trusted_dir().unwrap()).unwrap();
    let got = rollguard_core::state::StateStore::open_for_audit(
        config.untrusted_dir().unwrap(),
        config.monitor.head_tracking,
        &hw,
    );
    match got {
        Err(Error::RollbackDetected { checkpoint_counter, hardware_counter }) => {
            assert_eq!((checkpoint_counter, hardware_counter), (1, 2));
        }
        other => panic!("expected RollbackDetected, got {:?}", other.map(|(_, c)| c.counter)),
    }
}

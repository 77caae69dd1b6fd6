mod support;

use std::path::Path;
use std::process::{Command, Output};

use rollguard_core::config::Config;
use rollguard_core::harness::{crash_matrix_op, crash_matrix_setup, crash_trial, CrashRunner};
use rollguard_core::monitor::{Monitor, HOOK_CHECKPOINT_AFTER, PROTOCOL_HOOKS};
use rollguard_core::records::OpKind;

use support::scenario::GOLDEN_LINEAGE;

const BIN: &str = env!("CARGO_BIN_EXE_rollguard");

fn write_config(dir: &Path) -> std::path::PathBuf {
    let cfg = Config::for_root(dir.join("store")).deterministic();
    let path = dir.join("rollguard.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn rg(config: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("ROLLGUARD_SERVER")
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) -> String {
    let out = rg(config, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run_scenario(config: &Path) {
    ok(config, &["update", "--literal", "app=app v1", "lib=lib v1", "--justify", "initial import"]);
    ok(config, &["snapshot", "r1", "app", "lib", "--justify", "release r1"]);
    ok(config, &["update", "--literal", "app=app v2", "--justify", "ship v2"]);
    ok(config, &["rollback", "--target", "app@1", "--actor", "ops", "--justify", "revert regression"]);
    ok(config, &[
        "prune", "--target", "app@3", "--reason", "cve", "--detail", "CVE-2026-0001", "--actor", "ops",
        "--justify", "withdraw v2",
    ]);
}

#[test]
fn lineage_matches_golden_transcript() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    run_scenario(&config);
    let transcript = ok(&config, &["lineage", "app"]) + &ok(&config, &["lineage", "lib"]);
    assert_eq!(transcript, GOLDEN_LINEAGE);
    assert!(ok(&config, &["checkpoint"]).starts_with("counter=5 "));
}

#[test]
fn exit_codes_separate_refusal_from_integrity_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    run_scenario(&config);

    assert_eq!(rg(&config, &["eligibility", "app@3"]).status.code(), Some(3));
    assert_eq!(rg(&config, &["eligibility", "app@4"]).status.code(), Some(0));
    assert_eq!(rg(&config, &["rollback", "--target", "app@3"]).status.code(), Some(3));
    assert_eq!(rg(&config, &["rollback"]).status.code(), Some(2));

    let json: serde_json::Value = serde_json::from_str(&ok(&config, &["--json", "verify"])).unwrap();
    // The refused rollback left an unmatched intent; reopening recovered past it.
    assert_eq!(json["report"]["counter"], 7);

    let pad = tmp.path().join("store/untrusted/catalog.pad");
    let mut bytes = std::fs::read(&pad).unwrap();
    let at = bytes.len() - 3;
    bytes[at] ^= 0x01;
    std::fs::write(&pad, bytes).unwrap();
    let out = rg(&config, &["verify"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn update_reads_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let file = tmp.path().join("payload.bin");
    std::fs::write(&file, [0u8, 159, 146, 150]).unwrap();
    let out = ok(&config, &["--json", "update", &format!("blob={}", file.display())]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["versions"][0], serde_json::json!({"object": "blob", "version": 1}));
    let m = Monitor::open(Config::load(&config).unwrap()).unwrap();
    assert_eq!(m.read_object(&"blob".parse().unwrap()).unwrap().unwrap().1, [0u8, 159, 146, 150]);
}

#[test]
fn child_process_crashes_recover_to_a_legal_state() {
    let tmp = tempfile::tempdir().unwrap();
    let config = Config::for_root(tmp.path().join("store")).deterministic();
    {
        let m = Monitor::open(config.clone()).unwrap();
        for spec in crash_matrix_setup() {
            spec.apply(&m).unwrap();
        }
    }
    let runner = CrashRunner::ChildProcess {
        program: BIN.into(),
        args: vec!["exec".into()],
    };
    for (i, hook) in [PROTOCOL_HOOKS[0], PROTOCOL_HOOKS[5], HOOK_CHECKPOINT_AFTER].into_iter().enumerate() {
        let op = crash_matrix_op(&Monitor::open(config.clone()).unwrap(), OpKind::Update).unwrap();
        let t = crash_trial(&config, &op, hook, &runner, &tmp.path().join(format!("ref{i}"))).unwrap();
        assert!(t.consistent(), "{t}");
        assert_eq!(t.matches_committed(), t.expected_commit(), "{t}");
    }
}

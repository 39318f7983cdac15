use std::path::Path;
use std::process::Command;

fn gateway() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gateway"))
}

#[test]
fn simulate_reports_success() {
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/demo.scenario");
    let out = gateway().args(["simulate", "--script"]).arg(script).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok: "));
}

#[test]
fn simulate_fails_on_unmet_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.scenario");
    std::fs::write(&script, "INJECT mention abava @t411 how are you?\nEXPECT_REPLY abava @abava nope\n").unwrap();
    let out = gateway().args(["simulate", "--script"]).arg(&script).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("FAILED: line 2"), "{stderr}");
}

#[test]
fn journal_register_and_unregister() {
    let dir = tempfile::tempdir().unwrap();
    let journal = dir.path().join("registry.jsonl");
    let out = gateway()
        .args(["register", "w", "http://hooks.example/weather", "--owner", "ops", "--journal"])
        .arg(&journal)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("\"key\": \"w\""));

    let out = gateway()
        .args(["register", "w", "http://hooks.example/other", "--owner", "bob", "--journal"])
        .arg(&journal)
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = gateway()
        .args(["unregister", "w", "--owner", "bob", "--journal"])
        .arg(&journal)
        .output()
        .unwrap();
    assert!(!out.status.success());

    let out = gateway()
        .args(["unregister", "w", "--owner", "ops", "--journal"])
        .arg(&journal)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(t411::RegistryStore::load(&journal).unwrap().is_empty());
}

use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_mfcascade");

const LDRENEWAL: &str = r#"
kind = "ldrenewal"
seed = 8
depth = 9
replicas = 3
qs = [-1.0, 0.5]

[model]
kind = "two-point"
b = 2
low = 0.3
high = 0.7
"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn body(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().skip(1).collect::<Vec<_>>().join("\n")
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", LDRENEWAL);
    for out in ["a", "b"] {
        let status = Command::new(BIN)
            .args(["ldrenewal", "--config", &cfg, "--out"])
            .arg(dir.path().join(out))
            .output()
            .unwrap()
            .status;
        assert!(status.success());
    }
    let a = body(&dir.path().join("a/ldrenewal.csv"));
    assert_eq!(a, body(&dir.path().join("b/ldrenewal.csv")));
    assert_eq!(a.lines().count(), 1 + 3 * 2);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["kind"], "ldrenewal");
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 3);
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", LDRENEWAL);
    let out = dir.path().join("o");
    let status = Command::new(BIN)
        .args(["ldrenewal", "--config", &cfg, "--seed", "5", "--depth", "8", "--replicas", "2", "--threads", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["seed"], 5);
    assert_eq!(summary["config"]["depth"], 8);
    assert_eq!(body(&out.join("ldrenewal.csv")).lines().count(), 1 + 2 * 2);
}

#[test]
fn empty_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "empty.toml", "");
    for sub in ["spectrum", "validate"] {
        let out = Command::new(BIN).args([sub, "--config", &cfg]).current_dir(dir.path()).output().unwrap();
        assert!(!out.status.success(), "{sub}");
    }
}

#[test]
fn validate_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "kind = \"spectrum\"\ndepth = 30\nqs = [0.5, 3.0]\n[model]\nkind = \"lognormal\"\nb = 2\nsigma2 = 1.3862943611198906\n",
    );
    let out = Command::new(BIN).args(["validate", "--config", &bad]).output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!out.status.success());
    assert!(text.contains("error: q = 3"), "{text}");
    assert!(text.contains("warning: memory"), "{text}");

    let good = write(dir.path(), "good.toml", LDRENEWAL);
    let out = Command::new(BIN).args(["validate", "--config", &good]).output().unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "ok");
}

#[test]
fn failing_checks_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    // A constant ε far too narrow for a random cascade at this depth.
    let cfg = write(dir.path(), "c.toml", &format!("{LDRENEWAL}\n[eps]\nkind = \"constant\"\nvalue = 1e-6\n"));
    let out = Command::new(BIN).args(["ldrenewal", "--config", &cfg, "--out"]).arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stdout).unwrap().contains("FAIL"));
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).args(["selftest", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let out = Command::new(BIN).arg("validate").arg("--config").arg(&path).output().unwrap();
        assert!(out.status.success(), "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 5);
}

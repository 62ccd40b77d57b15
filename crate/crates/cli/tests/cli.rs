use std::path::Path;
use std::process::{Command, Output};

fn eapsort(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eapsort")).current_dir(dir).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eapsort(&["--help"], dir.path())), 0);
    assert_eq!(code(&eapsort(&["--version"], dir.path())), 0);
    assert_eq!(code(&eapsort(&["sort", "--help"], dir.path())), 0);
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eapsort(&["--no-such-flag"], dir.path())), 1);
    assert_eq!(code(&eapsort(&["--workers", "0", "synth"], dir.path())), 1);
    std::fs::write(dir.path().join("bad.toml"), "[cohort]\nn_cells = 1\n").unwrap();
    assert_eq!(code(&eapsort(&["--config", "bad.toml", "synth"], dir.path())), 1);
    std::fs::write(dir.path().join("typo.toml"), "[cohort]\nn_cels = 10\n").unwrap();
    assert_eq!(code(&eapsort(&["--config", "typo.toml", "synth"], dir.path())), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = eapsort(&["estimate", "--input", "missing.csv"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
    std::fs::write(dir.path().join("broken.csv"), "charge_mAh,voltage_V\n0.0,3.0\nx,3.1\n").unwrap();
    assert_eq!(code(&eapsort(&["estimate", "--input", "broken.csv"], dir.path())), 2);
    assert_eq!(code(&eapsort(&["report", "--from", "nowhere"], dir.path())), 2);
}

#[test]
fn synth_then_estimate_from_ocv() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[cohort]\nn_cells = 3\n").unwrap();
    let out = eapsort(&["--config", "c.toml", "--out", "cohort", "synth"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ocv = dir.path().join("cohort/ocv/cell_001.csv");
    assert!(ocv.is_file());
    let out = eapsort(&["--out", "est", "estimate", "--input", ocv.to_str().unwrap()], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("est/estimate.json")).unwrap()).unwrap();
    assert_eq!(json["source"], "ocv");
    assert!(json["capacity_mah"].as_f64().unwrap() > 0.0);
}

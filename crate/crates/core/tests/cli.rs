use std::process::Command;

fn difrc(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_difrc")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const UNIT: [&str; 21] = [
    "bound", "--l0", "0.5", "--lstar", "0", "--l1", "1", "--l2", "0", "--b", "0", "--sigma2", "0", "--eta", "1",
    "--xi", "1", "--classes", "10", "--epochs", "1",
];

#[test]
fn bound_prints_worked_example() {
    let (code, out, _) = difrc(&UNIT);
    assert_eq!(code, 0);
    assert!(out.contains("r_min=1\n"), "{out}");
    assert!(out.contains("eta_max=2\n"), "{out}");
}

#[test]
fn infeasible_bound_is_a_value_not_an_error() {
    let mut args = UNIT.to_vec();
    args[14] = "3";
    let (code, out, _) = difrc(&args);
    assert_eq!(code, 0);
    assert!(out.contains("r_min=infeasible"));
}

#[test]
fn config_errors_exit_with_one() {
    assert_eq!(difrc(&["run", "--alpha", "-2"]).0, 1);
    assert_eq!(difrc(&["run", "--scenario", "nid2", "--clients", "10"]).0, 1);
    assert_eq!(difrc(&["run", "--no-such-flag"]).0, 1);
    assert_eq!(difrc(&["run", "--config", "/definitely/missing.cfg"]).0, 1);
    assert_eq!(difrc(&[]).0, 1);
    let mut bad = UNIT.to_vec();
    bad[6] = "0";
    assert_eq!(difrc(&bad).0, 1);
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("reps.bin");
    let (code, _, err) = difrc(&["probe", "--reps", missing.to_str().unwrap()]);
    assert_eq!(code, 2, "{err}");
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a dump").unwrap();
    assert_eq!(difrc(&["probe", "--reps", garbage.to_str().unwrap()]).0, 2);
}

#[test]
fn help_succeeds() {
    let (code, out, _) = difrc(&["--help"]);
    assert_eq!(code, 0);
    for sub in ["run", "ablate", "extract", "bound", "probe"] {
        assert!(out.contains(sub), "{sub}");
    }
    let (code, out, _) = difrc(&["run", "--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("--pca-scope") && out.contains("--out"));
}

#[test]
fn extract_then_probe_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let reps = dir.path().join("reps.bin");
    let labels = dir.path().join("labels.csv");
    let clusters = dir.path().join("clusters.csv");
    let (code, out, err) = difrc(&[
        "extract",
        "--per-class",
        "10",
        "--pretrain-steps",
        "3",
        "--d",
        "16",
        "--reps",
        reps.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("wrote 20 representations"), "{out}");
    let (code, out, err) = difrc(&[
        "probe",
        "--reps",
        reps.to_str().unwrap(),
        "--labels",
        labels.to_str().unwrap(),
        "--clusters",
        clusters.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("probe_acc=") && out.contains("purity="));
    let csv = std::fs::read_to_string(clusters).unwrap();
    assert!(csv.starts_with("index,cluster,label\n"));
    assert_eq!(csv.lines().count(), 21);
}

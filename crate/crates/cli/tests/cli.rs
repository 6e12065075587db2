use std::process::Command;

fn seqedit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seqedit"))
}

const SMALL: [&str; 8] = ["--dim", "16", "--vocab", "32", "--edits", "20", "--eval-every", "5"];

#[test]
fn run_writes_report_and_companions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let status = seqedit()
        .args(["run", "--method", "deltaedit", "--seed", "3", "--no-timing"])
        .args(SMALL)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    for name in ["run.json", "run.csv", "run.ledger.jsonl", "run.state.json", "run.universe.json"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert!(report["wall_time_secs"].is_null());
    let csv = std::fs::read_to_string(dir.path().join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);

    let replay = seqedit()
        .args(["replay", "--ledger"])
        .arg(dir.path().join("run.ledger.jsonl"))
        .output()
        .unwrap();
    assert!(replay.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&replay.stdout).unwrap();
    assert_eq!(summary["n_edits"], 20);
    assert_eq!(summary["deviation_violations"], 0);
    let terminal = &report["rows"][3]["noise_E"];
    let replayed = summary["noise_E"].as_f64().unwrap();
    assert!((replayed - terminal.as_f64().unwrap()).abs() <= 1e-9 * replayed.abs().max(1.0));
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let mut texts = Vec::new();
    for _ in 0..2 {
        let ok = seqedit()
            .args(["run", "--no-timing"])
            .args(SMALL)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(ok.success());
        texts.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(texts[0], texts[1]);
}

#[test]
fn sweep_and_compare_print_one_line_per_entry() {
    let sweep = seqedit()
        .args(["sweep-eta", "--etas", "0.5,1.5,1e9"])
        .args(SMALL)
        .output()
        .unwrap();
    assert!(sweep.status.success());
    let text = String::from_utf8(sweep.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().last().unwrap().ends_with("activations=0"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("table.json");
    let compare = seqedit()
        .args(["compare", "--methods", "memit,alphaedit,deltaedit@2.5"])
        .args(SMALL)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(compare.status.success());
    assert_eq!(String::from_utf8(compare.stdout).unwrap().lines().count(), 3);
    let table: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(table["rows"][2]["method"]["eta"], 2.5);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let unknown = seqedit().args(["run", "--method", "rome"]).output().unwrap();
    assert!(!unknown.status.success());
    let single = seqedit().args(["compare", "--methods", "memit"]).args(SMALL).output().unwrap();
    assert!(!single.status.success());
    let too_many = seqedit().args(["run", "--edits", "50", "--facts", "10"]).output().unwrap();
    assert!(!too_many.status.success());
    assert!(String::from_utf8_lossy(&too_many.stderr).contains("n_edits"));
    let missing = seqedit().args(["replay", "--ledger", "/nonexistent/x.jsonl"]).output().unwrap();
    assert!(!missing.status.success());
}

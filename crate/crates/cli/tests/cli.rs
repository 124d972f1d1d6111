use dcast_core::report::{read_trace, RunReport, OUT_DIR_ENV};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dcast(args: &[&str], out_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcast"))
        .args(args)
        .env(OUT_DIR_ENV, out_dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "[cluster]\nduration = 3000\nseed = 4\n[workload]\nrate = 0.2\n";

#[test]
fn check_lists_every_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.toml",
        "[cluster]\nn = 3\nf = 1\nduration = 0\n",
    );
    let out = dcast(&["check", s(&bad)], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("cluster.n") && err.contains("cluster.duration"),
        "{err}"
    );

    let ok = write(dir.path(), "ok.toml", SMALL);
    assert_eq!(dcast(&["check", s(&ok)], dir.path()).status.code(), Some(0));

    let typo = write(dir.path(), "typo.toml", "[cluster]\nnodes = 4\n");
    assert_eq!(
        dcast(&["check", s(&typo)], dir.path()).status.code(),
        Some(3)
    );
}

#[test]
fn run_writes_reports_to_out_dir_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "small.toml", SMALL);
    let out_dir = dir.path().join("out");
    let trace = dir.path().join("t.jsonl");
    let out = dcast(
        &["run", s(&sc), "--seed", "9", "--trace", s(&trace)],
        &out_dir,
    );
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let json = std::fs::read_to_string(out_dir.join("small-9.json")).unwrap();
    let csv = std::fs::read_to_string(out_dir.join("small-9.csv")).unwrap();
    let r = RunReport::from_json(&json).unwrap();
    assert_eq!(r.seed, 9);
    assert!(r.safe() && r.min_honest_height() > 0);
    assert_eq!(RunReport::from_csv(&csv).unwrap(), r);
    assert!(csv.starts_with("field,value\n"));

    let events = read_trace(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert!(events.iter().any(|e| e.event == "commit"));
    assert!(events.windows(2).all(|w| w[0].tick <= w[1].tick));
}

#[test]
fn report_flag_picks_format_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "small.toml", SMALL);
    let csv = dir.path().join("r.csv");
    let json = dir.path().join("r.json");
    assert_eq!(
        dcast(&["run", s(&sc), "--report", s(&csv)], dir.path())
            .status
            .code(),
        Some(0)
    );
    assert_eq!(
        dcast(&["run", s(&sc), "--report", s(&json)], dir.path())
            .status
            .code(),
        Some(0)
    );
    let a = RunReport::from_csv(&std::fs::read_to_string(csv).unwrap()).unwrap();
    let b = RunReport::from_json(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn byzantine_raft_leader_exits_with_safety_code() {
    // node 3 leads the Raft term in progress at t=2000 for this seed
    let dir = tempfile::tempdir().unwrap();
    let sc = write(
        dir.path(),
        "leader.toml",
        "[cluster]\nduration = 4000\nseed = 1\n[workload]\nrate = 0.2\n[faults]\nplan = [\"2000:3:equivocate\"]\n",
    );
    let report = dir.path().join("r.json");
    let out = dcast(&["run", s(&sc), "--report", s(&report)], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let r = RunReport::from_json(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert!(r.safety.conflicting_heights > 0);
}

#[test]
fn compare_chained_beats_basic_on_aligned_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(
        dir.path(),
        "cmp.toml",
        "[cluster]\nduration = 6000\n[workload]\nrate = 0.5\n",
    );
    let out = dcast(
        &[
            "compare",
            s(&sc),
            "--vary",
            "cluster.protocol=hotstuff-basic,hotstuff-chained",
            "--seeds",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    let height = |name: &str| -> f64 {
        let row = table.lines().find(|l| l.contains(name)).unwrap();
        row.split_whitespace().nth(1).unwrap().parse().unwrap()
    };
    assert!(
        height("=hotstuff-chained") > height("=hotstuff-basic"),
        "{table}"
    );
}

#[test]
fn compare_rejects_structural_variants() {
    let dir = tempfile::tempdir().unwrap();
    let sc = write(dir.path(), "cmp.toml", SMALL);
    let out = dcast(&["compare", s(&sc), "--vary", "cluster.n=4,7"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let out = dcast(
        &["compare", s(&sc), "--vary", "cluster.protocol=raft,paxos"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

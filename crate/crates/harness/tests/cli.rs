use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cachefs-sim"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn run(args: &[&str]) -> Output {
    sim().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_trace_and_metrics_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("zero_scale_roundtrip.toml");
    let mut outputs = Vec::new();
    for i in 0..2 {
        let (t, m) = (dir.path().join(format!("trace{i}")), dir.path().join(format!("metrics{i}")));
        let o = run(&["run", s(&sc), "--seed", "9", "--trace", s(&t), "--metrics", s(&m)]);
        assert!(o.status.success(), "{}", stdout(&o));
        assert!(stdout(&o).ends_with("result PASS (0 findings)\n"), "{}", stdout(&o));
        outputs.push((stdout(&o), std::fs::read_to_string(&t).unwrap(), std::fs::read_to_string(&m).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let (_, trace, metrics) = &outputs[0];
    for line in trace.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 6, "{line}");
        assert!(f[2].parse::<u64>().is_ok() && f[3].parse::<u64>().is_ok() && f[5].parse::<usize>().is_ok(), "{line}");
    }
    assert!(trace.lines().any(|l| l.starts_with("write /data/")));
    for line in metrics.lines() {
        let (k, v) = line.split_once(' ').unwrap();
        assert!(!k.is_empty() && v.parse::<u64>().is_ok(), "{line}");
    }
    assert!(metrics.lines().any(|l| l == "checks.failed 0"));
}

#[test]
fn parse_errors_exit_2_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "name = \"bad\"\nnodes = 1\n\n[workload]\nfiles = \"many\"\n").unwrap();
    let o = run(&["run", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:5:"), "{err}");
}

fn node_dirs(root: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap().to_str().unwrap().contains("node-"))
        .collect();
    out.sort();
    out
}

#[test]
fn dumped_logs_verify_and_corruption_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump");
    let o = run(&["run", s(&scenario("zero_scale_roundtrip.toml")), "--dump", s(&dump)]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(dump.join("store").is_dir());
    let nodes = node_dirs(&dump);
    assert!(nodes.len() >= 5, "{nodes:?}");
    for n in &nodes {
        let o = run(&["verify-log", s(n)]);
        assert!(o.status.success(), "{}: {}", n.display(), stdout(&o));
        assert!(stdout(&o).starts_with("wal ok:"));
    }
    let victim = &nodes[0];
    let wal = victim.join("wal.log");
    let mut bytes = std::fs::read(&wal).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&wal, &bytes).unwrap();
    let o = run(&["verify-log", s(victim)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("corrupt at entry"), "{}", stdout(&o));
}

#[test]
fn broken_second_level_bytes_fail_verification() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("dump");
    assert!(run(&["run", s(&scenario("zero_scale_roundtrip.toml")), "--dump", s(&dump)]).status.success());
    let victim = node_dirs(&dump)
        .into_iter()
        .find(|n| std::fs::read_dir(n.join("sl")).map(|d| d.count() > 0).unwrap_or(false))
        .expect("a node with second-level files");
    let sl = std::fs::read_dir(victim.join("sl")).unwrap().next().unwrap().unwrap().path();
    let len = std::fs::metadata(&sl).unwrap().len();
    std::fs::write(&sl, vec![0u8; len as usize / 2]).unwrap();
    let o = run(&["verify-log", s(&victim)]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn missing_node_dir_is_an_error() {
    let o = run(&["verify-log", "/nonexistent/node"]);
    assert_eq!(o.status.code(), Some(2));
}

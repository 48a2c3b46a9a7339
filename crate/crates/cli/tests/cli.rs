use std::path::PathBuf;
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn dhtee(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dhtee"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> String {
    fixtures().join(name).to_string_lossy().into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dhtee-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

#[test]
fn run_happy_path_exits_zero() {
    let out = dhtee(&["run", &fixture("happy_path.json")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] channel d1<->d2"));
    assert!(!stdout.contains("[FAIL]"));
}

#[test]
fn run_adversary_exits_zero() {
    let out = dhtee(&["run", &fixture("adversary.json")]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS] no channel without a finalized satisfied verdict"));
}

#[test]
fn failed_assertion_exits_one() {
    let text = std::fs::read_to_string(fixture("happy_path.json")).unwrap();
    let path = scratch("fails.json");
    // Expect a channel the requirements can never produce.
    std::fs::write(&path, text.replace("\"sgx-like:sdk-v2\", \"sgx-like:aesni\"", "\"sgx-like:cpu-svn-7\"")).unwrap();
    let out = dhtee(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL]"));
}

#[test]
fn malformed_config_exits_two_with_line() {
    let path = scratch("bad.json");
    std::fs::write(&path, "{\n  \"name\": \"x\",\n  \"devices\": [],\n  \"surprise\": true\n}\n").unwrap();
    let out = dhtee(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("{}:4:", path.display())), "{stderr}");
    assert!(stderr.contains("surprise"));

    std::fs::write(&path, "{\n  \"name\": \"x\",\n  \"devices\": [\n").unwrap();
    let out = dhtee(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = dhtee(&["run", "/nonexistent/dhtee.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_override_and_trace_dump() {
    let a = scratch("a.jsonl");
    let b = scratch("b.jsonl");
    let c = scratch("c.jsonl");
    let happy = fixture("happy_path.json");
    for (seed, path) in [("3", &a), ("3", &b), ("4", &c)] {
        let out = dhtee(&["run", &happy, "--seed", seed, "--trace", path.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |p: &PathBuf| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let first = read(&a).lines().next().unwrap().to_string();
    assert!(first.starts_with("{\"t\":0,\"seq\":"), "{first}");
    assert!(first.contains("\"kind\":\"wake\"") && first.contains("\"digest\":\""));
}

#[test]
fn perf_writes_csv() {
    let out_path = scratch("perf.csv");
    let out = dhtee(&["perf", &fixture("perf.json"), "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&out_path).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("rate,mode,mean_latency,p95_latency,throughput"));
    assert_eq!(lines.count(), 10);

    let small = scratch("perf-small.json");
    std::fs::write(&small, r#"{"name": "s", "rates": [1, 2, 4, 8], "rounds": 6}"#).unwrap();
    let out = dhtee(&["perf", small.to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.lines().count(), 9);
    assert!(stdout.lines().skip(1).all(|l| l.split(',').count() == 5));
}

#[test]
fn extend_riscv_and_duplicate() {
    let out = dhtee(&["extend", &fixture("happy_path.json"), &fixture("extension_riscv.json")]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("[PASS] pre-existing records unchanged"));
    assert!(stdout.contains("[PASS] channel d4<->d2"));

    let out = dhtee(&["extend", &fixture("happy_path.json"), &fixture("extension_duplicate.json")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("already installed"));
}

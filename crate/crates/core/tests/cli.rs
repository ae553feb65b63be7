use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn cli(dir: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_deltaswitch"));
    c.current_dir(dir).env_remove("MESWITCH_SEED");
    c
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn run(dir: &Path, args: &[&str]) -> String {
    ok(cli(dir).args(args).output().unwrap())
}

fn field<'a>(out: &'a str, key: &str) -> &'a str {
    out.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key}= in {out}"))
}

fn small_pair(dir: &Path) {
    run(dir, &["toy-base", "--out", "b.toyl", "--width", "16", "--depth", "2", "--seed", "1"]);
    run(dir, &["toy-expert", "--base", "b.toyl", "--domain", "math", "--seed", "2", "--out", "f.toyl"]);
    run(dir, &["calib", "--out", "c.jsonl", "--count", "8", "--len", "8", "--seed", "3"]);
}

#[test]
fn report_ratio_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["report", "ratio", "--psi", "13.48", "--psit", "2.13", "--phi", "3.42", "--m-range", "1..=4"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "m,ratio");
    assert_eq!(lines.len(), 5);
    let r3: f64 = lines[3].strip_prefix("3,").unwrap().parse().unwrap();
    assert!((r3 - 1.74).abs() < 0.005);
}

#[test]
fn compress_without_salient_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pair(d);
    let out = run(
        d,
        &[
            "compress", "--base", "b.toyl", "--finetuned", "f.toyl", "--calib", "c.jsonl", "--out", "e.mesw", "--salient-k",
            "0", "--distill-epochs", "0",
        ],
    );
    assert!(!out.contains("initial_loss"));
    let inspect = run(d, &["inspect", "e.mesw"]);
    for line in inspect.lines().filter(|l| l.starts_with("layer=") && l.contains(" m=")) {
        assert!(line.contains(" k=0 ") && line.contains(" salient=0 "), "{line}");
    }
    assert_eq!(field(&inspect, "total_bytes"), field(&out, "total_bytes"));
    let len = std::fs::metadata(d.join("e.mesw")).unwrap().len();
    assert_eq!(field(&inspect, "total_bytes").parse::<u64>().unwrap(), len);
}

#[test]
fn compress_reports_distillation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pair(d);
    let out = run(d, &["compress", "--base", "b.toyl", "--finetuned", "f.toyl", "--calib", "c.jsonl", "--out", "e.mesw"]);
    let initial: f64 = field(&out, "initial_loss").parse().unwrap();
    let fin: f64 = field(&out, "final_loss").parse().unwrap();
    assert!(initial.is_finite() && fin.is_finite());
}

#[test]
fn seed_flag_overrides_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let digest = |args: &[&str], env: Option<&str>| {
        let mut c = cli(d);
        if let Some(v) = env {
            c.env("MESWITCH_SEED", v);
        }
        field(&ok(c.args(args).output().unwrap()), "digest").to_string()
    };
    let base = ["toy-base", "--out", "x.toyl", "--width", "8", "--depth", "1"];
    let explicit = digest(&[&base[..], &["--seed", "5"]].concat(), Some("9"));
    assert_eq!(explicit, digest(&[&base[..], &["--seed", "5"]].concat(), None));
    assert_eq!(digest(&base, Some("5")), explicit);
    assert_ne!(digest(&base, None), explicit);
}

#[test]
fn errors_are_one_line_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = cli(d).args(["inspect", "missing.mesw"]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: io: "), "{err}");

    std::fs::write(d.join("junk.mesw"), b"not an artifact").unwrap();
    let out = cli(d).args(["inspect", "junk.mesw"]).output().unwrap();
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: bad_magic: "));

    let out = cli(d).args(["compress", "--bits", "5"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error: usage: "));

    let out = cli(d).env("MESWITCH_SEED", "abc").args(["toy-base", "--out", "x.toyl"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("MESWITCH_SEED"));
}

#[test]
fn serve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pair(d);
    run(
        d,
        &[
            "compress", "--base", "b.toyl", "--finetuned", "f.toyl", "--calib", "c.jsonl", "--out", "e.mesw", "--domain", "math",
            "--model-id", "m1", "--distill-epochs", "0",
        ],
    );
    run(d, &["gen-routing-data", "--out", "r.jsonl", "--per-domain", "50", "--seed", "4"]);
    run(d, &["route-train", "--data", "r.jsonl", "--out", "r.mert"]);
    let reg = run(d, &["register", "--registry", "reg", "--base", "b.toyl", "--id", "m1", "--artifact", "e.mesw"]);
    assert!(reg.contains("id=m1 domain=math"));

    let mut server = cli(d)
        .args(["serve", "--registry", "reg", "--base", "b.toyl", "--budget-mb", "1", "--router", "r.mert", "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening=").unwrap().to_string();

    let out = cli(d)
        .args(["query", "--addr", &addr, "--query", "solve this integral equation", "--max-new", "5"])
        .output()
        .unwrap();
    let unknown = cli(d).args(["query", "--addr", &addr, "--query", "hi", "--expert", "nope"]).output().unwrap();
    server.kill().unwrap();
    server.wait().unwrap();

    let resp: serde_json::Value = serde_json::from_str(ok(out).trim()).unwrap();
    assert_eq!(resp["domain"], "math");
    assert_eq!(resp["expert"], "m1");
    assert_eq!(resp["tokens"].as_array().unwrap().len(), 5);
    assert!(!unknown.status.success());
    let body = String::from_utf8(unknown.stdout).unwrap();
    assert!(body.contains("unknown_expert"), "{body}");
}

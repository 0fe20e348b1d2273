use std::fs;
use std::path::Path;
use std::process::Command;

const SMALL: &str = "\
M = 4
data = synthetic(200, 5, 4)
test_size = 40
partition = iid
model = logistic
T_s = 1.5
trials = 2
";

fn fedsched(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fedsched")).args(args).env("FEDSCHED_THREADS", "2").output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_both_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = fedsched(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let history = fs::read(a.join("history.csv")).unwrap();
    assert_eq!(history, fs::read(b.join("history.csv")).unwrap());
    assert_eq!(fs::read(a.join("summary.csv")).unwrap(), fs::read(b.join("summary.csv")).unwrap());
    let text = String::from_utf8(history).unwrap();
    assert!(text.starts_with("trial,round,policy,n_scheduled,t_star_s,cumulative_s,K_hat,C_value,"));
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    let rounds: usize = summary.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(text.lines().count() - 1, rounds);
}

#[test]
fn overrides_change_the_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("o");
    let o = fedsched(&[
        "run",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--policy",
        "RD(2)",
        "--trials",
        "1",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("history.csv")).unwrap();
    assert!(text.lines().skip(1).all(|l| l.starts_with("0,") && l.contains(",RD(2),2,")), "{text}");
}

#[test]
fn bad_key_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}radius = 3\n"));
    let out = dir.path().join("o");
    let o = fedsched(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("radius"));
    assert!(!out.exists());
}

#[test]
fn sweep_writes_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("s");
    let o = fedsched(&[
        "sweep",
        "--config",
        &cfg,
        "--key",
        "policy",
        "--values",
        "FC,FixedN(1),RD(4)",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("policy,FixedN(1),2,"));

    let o = fedsched(&["sweep", "--config", &cfg, "--key", "tau", "--values", "1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn defaults_parse_back() {
    let o = fedsched(&["defaults"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("M = 20\n") && text.contains("B_hz = 20000000\n"));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn incseg(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incseg"))
        .arg("--output-root")
        .arg(root)
        .args(args)
        .env_remove("INCSEG_OUTPUT_ROOT")
        .output()
        .expect("spawn incseg")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn help_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&incseg(tmp.path(), &["--help"])), 0);
    assert_eq!(code(&incseg(tmp.path(), &[])), 1);
    assert_eq!(code(&incseg(tmp.path(), &["train-incremental", "--run-id", "x"])), 1);
    assert_eq!(code(&incseg(tmp.path(), &["sweep-tau", "--run-id", "x", "--grid", "0.5,abc"])), 1);
    assert_eq!(code(&incseg(tmp.path(), &["train-incremental", "--run-id", "x", "--step", "1", "--method", "bogus"])), 1);
}

#[test]
fn config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[run]\nid = \"x\"\n").unwrap();
    let out = incseg(tmp.path(), &["train-base", "--config", bad.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let out = incseg(tmp.path(), &["train-base", "--config", config("smoke.toml").to_str().unwrap(), "--protocol", "6-x"]);
    assert_eq!(code(&out), 1);
    assert_eq!(code(&incseg(tmp.path(), &["report", "--run-id", "missing"])), 1);
}

#[test]
fn missing_data_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = std::fs::read_to_string(config("smoke.toml")).unwrap();
    let data = "[data]\nsource = \"directory\"\ntrain_dir = \"/nonexistent/train\"\ntest_dir = \"/nonexistent/test\"\nnum_classes = 8\n";
    let start = cfg.find("[data]").unwrap();
    let end = cfg.find("[schedule]").unwrap();
    let patched = format!("{}{}\n{}", &cfg[..start], data, &cfg[end..]);
    let path = tmp.path().join("dir.toml");
    std::fs::write(&path, patched).unwrap();
    let out = incseg(tmp.path(), &["train-base", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!tmp.path().join("smoke").exists());
}

#[test]
fn smoke_run_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = config("smoke.toml");
    let out = incseg(root, &["run-protocol", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("step 0") && text.contains("parallel step 2") && text.contains("joint step 2"), "{text}");

    let out = incseg(root, &["sweep-tau", "--run-id", "smoke", "--tau", "0.75"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("routing default tau = 0.75"));

    let out = incseg(root, &["report", "--run-id", "smoke"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("retention"));

    // steps already done are refused; tampering is an integrity failure
    assert_eq!(code(&incseg(root, &["train-incremental", "--run-id", "smoke", "--step", "1"])), 1);
    let ckpt = root.join("smoke/checkpoints/unit1.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x01;
    std::fs::write(&ckpt, bytes).unwrap();
    assert_eq!(code(&incseg(root, &["report", "--run-id", "smoke", "--no-masks"])), 4);
}

#[test]
fn generate_data_writes_both_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("data");
    let out = incseg(
        tmp.path(),
        &["generate-data", "--config", config("smoke.toml").to_str().unwrap(), "--out", out_dir.to_str().unwrap()],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("train").is_dir() && out_dir.join("test").is_dir());
}

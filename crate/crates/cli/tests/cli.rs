use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvq"))
        .args(args)
        .output()
        .expect("spawn kvq")
}

fn profile(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["profile", "--prompts", "3", "--prompt-len", "16", "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    kvq(&args)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn profile_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = profile(dir, &["--layers", "6", "--seed", "9"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for name in ["quant_config.toml", "importance.csv", "weight_stats.csv"] {
        assert_eq!(read(&a, name), read(&b, name), "{name} differs");
    }
    let manifest = String::from_utf8(read(&a, "manifest.toml")).unwrap();
    assert!(manifest.contains("command = \"profile\""));
    assert!(manifest.contains("seed = 9"));
}

#[test]
fn default_profile_averages() {
    let tmp = tempfile::tempdir().unwrap();
    let out = profile(tmp.path(), &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // 32 layers, 6 promoted: key (6*3 + 26*2)/32, value (6*4 + 26*2)/32
    assert!(stdout.contains("key 2.1875 value 2.375"), "{stdout}");
    let config = String::from_utf8(read(tmp.path(), "quant_config.toml")).unwrap();
    assert_eq!(config.matches("key_bits = 3").count(), 6);
    assert_eq!(config.matches("value_bits = 4").count(), 6);
}

#[test]
fn zero_fraction_is_all_low_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let out = profile(tmp.path(), &["--layers", "5", "--high-fraction", "0"]);
    assert!(out.status.success());
    let config = String::from_utf8(read(tmp.path(), "quant_config.toml")).unwrap();
    assert_eq!(config.matches("key_bits = 2").count(), 5);
    assert_eq!(config.matches("value_bits = 2").count(), 5);
}

#[test]
fn profile_config_drives_generation_and_memory_bench() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("p");
    assert!(profile(&p, &["--layers", "3"]).status.success());
    let cfg = p.join("quant_config.toml");
    let cfg = cfg.to_str().unwrap();

    let g = tmp.path().join("g");
    let out = kvq(&[
        "generate", "--layers", "3", "--config", cfg, "--prompt", "4,5,6", "--max-new-tokens", "6", "--out",
        g.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tokens = String::from_utf8(read(&g, "tokens.txt")).unwrap();
    assert_eq!(tokens.trim().split(',').count(), 9);
    assert!(tokens.starts_with("4,5,6,"));

    let m = tmp.path().join("m");
    let out = kvq(&[
        "bench-memory", "--config", cfg, "--prefill", "96", "--decode-steps", "4", "--heads", "1", "--head-dim", "16",
        "--out", m.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = String::from_utf8(read(&m, "memory.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("manifest.toml,")));
}

#[test]
fn invalid_config_exits_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "format_version = 1\nlayers = \"nope\"\n").unwrap();
    let out = kvq(&[
        "bench-memory", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = profile(&tmp.path().join("q"), &["--high-fraction", "1.5"]);
    assert_eq!(out.status.code(), Some(3));

    let out = kvq(&["generate", "--prompt", "1,x", "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(kvq(&["profile", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(kvq(&["profile"]).status.code(), Some(2));
    assert_eq!(kvq(&["frobnicate"]).status.code(), Some(2));
}

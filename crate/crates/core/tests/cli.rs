use std::path::Path;
use std::process::{Command, Output};

use jointtok::io::{read_tensor_file, write_tensor_file, Dtype, TokenStream};
use jointtok::tensor::RngStream;

const TINY: &str = "\
# small enough for a test
seed = 3
hidden = 16
spatial_layers = 1
temporal_layers = 1
codebook_size = 32
stage1_iters = 4
stage2_iters = 6
num_videos = 6
batch_size = 2
";

fn jointtok(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointtok"))
        .args(args)
        .current_dir(dir)
        .env_remove("JOINTTOK_SEED")
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = jointtok(&["selftest"], dir.path());
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn train_is_deterministic_and_writes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(&jointtok(&["train", "--config", "tiny.cfg", "--out", "a"], dir.path()));
    ok(&jointtok(&["train", "--config", "tiny.cfg", "--out", "b"], dir.path()));
    let read = |p: &str| std::fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("a/metrics.tsv"), read("b/metrics.tsv"));
    assert_eq!(read("a/tokenizer.ckpt"), read("b/tokenizer.ckpt"));
    let resolved = String::from_utf8(read("a/train.resolved.cfg")).unwrap();
    assert!(resolved.contains("stage2_iters = 6"), "{resolved}");
    let log = String::from_utf8(read("a/metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 10);
}

#[test]
fn encode_decode_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.cfg"), TINY).unwrap();
    ok(&jointtok(&["train", "--config", "tiny.cfg", "--out", "run"], d));
    let clip = RngStream::new(9).uniform_tensor(&[5, 32, 32, 3], -1.0, 1.0);
    write_tensor_file(&d.join("clip.otsr"), &clip, Dtype::F32).unwrap();
    let ck = "run/tokenizer.ckpt";
    ok(&jointtok(&["encode", "--checkpoint", ck, "--input", "clip.otsr", "--output", "clip.ottk", "--cond", "2"], d));
    let stream = TokenStream::decode(&std::fs::read(d.join("clip.ottk")).unwrap()).unwrap();
    assert_eq!(stream.grid.indices.len(), 2 * 4 * 4);
    assert_eq!(stream.cond, Some(2));
    ok(&jointtok(&["decode", "--checkpoint", ck, "--input", "clip.ottk", "--output", "back.otsr"], d));
    let back = read_tensor_file(&d.join("back.otsr")).unwrap();
    assert_eq!(back.shape(), &[1, 5, 32, 32, 3]);
    assert!(d.join("back.otsr.cfg").exists());
}

#[test]
fn seed_comes_from_the_environment_without_a_config_key() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let text: String = TINY.lines().filter(|l| !l.starts_with("seed")).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("tiny.cfg"), text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_jointtok"))
        .args(["train", "--config", "tiny.cfg", "--out", "run"])
        .current_dir(d)
        .env("JOINTTOK_SEED", "17")
        .output()
        .unwrap();
    ok(&out);
    let resolved = std::fs::read_to_string(d.join("run/train.resolved.cfg")).unwrap();
    assert!(resolved.contains("seed = 17"), "{resolved}");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.cfg"), "hidden = 16\nno_such_key = 1\n").unwrap();
    assert_eq!(jointtok(&["train", "--config", "bad.cfg", "--out", "x"], d).status.code(), Some(2));
    assert_eq!(jointtok(&["train", "--config", "missing.cfg", "--out", "x"], d).status.code(), Some(2));
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = jointtok(&["decode", "--checkpoint", "junk.ckpt", "--input", "a", "--output", "b"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(jointtok(&["no-such-command"], d).status.code(), Some(1));
    assert_eq!(jointtok(&["--help"], d).status.code(), Some(0));
}

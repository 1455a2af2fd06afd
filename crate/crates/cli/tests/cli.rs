use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn shotcache(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shotcache")).current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = r#"
[model]
layers = 2
heads = 2
head_dim = 8
seed = 5

[probe]
tau = 0.69
step = 2
probes_per_round = 2
max_shots = 6

[decode]
max_new_tokens = 4

[pool]
instruction = "Classify the sentiment.\n"

[paths]
cache = "pool.bin"
shots = "shots.txt"
queries = "queries.txt"
"#;

const SHOTS: &str = "good film => yes\\n\nbad film => no\\n\ngreat plot => yes\\n\ndull plot => no\\n\n\
fine acting => yes\\n\nweak acting => no\\n\nloved it => yes\\n\nhated it => no\\n\n";

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    fs::write(dir.path().join("shots.txt"), SHOTS).unwrap();
    fs::write(dir.path().join("queries.txt"), "nice film =>\nawful plot =>\n").unwrap();
    dir
}

fn build(dir: &Path) -> Output {
    shotcache(dir, &["--config", "run.toml", "build-cache"])
}

#[test]
fn build_cache_reports_blocks_and_is_deterministic() {
    let dir = workspace();
    let out = build(dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.starts_with("built 8 blocks\n"), "{text}");
    assert!(text.contains("key_bytes="));
    let first = fs::read(dir.path().join("pool.bin")).unwrap();
    assert!(first.starts_with(b"ADSHPOOL"));

    fs::rename(dir.path().join("pool.bin"), dir.path().join("first.bin")).unwrap();
    assert_eq!(build(dir.path()).status.code(), Some(0));
    assert_eq!(fs::read(dir.path().join("pool.bin")).unwrap(), first);
}

#[test]
fn over_long_shot_names_its_line() {
    let dir = workspace();
    let long = "x".repeat(70);
    fs::write(dir.path().join("long.txt"), format!("short\n\n{long}\n")).unwrap();
    fs::write(dir.path().join("run.toml"), CONFIG.replace("seed = 5", "seed = 5\nmax_position = 64")).unwrap();
    let out = shotcache(dir.path(), &["--config", "run.toml", "build-cache", "--shots", "long.txt"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("long.txt:3:"), "{}", stderr(&out));
}

#[test]
fn empty_shots_file_is_rejected() {
    let dir = workspace();
    fs::write(dir.path().join("empty.txt"), "\n\n").unwrap();
    let out = shotcache(dir.path(), &["--config", "run.toml", "build-cache", "--shots", "empty.txt"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = workspace();
    assert_eq!(shotcache(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(shotcache(dir.path(), &["rank"]).status.code(), Some(1));
    fs::write(dir.path().join("bad.toml"), "[model]\nlayrs = 3\n").unwrap();
    let out = shotcache(dir.path(), &["--config", "bad.toml", "verify"]);
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("odd.toml"), "[model]\nhead_dim = 7\n[paths]\nshots = \"shots.txt\"\ncache = \"x.bin\"\n").unwrap();
    assert_eq!(shotcache(dir.path(), &["--config", "odd.toml", "build-cache"]).status.code(), Some(1));
}

#[test]
fn missing_cache_is_an_io_error() {
    let dir = workspace();
    let out = shotcache(dir.path(), &["--config", "run.toml", "rank", "--query", "q"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn rank_lists_top_ids() {
    let dir = workspace();
    build(dir.path());
    let out = shotcache(dir.path(), &["--config", "run.toml", "rank", "--query", "nice film =>", "--top", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let lines: Vec<_> = stdout(&out).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("rank=1 id="));
    assert!(lines.iter().all(|l| l.contains(" score=")));
}

#[test]
fn probe_prints_trace() {
    let dir = workspace();
    build(dir.path());
    let out = shotcache(
        dir.path(),
        &["--config", "run.toml", "probe", "--query", "nice film =>", "--tau", "0.1", "--step", "2", "--probes", "2", "--max-shots", "6"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0].split_whitespace().next(), Some("round=0"));
    assert!(lines[0].contains(" count=2 H="));
    let last = lines.last().unwrap();
    assert!(last.starts_with("chosen=") || last.starts_with("fallback="), "{last}");
}

#[test]
fn infer_writes_summary_and_is_deterministic() {
    let dir = workspace();
    build(dir.path());
    let run = || {
        let out = shotcache(dir.path(), &["--config", "run.toml", "infer", "--query", "nice film =>", "--summary", "s.txt"]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        fs::read_to_string(dir.path().join("s.txt")).unwrap()
    };
    let strip = |s: String| s.lines().filter(|l| !l.contains("_ms=")).map(str::to_owned).collect::<Vec<_>>();
    let a = run();
    assert!(a.lines().any(|l| l.starts_with("chosen_shots=")));
    assert!(a.lines().any(|l| l == "shot_tokens_recomputed=0"));
    assert_eq!(strip(a), strip(run()));
}

#[test]
fn infer_over_queries_file_prefixes_summary() {
    let dir = workspace();
    build(dir.path());
    let out = shotcache(dir.path(), &["--config", "run.toml", "infer", "--full-prefill", "--summary", "s.txt"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let s = fs::read_to_string(dir.path().join("s.txt")).unwrap();
    assert!(s.contains("q0.mode=full_prefill"));
    assert!(s.contains("q1.query="));
}

#[test]
fn bench_prints_table() {
    let dir = workspace();
    build(dir.path());
    let out = shotcache(dir.path(), &["--config", "run.toml", "bench", "--summary", "b.txt"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).lines().last().unwrap().starts_with("mean cached_ms="));
    let s = fs::read_to_string(dir.path().join("b.txt")).unwrap();
    assert!(s.starts_with("queries=2\n"));
}

#[test]
fn verify_is_repeatable() {
    let dir = workspace();
    let a = shotcache(dir.path(), &["verify"]);
    let b = shotcache(dir.path(), &["verify"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn verify_flags_cache_built_under_other_rope_base() {
    let dir = workspace();
    build(dir.path());
    let ok = shotcache(dir.path(), &["--config", "run.toml", "verify"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("PASS cache blocks=8"));

    fs::write(dir.path().join("run.toml"), CONFIG.replace("seed = 5", "seed = 5\nrope_base = 20000.0")).unwrap();
    let out = shotcache(dir.path(), &["--config", "run.toml", "verify"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).lines().any(|l| l.starts_with("FAIL cache") && l.contains("fingerprint")), "{}", stdout(&out));
}

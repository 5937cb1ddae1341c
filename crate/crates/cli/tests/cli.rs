use std::path::Path;
use std::process::{Command, Output};

fn mint(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mint"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_run_query_stats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("mint.toml"), "[sampler]\nenabled = [\"head\"]\nhead_rate = 0.2\n").unwrap();

    let g = mint(d, &["--seed", "4", "gen", "--traces", "400", "--out", "w.jsonl", "--truth", "truth.jsonl"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let again = mint(d, &["--seed", "4", "gen", "--traces", "400"]);
    assert_eq!(stdout(&again), std::fs::read_to_string(d.join("w.jsonl")).unwrap());

    let r = mint(d, &["--config", "mint.toml", "--store-dir", "st", "run", "w.jsonl", "--kv"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let kv = stdout(&r);
    assert!(kv.contains("traces=400\n"));
    assert!(kv.contains("query_miss=0\n"));

    let s = mint(d, &["--store-dir", "st", "stats", "--kv"]);
    assert_eq!(stdout(&s), kv);

    let truth = std::fs::read_to_string(d.join("truth.jsonl")).unwrap();
    let mut kinds = Vec::new();
    for line in truth.lines().take(40) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let id = v["trace_id"].as_str().unwrap();
        let q = mint(d, &["--store-dir", "st", "query", id]);
        assert!(q.status.success());
        let out = stdout(&q);
        assert!(out.starts_with(&format!("trace {id} (")));
        kinds.push(out.contains("(exact)"));
    }
    assert!(kinds.contains(&true) && kinds.contains(&false));

    let miss = mint(d, &["--store-dir", "st", "query", "ffffffffffffffffffffffffffffffff"]);
    assert_eq!(miss.status.code(), Some(1));
}

#[test]
fn bad_config_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[agent]\nnope = 1\n").unwrap();
    let o = mint(dir.path(), &["--config", "bad.toml", "stats"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

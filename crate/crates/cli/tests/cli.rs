use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &[&str] = &[
    "--frames", "48", "--patch-grid", "4x4", "--layers", "2", "--heads", "2", "--head-dim", "8",
    "--budget", "128", "--no-prefill",
];

fn kvstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvstream"))
        .args(args)
        .output()
        .expect("spawn kvstream")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) -> String {
    let out = kvstream(args);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(args: &[&str]) -> Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    base.iter().chain(extra).copied().collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn defaults_plateau_at_the_budget() {
    let report = json(&["simulate", "--policy", "infinipot_v", "--no-prefill"]);
    assert_eq!(report["schema_version"], 1);
    let m = &report["policies"][0];
    assert_eq!(m["policy"], "infinipot_v");
    assert_eq!(m["peak_tokens"], m["memory_budget"]);
    assert!(m["final_tokens"].as_u64().unwrap() <= m["memory_budget"].as_u64().unwrap());
    let t = &report["timings"][0];
    let ratio = t["overhead_ratio"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ratio));
}

#[test]
fn target_at_or_above_budget_is_a_config_error() {
    for target in ["128", "256"] {
        let out = kvstream(&with(&["simulate"], &with(SMALL, &["--target", target])));
        assert_eq!(code(&out), 3);
        assert!(String::from_utf8_lossy(&out.stderr).contains("target must be below budget"));
    }
}

#[test]
fn malformed_flags_are_usage_errors() {
    for args in [
        vec!["simulate", "--patch-grid", "4by4"],
        vec!["simulate", "--policy", "lru"],
        vec!["simulate", "--format", "xml"],
        vec!["simulate", "--frames", "-3"],
        vec!["ablate", "--grid", "beta=1"],
        vec!["calibrate"],
        vec!["frobnicate"],
    ] {
        assert_eq!(code(&kvstream(&args)), 2, "{args:?}");
    }
}

#[test]
fn same_flags_give_identical_bodies() {
    let args = with(&["simulate", "--policy", "all", "--needles", "3", "--seed", "11"], SMALL);
    let a = json(&args);
    let b = json(&args);
    assert_eq!(a["policies"], b["policies"]);
    assert_eq!(a["config"], b["config"]);
    assert_eq!(a["policies"].as_array().unwrap().len(), 8);
}

#[test]
fn csv_report_has_one_row_per_policy() {
    let text = ok(&with(&["simulate", "--policy", "infinipot_v,uniform", "--format", "csv"], SMALL));
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("schema_version,policy,memory_budget,target_size"));
    assert!(header.ends_with("overhead_ratio"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,infinipot_v,"));
    assert!(rows[1].starts_with("1,uniform,"));
}

#[test]
fn replay_of_a_recorded_stream_matches_simulate() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("s.kvtr");
    let stream = with(SMALL, &["--needles", "2", "--seed", "5", "--static-fraction", "0.5"]);
    let sim = json(&with(
        &["simulate", "--policy", "all", "--trace-out", path(&trace)],
        &stream,
    ));
    let replay_flags: Vec<&str> = with(&["replay", "--trace", path(&trace), "--policy", "all"], &stream);
    let rep = json(&replay_flags);
    assert_eq!(sim["policies"], rep["policies"]);
    assert_eq!(sim["config"], rep["config"]);

    // Without stream flags there are no labels, but survivors are the same.
    let bare = json(&["replay", "--trace", path(&trace), "--budget", "128", "--policy", "all", "--no-prefill"]);
    for (a, b) in sim["policies"].as_array().unwrap().iter().zip(bare["policies"].as_array().unwrap()) {
        assert_eq!(a["survivor_digest"], b["survivor_digest"]);
        assert_eq!(b["static_eviction_precision"], Value::Null);
    }
}

#[test]
fn damaged_traces_exit_with_trace_code() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("s.kvtr");
    ok(&with(&["simulate", "--policy", "uniform", "--trace-out", path(&trace)], SMALL));
    let raw = std::fs::read(&trace).unwrap();

    let cut = dir.path().join("cut.kvtr");
    std::fs::write(&cut, &raw[..raw.len() - 7]).unwrap();
    let magic = dir.path().join("magic.kvtr");
    let mut bad = raw.clone();
    bad[..4].copy_from_slice(b"KVTX");
    std::fs::write(&magic, &bad).unwrap();
    let tiny = dir.path().join("tiny.kvtr");
    std::fs::write(&tiny, &raw[..20]).unwrap();

    for p in [&cut, &magic, &tiny] {
        let out = kvstream(&["replay", "--trace", path(p), "--budget", "128"]);
        assert_eq!(code(&out), 4, "{}", p.display());
    }
    let missing = dir.path().join("missing.kvtr");
    assert_ne!(code(&kvstream(&["replay", "--trace", path(&missing)])), 0);
}

#[test]
fn replay_flags_must_agree_with_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("s.kvtr");
    ok(&with(&["simulate", "--policy", "uniform", "--trace-out", path(&trace)], SMALL));
    for extra in [
        ["--patch-grid", "2x8"],
        ["--heads", "3"],
        ["--layers", "1"],
        ["--head-dim", "4"],
        ["--frames", "47"],
    ] {
        let out = kvstream(&with(&["replay", "--trace", path(&trace), "--budget", "128"], &extra));
        assert_eq!(code(&out), 2, "{extra:?}");
    }
}

// Ablation seeds vary the stream, not the needle layout.
const NEEDLES: &str = "3:1:1:5,20:2:3:5";

#[test]
fn ablation_grid_rows_and_degenerate_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("grid.csv");
    let args = with(
        &["ablate", "--grid", "alpha=0,0.2,0.4,0.6,0.8,1", "recent=0.125,0.25,0.5", "ratio=0.75,0.5,0.25",
          "--seeds", "5", "--needles", NEEDLES, "--out", path(&csv)],
        SMALL,
    );
    ok(&args);
    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 6 * 3 * 3 * 5);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (status, alpha, ratio, recent, seed, digest, comp) = (
        col("status"),
        col("alpha"),
        col("ratio"),
        col("recent_fraction"),
        col("seed"),
        col("survivor_digest"),
        col("compressions"),
    );
    let skipped = rows.iter().filter(|r| &r[status] == "skipped").count();
    assert!(skipped > 0 && skipped < rows.len());
    for r in rows.iter().filter(|r| &r[status] == "skipped") {
        assert!(!r[col("reason")].is_empty());
        let a: f64 = r[alpha].parse().unwrap();
        let c: f64 = r[col("target_size")].parse().unwrap();
        let rp: f64 = r[col("recent_frames")].parse::<f64>().unwrap() * 16.0;
        assert!((a * c + 1e-9).floor() < rp);
    }

    // alpha = 1 reproduces tar_only with the same budget.
    for r in rows.iter().filter(|r| &r[alpha] == "1.0" && &r[status] == "ok") {
        let target = r[col("target_size")].to_string();
        let recent_frames = r[col("recent_frames")].to_string();
        let seed_s = r[seed].to_string();
        let report = json(&with(
            &["simulate", "--policy", "tar_only", "--target", &target, "--recent", &recent_frames,
              "--seed", &seed_s, "--needles", NEEDLES],
            SMALL,
        ));
        assert_eq!(report["policies"][0]["survivor_digest"].as_str().unwrap(), &r[digest]);
    }

    // A smaller target leaves more room to refill, so compressions are rarer.
    let count = |ratio_v: &str, r: &csv::StringRecord| {
        &r[ratio] == ratio_v && &r[status] == "ok" && &r[alpha] == "1.0" && &r[recent] == "0.125"
    };
    for s in 0..5 {
        let pick = |ratio_v: &str| -> u64 {
            rows.iter()
                .find(|r| count(ratio_v, r) && r[seed].parse::<u64>().unwrap() == s)
                .map(|r| r[comp].parse().unwrap())
                .unwrap()
        };
        assert!(pick("0.25") < pick("0.75"));
    }
}

#[test]
fn calibrated_thresholds_load_back() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("stream.cfg");
    std::fs::write(
        &spec,
        "num_frames = 40\ngrid_rows = 4\ngrid_cols = 4\nnum_layers = 1\nnum_heads = 2\nhead_dim = 8\nseed = 3\n",
    )
    .unwrap();
    let out = dir.path().join("tau.cfg");
    ok(&["calibrate", "--spec", path(&spec), "--budget", "128", "--out", path(&out)]);
    let text = std::fs::read_to_string(&out).unwrap();
    let taus: Vec<f64> = text
        .lines()
        .map(|l| l.split_once('=').unwrap())
        .inspect(|(k, _)| assert!(k.trim().starts_with("tau")))
        .map(|(_, v)| v.trim().parse().unwrap())
        .collect();
    assert_eq!(taus.len(), 3);
    // A single layer gives one CV; the triple is widened around it.
    assert!(taus[0] < taus[1] && taus[1] < taus[2]);
    ok(&with(&["simulate", "--policy", "infinipot_v", "--config", path(&out)], SMALL));

    let short = kvstream(&["calibrate", "--spec", path(&spec), "--budget", "128", "--warmup", "3"]);
    assert_eq!(code(&short), 2);
}

#[test]
fn calibrates_from_a_trace_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("s.kvtr");
    ok(&with(&["simulate", "--policy", "uniform", "--trace-out", path(&trace)], SMALL));
    let text = ok(&["calibrate", "--trace", path(&trace), "--budget", "128"]);
    let keys: Vec<&str> = text.lines().map(|l| l.split_once(" = ").unwrap().0).collect();
    assert_eq!(keys, ["tau1", "tau2", "tau3"]);
    let short = kvstream(&["calibrate", "--trace", path(&trace), "--budget", "128", "--warmup", "7"]);
    assert_eq!(code(&short), 2);
}

#[test]
fn infinipot_keeps_needles_at_least_as_well_as_uniform() {
    let mut wins = 0;
    for seed in 0..20 {
        let s = seed.to_string();
        let report = json(&[
            "simulate", "--policy", "infinipot_v,uniform", "--frames", "128", "--patch-grid", "4x4",
            "--layers", "2", "--heads", "2", "--head-dim", "16", "--budget", "320", "--target", "256",
            "--needles", "4", "--seed", &s, "--no-prefill",
        ]);
        let ours = report["policies"][0]["needle_retention"].as_f64().unwrap();
        let theirs = report["policies"][1]["needle_retention"].as_f64().unwrap();
        wins += usize::from(ours >= theirs);
    }
    assert_eq!(wins, 20);
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

use pisa_core::data::{format_float, Dataset, Observation, RngStream};
use pisa_core::simbench::{draw_dataset, true_cate, DgpSpec, Setting};
use rand::Rng;

fn pisa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pisa")).args(args).output().expect("spawn pisa")
}

fn ok(args: &[&str]) -> Output {
    let out = pisa(args);
    assert!(
        out.status.success(),
        "pisa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setting_a(dir: &Path, seed: u64) -> PathBuf {
    let data = draw_dataset(&DgpSpec::new(Setting::A), &mut RngStream::new(seed)).unwrap();
    let path = dir.join(format!("a{seed}.csv"));
    data.write_csv(&path).unwrap();
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Data rows of a CSV artifact, skipping the config line.
fn rows(text: &str) -> Vec<csv::StringRecord> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .records()
        .map(Result::unwrap)
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_small_table_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&["simulate", "--setting", "A", "--reps", "2", "--M", "100", "--n-mc", "20000", "--seed", "1", "--out", s(&out)]);
        out
    };
    let (first, second) = (run("one"), run("two"));
    for file in ["study.csv", "study.json", "replications.csv"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
    let table = fs::read_to_string(first.join("study.csv")).unwrap();
    assert!(table.starts_with("# config: {\"command\":\"simulate\""));
    assert!(table.lines().next().unwrap().contains("\"seed\":1"));
    let table = rows(&table);
    assert_eq!(table.len(), 8);
    assert!(table.iter().all(|r| &r[3] == "2"));
    assert!(table.iter().all(|r| &r[4] == "0.0" || &r[4] == "50.0" || &r[4] == "100.0"));
    assert_eq!(rows(&fs::read_to_string(first.join("replications.csv")).unwrap()).len(), 16);
    assert_eq!(json(&first.join("study.json"))["config"]["M"], 100);
}

#[test]
fn invalid_flags_are_usage_errors() {
    for args in [
        vec!["simulate", "--setting", "E"],
        vec!["simulate", "--M", "10"],
        vec!["simulate", "--methods", "oracle", "--predefined"],
        vec!["analyze", "--data", "x.csv", "--cate", "external"],
        vec!["analyze", "--data", "x.csv", "--m", "half"],
        vec!["curve", "--data", "x.csv", "--c-grid", "1:0:0.1"],
        vec!["analyze", "--data", "x.csv", "--cate", "t-learner", "--methods", "sample-split"],
    ] {
        let out = pisa(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    let missing = pisa(&["analyze", "--data", "/nonexistent/file.csv"]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn analyze_reports_interval_diagnostic_and_m() {
    let dir = TempDir::new().unwrap();
    let data = setting_a(dir.path(), 5);
    let out = dir.path().join("r.json");
    ok(&["analyze", "--data", s(&data), "--cate", "linear", "--methods", "perturbation,naive,sample-split", "--M", "300", "--out", s(&out)]);
    let v = json(&out);
    assert_eq!(v["config"]["command"], "analyze");
    assert_eq!(v["config"]["seed"], 1);
    assert_eq!(v["n"], 1000);
    let intervals = v["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 3);
    for ci in intervals {
        assert!(ci["lower"].as_f64().unwrap() <= ci["estimate"].as_f64().unwrap());
        assert!(ci["estimate"].as_f64().unwrap() <= ci["upper"].as_f64().unwrap());
    }
    assert_eq!(intervals[0]["method"], "perturbation");
    assert_eq!(intervals[0]["m"], v["selected_m"]);
    assert!(v["m_selection"]["statistics"].as_array().unwrap().len() == 4);
    let frac = v["boundary_diagnostic"]["fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&frac));
}

#[test]
fn analyze_empty_subgroup_is_explicit() {
    let dir = TempDir::new().unwrap();
    let data = setting_a(dir.path(), 6);
    let out = pisa(&["analyze", "--data", s(&data), "--c", "50"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty subgroup"));
}

#[test]
fn external_predictions_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = setting_a(dir.path(), 7);
    let preds = dir.path().join("dhat.csv");
    let (internal, external) = (dir.path().join("in.json"), dir.path().join("ex.json"));
    ok(&["analyze", "--data", s(&data), "--m", "n/2", "--M", "200", "--write-predictions", s(&preds), "--out", s(&internal)]);
    ok(&["analyze", "--data", s(&data), "--m", "n/2", "--M", "200", "--cate", "external", "--predictions", s(&preds), "--out", s(&external)]);
    let (a, b) = (json(&internal), json(&external));
    assert_eq!(a["cate_source"], "dr-spline");
    assert_eq!(b["cate_source"], "external");
    assert_eq!(a["intervals"], b["intervals"]);
    assert_eq!(a["boundary_diagnostic"], b["boundary_diagnostic"]);
}

#[test]
fn curve_single_point_matches_analyze() {
    let dir = TempDir::new().unwrap();
    let data = setting_a(dir.path(), 8);
    let out = dir.path().join("a.json");
    ok(&["analyze", "--data", s(&data), "--c", "0.2", "--M", "300", "--out", s(&out)]);
    let curve = ok(&["curve", "--data", s(&data), "--c-grid", "0.2:0.2:1", "--M", "300"]);
    let text = String::from_utf8(curve.stdout).unwrap();
    assert!(text.starts_with("# config: {\"command\":\"curve\""));
    let table = rows(&text);
    let report = json(&out);
    let intervals = report["intervals"].as_array().unwrap();
    assert_eq!(table.len(), intervals.len());
    for (row, ci) in table.iter().zip(intervals) {
        assert_eq!(&row[0], "0.2");
        assert_eq!(row[1].parse::<f64>().unwrap(), ci["estimate"].as_f64().unwrap());
        assert_eq!(row[2].parse::<f64>().unwrap(), ci["lower"].as_f64().unwrap());
        assert_eq!(row[3].parse::<f64>().unwrap(), ci["upper"].as_f64().unwrap());
        assert_eq!(&row[4], ci["method"].as_str().unwrap());
        assert_eq!(row[5].parse::<u64>().unwrap(), ci["subgroup_size"].as_u64().unwrap());
        assert_eq!(&row[7], "ok");
    }
}

#[test]
fn curve_sizes_fall_and_empty_points_are_flagged() {
    let dir = TempDir::new().unwrap();
    let data = setting_a(dir.path(), 9);
    let out = ok(&["curve", "--data", s(&data), "--cate", "linear", "--c-grid", "-0.5:3:0.5", "--M", "100", "--m", "n"]);
    let table = rows(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(table.len(), 2 * 8);
    let sizes: Vec<u64> = table.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
    let last = &table[table.len() - 1];
    assert_eq!(&last[7], "empty-subgroup");
    assert_eq!(&last[1], "");
    assert_eq!(&last[5], "0");
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let data = setting_a(dir.path(), 10);
    let run = |threads: &str| {
        let out = dir.path().join(format!("t{threads}.json"));
        ok(&["analyze", "--data", s(&data), "--M", "300", "--methods", "perturbation,naive,sample-split", "--threads", threads, "--out", s(&out)]);
        let mut v = json(&out);
        v["config"]["threads"] = Value::Null;
        v
    };
    assert_eq!(run("1"), run("3"));
}

/// True-rule subgroup in setting A: average effect over `z2 >= 0` is 0.94.
#[test]
fn coverage_smoke_over_100_seeds() {
    let dir = TempDir::new().unwrap();
    let mut covered = 0;
    for seed in 0..100u64 {
        let data = draw_dataset(&DgpSpec::new(Setting::A), &mut RngStream::new(1_000 + seed)).unwrap();
        let path = dir.path().join("d.csv");
        data.write_csv(&path).unwrap();
        let preds = dir.path().join("p.csv");
        let mut text = String::from("id,dhat\n");
        for (i, row) in data.rows().iter().enumerate() {
            text.push_str(&format!("{},{}\n", i + 1, format_float(true_cate(Setting::A, &row.z))));
        }
        fs::write(&preds, text).unwrap();
        let out = dir.path().join("r.json");
        let seed_arg = seed.to_string();
        ok(&[
            "analyze", "--data", s(&path), "--cate", "external", "--predictions", s(&preds), "--m", "n", "--M", "500",
            "--methods", "perturbation", "--seed", &seed_arg, "--out", s(&out),
        ]);
        let ci = &json(&out)["intervals"][0];
        if ci["lower"].as_f64().unwrap() <= 0.94 && 0.94 <= ci["upper"].as_f64().unwrap() {
            covered += 1;
        }
    }
    // nominal 95, binomial SE about 2.2 at 100 seeds
    assert!((88..=100).contains(&covered), "covered {covered} of 100");
}

fn actg_like(n: usize, seed: u64) -> Dataset {
    let mut rng = RngStream::new(seed);
    let rows = (0..n)
        .map(|_| {
            let mut z = Vec::with_capacity(10);
            z.push(rng.random_range(18.0..70.0_f64).round());
            z.push(rng.random_range(30.0..120.0_f64));
            for _ in 0..4 {
                z.push(f64::from(u8::from(rng.random::<bool>())));
            }
            z.push(rng.random_range(100.0..700.0_f64).round());
            z.push(rng.random_range(200.0..1500.0_f64).round());
            z.push(f64::from(rng.random_range(0..3u8)));
            z.push(rng.random_range(0.0..1.0));
            let g = u8::from(rng.random::<f64>() < 0.5);
            let effect = if z[0] < 35.0 { 40.0 } else { 10.0 };
            let y = 300.0 + 0.5 * z[6] + f64::from(g) * effect + rng.random_range(-60.0..60.0);
            Observation::new(y, g, z)
        })
        .collect();
    Dataset::new(rows).unwrap()
}

#[test]
fn ten_covariate_tree_analysis_completes() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("actg.csv");
    actg_like(1200, 3).write_csv(&path).unwrap();
    let out = dir.path().join("r.json");
    ok(&[
        "analyze", "--data", s(&path), "--cate", "tree", "--outcome", "linear", "--c", "20", "--M", "300",
        "--methods", "perturbation,naive,sample-split", "--out", s(&out),
    ]);
    let v = json(&out);
    assert_eq!(v["p"], 10);
    assert_eq!(v["cate_source"], "dr-tree");
    assert_eq!(v["intervals"].as_array().unwrap().len() + v["failures"].as_array().unwrap().len(), 3);
    assert!(v["intervals"][0]["estimate"].as_f64().unwrap().is_finite());
}

#[test]
fn one_covariate_local_polynomial_curve_completes() {
    let dir = TempDir::new().unwrap();
    let mut rng = RngStream::new(4);
    let obs = (0..600)
        .map(|_| {
            let age = rng.random_range(18.0..70.0_f64);
            let g = u8::from(rng.random::<bool>());
            let y = 0.02 * age + f64::from(g) * (1.0 - age / 35.0) + rng.random_range(-0.5..0.5);
            Observation::new(y, g, vec![age])
        })
        .collect();
    let path = dir.path().join("age.csv");
    Dataset::new(obs).unwrap().write_csv(&path).unwrap();
    let out = dir.path().join("curve.csv");
    ok(&[
        "curve", "--data", s(&path), "--cate", "localpoly", "--c-grid", "-0.95:0.95:0.1", "--M", "200", "--m", "n/4",
        "--out", s(&out),
    ]);
    let table = rows(&fs::read_to_string(&out).unwrap());
    assert_eq!(table.len(), 20 * 2);
    let sizes: Vec<u64> = table.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
}

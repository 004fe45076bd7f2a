use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn lazyconv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lazyconv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = lazyconv(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// `(error, flops)` rows of a front or archive CSV.
fn objectives(csv: &str) -> Vec<[f64; 2]> {
    csv.lines()
        .skip(1)
        .map(|line| {
            let cells: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
            [cells[cells.len() - 2], cells[cells.len() - 1]]
        })
        .collect()
}

#[test]
fn gen_synthetic_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-synthetic", "--samples", "20", "--out", "a"]);
    ok(tmp.path(), &["gen-synthetic", "--samples", "20", "--out", "b"]);
    for sub in ["model", "data"] {
        assert_eq!(dir_bytes(&tmp.path().join("a").join(sub)), dir_bytes(&tmp.path().join("b").join(sub)));
    }
    ok(tmp.path(), &["gen-synthetic", "--samples", "20", "--seed", "7", "--out", "c"]);
    assert_ne!(dir_bytes(&tmp.path().join("a/model")), dir_bytes(&tmp.path().join("c/model")));

    let manifest = read_json(&tmp.path().join("a/run_manifest.json"));
    assert_eq!(manifest["command"], "gen-synthetic");
    assert_eq!(manifest["seeds"][0], 42);
    assert_eq!(manifest["flags"]["samples"], 20);
}

#[test]
fn eval_keep_all_is_exact_and_mem_report_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-synthetic", "--samples", "40"]);
    ok(tmp.path(), &["eval", "--policy", "all-1.0"]);
    let eval = read_json(&tmp.path().join("eval/eval.json"));
    assert_eq!(eval["accuracy"], 1.0);
    assert_eq!(eval["flops_ratio"], 1.0);
    let cost = read_json(&tmp.path().join("eval/cost_report.json"));
    assert_eq!(cost["lazy_total"], cost["eager_total"]);
    let manifest = read_json(&tmp.path().join("eval/run_manifest.json"));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);

    ok(tmp.path(), &["mem-report", "--fractions", "0.25,1.0"]);
    let report = read_json(&tmp.path().join("memory/memory.json"));
    let rows = report.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["layer"], "fc1");
    assert_eq!(rows[0]["active_filters"], 16);
    assert_eq!(rows[1]["ratio"], 1.0);
    assert_eq!(rows[1]["loaded_bytes"], rows[1]["full_bytes"]);
}

#[test]
fn sweep_and_bench_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-synthetic", "--samples", "30"]);
    ok(tmp.path(), &["sweep", "--fractions", "0.5,1.0", "--mode", "oracle"]);
    for layer in ["conv1_1", "conv1_2", "conv2_1", "conv2_2"] {
        let sweep = fs::read_to_string(tmp.path().join(format!("sweep/sensitivity_{layer}.csv"))).unwrap();
        let lines: Vec<&str> = sweep.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "fraction,accuracy");
        assert_eq!(lines[2], "1,1");
    }

    ok(tmp.path(), &["bench", "--layer", "conv2_1", "--fractions", "0.25,1.0", "--reps", "5"]);
    let bench = fs::read_to_string(tmp.path().join("bench/bench_conv2_1.csv")).unwrap();
    assert_eq!(bench.lines().next(), Some("fraction,median_seconds"));
    assert_eq!(bench.lines().count(), 3);
    assert!(!tmp.path().join("bench/bench_conv1_1.csv").exists());
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lazyconv(tmp.path(), &["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = lazyconv(tmp.path(), &["trace", "--model", "missing"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error:"));

    ok(tmp.path(), &["gen-synthetic", "--samples", "20"]);
    let out = lazyconv(tmp.path(), &["eval", "--policy", "all-0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("conv1_2"));
    let out = lazyconv(tmp.path(), &["sweep", "--mode", "sideways"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn predictors_from_another_model_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["gen-synthetic", "--samples", "30"]);
    ok(tmp.path(), &["gen-synthetic", "--samples", "30", "--seed", "9", "--out", "other"]);
    ok(tmp.path(), &["trace", "--model", "other/model", "--data", "other/data"]);
    ok(tmp.path(), &["train-predictor", "--epochs", "5"]);
    let out = lazyconv(tmp.path(), &["eval", "--predictors", "predictors", "--policy", "all-0.5"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint"));
}

#[test]
fn full_pipeline_front_is_non_dominated_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["gen-synthetic"]);
    ok(dir, &["trace"]);
    ok(dir, &["train-predictor"]);
    assert_eq!(read_json(&dir.join("predictors/train_report.json")).as_array().unwrap().len(), 3);
    ok(dir, &["pareto", "--pop", "8", "--gens", "3", "--subset", "100"]);

    let front = objectives(&fs::read_to_string(dir.join("pareto/front.csv")).unwrap());
    assert!(!front.is_empty());
    for a in &front {
        for b in &front {
            let dominates = a[0] <= b[0] && a[1] <= b[1] && (a[0] < b[0] || a[1] < b[1]);
            assert!(!dominates, "{a:?} dominates {b:?}");
        }
    }
    let archive_csv = fs::read_to_string(dir.join("pareto/pareto.csv")).unwrap();
    assert_eq!(archive_csv.lines().next(), Some("generation,conv1_2,conv2_1,conv2_2,error,flops"));
    let archive = objectives(&archive_csv);
    assert_eq!(archive.len(), 8 * 4);
    let eager = read_json(&dir.join("pareto/pareto.json"))["eager_flops_per_sample"].as_f64().unwrap();
    assert!(archive.contains(&[0.0, eager]));

    ok(dir, &["--threads", "1", "pareto", "--pop", "8", "--gens", "3", "--subset", "100", "--out", "again"]);
    for file in ["pareto.csv", "front.csv", "pareto.json"] {
        assert_eq!(
            fs::read(dir.join("pareto").join(file)).unwrap(),
            fs::read(dir.join("again").join(file)).unwrap(),
            "{file} differs between runs"
        );
    }
}

mod common;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use common::*;
use serde_json::{Map, Value};

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn schema(name: &str) -> Value {
    read_json(&schema_dir().join(name))
}

fn assert_valid(schema_name: &str, instance: &Value, what: &str) {
    let s = schema(schema_name);
    let v = jsonschema::validator_for(&s).expect("schema compiles");
    let errors: Vec<String> = v
        .iter_errors(instance)
        .map(|e| format!("{e} at {}", e.instance_path))
        .collect();
    assert!(
        errors.is_empty(),
        "{what} violates {schema_name}: {errors:#?}"
    );
}

fn csv_cell(s: &str) -> Value {
    if s.is_empty() {
        Value::Null
    } else if let Ok(i) = s.parse::<i64>() {
        Value::from(i)
    } else if let Ok(f) = s.parse::<f64>() {
        Value::from(f)
    } else if s == "true" || s == "false" {
        Value::Bool(s == "true")
    } else {
        Value::String(s.to_string())
    }
}

fn assert_csv_valid(schema_name: &str, path: &Path) {
    let s = schema(schema_name);
    let columns: Vec<String> = s["x-columns"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap().to_string())
        .collect();
    let (header, rows) = read_csv(path);
    assert_eq!(header, columns, "{}", path.display());
    assert!(!rows.is_empty(), "{} has no rows", path.display());
    for (i, row) in rows.iter().enumerate() {
        let obj: Map<String, Value> = header
            .iter()
            .cloned()
            .zip(row.iter().map(|c| csv_cell(c)))
            .collect();
        assert_valid(
            schema_name,
            &Value::Object(obj),
            &format!("{} row {i}", path.display()),
        );
    }
}

/// Schema for each documented output file; binary and echo files have none.
fn schema_for(file: &str) -> Option<&'static str> {
    Some(match file {
        "manifest.json" => "manifest.schema.json",
        "summary.json" => "summary.schema.json",
        "report.json" => "report.schema.json",
        "ensemble.json" => "ensemble.schema.json",
        "history.csv" => "history.csv.schema.json",
        "reliability.csv" => "reliability.csv.schema.json",
        "pairs.csv" => "pairs.csv.schema.json",
        "rank_histogram.csv" => "rank_histogram.csv.schema.json",
        "sweep.csv" => "sweep.csv.schema.json",
        "sweep_curve.csv" => "sweep_curve.csv.schema.json",
        _ => return None,
    })
}

fn check_dir(dir: &Path, used: &mut BTreeSet<&'static str>) {
    let manifest = read_json(&dir.join("manifest.json"));
    for f in manifest["outputs"].as_array().unwrap() {
        let name = f.as_str().unwrap();
        let path = dir.join(name);
        assert!(path.exists(), "{} listed but missing", path.display());
        let Some(schema_name) = schema_for(name) else {
            continue;
        };
        used.insert(schema_name);
        if name.ends_with(".csv") {
            assert_csv_valid(schema_name, &path);
        } else {
            assert_valid(schema_name, &read_json(&path), &path.display().to_string());
        }
    }
}

#[test]
fn every_output_matches_its_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write_config(d, "c.json", SMALL);
    write_config(d, "h.json", SMALL_HOM);
    write_config(
        d,
        "g.json",
        r#"{"data": {"n": 100, "generator": {"noise": "gumbel", "classes": 10, "substitute_pairs": 2, "cooccurrence_pairs": 2}}}"#,
    );
    write_config(
        d,
        "ml.json",
        r#"{"data": {"n": 800, "labels": "multilabel"},
            "model": {"link": "sigmoid", "variant": "efficient", "train_samples": 2, "eval_samples": 20},
            "optimizer": {"epochs": 2}}"#,
    );
    let runs: Vec<(&str, Vec<&str>)> = vec![
        (
            "sim",
            vec!["simulate", "--config", "c.json", "--out", "sim"],
        ),
        (
            "gum",
            vec!["simulate", "--config", "g.json", "--out", "gum"],
        ),
        (
            "full",
            vec![
                "train", "--config", "c.json", "--data", "sim", "--out", "full",
            ],
        ),
        (
            "hom",
            vec![
                "train", "--config", "h.json", "--data", "sim", "--out", "hom",
            ],
        ),
        (
            "eval",
            vec![
                "eval",
                "--checkpoint",
                "full/checkpoint.ckpt",
                "--data",
                "sim/test.dataset",
                "--covariance",
                "--baseline",
                "hom/checkpoint.ckpt",
                "--out",
                "eval",
            ],
        ),
        (
            "ens",
            vec![
                "ensemble",
                "--checkpoints",
                "full/checkpoint.ckpt",
                "hom/checkpoint.ckpt",
                "--data",
                "sim/test.dataset",
                "--out",
                "ens",
            ],
        ),
        (
            "sweep",
            vec![
                "sweep",
                "--config",
                "c.json",
                "--data",
                "sim",
                "--axis",
                "mc-samples",
                "--values",
                "1,5",
                "--checkpoint",
                "full/checkpoint.ckpt",
                "--out",
                "sweep",
            ],
        ),
        (
            "mlsim",
            vec!["simulate", "--config", "ml.json", "--out", "mlsim"],
        ),
        (
            "mltrain",
            vec![
                "train", "--config", "ml.json", "--data", "mlsim", "--out", "mltrain",
            ],
        ),
        (
            "mleval",
            vec![
                "eval",
                "--config",
                "ml.json",
                "--checkpoint",
                "mltrain/checkpoint.ckpt",
                "--data",
                "mlsim/test.dataset",
                "--out",
                "mleval",
            ],
        ),
    ];
    let mut used = BTreeSet::new();
    for (dir, args) in &runs {
        ok(d, args);
        check_dir(&d.join(dir), &mut used);
    }
    let shipped: BTreeSet<String> = std::fs::read_dir(schema_dir())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    let used: BTreeSet<String> = used.into_iter().map(str::to_string).collect();
    assert_eq!(shipped, used, "every shipped schema is exercised");
}

#[test]
fn schemas_reject_malformed_outputs() {
    let bad_manifest = serde_json::json!({"command": "train"});
    let s = schema("manifest.schema.json");
    assert!(!jsonschema::is_valid(&s, &bad_manifest));
    let s = schema("pairs.csv.schema.json");
    assert!(!jsonschema::is_valid(
        &s,
        &serde_json::json!({"rank": 0, "a": 1, "b": 2, "covariance": 0.1})
    ));
}

//! End-to-end determinism and integrity checks through the actual binary:
//! rerunning generate -> preprocess -> cross-validate with one seed must give
//! byte-identical outputs, preprocessed records must be fully imputed, and
//! the exclusion accounting must balance.

use std::path::{Path, PathBuf};
use std::process::Command;

fn smta() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smta"))
}

fn run_ok(args: &[&str]) {
    let out = smta().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "smta {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("smta-acc-{}-{name}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn c8_pipeline_determinism_and_integrity() {
    let root = tmp("determinism");
    let tiny_model: &[&str] = &[
        "--width", "8", "--heads", "2", "--encoder-layers", "1", "--ff-width", "16",
        "--head-hidden", "4", "--epochs", "2", "--patience", "2",
    ];

    for round in ["a", "b"] {
        let base = root.join(round);
        let base_s = base.to_str().unwrap().to_string();
        run_ok(&[
            "gen-data", "--n", "240", "--seed", "11",
            "--out", &format!("{base_s}/cohort"),
        ]);
        run_ok(&[
            "preprocess",
            "--input", &format!("{base_s}/cohort/cohort.ndjson"),
            "--seed", "11",
            "--out", &format!("{base_s}/data"),
        ]);
        let mut args = vec![
            "cross-validate".to_string(),
            "--data".into(), format!("{base_s}/data"),
            "--seed".into(), "11".into(),
            "--jobs".into(), "2".into(),
            "--out".into(), format!("{base_s}/cv"),
        ];
        args.extend(tiny_model.iter().map(|s| s.to_string()));
        let out = smta().args(&args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }

    // byte-identical primary outputs across the rerun
    for rel in [
        "cohort/cohort.ndjson",
        "cohort/ground_truth.json",
        "data/records.ndjson",
        "data/manifest.json",
        "data/normalizer.json",
        "cv/report.json",
        "cv/report.txt",
        "cv/fold_0/checkpoint.json",
    ] {
        let a = read(&root.join("a").join(rel));
        let b = read(&root.join("b").join(rel));
        assert_eq!(a, b, "{rel} differs between identical runs");
    }

    // preprocessed output is fully imputed: every value finite
    let records = String::from_utf8(read(&root.join("a/data/records.ndjson"))).unwrap();
    let mut record_count = 0;
    for line in records.lines().filter(|l| !l.trim().is_empty()) {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        record_count += 1;
        for ch in rec["channels"].as_array().unwrap() {
            for v in ch.as_array().unwrap() {
                assert!(v.as_f64().unwrap().is_finite(), "missing value leaked through");
            }
        }
        for v in rec["static_features"].as_array().unwrap() {
            assert!(v.as_f64().unwrap().is_finite());
        }
    }
    assert_eq!(record_count, 240);

    // fold sizes differ by at most one and partition the training split
    let manifest: serde_json::Value =
        serde_json::from_str(&String::from_utf8(read(&root.join("a/data/manifest.json"))).unwrap())
            .unwrap();
    let sizes: Vec<usize> = manifest["fold_ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_array().unwrap().len())
        .collect();
    let (min, max) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
    assert!(max - min <= 1, "fold sizes {sizes:?}");
    assert_eq!(sizes.iter().sum::<usize>(), manifest["counts"]["train"].as_u64().unwrap() as usize);

    std::fs::remove_dir_all(&root).ok();
    println!("[PASS] pipeline determinism: rerun byte-identical; zero missing values; folds balanced");
}

#[test]
fn exclusion_report_conserves_counts() {
    let root = tmp("exclusions");
    let root_s = root.to_str().unwrap().to_string();
    run_ok(&["gen-data", "--n", "60", "--seed", "3", "--out", &format!("{root_s}/cohort")]);

    // append stays that each trip one filter rule
    let cohort_path = root.join("cohort/cohort.ndjson");
    let mut text = std::fs::read_to_string(&cohort_path).unwrap();
    let template: serde_json::Value =
        serde_json::from_str(text.lines().next().unwrap()).unwrap();
    let mut young = template.clone();
    young["stay_id"] = "bad-young".into();
    young["age_years"] = 17.0.into();
    let mut pregnant = template.clone();
    pregnant["stay_id"] = "bad-pregnancy".into();
    pregnant["pregnancy_admission"] = true.into();
    let mut wrong_icd = template.clone();
    wrong_icd["stay_id"] = "bad-icd".into();
    wrong_icd["icd9_codes"] = serde_json::json!(["9999"]);
    for bad in [young, pregnant, wrong_icd] {
        text.push_str(&serde_json::to_string(&bad).unwrap());
        text.push('\n');
    }
    std::fs::write(&cohort_path, text).unwrap();

    run_ok(&[
        "preprocess",
        "--input", cohort_path.to_str().unwrap(),
        "--seed", "3",
        "--out", &format!("{root_s}/data"),
    ]);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(root.join("data/exclusions.json")).unwrap(),
    )
    .unwrap();
    let ex = &report["exclusions"];
    let input = ex["input"].as_u64().unwrap();
    let retained = ex["retained"].as_u64().unwrap();
    let excluded: u64 = [
        "no_qualifying_icd",
        "under_age",
        "pregnancy_admission",
        "died_in_icu",
        "stay_too_short",
        "stay_too_long",
    ]
    .iter()
    .map(|k| ex[k].as_u64().unwrap())
    .sum();
    assert_eq!(input, 63);
    assert_eq!(retained, 60);
    assert_eq!(excluded, 3);
    assert_eq!(ex["under_age"], 1);
    assert_eq!(ex["pregnancy_admission"], 1);
    assert_eq!(ex["no_qualifying_icd"], 1);

    std::fs::remove_dir_all(&root).ok();
    println!("[PASS] exclusion report: counts sum to input - output, one rule per stay");
}

#[test]
fn eval_and_attention_export_are_deterministic() {
    let root = tmp("eval");
    let root_s = root.to_str().unwrap().to_string();
    run_ok(&["gen-data", "--n", "160", "--seed", "5", "--out", &format!("{root_s}/cohort")]);
    run_ok(&[
        "preprocess",
        "--input", &format!("{root_s}/cohort/cohort.ndjson"),
        "--seed", "5",
        "--out", &format!("{root_s}/data"),
    ]);
    run_ok(&[
        "train", "--data", &format!("{root_s}/data"), "--seed", "5",
        "--width", "8", "--heads", "1", "--encoder-layers", "1",
        "--ff-width", "16", "--head-hidden", "4",
        "--epochs", "2", "--patience", "2",
        "--out", &format!("{root_s}/run"),
    ]);
    for round in ["e1", "e2"] {
        run_ok(&[
            "eval",
            "--checkpoint", &format!("{root_s}/run/checkpoint.json"),
            "--data", &format!("{root_s}/data"),
            "--out", &format!("{root_s}/{round}"),
        ]);
    }
    assert_eq!(
        read(&root.join("e1/metrics.json")),
        read(&root.join("e2/metrics.json")),
        "eval reruns differ"
    );

    run_ok(&[
        "export-attention",
        "--checkpoint", &format!("{root_s}/run/checkpoint.json"),
        "--data", &format!("{root_s}/data"),
        "--out", &format!("{root_s}/attn"),
    ]);
    let csv = String::from_utf8(read(&root.join("attn/heatmap.csv"))).unwrap();
    assert!(csv.starts_with("head,key,weight\n"));
    assert!(csv.contains(",static,"));
    assert!(csv.contains(",HR,"));
    // rows are head-grouped; each head's weights sum to ~1
    let mut sums = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        let mut parts = line.split(',');
        let head: usize = parts.next().unwrap().parse().unwrap();
        let _key = parts.next().unwrap();
        let w: f64 = parts.next().unwrap().parse().unwrap();
        *sums.entry(head).or_insert(0.0) += w;
    }
    for (head, sum) in sums {
        assert!((sum - 1.0f64).abs() < 1e-6, "head {head} weights sum {sum}");
    }

    std::fs::remove_dir_all(&root).ok();
    println!("[PASS] eval + attention export: deterministic outputs, stochastic heatmap rows");
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    // config failure: unknown fusion strategy
    let root = tmp("codes");
    let root_s = root.to_str().unwrap().to_string();
    run_ok(&["gen-data", "--n", "60", "--seed", "2", "--out", &format!("{root_s}/cohort")]);
    run_ok(&[
        "preprocess",
        "--input", &format!("{root_s}/cohort/cohort.ndjson"),
        "--seed", "2",
        "--out", &format!("{root_s}/data"),
    ]);
    let bad_fusion = smta()
        .args([
            "train", "--data", &format!("{root_s}/data"), "--fusion", "bogus",
            "--out", &format!("{root_s}/x"),
        ])
        .output()
        .unwrap();
    assert_eq!(bad_fusion.status.code(), Some(2), "config failures exit 2");

    // data failure: missing input file
    let missing = smta()
        .args([
            "preprocess", "--input", "/nonexistent/cohort.ndjson",
            "--out", &format!("{root_s}/y"),
        ])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3), "data failures exit 3");

    // gradient audit succeeds with exit 0
    let ok = smta().args(["grad-check", "--seed", "1"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));

    std::fs::remove_dir_all(&root).ok();
    println!("[PASS] exit codes: 2 config / 3 data / 0 success");
}

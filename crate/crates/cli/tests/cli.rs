use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn trialmoe(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialmoe"))
        .args(args)
        .current_dir(dir)
        .env_remove("TRIALMOE_SEED")
        .output()
        .expect("binary runs")
}

fn trialmoe_env(args: &[&str], dir: &Path, env: (&str, &str)) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialmoe"))
        .args(args)
        .current_dir(dir)
        .env(env.0, env.1)
        .output()
        .expect("binary runs")
}

/// A tiny model over the first `n` fixture records so runs take seconds.
fn small_config(dir: &Path, n: usize, extra: Value) -> PathBuf {
    let corpus = fs::read_to_string(fixtures().join("corpus.jsonl")).unwrap();
    let lines: Vec<&str> = corpus.lines().take(n).collect();
    fs::write(dir.join("corpus.jsonl"), lines.join("\n") + "\n").unwrap();
    let mut cfg = serde_json::json!({
        "seed": 3,
        "input": "corpus.jsonl",
        "ontology_dir": fixtures().join("ontology"),
        "synonyms": fixtures().join("synonyms.tsv"),
        "output_dir": "out",
        "encode": { "encoder": "stub", "embed_dim": 16 },
        "model": { "experts": 4, "top_k": 2, "hidden_dim": 16, "expert_out": 8, "shared_dim": 8 },
        "train": { "max_epochs": 4, "patience": 2 }
    });
    for (k, v) in extra.as_object().unwrap() {
        cfg[k] = v.clone();
    }
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let f = fixtures();
    let args = |input: &Path| {
        vec![
            "validate".to_string(),
            "--input".into(),
            input.display().to_string(),
            "--ontology".into(),
            f.join("ontology").display().to_string(),
            "--synonyms".into(),
            f.join("synonyms.tsv").display().to_string(),
            "--report".into(),
            "report.jsonl".into(),
        ]
    };
    let full = args(&f.join("corpus.jsonl"));
    let o = trialmoe(
        &full.iter().map(String::as_str).collect::<Vec<_>>(),
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let report = fs::read_to_string(dir.path().join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 200);
    assert!(report.contains("phase3_min_enrollment"));

    // the first ten records are clean
    let corpus = fs::read_to_string(f.join("corpus.jsonl")).unwrap();
    let head: Vec<&str> = corpus.lines().take(10).collect();
    fs::write(dir.path().join("clean.jsonl"), head.join("\n")).unwrap();
    let clean = args(&dir.path().join("clean.jsonl"));
    let o = trialmoe(
        &clean.iter().map(String::as_str).collect::<Vec<_>>(),
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = trialmoe(&["ontology", "check", "--dir", "missing"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = trialmoe(
        &["eval", "--model", "missing.ckpt", "--report", "r.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.ckpt"));
}

#[test]
fn failing_stage_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        10,
        serde_json::json!({ "input": "absent.jsonl" }),
    );
    let o = trialmoe(&["--config", cfg.to_str().unwrap(), "run"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("validate: "), "{}", stderr(&o));

    let cfg = small_config(dir.path(), 10, serde_json::json!({ "modalities": [] }));
    let o = trialmoe(&["--config", cfg.to_str().unwrap(), "run"], dir.path());
    assert!(stderr(&o).contains("config: "), "{}", stderr(&o));
}

#[test]
fn ontology_check_and_smiles_canon() {
    let dir = tempfile::tempdir().unwrap();
    let o = trialmoe(
        &[
            "ontology",
            "check",
            "--dir",
            fixtures().join("ontology").to_str().unwrap(),
        ],
        dir.path(),
    );
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("concepts"));

    fs::write(dir.path().join("in.txt"), "OCC\nC1CC(=O\nC1=CC=CC=C1\n").unwrap();
    let o = trialmoe(
        &["smiles", "canon", "--in", "in.txt", "--out", "out.txt"],
        dir.path(),
    );
    assert!(o.status.success());
    assert_eq!(
        fs::read_to_string(dir.path().join("out.txt")).unwrap(),
        "CCO\n\nC=1C=CC=CC1\n"
    );
    assert!(String::from_utf8_lossy(&o.stdout).contains("parsed 2/3"));
}

#[test]
fn textualize_offline_writes_processed_rows() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path(), 12, serde_json::json!({}));
    let o = trialmoe(
        &["textualize", "--input", "corpus.jsonl", "--out", "p.jsonl"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = fs::read_to_string(dir.path().join("p.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 12);
    let first: Value = serde_json::from_str(rows.lines().next().unwrap()).unwrap();
    assert!(first["brief_summary"].as_str().unwrap().len() > 20);
}

#[test]
fn encode_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 120, serde_json::json!({}));
    let c = cfg.to_str().unwrap();
    let o = trialmoe(&["--config", c, "encode", "--cache", "emb.bin"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = trialmoe(&["encode", "--cache", "emb.bin", "--verify"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("dim 16"));

    let train = [
        "--config",
        c,
        "train",
        "--cache",
        "emb.bin",
        "--encoder",
        "cache",
        "--out",
        "m.ckpt",
        "--history",
        "h.csv",
        "--experts",
        "3",
        "--topk",
        "1",
        "--gate",
        "all",
        "--report",
        "train.json",
    ];
    let o = trialmoe(&train, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let history = fs::read_to_string(dir.path().join("h.csv")).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_auc,f_1,f_2,f_3\n"));
    let train_report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("train.json")).unwrap()).unwrap();
    assert_eq!(train_report["gate_mode"], "all");

    // without --calibrate the checkpoint's temperature and threshold are reused,
    // so the test report matches the one written at training time
    let o = trialmoe(
        &[
            "--config",
            c,
            "eval",
            "--cache",
            "emb.bin",
            "--encoder",
            "cache",
            "--model",
            "m.ckpt",
            "--report",
            "r.json",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(eval, train_report["test"]);

    let o = trialmoe(
        &[
            "--config",
            c,
            "eval",
            "--model",
            "m.ckpt",
            "--report",
            "r2.json",
            "--calibrate",
            "--split",
            "all",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let all: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r2.json")).unwrap()).unwrap();
    assert!(all["n"].as_u64().unwrap() > 100);

    // a missing cache entry is an encode-stage error
    let o = trialmoe(
        &[
            "--config",
            c,
            "train",
            "--cache",
            "nothing.bin",
            "--encoder",
            "cache",
            "--out",
            "x.ckpt",
            "--history",
            "x.csv",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("encode: "), "{}", stderr(&o));

    let mut bytes = fs::read(dir.path().join("emb.bin")).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(dir.path().join("emb.bin"), bytes).unwrap();
    let o = trialmoe(&["encode", "--cache", "emb.bin", "--verify"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn run_without_narratives_drops_text_modalities() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        90,
        serde_json::json!({ "textualization": false }),
    );
    let o = trialmoe(&["--config", cfg.to_str().unwrap(), "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in [
        "validation.jsonl",
        "model.ckpt",
        "history.csv",
        "report.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("processed.jsonl").exists());
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mods: Vec<&str> = report["modalities"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| m.as_str().unwrap())
        .collect();
    assert_eq!(
        mods,
        ["smiles", "criteria", "diseases", "drugs", "enrollment"]
    );
}

#[test]
fn ablation_grid_shares_splits_and_env_overrides_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 90, serde_json::json!({}));
    let o = trialmoe(&["--config", cfg.to_str().unwrap(), "ablate"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|r| r[4] == rows[0][4]));
    let alt = rows.iter().find(|r| r[0] == "alt_gate").unwrap();
    assert_eq!(alt[1], "all");
    let only: Vec<&str> = rows
        .iter()
        .filter(|r| r[0].starts_with("only_"))
        .map(|r| r[3])
        .collect();
    assert_eq!(
        only,
        [
            "smiles",
            "criteria",
            "diseases",
            "drugs",
            "summary",
            "description",
            "enrollment"
        ]
    );
    let per_variant = fs::read_dir(dir.path().join("out/ablation"))
        .unwrap()
        .count();
    assert_eq!(per_variant, 10);

    let o = trialmoe_env(
        &["--config", cfg.to_str().unwrap(), "ablate"],
        dir.path(),
        ("TRIALMOE_SEED", "4"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv2 = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    let hash2 = csv2
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(4)
        .unwrap()
        .to_string();
    assert_ne!(hash2, rows[0][4]);
}

#[test]
fn request_list_is_enough_to_build_a_complete_cache() {
    use trialmoe::embedding::{content_hash, key_hex, stub_encode, EmbeddingCache};

    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 60, serde_json::json!({}));
    let c = cfg.to_str().unwrap();
    let o = trialmoe(
        &["--config", c, "encode", "--requests", "req.jsonl"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));

    // stand-in for an external encoder: vectors at an arbitrary scale
    let mut cache = EmbeddingCache::open(&dir.path().join("ext.bin"), 16).unwrap();
    let text = fs::read_to_string(dir.path().join("req.jsonl")).unwrap();
    let mut modalities = std::collections::BTreeSet::new();
    for line in text.lines() {
        let r: Value = serde_json::from_str(line).unwrap();
        let (m, t) = (r["modality"].as_str().unwrap(), r["text"].as_str().unwrap());
        assert_eq!(r["key"], key_hex(&content_hash(m, t)));
        let v: Vec<f32> = stub_encode(m, t, 16).iter().map(|x| x * 7.0).collect();
        cache.put(m, t, &v).unwrap();
        modalities.insert(m.to_string());
    }
    cache.flush().unwrap();
    let expected = [
        "criteria",
        "description",
        "diseases",
        "drugs",
        "enrollment",
        "smiles",
        "summary",
    ];
    assert_eq!(modalities.into_iter().collect::<Vec<_>>(), expected);

    let o = trialmoe(&["encode", "--cache", "ext.bin", "--verify"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = trialmoe(
        &[
            "--config",
            c,
            "train",
            "--cache",
            "ext.bin",
            "--encoder",
            "cache",
            "--out",
            "m.ckpt",
            "--history",
            "h.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

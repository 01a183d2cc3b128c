mod common;

use std::fs;

use common::{hlstcm, json, ok, tiny_data, TINY_MODEL};
use hlstcm_core::Checkpoint;

fn train_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--train", "d/train.trk", "--test", "d/test.trk"];
    v.extend(TINY_MODEL);
    v.extend(extra);
    v
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen", "--seed", "7", "--p", "3", "--classes", "4", "--n-train", "200", "--n-test", "100"];
    ok(dir.path(), &[&args[..], &["--out-dir", "a"]].concat());
    ok(dir.path(), &[&args[..], &["--out-dir", "b"]].concat());
    for f in ["train.trk", "test.trk"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap());
    }
}

#[test]
fn manifest_records_every_resolved_default() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen", "--n-train", "8", "--n-test", "4"]);
    let m = json(&dir.path().join("data/manifest.json"));
    let config = m["config"].as_object().unwrap();
    for key in ["p", "seq_len", "d_x", "k", "noise_sigma", "seed", "n_train", "n_test", "out_dir"] {
        assert!(config.contains_key(key), "{key} missing from {m}");
    }
    assert_eq!(config["noise_sigma"], "0.1");
    assert_eq!(config["n_train"], "8");
    assert_eq!(m["command"], "gen");
    assert_eq!(m["schema_version"], 1);
}

#[test]
fn indivisible_sample_count_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = hlstcm(dir.path(), &["gen", "--classes", "4", "--n-train", "201"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("multiple of the class count 4"), "{}", o.stderr);
}

#[test]
fn config_file_sits_between_defaults_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "# tiny\nn_train = 8\nn-test=4\nseed=3\nclasses=2\n").unwrap();
    ok(dir.path(), &["gen", "--config", "run.cfg", "--seed", "9"]);
    let m = json(&dir.path().join("data/manifest.json"));
    assert_eq!(m["config"]["n_train"], "8");
    assert_eq!(m["config"]["n_test"], "4");
    assert_eq!(m["config"]["k"], "2");
    assert_eq!(m["config"]["seed"], "9");
    assert_eq!(m["config"]["p"], "3");
    assert_eq!(m["config_file"], "run.cfg");
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "n_train=8\nlearning_rate=3\n").unwrap();
    let o = hlstcm(dir.path(), &["gen", "--config", "bad.cfg"]);
    assert_eq!(o.code, 2);
    assert!(o.stderr.contains("bad.cfg:2: unknown key 'learning_rate'"), "{}", o.stderr);
    // A training key is not a generator key.
    fs::write(dir.path().join("mixed.cfg"), "lr=0.1\n").unwrap();
    assert_eq!(hlstcm(dir.path(), &["gen", "--config", "mixed.cfg"]).code, 2);
    assert_eq!(hlstcm(dir.path(), &["gen", "--lr", "0.1"]).code, 2);
    fs::write(dir.path().join("garbled.cfg"), "n_train 8\n").unwrap();
    assert_eq!(hlstcm(dir.path(), &["gen", "--config", "garbled.cfg"]).code, 2);
}

#[test]
fn bad_values_and_missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["gen", "--p", "three"][..],
        &["train"],
        &["train", "--train", "missing.trk"],
        &["eval", "--data", "x.trk"],
        &["gradcheck", "--variant", "b7"],
        &["gradcheck", "--epsilon", "0"],
        &["frobnicate"],
    ] {
        let o = hlstcm(dir.path(), args);
        assert_eq!(o.code, 2, "{args:?}: {}", o.stderr);
    }
}

#[test]
fn unwritable_output_directory_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let o = hlstcm(dir.path(), &["gen", "--n-train", "8", "--n-test", "4", "--out-dir", "blocker/sub"]);
    assert_eq!(o.code, 2, "{}", o.stderr);
}

#[test]
fn train_writes_checkpoint_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    ok(dir.path(), &train_args(&["--epochs", "3", "--out-dir", "r"]));
    let r = dir.path().join("r");
    let csv = fs::read_to_string(r.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,train_acc,test_acc,lr,seconds");
    assert_eq!(lines.len(), 4);
    let summary = json(&r.join("summary.json"));
    assert_eq!(summary["epochs_done"], 3);
    assert_eq!(summary["test"]["confusion"].as_array().unwrap().len(), 2);
    let ck = Checkpoint::load(&r.join("model.ckpt")).unwrap();
    assert_eq!(ck.config.d_sp, 3);
    assert_eq!((ck.config.p, ck.config.seq_len, ck.config.d_x, ck.config.k), (2, 3, 4, 2));
    assert_eq!(ck.meta["epochs_done"], "3");
    let m = json(&r.join("manifest.json"));
    assert_eq!(m["config"]["p"], "2");
    assert_eq!(m["config"]["lr"], "0.0005");
}

#[test]
fn variant_flag_selects_the_architecture() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    for (flag, stored) in [("b3", "b3"), ("two-group", "two-group:AB"), ("b1", "b1")] {
        ok(dir.path(), &train_args(&["--epochs", "1", "--variant", flag, "--out-dir", flag]));
        let ck = Checkpoint::load(&dir.path().join(flag).join("model.ckpt")).unwrap();
        assert_eq!(ck.config.variant.to_string(), stored);
    }
}

fn without_seconds(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    ok(dir.path(), &train_args(&["--epochs", "6", "--seed", "4", "--out-dir", "full"]));
    ok(dir.path(), &train_args(&["--epochs", "3", "--seed", "4", "--out-dir", "first"]));
    // Settings come back from the checkpoint; only the epoch target changes.
    ok(dir.path(), &["train", "--train", "d/train.trk", "--test", "d/test.trk", "--resume", "first/model.ckpt", "--epochs", "6", "--out-dir", "second"]);
    let p = |d: &str| dir.path().join(d);
    let full = Checkpoint::load(&p("full/model.ckpt")).unwrap();
    let resumed = Checkpoint::load(&p("second/model.ckpt")).unwrap();
    assert_eq!(full.params, resumed.params);
    assert_eq!(full.velocity, resumed.velocity);
    let whole = without_seconds(&fs::read_to_string(p("full/metrics.csv")).unwrap());
    let a = without_seconds(&fs::read_to_string(p("first/metrics.csv")).unwrap());
    let b = without_seconds(&fs::read_to_string(p("second/metrics.csv")).unwrap());
    assert_eq!(whole, [&a[..], &b[1..]].concat());
    assert_eq!(json(&p("second/summary.json"))["resumed_from_epoch"], 3);
}

#[test]
fn resume_refuses_changed_settings() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    ok(dir.path(), &train_args(&["--epochs", "2", "--out-dir", "first"]));
    let base = ["train", "--train", "d/train.trk", "--resume", "first/model.ckpt", "--out-dir", "x"];
    for extra in [&["--epochs", "4", "--lr", "0.1"][..], &["--epochs", "4", "--d-co", "5"], &["--epochs", "2"]] {
        let o = hlstcm(dir.path(), &[&base[..], extra].concat());
        assert_eq!(o.code, 2, "{extra:?}: {}", o.stderr);
    }
}

#[test]
fn diverging_training_exits_3_naming_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    // Huge inputs with an unclipped, absurd step overflow the first update.
    let text = fs::read_to_string(dir.path().join("d/train.trk")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let toks: Vec<&str> = lines[1].split(' ').collect();
    let blown: Vec<&str> = toks.iter().enumerate().map(|(i, t)| if i < 3 { *t } else { "1e200" }).collect();
    lines[1] = blown.join(" ");
    fs::write(dir.path().join("d/bad.trk"), lines.join("\n")).unwrap();
    let args = ["train", "--train", "d/bad.trk", "--epochs", "2", "--lr", "1e300", "--clip-norm", "0", "--out-dir", "r"];
    let o = hlstcm(dir.path(), &args);
    assert_eq!(o.code, 3, "{}", o.stderr);
    assert!(o.stderr.contains("epoch 1") && o.stderr.contains("train-00000"), "{}", o.stderr);
}

#[test]
fn eval_reproduces_the_final_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    ok(dir.path(), &train_args(&["--epochs", "4", "--out-dir", "r"]));
    let o = ok(dir.path(), &["eval", "--checkpoint", "r/model.ckpt", "--data", "d/test.trk"]);
    let report: serde_json::Value = serde_json::from_str(&o.stdout).unwrap();
    let summary = json(&dir.path().join("r/summary.json"));
    assert_eq!(report["accuracy"], summary["test"]["accuracy"]);
    assert_eq!(report["accuracy"], summary["last_epoch"]["test_acc"]);
    // Per-class accuracies weighted by class size give the overall accuracy.
    let per_class = report["per_class"].as_array().unwrap();
    let n: f64 = per_class.iter().map(|c| c["n"].as_f64().unwrap()).sum();
    let weighted: f64 = per_class.iter().map(|c| c["n"].as_f64().unwrap() * c["accuracy"].as_f64().unwrap()).sum();
    assert!((weighted / n - report["accuracy"].as_f64().unwrap()).abs() < 1e-12);
    let confusion = report["confusion"].as_array().unwrap();
    assert_eq!(confusion.len(), 2);
    assert!(confusion.iter().all(|row| row.as_array().unwrap().iter().all(|x| x.is_u64())));
}

#[test]
fn eval_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    ok(dir.path(), &train_args(&["--epochs", "1", "--out-dir", "r"]));
    ok(dir.path(), &["gen", "--p", "2", "--seq-len", "3", "--d-x", "5", "--classes", "2", "--n-train", "2", "--n-test", "2", "--out-dir", "wide"]);
    for cmd in ["eval", "predict-curve"] {
        let o = hlstcm(dir.path(), &[cmd, "--checkpoint", "r/model.ckpt", "--data", "wide/test.trk"]);
        assert_eq!(o.code, 2, "{}", o.stderr);
    }
    let o = hlstcm(dir.path(), &["train", "--train", "d/train.trk", "--test", "wide/test.trk", "--out-dir", "x"]);
    assert_eq!(o.code, 2);
}

#[test]
fn prediction_curve_has_ten_rows_ending_at_the_full_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    tiny_data(dir.path());
    ok(dir.path(), &train_args(&["--epochs", "4", "--out-dir", "r"]));
    let curve = ok(dir.path(), &["predict-curve", "--checkpoint", "r/model.ckpt", "--data", "d/test.trk", "--out-dir", "c"]).stdout;
    let rows: Vec<&str> = curve.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0].split(',').next().unwrap(), "0.1");
    let last: Vec<&str> = rows[9].split(',').collect();
    assert_eq!(&last[..2], ["1.0", "3"]);
    let eval = ok(dir.path(), &["eval", "--checkpoint", "r/model.ckpt", "--data", "d/test.trk"]).stdout;
    let report: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(last[2].parse::<f64>().unwrap(), report["accuracy"].as_f64().unwrap());
    assert_eq!(fs::read_to_string(dir.path().join("c/curve.csv")).unwrap(), curve);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(dir.path(), &["gradcheck"]);
    assert!(o.stdout.contains("PASS"));
    ok(dir.path(), &["gradcheck", "--variant", "two-group"]);
    let o = hlstcm(dir.path(), &["gradcheck", "--threshold", "0", "--out-dir", "g"]);
    assert_eq!(o.code, 4);
    assert!(o.stderr.contains("worst tensors"), "{}", o.stderr);
    let report = json(&dir.path().join("g/gradcheck.json"));
    assert_eq!(report["passed"], false);
    assert!(!report["tensors"].as_array().unwrap().is_empty());
}

#[test]
fn help_exits_0() {
    let dir = tempfile::tempdir().unwrap();
    let o = hlstcm(dir.path(), &["train", "--help"]);
    assert_eq!(o.code, 0);
    assert!(o.stdout.contains("--clip-norm"));
}

//! Acceptance suite: prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! ```text
//! cargo test --release -p hlstcm-cli --test acceptance
//! ```
//!
//! The relational-task criteria (6 to 8) train six desk-scale models and take
//! a few minutes.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hlstcm_core::data::generate_synthetic;
use hlstcm_core::model::{forward, random_sample};
use hlstcm_core::train::{GradCheckOptions, TrainConfig, Trainer};
use hlstcm_core::verify::{check_corrupted, lstm_reduction_error, permutation_error, seeded_corruptions, zero_model_errors};
use hlstcm_core::{ArchVariant, Checkpoint, HlstcmConfig, HlstcmParams, SynthConfig};
use serde_json::Value;

type Outcome = Result<String, String>;

fn hlstcm(cwd: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hlstcm"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| format!("cannot run hlstcm: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "hlstcm {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    if took > limit {
        return Err(format!("took {:.1}s, limit {:.0}s", took.as_secs_f64(), limit.as_secs_f64()));
    }
    Ok(took)
}

fn gradient_soundness(dir: &Path) -> Outcome {
    let mut worst = Vec::new();
    for variant in ["hlstcm", "two-group", "b2", "b3", "b4"] {
        let start = Instant::now();
        let out = dir.join(format!("gc-{variant}"));
        let out = out.to_str().unwrap();
        hlstcm(dir, &["gradcheck", "--variant", variant, "--seed", "7", "--out-dir", out])?;
        let took = within(Duration::from_secs(30), start).map_err(|e| format!("{variant}: {e}"))?;
        let report = json(&Path::new(out).join("gradcheck.json"))?;
        let max = report["max_rel_err"].as_f64().ok_or("gradcheck.json lacks max_rel_err")?;
        if max > 1e-4 {
            return Err(format!("{variant}: max rel err {max:.3e} > 1e-4"));
        }
        worst.push(format!("{variant} {max:.1e} ({:.1}s)", took.as_secs_f64()));
    }
    Ok(worst.join(", "))
}

fn lstm_reduction() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let (d_x, d_h) = (1 + seed as usize % 8, 1 + (seed as usize / 8) % 8);
        worst = worst.max(lstm_reduction_error(seed, d_x, d_h, 6).map_err(|e| e.to_string())?);
    }
    let took = within(Duration::from_secs(5), start)?;
    if worst > 1e-12 {
        return Err(format!("max deviation {worst:.3e} > 1e-12"));
    }
    Ok(format!("100 instances, max deviation {worst:.1e} ({:.2}s)", took.as_secs_f64()))
}

fn permutation_equivariance() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let p = 2 + seed as usize % 3;
        worst = worst.max(permutation_error(seed, p, 3, 4, 6).map_err(|e| e.to_string())?);
    }
    if worst > 1e-12 {
        return Err(format!("max change {worst:.3e} > 1e-12"));
    }
    Ok(format!("50 instances, p in 2..=4, max change {worst:.1e}"))
}

fn zero_case() -> Outcome {
    let (mut prob, mut loss) = (0.0f64, 0.0f64);
    let variants = [
        ArchVariant::HLstcm,
        ArchVariant::two_group_split(3),
        ArchVariant::B1StaticPool,
        ArchVariant::B2ConcatLstm,
        ArchVariant::B3IndependentLstms,
        ArchVariant::B4PooledLstms,
    ];
    for k in 2..=8 {
        for variant in &variants {
            let mut config = HlstcmConfig { k, variant: variant.clone(), ..HlstcmConfig::default() };
            config.resolve_groups();
            let (p, l) = zero_model_errors(&config, k as u64).map_err(|e| e.to_string())?;
            prob = prob.max(p);
            loss = loss.max(l);
        }
    }
    if prob > 1e-12 || loss > 1e-9 {
        return Err(format!("probability error {prob:.3e}, loss error {loss:.3e}"));
    }
    Ok(format!("k = 2..=8, every variant: probability error {prob:.1e}, loss error {loss:.1e}"))
}

fn overfitting() -> Outcome {
    let start = Instant::now();
    let synth = SynthConfig { n_train: 16, n_test: 4, ..SynthConfig::default() };
    let (train, _) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let config = HlstcmConfig { linear_logits: true, ..HlstcmConfig::default() };
    let cfg = TrainConfig { lr: 5e-3, momentum: 0.9, decay: 0.95, epochs: 500, ..TrainConfig::default() };
    let mut trainer = Trainer::new(HlstcmParams::init(&config, cfg.seed).map_err(|e| e.to_string())?);
    let history = trainer.run(&config, &cfg, &train, None, |_| {}).map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(120), start)?;
    let last = history.last().ok_or("no epochs ran")?;
    if last.loss.is_nan() || last.loss >= 0.05 {
        return Err(format!("final mean training loss {:.4} >= 0.05", last.loss));
    }
    Ok(format!("final mean training loss {:.4} after {} epochs ({:.1}s)", last.loss, last.epoch, took.as_secs_f64()))
}

/// Settings shared by the H-LSTCM and B3 runs of criteria 6 and 7.
const RELATIONAL_RUN: [&str; 16] = [
    "--d-sp", "64", "--d-proj", "32", "--d-co", "64", "--share-sp-params", "true", "--lr", "0.005", "--decay", "0.99",
    "--epochs", "150", "--eval-every", "50",
];
const TRAINING_SEEDS: [&str; 3] = ["1", "2", "3"];

/// Trains `variant` once per seed on the seed-11 task; returns test accuracies.
fn relational_runs(dir: &Path, variant: &str) -> Result<Vec<f64>, String> {
    let mut accs = Vec::new();
    for seed in TRAINING_SEEDS {
        let out = format!("{variant}-{seed}");
        let mut args = vec!["train", "--train", "task/train.trk", "--test", "task/test.trk", "--variant", variant];
        args.extend(RELATIONAL_RUN);
        args.extend(["--seed", seed, "--out-dir", &out]);
        hlstcm(dir, &args)?;
        let summary = json(&dir.join(&out).join("summary.json"))?;
        accs.push(summary["test"]["accuracy"].as_f64().ok_or("summary.json lacks test accuracy")?);
    }
    Ok(accs)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt_accs(xs: &[f64]) -> String {
    xs.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join("/")
}

fn relational_learnability(h: &Result<(Vec<f64>, Duration), String>) -> Outcome {
    let (accs, took) = h.clone()?;
    if took > Duration::from_secs(600) {
        return Err(format!("took {:.0}s, limit 600s", took.as_secs_f64()));
    }
    let m = mean(&accs);
    if m < 0.90 {
        return Err(format!("mean test accuracy {m:.3} < 0.90 (seeds {})", fmt_accs(&accs)));
    }
    Ok(format!("mean test accuracy {m:.3} (seeds {}) in {:.0}s", fmt_accs(&accs), took.as_secs_f64()))
}

fn relational_advantage(dir: &Path, h: &Result<(Vec<f64>, Duration), String>) -> Outcome {
    let (h_accs, _) = h.clone()?;
    let b3 = relational_runs(dir, "b3")?;
    let gap = mean(&h_accs) - mean(&b3);
    let line = format!("H-LSTCM {:.3} vs B3 {:.3} (seeds {}): gap {:.1} points", mean(&h_accs), mean(&b3), fmt_accs(&b3), 100.0 * gap);
    if gap < 0.10 {
        return Err(line);
    }
    Ok(line)
}

fn prediction_trend(dir: &Path) -> Outcome {
    let csv = hlstcm(dir, &["predict-curve", "--checkpoint", "hlstcm-1/model.ckpt", "--data", "task/test.trk"])?;
    let acc = |ratio: &str| -> Result<f64, String> {
        let row = csv.lines().find(|l| l.starts_with(&format!("{ratio},"))).ok_or(format!("no row for ratio {ratio}"))?;
        row.rsplit(',').next().unwrap().parse::<f64>().map_err(|e| e.to_string())
    };
    let (full, part) = (acc("1.0")?, acc("0.3")?);
    if full < part {
        return Err(format!("accuracy(1.0) = {full:.3} < accuracy(0.3) = {part:.3}"));
    }
    Ok(format!("accuracy(1.0) = {full:.3} >= accuracy(0.3) = {part:.3}"))
}

fn determinism(dir: &Path) -> Outcome {
    // Two CLI runs with identical inputs: same checkpoint bytes and metrics.
    for out in ["det-a", "det-b"] {
        hlstcm(
            dir,
            &["train", "--train", "task/train.trk", "--test", "task/test.trk", "--d-sp", "8", "--d-proj", "4", "--d-co", "8", "--epochs", "4", "--seed", "5", "--out-dir", out],
        )?;
    }
    let read = |p: &str| fs::read(dir.join(p)).map_err(|e| e.to_string());
    if read("det-a/model.ckpt")? != read("det-b/model.ckpt")? {
        return Err("checkpoints of identical runs differ".into());
    }
    let strip = |p: &str| -> Result<Vec<String>, String> {
        let text = String::from_utf8(read(p)?).map_err(|e| e.to_string())?;
        Ok(text.lines().map(|l| l.rsplit_once(',').map_or(l, |(a, _)| a).to_string()).collect())
    };
    if strip("det-a/metrics.csv")? != strip("det-b/metrics.csv")? {
        return Err("metrics histories of identical runs differ".into());
    }

    // In-process: histories bit-for-bit, and save -> load -> forward.
    let synth = SynthConfig { n_train: 16, n_test: 8, ..SynthConfig::default() };
    let (train, test) = generate_synthetic(&synth).map_err(|e| e.to_string())?;
    let config = HlstcmConfig { d_sp: 8, d_proj: 4, d_co: 8, ..HlstcmConfig::default() };
    let cfg = TrainConfig { lr: 5e-3, epochs: 3, seed: 9, ..TrainConfig::default() };
    let run = || -> Result<_, String> {
        let mut t = Trainer::new(HlstcmParams::init(&config, cfg.seed).map_err(|e| e.to_string())?);
        let h = t.run(&config, &cfg, &train, Some(&test), |_| {}).map_err(|e| e.to_string())?;
        let bits: Vec<_> = h.iter().map(|m| (m.epoch, m.loss.to_bits(), m.train_acc.to_bits(), m.test_acc.map(f64::to_bits), m.lr.to_bits())).collect();
        Ok((t, bits))
    };
    let (trainer, first) = run()?;
    if run()?.1 != first {
        return Err("in-process histories differ".into());
    }
    let path = dir.join("det.ckpt");
    Checkpoint::new(config.clone(), trainer.params.clone()).save(&path).map_err(|e| e.to_string())?;
    let loaded = Checkpoint::load(&path).map_err(|e| e.to_string())?;
    for s in &test.samples {
        let a = forward(&trainer.params, &config, s).map_err(|e| e.to_string())?.0;
        let b = forward(&loaded.params, &loaded.config, s).map_err(|e| e.to_string())?.0;
        if a.iter().zip(b.iter()).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Err(format!("forward after reload differs on {}", s.id));
        }
    }
    Ok("repeated runs match bit for bit; reloaded checkpoint forwards bit-exactly".into())
}

fn mutation_sensitivity() -> Outcome {
    let mut config = HlstcmConfig { p: 3, d_x: 3, d_sp: 4, d_proj: 3, d_co: 4, d_top: 4, k: 3, seq_len: 4, ..HlstcmConfig::default() };
    config.resolve_groups();
    let params = HlstcmParams::init(&config, 7).map_err(|e| e.to_string())?;
    let sample = random_sample(&config, 7);
    let mut caught = Vec::new();
    for (tensor, fault) in seeded_corruptions(&params, 7, 5) {
        let report = check_corrupted(&params, &config, &sample, &GradCheckOptions::default(), &tensor, &fault).map_err(|e| e.to_string())?;
        if report.failing() != [tensor.as_str()] {
            return Err(format!("{fault:?} on {tensor}: failing tensors {:?}", report.failing()));
        }
        caught.push(format!("{tensor} ({fault:?})"));
    }
    Ok(format!("caught and named: {}", caught.join(", ")))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let dir = dir.path();
    let start = Instant::now();

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradient soundness", gradient_soundness(dir)),
        (2, "LSTM reduction", lstm_reduction()),
        (3, "slot-permutation equivariance", permutation_equivariance()),
        (4, "analytic zero case", zero_case()),
        (5, "overfitting capacity", overfitting()),
    ];

    let task = hlstcm(dir, &["gen", "--seed", "11", "--out-dir", "task"]);
    let h = task.and_then(|_| {
        let t = Instant::now();
        relational_runs(dir, "hlstcm").map(|accs| (accs, t.elapsed()))
    });
    results.push((6, "relational learnability", relational_learnability(&h)));
    results.push((7, "relational advantage over B3", relational_advantage(dir, &h)));
    results.push((8, "prediction-curve trend", h.clone().and_then(|_| prediction_trend(dir))));
    results.push((9, "determinism and persistence", determinism(dir)));
    results.push((10, "mutation sensitivity", mutation_sensitivity()));

    let mut failed = 0;
    println!();
    for (n, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed in {:.0}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}

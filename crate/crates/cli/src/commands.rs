use std::io::Write;
use std::path::Path;

use hlstcm_core::data::generate_synthetic;
use hlstcm_core::model::{observed_steps, parse_value, random_sample};
use hlstcm_core::train::{evaluate, evaluate_partial, gradient_check, metrics_csv};
use hlstcm_core::{
    Checkpoint, Dataset, GradCheckOptions, HlstcmConfig, HlstcmParams, SynthConfig, TrainConfig, Trainer,
};

use crate::config::{self, RunConfig, DATA_DIMS};
use crate::output::{self, EvalReport, TrainSummary, CURVE_CSV_HEADER, SCHEMA_VERSION};
use crate::CliError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";
pub const CURVE_FILE: &str = "curve.csv";

/// Training settings that must not change across a resume, or the run would
/// no longer match an uninterrupted one.
const FROZEN_ON_RESUME: [&str; 7] = ["lr", "momentum", "decay", "clip_norm", "seed", "shuffle", "batch_size"];

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(hlstcm_core::Error::from)?;
    Ok(())
}

pub fn gen(rc: RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut synth = SynthConfig::default();
    rc.apply(|k, v| synth.set(k, v))?;
    let (train, test) = generate_synthetic(&synth)?;
    let dir = rc.required_path("out_dir")?;
    output::create_dir(&dir)?;
    train.save(&dir.join("train.trk"))?;
    test.save(&dir.join("test.trk"))?;
    output::write_manifest(&dir, &rc, &["train.trk", "test.trk"])?;
    emit(out, &format!("wrote {} training and {} test clips to {}\n", train.len(), test.len(), dir.display()))
}

fn model_config(rc: &RunConfig, data: &Dataset) -> Result<HlstcmConfig, CliError> {
    let mut config = HlstcmConfig { p: data.p, d_x: data.d_x, k: data.k(), seq_len: data.seq_len, ..HlstcmConfig::default() };
    rc.apply(|k, v| if DATA_DIMS.contains(&k) { Ok(false) } else { config.set(k, v) })?;
    config.resolve_groups();
    config.validate()?;
    Ok(config)
}

fn train_config(rc: &RunConfig) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::default();
    rc.apply(|k, v| cfg.set(k, v))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Defaults for a run resuming from `path`: the stored model and training
/// settings over the built-in ones.
pub fn resume_defaults(rc: &RunConfig, path: &Path) -> Result<Vec<(&'static str, String)>, CliError> {
    let ck = Checkpoint::load(path)?;
    let mut base = RunConfig { values: config::defaults("train"), ..rc.clone() };
    for (k, v) in ck.config.to_pairs() {
        if !DATA_DIMS.contains(&k) {
            base.set(k, &v);
        }
    }
    for (k, _) in TrainConfig::default().to_pairs() {
        if let Some(v) = ck.meta.get(&format!("train.{k}")) {
            base.set(k, v);
        }
    }
    Ok(base.values)
}

fn resume(path: &Path, config: &HlstcmConfig, cfg: &TrainConfig) -> Result<Trainer, CliError> {
    let ck = Checkpoint::load(path)?;
    let mismatch: Vec<String> = ck
        .config
        .to_pairs()
        .into_iter()
        .zip(config.to_pairs())
        .filter(|(a, b)| a.1 != b.1)
        .map(|((k, have), (_, want))| format!("{k}: checkpoint {have}, requested {want}"))
        .collect();
    if !mismatch.is_empty() {
        return Err(CliError::Usage(format!("cannot resume {}: {}", path.display(), mismatch.join("; "))));
    }
    for (k, v) in cfg.to_pairs() {
        if FROZEN_ON_RESUME.contains(&k) {
            if let Some(stored) = ck.meta.get(&format!("train.{k}")) {
                if *stored != v {
                    return Err(CliError::Usage(format!(
                        "cannot resume {} with {k}={v}: it was trained with {k}={stored}",
                        path.display()
                    )));
                }
            }
        }
    }
    let velocity = ck
        .velocity
        .ok_or_else(|| CliError::Usage(format!("checkpoint {} holds no optimizer state to resume", path.display())))?;
    let epochs_done = match ck.meta.get("epochs_done") {
        Some(v) => parse_value("epochs_done", v)?,
        None => return Err(CliError::Usage(format!("checkpoint {} does not record epochs_done", path.display()))),
    };
    Ok(Trainer { params: ck.params, velocity, epochs_done })
}

pub fn train(mut rc: RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let train_set = Dataset::load(&rc.required_path("train")?)?;
    let test_set = rc.path("test").map(|p| Dataset::load(&p)).transpose()?;
    let config = model_config(&rc, &train_set)?;
    let cfg = train_config(&rc)?;
    train_set.check_model(&config)?;
    if let Some(t) = &test_set {
        t.check_model(&config)?;
        if t.class_names != train_set.class_names {
            return Err(CliError::Usage("training and test sets declare different classes".into()));
        }
    }
    for (k, v) in config.to_pairs() {
        if DATA_DIMS.contains(&k) {
            rc.push(k, v);
        }
    }
    let dir = rc.required_path("out_dir")?;
    output::create_dir(&dir)?;

    let mut trainer = match rc.path("resume") {
        Some(path) => resume(&path, &config, &cfg)?,
        None => Trainer::new(HlstcmParams::init(&config, cfg.seed)?),
    };
    let start = trainer.epochs_done;
    if start >= cfg.epochs {
        return Err(CliError::Usage(format!("checkpoint already has {start} epochs; raise epochs above it")));
    }
    let history = trainer.run(&config, &cfg, &train_set, test_set.as_ref(), |m| {
        if let Some(acc) = m.test_acc {
            eprintln!("epoch {:4}  loss {:.5}  train {:.4}  test {:.4}  lr {:.3e}", m.epoch, m.loss, m.train_acc, acc, m.lr);
        } else if m.epoch % cfg.eval_every == 0 {
            eprintln!("epoch {:4}  loss {:.5}  train {:.4}  lr {:.3e}", m.epoch, m.loss, m.train_acc, m.lr);
        }
    })?;

    let mut ck = Checkpoint::new(config.clone(), trainer.params.clone());
    ck.velocity = Some(trainer.velocity.clone());
    ck.meta.insert("epochs_done".into(), trainer.epochs_done.to_string());
    for (k, v) in cfg.to_pairs() {
        ck.meta.insert(format!("train.{k}"), v);
    }
    ck.save(&dir.join(CHECKPOINT_FILE))?;
    output::write(&dir, METRICS_FILE, &metrics_csv(&history))?;

    let names = &train_set.class_names;
    let summary = TrainSummary {
        schema_version: SCHEMA_VERSION,
        epochs_done: trainer.epochs_done,
        resumed_from_epoch: start,
        last_epoch: history.last().cloned(),
        train: EvalReport::new(&evaluate(&trainer.params, &config, &train_set)?, names),
        test: test_set.as_ref().map(|t| evaluate(&trainer.params, &config, t)).transpose()?.map(|e| EvalReport::new(&e, names)),
    };
    output::write(&dir, SUMMARY_FILE, &output::to_json(&summary))?;
    output::write_manifest(&dir, &rc, &[CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE])?;
    let test = summary.test.as_ref().map(|t| format!("  test accuracy {:.4}", t.accuracy)).unwrap_or_default();
    emit(
        out,
        &format!(
            "trained {} epochs  train accuracy {:.4}{test}\nwrote {}\n",
            trainer.epochs_done,
            summary.train.accuracy,
            dir.display()
        ),
    )
}

fn load_for_eval(rc: &RunConfig) -> Result<(Checkpoint, Dataset), CliError> {
    let ck = Checkpoint::load(&rc.required_path("checkpoint")?)?;
    let data = Dataset::load(&rc.required_path("data")?)?;
    data.check_model(&ck.config)?;
    Ok((ck, data))
}

pub fn eval(rc: RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (ck, data) = load_for_eval(&rc)?;
    let report = EvalReport::new(&evaluate(&ck.params, &ck.config, &data)?, &data.class_names);
    let json = output::to_json(&report);
    if let Some(dir) = rc.path("out_dir") {
        output::create_dir(&dir)?;
        output::write(&dir, EVAL_FILE, &json)?;
        output::write_manifest(&dir, &rc, &[EVAL_FILE])?;
    }
    emit(out, &json)
}

pub fn predict_curve(rc: RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let (ck, data) = load_for_eval(&rc)?;
    let mut csv = format!("{CURVE_CSV_HEADER}\n");
    for ratio in output::curve_ratios() {
        let steps = observed_steps(ratio, ck.config.seq_len)?;
        let ev = evaluate_partial(&ck.params, &ck.config, &data, ratio)?;
        csv.push_str(&format!("{ratio:.1},{steps},{}\n", ev.accuracy));
    }
    if let Some(dir) = rc.path("out_dir") {
        output::create_dir(&dir)?;
        output::write(&dir, CURVE_FILE, &csv)?;
        output::write_manifest(&dir, &rc, &[CURVE_FILE])?;
    }
    emit(out, &csv)
}

pub fn gradcheck(rc: RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut config = config::gradcheck_model();
    rc.apply(|k, v| config.set(k, v))?;
    config.resolve_groups();
    config.validate()?;
    let seed: u64 = parse_value("seed", rc.get("seed"))?;
    let opts = GradCheckOptions {
        epsilon: parse_value("epsilon", rc.get("epsilon"))?,
        threshold: parse_value("threshold", rc.get("threshold"))?,
        max_full: parse_value("max_full", rc.get("max_full"))?,
        subsample: parse_value("subsample", rc.get("subsample"))?,
        seed,
        extended_precision: parse_value("extended_precision", rc.get("extended_precision"))?,
    };
    let params = HlstcmParams::init(&config, seed)?;
    let report = gradient_check(&params, &config, &random_sample(&config, seed), &opts)?;
    let table = report.to_table();
    if let Some(dir) = rc.path("out_dir") {
        output::create_dir(&dir)?;
        output::write(&dir, "gradcheck.txt", &table)?;
        output::write(&dir, "gradcheck.json", &format!("{}\n", report.to_json()))?;
        output::write_manifest(&dir, &rc, &["gradcheck.txt", "gradcheck.json"])?;
    }
    emit(out, &table)?;
    if report.passed {
        return Ok(());
    }
    let mut failing: Vec<_> = report.tensors.iter().filter(|t| !t.passed).collect();
    failing.sort_by(|a, b| b.max_rel_err.total_cmp(&a.max_rel_err));
    let rows: Vec<String> = failing.iter().take(5).map(|t| format!("  {:<24} {:.3e}", t.name, t.max_rel_err)).collect();
    Err(CliError::GradCheck(rows.join("\n")))
}

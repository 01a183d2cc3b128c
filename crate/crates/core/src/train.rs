//! SGD with momentum, evaluation metrics, and the finite-difference gradient
//! check.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{self, parse_value, precise, HlstcmConfig, HlstcmGrads, HlstcmParams, Sample};
use crate::tensors::Tensors;

/// Version tag written into every emitted JSON document.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Learning rate at epoch `e` (0-based) is `lr · decay^e`.
    pub decay: f64,
    pub epochs: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Samples whose gradients are averaged into one update.
    pub batch_size: usize,
    /// Test-set evaluation period in epochs; the final epoch is always evaluated.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            momentum: 0.9,
            decay: 0.95,
            epochs: 300,
            clip_norm: 5.0,
            seed: 0,
            shuffle: true,
            batch_size: 1,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.clip_norm.is_nan() || self.clip_norm < 0.0 {
            return fail(format!("clip_norm must be >= 0, got {}", self.clip_norm));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return fail("batch_size and eval_every must be at least 1".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch as i32)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("decay", self.decay.to_string()),
            ("epochs", self.epochs.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("shuffle", self.shuffle.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "decay" => self.decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "shuffle" => self.shuffle = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One momentum update: optional global-norm clipping, then
/// `v ← momentum·v − lr·g` and `θ ← θ + v` for every tensor.
pub fn sgd_momentum_step<P: Tensors>(
    params: &mut P,
    grads: &P,
    velocity: &mut P,
    lr: f64,
    momentum: f64,
    clip_norm: f64,
) -> Result<StepInfo> {
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
    }
    let norm = grads.global_norm();
    let scale = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
    velocity.scale_in_place(momentum);
    velocity.add_scaled(grads, -lr * scale);
    params.add_scaled(velocity, 1.0);
    Ok(StepInfo { grad_norm: norm, clipped: scale < 1.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    /// Mean training objective over the epoch, measured before each update.
    pub loss: f64,
    /// Accuracy of the pre-update predictions made during the epoch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
    /// Samples whose label probability hit the log floor.
    pub clamped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Accuracy, per-class accuracy and confusion matrix. Parameters are only read.
pub fn evaluate(params: &HlstcmParams, config: &HlstcmConfig, data: &Dataset) -> Result<Evaluation> {
    evaluate_with(data, config.k, |s| model::forward(params, config, s).map(|(p, _)| p))
}

/// As [`evaluate`], but classifies from the first `ratio` of each clip.
pub fn evaluate_partial(params: &HlstcmParams, config: &HlstcmConfig, data: &Dataset, ratio: f64) -> Result<Evaluation> {
    evaluate_with(data, config.k, |s| model::forward_partial(params, config, s, ratio))
}

fn evaluate_with(data: &Dataset, k: usize, mut probs_of: impl FnMut(&Sample) -> Result<crate::Vector>) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate an empty dataset".into()));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    let mut loss = 0.0;
    for s in &data.samples {
        let probs = probs_of(s)?;
        confusion[s.label][model::predict(&probs)] += 1;
        loss += model::loss(&probs, s.label);
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    Ok(Evaluation {
        n: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        mean_loss: loss / data.len() as f64,
        per_class_accuracy,
        confusion,
    })
}

/// Training state that can be checkpointed and resumed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub params: HlstcmParams,
    pub velocity: HlstcmParams,
    pub epochs_done: usize,
}

impl Trainer {
    pub fn new(params: HlstcmParams) -> Self {
        let velocity = params.zeros_like();
        Trainer { params, velocity, epochs_done: 0 }
    }

    /// Runs epochs until `cfg.epochs` have been completed in total.
    pub fn run(
        &mut self,
        config: &HlstcmConfig,
        cfg: &TrainConfig,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>> {
        cfg.validate()?;
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        train.check_model(config)?;
        if let Some(t) = test {
            t.check_model(config)?;
        }
        self.params.check_against(config)?;
        let mut history = Vec::new();
        while self.epochs_done < cfg.epochs {
            let m = self.epoch(config, cfg, train, test)?;
            on_epoch(&m);
            history.push(m);
        }
        Ok(history)
    }

    fn epoch(&mut self, config: &HlstcmConfig, cfg: &TrainConfig, train: &Dataset, test: Option<&Dataset>) -> Result<EpochMetrics> {
        let start = Instant::now();
        let e = self.epochs_done;
        let lr = cfg.lr_at(e);
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.shuffle {
            // One stream per epoch, so a resumed run sees the same orders.
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(e as u64);
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut clamped = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<HlstcmGrads> = None;
            for &i in batch {
                let sample = &train.samples[i];
                let (probs, tape) = model::forward(&self.params, config, sample)?;
                let loss = tape.objective(sample.label);
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("loss is not finite at epoch {}, sample '{}'", e + 1, sample.id)));
                }
                clamped += usize::from(model::loss_checked(&probs, sample.label).1);
                loss_sum += loss;
                correct += usize::from(model::predict(&probs) == sample.label);
                let g = model::backward(&self.params, config, &tape, sample.label)?;
                match &mut acc {
                    Some(a) => a.add_scaled(&g, 1.0),
                    None => acc = Some(g),
                }
            }
            let mut g = acc.expect("batches are nonempty");
            if batch.len() > 1 {
                g.scale_in_place(1.0 / batch.len() as f64);
            }
            sgd_momentum_step(&mut self.params, &g, &mut self.velocity, lr, cfg.momentum, cfg.clip_norm).map_err(|err| match err {
                Error::NonFinite(m) => Error::NonFinite(format!("{m} at epoch {}, batch ending with sample '{}'", e + 1, train.samples[*batch.last().unwrap()].id)),
                other => other,
            })?;
        }
        self.epochs_done += 1;
        let evaluate_now = self.epochs_done % cfg.eval_every == 0 || self.epochs_done == cfg.epochs;
        let test_acc = match test {
            Some(t) if evaluate_now => Some(evaluate(&self.params, config, t)?.accuracy),
            _ => None,
        };
        Ok(EpochMetrics {
            epoch: self.epochs_done,
            loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            test_acc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            clamped,
        })
    }
}

/// Trains `params` in place from scratch and returns the per-epoch history.
pub fn train(
    params: &mut HlstcmParams,
    config: &HlstcmConfig,
    train: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    let mut t = Trainer::new(params.clone());
    let history = t.run(config, cfg, train, test, |_| {})?;
    *params = t.params;
    Ok(history)
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss,train_acc,test_acc,lr,seconds";

/// Metrics history as CSV; `test_acc` is empty on epochs without evaluation.
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in history {
        let test = m.test_acc.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{:.6}\n", m.epoch, m.loss, m.train_acc, test, m.lr, m.seconds));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub threshold: f64,
    /// Tensors larger than this are checked on a random subset.
    pub max_full: usize,
    /// Size of that subset.
    pub subsample: usize,
    pub seed: u64,
    /// Evaluate the differenced objective in double-double arithmetic.
    pub extended_precision: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { epsilon: 1e-5, threshold: 1e-4, max_full: 400, subsample: 200, seed: 0, extended_precision: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub numel: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    /// Largest `|analytic − numeric|`.
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub schema_version: u32,
    pub epsilon: f64,
    pub threshold: f64,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// Aligned plain-text table, one row per tensor.
    pub fn to_table(&self) -> String {
        let width = self.tensors.iter().map(|t| t.name.len()).max().unwrap_or(6).max(6);
        let mut out = format!(
            "{:<width$}  {:>7}  {:>7}  {:>12}  {:>12}  {:>12}  status\n",
            "tensor", "numel", "checked", "max_rel", "mean_rel", "max_abs"
        );
        for t in &self.tensors {
            out.push_str(&format!(
                "{:<width$}  {:>7}  {:>7}  {:>12.3e}  {:>12.3e}  {:>12.3e}  {}\n",
                t.name,
                t.numel,
                t.checked,
                t.max_rel_err,
                t.mean_rel_err,
                t.max_abs_err,
                if t.passed { "ok" } else { "FAIL" }
            ));
        }
        out.push_str(&format!(
            "max rel err {:.3e} (threshold {:e}): {}\n",
            self.max_rel_err,
            self.threshold,
            if self.passed { "PASS" } else { "FAIL" }
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `|g − fd| / max(|g|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient with central differences of the objective.
pub fn gradient_check(params: &HlstcmParams, config: &HlstcmConfig, sample: &Sample, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    gradient_check_with(params, config, sample, opts, |p, c, s| model::loss_and_grad(p, c, s).map(|r| r.2))
}

/// [`gradient_check`] against an arbitrary gradient routine.
pub fn gradient_check_with(
    params: &HlstcmParams,
    config: &HlstcmConfig,
    sample: &Sample,
    opts: &GradCheckOptions,
    grad_fn: impl Fn(&HlstcmParams, &HlstcmConfig, &Sample) -> Result<HlstcmGrads>,
) -> Result<GradCheckReport> {
    if opts.epsilon.is_nan() || opts.epsilon <= 0.0 {
        return Err(Error::Config(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    sample.validate(config)?;
    params.check_against(config)?;
    let grads = grad_fn(params, config, sample)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
    let mut probe = params.clone();
    // J(θ) with scalar `j` of tensor `ti` moved by `delta`.
    let mut objective = |ti: usize, j: usize, delta: f64| -> Result<f64> {
        if opts.extended_precision {
            let d = precise::Dd::from(delta);
            let up = precise::objective(params, config, sample, Some((ti, j, d)));
            let down = precise::objective(params, config, sample, Some((ti, j, -d)));
            return Ok((up - down).to_f64());
        }
        let orig = params.tensors()[ti].1.data()[j];
        set_scalar(&mut probe, ti, j, orig + delta);
        let up = model::forward(&probe, config, sample)?.1.objective(sample.label);
        set_scalar(&mut probe, ti, j, orig - delta);
        let down = model::forward(&probe, config, sample)?.1.objective(sample.label);
        set_scalar(&mut probe, ti, j, orig);
        Ok(up - down)
    };

    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, g)) in analytic.iter().enumerate() {
        let idx: Vec<usize> = if g.len() > opts.max_full {
            let mut v = index::sample(&mut rng, g.len(), opts.subsample.min(g.len())).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..g.len()).collect()
        };
        let (mut max_rel, mut sum_rel, mut max_abs) = (0.0f64, 0.0, 0.0f64);
        for &j in &idx {
            let fd = objective(ti, j, opts.epsilon)? / (2.0 * opts.epsilon);
            let rel = relative_error(g[j], fd);
            max_rel = max_rel.max(rel);
            sum_rel += rel;
            max_abs = max_abs.max((g[j] - fd).abs());
        }
        let checked = idx.len();
        tensors.push(TensorCheck {
            name: name.clone(),
            numel: g.len(),
            checked,
            max_rel_err: max_rel,
            mean_rel_err: if checked > 0 { sum_rel / checked as f64 } else { 0.0 },
            max_abs_err: max_abs,
            passed: max_rel <= opts.threshold,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        schema_version: SCHEMA_VERSION,
        epsilon: opts.epsilon,
        threshold: opts.threshold,
        passed: tensors.iter().all(|t| t.passed),
        max_rel_err,
        tensors,
    })
}

fn set_scalar(p: &mut HlstcmParams, tensor: usize, idx: usize, value: f64) {
    p.tensors_mut()[tensor].1.data_mut()[idx] = value;
}

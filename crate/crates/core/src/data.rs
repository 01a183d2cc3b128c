//! Datasets: the tracklet text format, stratified splits, and a synthetic
//! generator of coupled multi-agent motion.
//!
//! # Tracklet format
//!
//! ```text
//! # comment lines start with '#'
//! HLSTCM-TRACKLETS v1 k=4 p=3 T=10 d_x=16 classes=approach,retreat,orbit,independent
//! <id> <label> <presence> <values...>
//! ```
//!
//! One sample per line, fields separated by single spaces. `presence` is a
//! string of `p` characters, `1` for an occupied slot and `0` for an empty
//! one. Then follow `p·T·d_x` numbers ordered person-major, then time, then
//! feature dimension, in shortest round-trip decimal form. Empty slots still
//! carry their (zero) values.
//!
//! # Synthetic generator
//!
//! Agents are 2-D point masses moving with unit time step. They start at rest
//! at positions uniform in the 20×20 box centred on the origin, redrawn until
//! every agent is at least [`MIN_CENTROID_DISTANCE`] from the group centroid.
//! From rest an agent covers at most `0.15·(1 + .. + 9) = 6.75` in ten steps,
//! so approaching agents do not overshoot the centroid within a clip. Each step every agent receives an acceleration of
//! magnitude [`COUPLING_GAIN`] whose direction depends on the class:
//!
//! | class         | direction                                              |
//! |---------------|--------------------------------------------------------|
//! | `approach`    | toward the current centroid                            |
//! | `retreat`     | away from the current centroid                         |
//! | `orbit`       | perpendicular to the centroid offset, one sense per clip |
//! | `independent` | a fresh uniformly random heading per agent and step    |
//!
//! Then `v += a` and `x += v`. The recorded state at step `t` is taken before
//! the update. Each clip is rotated by a random angle and shifted by a
//! random offset in `[-TRANSLATION, TRANSLATION]²`. Features are
//! `M · (x / POSITION_SCALE, v) + noise`, where `M` is a `d_x × 4` Gaussian
//! matrix drawn once per seed and shared by every clip, train and test.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::model::{parse_value, HlstcmConfig, Sample};
use crate::numerics::{Matrix, Vector};

pub const FORMAT_TAG: &str = "HLSTCM-TRACKLETS";
pub const FORMAT_VERSION: &str = "v1";

pub const CLASS_NAMES: [&str; 4] = ["approach", "retreat", "orbit", "independent"];
pub const COUPLING_GAIN: f64 = 0.15;
pub const BOX_HALF_WIDTH: f64 = 10.0;
pub const MIN_CENTROID_DISTANCE: f64 = 8.0;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;
/// Wide enough that an agent's absolute position says little about where
/// the centroid is.
pub const TRANSLATION: f64 = 15.0;
pub const POSITION_SCALE: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub p: usize,
    pub seq_len: usize,
    pub d_x: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Same header, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Dataset {
        Dataset { samples, ..self.clone() }
    }

    /// Checks that a model built from `config` can consume this dataset.
    pub fn check_model(&self, config: &HlstcmConfig) -> Result<()> {
        let pairs = [("p", self.p, config.p), ("T", self.seq_len, config.seq_len), ("d_x", self.d_x, config.d_x), ("k", self.k(), config.k)];
        let bad: Vec<String> = pairs
            .iter()
            .filter(|(_, d, m)| d != m)
            .map(|(n, d, m)| format!("{n}: data {d}, model {m}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("dataset does not match the model ({})", bad.join("; "))))
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{FORMAT_TAG} {FORMAT_VERSION} k={} p={} T={} d_x={} classes={}\n",
            self.k(),
            self.p,
            self.seq_len,
            self.d_x,
            self.class_names.join(",")
        );
        for s in &self.samples {
            out.push_str(&s.id);
            out.push(' ');
            out.push_str(&self.class_names[s.label]);
            out.push(' ');
            out.extend(s.present.iter().map(|&b| if b { '1' } else { '0' }));
            for x in s.features.iter().flatten().flat_map(|v| v.iter()) {
                write!(out, " {x}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the tracklet format; `path` only labels error messages.
    pub fn from_text(text: &str, path: &Path) -> Result<Dataset> {
        let err = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l)).filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        });

        let (hline, header) = lines.next().ok_or_else(|| err(0, "file has no header line".into()))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(FORMAT_TAG) {
            return Err(err(hline, format!("header must start with {FORMAT_TAG}")));
        }
        match parts.next() {
            Some(FORMAT_VERSION) => {}
            other => return Err(err(hline, format!("unsupported format version {:?}", other.unwrap_or("")))),
        }
        let mut fields = BTreeMap::new();
        for f in parts {
            let (k, v) = f.split_once('=').ok_or_else(|| err(hline, format!("malformed header field '{f}'")))?;
            fields.insert(k, v);
        }
        let num = |key: &str| -> Result<usize> {
            let v = fields.get(key).ok_or_else(|| err(hline, format!("header lacks {key}")))?;
            parse_value(key, v).map_err(|e| err(hline, e.to_string()))
        };
        let (k, p, seq_len, d_x) = (num("k")?, num("p")?, num("T")?, num("d_x")?);
        let class_names: Vec<String> = fields
            .get("classes")
            .ok_or_else(|| err(hline, "header lacks classes".into()))?
            .split(',')
            .map(str::to_string)
            .collect();
        if class_names.len() != k {
            return Err(err(hline, format!("header declares k={k} but lists {} classes", class_names.len())));
        }
        if p == 0 || seq_len == 0 || d_x == 0 {
            return Err(err(hline, "p, T and d_x must be positive".into()));
        }

        let per_sample = p * seq_len * d_x;
        let mut samples = Vec::new();
        for (ln, line) in lines {
            let mut tok = line.split_whitespace();
            let id = tok.next().expect("line is not blank").to_string();
            let serr = |msg: String| err(ln, format!("sample '{id}': {msg}"));
            let label_name = tok.next().ok_or_else(|| serr("missing label".into()))?;
            let label = class_names
                .iter()
                .position(|c| c == label_name)
                .ok_or_else(|| serr(format!("unknown label '{label_name}' (classes: {})", class_names.join(","))))?;
            let mask = tok.next().ok_or_else(|| serr("missing presence mask".into()))?;
            if mask.len() != p || !mask.chars().all(|c| c == '0' || c == '1') {
                return Err(serr(format!("presence mask '{mask}' must be {p} characters of 0/1")));
            }
            let present: Vec<bool> = mask.chars().map(|c| c == '1').collect();
            let values = tok
                .map(|t| match t.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(serr(format!("bad value '{t}'"))),
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != per_sample {
                return Err(serr(format!(
                    "expected {per_sample} values (p={p} x T={seq_len} x d_x={d_x}), found {}",
                    values.len()
                )));
            }
            let mut it = values.chunks_exact(d_x);
            let features = (0..p)
                .map(|_| (0..seq_len).map(|_| Vector::from_vec(it.next().expect("count checked").to_vec())).collect())
                .collect();
            if !present.iter().any(|&b| b) {
                return Err(serr("no person slot is present".into()));
            }
            samples.push(Sample { id, label, features, present });
        }
        Ok(Dataset { class_names, p, seq_len, d_x, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse { path: path.to_path_buf(), line: 0, msg: e.to_string() })?;
        Self::from_text(&text, path)
    }
}

/// Stratified split: each class contributes `fraction` of its samples to the
/// first part, rounded so the first part holds `round(fraction · n)` samples
/// overall. Both parts keep the input order.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let counts = dataset.class_counts();
    if let Some((c, n)) = counts.iter().enumerate().find(|(_, &n)| n < 2) {
        return Err(Error::Config(format!(
            "class '{}' has {n} sample(s); stratified splitting needs at least 2",
            dataset.class_names[c]
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Largest-remainder apportionment of round(fraction * n) across classes.
    let target = (fraction * dataset.len() as f64).round() as usize;
    let ideal: Vec<f64> = counts.iter().map(|&n| fraction * n as f64).collect();
    let mut take: Vec<usize> = ideal.iter().map(|x| x.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by(|&a, &b| (ideal[b] - ideal[b].floor()).total_cmp(&(ideal[a] - ideal[a].floor())));
    let mut missing = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[c] < counts[c] {
            take[c] += 1;
            missing -= 1;
        }
    }
    for (t, &n) in take.iter_mut().zip(&counts) {
        *t = (*t).clamp(1, n - 1);
    }

    let mut chosen = vec![false; dataset.len()];
    for (c, &t) in take.iter().enumerate() {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.samples[i].label == c).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..t] {
            chosen[i] = true;
        }
    }
    let (a, b): (Vec<_>, Vec<_>) = dataset.samples.iter().zip(&chosen).partition(|(_, &c)| c);
    Ok((
        dataset.with_samples(a.into_iter().map(|(s, _)| s.clone()).collect()),
        dataset.with_samples(b.into_iter().map(|(s, _)| s.clone()).collect()),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub p: usize,
    pub seq_len: usize,
    pub d_x: usize,
    /// Number of classes, taking the first `k` of [`CLASS_NAMES`].
    pub k: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { p: 3, seq_len: 10, d_x: 16, k: 4, noise_sigma: 0.1, seed: 11, n_train: 200, n_test: 100 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.p < 2 {
            return fail(format!("synthetic data needs p >= 2, got {}", self.p));
        }
        if self.d_x < 4 {
            return fail(format!("synthetic data needs d_x >= 4, got {}", self.d_x));
        }
        if self.seq_len == 0 {
            return fail("seq_len must be at least 1".into());
        }
        if !(2..=CLASS_NAMES.len()).contains(&self.k) {
            return fail(format!("synthetic data supports 2..=4 classes, got {}", self.k));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        for (name, n) in [("n_train", self.n_train), ("n_test", self.n_test)] {
            if n == 0 || n % self.k != 0 {
                return fail(format!("{name} = {n} must be a positive multiple of the class count {}", self.k));
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("p", self.p.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("d_x", self.d_x.to_string()),
            ("k", self.k.to_string()),
            ("noise_sigma", self.noise_sigma.to_string()),
            ("seed", self.seed.to_string()),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "p" => self.p = parse_value(key, value)?,
            "seq_len" => self.seq_len = parse_value(key, value)?,
            "d_x" => self.d_x = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "n_train" => self.n_train = parse_value(key, value)?,
            "n_test" => self.n_test = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn stream(&self, id: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        rng
    }
}

const MAP_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

/// The `d_x × 4` embedding of `(x / POSITION_SCALE, v)` used for every clip.
pub fn feature_map(cfg: &SynthConfig) -> Matrix {
    let mut rng = cfg.stream(MAP_STREAM);
    let data = (0..cfg.d_x * 4).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>();
    Matrix::from_vec(cfg.d_x, 4, data)
}

/// Latent agent states `[t][agent]` before rotation and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub positions: Vec<Vec<[f64; 2]>>,
    pub velocities: Vec<Vec<[f64; 2]>>,
}

fn centroid(xs: &[[f64; 2]]) -> [f64; 2] {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().map(|x| x[0]).sum();
    let sy: f64 = xs.iter().map(|x| x[1]).sum();
    [sx / n, sy / n]
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n > 0.0 {
        [v[0] / n, v[1] / n]
    } else {
        [0.0, 0.0]
    }
}

/// Runs the latent dynamics for one clip of class index `class`.
pub fn simulate_latent(class: usize, p: usize, steps: usize, rng: &mut impl Rng) -> LatentClip {
    let mut x = Vec::new();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        x = (0..p)
            .map(|_| [rng.gen_range(-BOX_HALF_WIDTH..BOX_HALF_WIDTH), rng.gen_range(-BOX_HALF_WIDTH..BOX_HALF_WIDTH)])
            .collect::<Vec<_>>();
        let c = centroid(&x);
        if x.iter().all(|a| (a[0] - c[0]).hypot(a[1] - c[1]) >= MIN_CENTROID_DISTANCE) {
            break;
        }
    }
    let mut v = vec![[0.0, 0.0]; p];
    let sense = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };

    let mut clip = LatentClip { positions: Vec::with_capacity(steps), velocities: Vec::with_capacity(steps) };
    for _ in 0..steps {
        clip.positions.push(x.clone());
        clip.velocities.push(v.clone());
        let c = centroid(&x);
        for i in 0..p {
            let toward = unit([c[0] - x[i][0], c[1] - x[i][1]]);
            let dir = match CLASS_NAMES[class] {
                "approach" => toward,
                "retreat" => [-toward[0], -toward[1]],
                "orbit" => [-sense * toward[1], sense * toward[0]],
                _ => {
                    let th: f64 = rng.gen_range(0.0..TAU);
                    [th.cos(), th.sin()]
                }
            };
            v[i][0] += COUPLING_GAIN * dir[0];
            v[i][1] += COUPLING_GAIN * dir[1];
        }
        for i in 0..p {
            x[i][0] += v[i][0];
            x[i][1] += v[i][1];
        }
    }
    clip
}

/// Mean distance over all agent pairs.
pub fn mean_pairwise_distance(xs: &[[f64; 2]]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            total += (xs[i][0] - xs[j][0]).hypot(xs[i][1] - xs[j][1]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

fn render(clip: &LatentClip, map: &Matrix, noise: f64, rng: &mut impl Rng) -> Vec<Vec<Vector>> {
    let phi = rng.gen_range(0.0..TAU);
    let (s, c) = phi.sin_cos();
    let shift = [rng.gen_range(-TRANSLATION..TRANSLATION), rng.gen_range(-TRANSLATION..TRANSLATION)];
    let rot = |a: [f64; 2]| [c * a[0] - s * a[1], s * a[0] + c * a[1]];
    let p = clip.positions[0].len();
    let steps = clip.positions.len();
    let mut out = vec![Vec::with_capacity(steps); p];
    for t in 0..steps {
        for (i, track) in out.iter_mut().enumerate() {
            let x = rot(clip.positions[t][i]);
            let v = rot(clip.velocities[t][i]);
            let latent = Vector::from_vec(vec![
                (x[0] + shift[0]) / POSITION_SCALE,
                (x[1] + shift[1]) / POSITION_SCALE,
                v[0],
                v[1],
            ]);
            let mut f = map.matvec(&latent);
            if noise > 0.0 {
                for e in f.as_mut_slice() {
                    let z: f64 = StandardNormal.sample(rng);
                    *e += noise * z;
                }
            }
            track.push(f);
        }
    }
    out
}

fn generate_split(cfg: &SynthConfig, n: usize, prefix: &str, map: &Matrix, rng: &mut ChaCha8Rng) -> Dataset {
    let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.k).collect();
    labels.shuffle(rng);
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let clip = simulate_latent(label, cfg.p, cfg.seq_len, rng);
            let features = render(&clip, map, cfg.noise_sigma, rng);
            Sample { id: format!("{prefix}-{i:05}"), label, features, present: vec![true; cfg.p] }
        })
        .collect();
    Dataset {
        class_names: CLASS_NAMES[..cfg.k].iter().map(|s| s.to_string()).collect(),
        p: cfg.p,
        seq_len: cfg.seq_len,
        d_x: cfg.d_x,
        samples,
    }
}

/// Train and test sets, each balanced across classes, drawn from disjoint
/// random streams of `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let map = feature_map(cfg);
    let train = generate_split(cfg, cfg.n_train, "train", &map, &mut cfg.stream(TRAIN_STREAM));
    let test = generate_split(cfg, cfg.n_test, "test", &map, &mut cfg.stream(TEST_STREAM));
    Ok((train, test))
}

#[cfg(test)]
mod tests;

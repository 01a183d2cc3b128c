//! Structural checks shared by the test suites and the acceptance runner:
//! a one-slot concurrent unit reducing to a plain LSTM, slot-permutation
//! equivariance, the all-zero model, and detection of corrupted gradients.
//!
//! Each check builds its own seeded instance and returns the measured error,
//! leaving the tolerance to the caller.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::co_lstm::{CoLstmParams, CoLstmState, CoSlotParams, GateOverride};
use crate::error::Result;
use crate::model::{self, HlstcmConfig, HlstcmGrads, HlstcmParams, Sample};
use crate::numerics::Vector;
use crate::sp_lstm::{init_matrix, InitScheme, SpLstmParams, SpLstmState};
use crate::tensors::Tensors;
use crate::train::{gradient_check_with, GradCheckOptions, GradCheckReport};

fn random_seq(t_len: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vector> {
    (0..t_len).map(|_| Vector::from_vec((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect()
}

fn jitter_biases<P: Tensors>(params: &mut P, rng: &mut impl Rng) {
    for (name, mut t) in params.tensors_mut() {
        if name.rsplit('.').next().is_some_and(|n| n.starts_with("b_")) {
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-0.5..0.5));
        }
    }
}

/// A single-slot concurrent unit carrying `sp`'s weights, with arbitrary
/// cell-gate weights that a clamp to one must make irrelevant.
pub fn co_from_lstm(sp: &SpLstmParams, rng: &mut impl Rng) -> CoLstmParams {
    let (d_h, d_x) = (sp.hidden_dim(), sp.input_dim());
    let slot = CoSlotParams {
        w_ix: sp.w_ix.clone(),
        w_ih: sp.w_ih.clone(),
        w_fx: sp.w_fx.clone(),
        w_fh: sp.w_fh.clone(),
        w_gx: sp.w_gx.clone(),
        w_gh: sp.w_gh.clone(),
        b_i: sp.b_i.clone(),
        b_f: sp.b_f.clone(),
        b_g: sp.b_g.clone(),
        w_pi_in: init_matrix(d_h, d_x, InitScheme::XavierUniform, rng),
        w_ox: sp.w_ox.clone(),
    };
    CoLstmParams {
        slots: vec![slot],
        w_pi_rec: init_matrix(d_h, d_h, InitScheme::XavierUniform, rng),
        b_pi: Vector::from_vec((0..d_h).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        w_oh: sp.w_oh.clone(),
        b_o: sp.b_o.clone(),
    }
}

/// Largest elementwise gap between the hidden and cell trajectories of a
/// random LSTM and its one-slot concurrent embedding with clamped gates.
pub fn lstm_reduction_error(seed: u64, d_x: usize, d_h: usize, t_len: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sp = SpLstmParams::init_with_rng(d_x, d_h, InitScheme::XavierUniform, &mut rng)?;
    jitter_biases(&mut sp, &mut rng);
    let co = co_from_lstm(&sp, &mut rng);
    let xs = random_seq(t_len, d_x, &mut rng);
    let (states, _) = sp.forward_seq(&xs, &SpLstmState::zeros(d_h));
    let (hs, tape) = co.forward_seq(&[xs], &CoLstmState::zeros(1, d_h), GateOverride::ClampCellGatesToOne);
    let mut worst = 0.0f64;
    for ((s, h), step) in states.iter().zip(&hs).zip(&tape.steps) {
        for k in 0..d_h {
            worst = worst.max((s.h[k] - h[k]).abs()).max((s.c[k] - step.c[k]).abs());
        }
    }
    Ok(worst)
}

/// Largest elementwise change in `h_t` when slots and their inputs are
/// permuted together by a random permutation.
pub fn permutation_error(seed: u64, p: usize, d_in: usize, d_co: usize, t_len: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut co = CoLstmParams::init_with_rng(p, d_in, d_co, InitScheme::XavierUniform, &mut rng)?;
    jitter_biases(&mut co, &mut rng);
    let xs: Vec<Vec<Vector>> = (0..p).map(|_| random_seq(t_len, d_in, &mut rng)).collect();
    let mut perm: Vec<usize> = (0..p).collect();
    while p > 1 && perm.iter().enumerate().all(|(i, &j)| i == j) {
        perm.shuffle(&mut rng);
    }
    let mut moved = co.clone();
    moved.slots = perm.iter().map(|&j| co.slots[j].clone()).collect();
    let moved_xs: Vec<Vec<Vector>> = perm.iter().map(|&j| xs[j].clone()).collect();
    let (a, _) = co.forward_seq(&xs, &CoLstmState::zeros(p, d_co), GateOverride::None);
    let (b, _) = moved.forward_seq(&moved_xs, &CoLstmState::zeros(p, d_co), GateOverride::None);
    Ok(a.iter().zip(&b).flat_map(|(u, v)| u.iter().zip(v.iter()).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max))
}

/// For an all-zero model with `config.k` classes on a random sample:
/// the largest `|prob − 1/k|` and `|loss − ln k|`.
pub fn zero_model_errors(config: &HlstcmConfig, seed: u64) -> Result<(f64, f64)> {
    let params = HlstcmParams::zeros(config)?;
    let sample = model::random_sample(config, seed);
    let (probs, _) = model::forward(&params, config, &sample)?;
    let k = config.k as f64;
    let prob_err = probs.iter().map(|q| (q - 1.0 / k).abs()).fold(0.0, f64::max);
    Ok((prob_err, (model::loss(&probs, sample.label) - k.ln()).abs()))
}

/// A deliberate fault in the gradient of one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub enum Corruption {
    Negate,
    Scale(f64),
    Zero,
    /// Adds noise of the given size relative to the tensor's largest entry.
    Noise(f64),
    /// Swaps the first and last entries.
    Swap,
}

impl Corruption {
    pub fn apply(&self, data: &mut [f64], rng: &mut impl Rng) {
        match self {
            Corruption::Negate => data.iter_mut().for_each(|x| *x = -*x),
            Corruption::Scale(s) => data.iter_mut().for_each(|x| *x *= s),
            Corruption::Zero => data.iter_mut().for_each(|x| *x = 0.0),
            Corruption::Noise(r) => {
                let top = data.iter().fold(0.0f64, |m, x| m.max(x.abs()));
                data.iter_mut().for_each(|x| *x += r * top * rng.gen_range(-1.0..1.0));
            }
            Corruption::Swap => {
                let n = data.len();
                data.swap(0, n - 1);
            }
        }
    }
}

/// `n` faults on tensors of `params` chosen by `seed`, always including the
/// shared cell-gate bias when the model has one. Single-entry tensors never
/// get [`Corruption::Swap`], which would leave them unchanged.
pub fn seeded_corruptions(params: &HlstcmParams, seed: u64, n: usize) -> Vec<(String, Corruption)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors: Vec<(String, usize)> = params.tensors().into_iter().map(|(name, t)| (name, t.data().len())).collect();
    let kinds = [Corruption::Negate, Corruption::Scale(1.1), Corruption::Zero, Corruption::Noise(1e-2), Corruption::Swap];
    let mut names: Vec<&(String, usize)> = tensors.iter().filter(|(name, _)| name.ends_with(".b_pi")).take(1).collect();
    let mut rest: Vec<&(String, usize)> = tensors.iter().filter(|t| !names.contains(t)).collect();
    rest.shuffle(&mut rng);
    names.extend(rest);
    names
        .into_iter()
        .take(n)
        .enumerate()
        .map(|(i, (name, len))| {
            let kind = match &kinds[i % kinds.len()] {
                Corruption::Swap if *len < 2 => Corruption::Negate,
                k => k.clone(),
            };
            (name.clone(), kind)
        })
        .collect()
}

/// Gradient check of `params` on `sample` with one tensor's analytic gradient
/// corrupted.
pub fn check_corrupted(
    params: &HlstcmParams,
    config: &HlstcmConfig,
    sample: &Sample,
    opts: &GradCheckOptions,
    tensor: &str,
    corruption: &Corruption,
) -> Result<GradCheckReport> {
    gradient_check_with(params, config, sample, opts, |p, c, s| {
        let mut g: HlstcmGrads = model::loss_and_grad(p, c, s)?.2;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xbad);
        for (name, mut t) in g.tensors_mut() {
            if name == tensor {
                corruption.apply(t.data_mut(), &mut rng);
            }
        }
        Ok(g)
    })
}


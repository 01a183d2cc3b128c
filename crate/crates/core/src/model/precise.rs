//! The training objective written once more, generic over the scalar type.
//!
//! The gradient check evaluates it in double-double arithmetic: central
//! differences of an `f64` objective near 1 carry about `1e-11` of rounding
//! noise at `ε = 1e-5`, larger than many genuine gradient components. Tensors
//! are looked up by name, so this path shares nothing with [`super::run`]
//! beyond the parameter bundle; in `f64` the two agree to rounding.

use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::{ArchVariant, Group, HlstcmConfig, HlstcmParams, Sample, PROB_FLOOR};
use crate::tensors::Tensors;

pub trait Real:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn of(x: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// An unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`, giving about 106
/// bits of significand.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    let bb = s - a;
    Dd { hi: s, lo: (a - (s - bb)) + (b - bb) }
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd { hi: s, lo: b - (s - a) }
}

fn two_prod(a: f64, b: f64) -> Dd {
    let p = a * b;
    Dd { hi: p, lo: a.mul_add(b, -p) }
}

impl Dd {
    const LN_2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale(self, s: f64) -> Dd {
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Dd) -> Option<std::cmp::Ordering> {
        (self.hi, self.lo).partial_cmp(&(other.hi, other.lo))
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let s = two_sum(self.hi, b.hi);
        let t = two_sum(self.lo, b.lo);
        let u = quick_two_sum(s.hi, s.lo + t.hi);
        quick_two_sum(u.hi, u.lo + t.lo)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + -b
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let p = two_prod(self.hi, b.hi);
        quick_two_sum(p.hi, p.lo + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        // Long division, one f64 digit at a time.
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from(q2);
        let q3 = r.hi / b.hi;
        quick_two_sum(q1, q2) + Dd::from(q3)
    }
}

/// `e^x`: `x = k·ln2 + r`, then a Taylor series on `r / 2^8` squared back up.
fn exp_dd(x: Dd) -> Dd {
    const HALVINGS: i32 = 8;
    if x.hi < -700.0 {
        return Dd::from(0.0);
    }
    let k = (x.hi / std::f64::consts::LN_2).round();
    let r = (x - Dd::LN_2.scale(k)).scale(1.0 / f64::from(1 << HALVINGS));
    let mut term = Dd::from(1.0);
    let mut sum = Dd::from(1.0);
    for n in 1..=14 {
        term = term * r / Dd::from(f64::from(n));
        sum = sum + term;
    }
    for _ in 0..HALVINGS {
        sum = sum * sum;
    }
    sum.scale(2f64.powi(k as i32))
}

impl Real for Dd {
    fn of(x: f64) -> Self {
        Dd::from(x)
    }
    fn exp(self) -> Self {
        exp_dd(self)
    }
    fn ln(self) -> Self {
        // Newton on e^y = x from the f64 logarithm; each step doubles the digits.
        let mut y = Dd::from(self.hi.ln());
        for _ in 0..2 {
            y = y + self * exp_dd(-y) - Dd::from(1.0);
        }
        y
    }
    fn tanh(self) -> Self {
        // Through exp(-2|x|) in (0, 1], which keeps relative accuracy near 0.
        let e = exp_dd(-self.abs().scale(2.0));
        let t = (Dd::from(1.0) - e) / (Dd::from(1.0) + e);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

fn sigmoid<R: Real>(x: R) -> R {
    R::of(1.0) / (R::of(1.0) + (-x).exp())
}

struct Tensor<R> {
    cols: usize,
    data: Vec<R>,
}

struct Weights<R>(HashMap<String, Tensor<R>>);

impl<R: Real> Weights<R> {
    fn get(&self, name: &str) -> &Tensor<R> {
        self.0.get(name).unwrap_or_else(|| panic!("parameter bundle lacks '{name}'"))
    }

    /// `b + Σ W_i x_i` for named `(W_i, x_i)` pairs.
    fn affine(&self, terms: &[(&str, &[R])], bias: &str) -> Vec<R> {
        let mut out = self.get(bias).data.clone();
        for (w, x) in terms {
            let w = self.get(w);
            for (r, o) in out.iter_mut().enumerate() {
                for (c, &xc) in x.iter().enumerate() {
                    *o = *o + w.data[r * w.cols + c] * xc;
                }
            }
        }
        out
    }

    fn lstm(&self, name: &str, xs: &[Vec<R>], d_h: usize) -> Vec<Vec<R>> {
        let mut h = vec![R::of(0.0); d_h];
        let mut c = vec![R::of(0.0); d_h];
        let mut out = Vec::with_capacity(xs.len());
        let n = |s: &str| format!("{name}.{s}");
        for x in xs {
            let gate = |wx: &str, wh: &str, b: &str| self.affine(&[(&n(wx), x), (&n(wh), &h)], &n(b));
            let i = gate("w_ix", "w_ih", "b_i");
            let f = gate("w_fx", "w_fh", "b_f");
            let o = gate("w_ox", "w_oh", "b_o");
            let g = gate("w_gx", "w_gh", "b_g");
            for k in 0..d_h {
                c[k] = sigmoid(f[k]) * c[k] + sigmoid(i[k]) * g[k].tanh();
                h[k] = sigmoid(o[k]) * c[k].tanh();
            }
            out.push(h.clone());
        }
        out
    }

    fn co_lstm(&self, name: &str, inputs: &[Vec<Vec<R>>], present: &[bool], d_co: usize) -> Vec<Vec<R>> {
        let steps = inputs[0].len();
        let mut h = vec![R::of(0.0); d_co];
        let mut cells = vec![vec![R::of(0.0); d_co]; inputs.len()];
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut c = vec![R::of(0.0); d_co];
            let mut o_terms: Vec<(String, &[R])> = vec![(format!("{name}.w_oh"), &h)];
            for (s, seq) in inputs.iter().enumerate() {
                let a = &seq[t][..];
                let n = |x: &str| format!("{name}.slot{s}.{x}");
                let i = self.affine(&[(&n("w_ix"), a), (&n("w_ih"), &h)], &n("b_i"));
                let f = self.affine(&[(&n("w_fx"), a), (&n("w_fh"), &h)], &n("b_f"));
                let g = self.affine(&[(&n("w_gx"), a), (&n("w_gh"), &h)], &n("b_g"));
                for k in 0..d_co {
                    cells[s][k] = sigmoid(f[k]) * cells[s][k] + sigmoid(i[k]) * g[k].tanh();
                }
                if present[s] {
                    let pi = self.affine(&[(&n("w_pi_in"), a), (&format!("{name}.w_pi_rec"), &h)], &format!("{name}.b_pi"));
                    for k in 0..d_co {
                        c[k] = c[k] + sigmoid(pi[k]) * cells[s][k];
                    }
                    o_terms.push((n("w_ox"), a));
                }
            }
            let terms: Vec<(&str, &[R])> = o_terms.iter().map(|(w, x)| (w.as_str(), *x)).collect();
            let o = self.affine(&terms, &format!("{name}.b_o"));
            let new_h: Vec<R> = (0..d_co).map(|k| sigmoid(o[k]) * c[k].tanh()).collect();
            h = new_h;
            out.push(h.clone());
        }
        out
    }

    /// `-ln p[label]` of the named head, floored like [`super::loss`].
    fn head_loss(&self, name: &str, h: &[R], linear: bool, label: usize) -> R {
        self.head_probs(name, h, linear)[label].max_floor()
    }

    fn head_probs(&self, name: &str, h: &[R], linear: bool) -> Vec<R> {
        let pre = self.affine(&[(&format!("{name}.w_zh"), h)], &format!("{name}.b_z"));
        let z: Vec<R> = if linear { pre } else { pre.into_iter().map(R::tanh).collect() };
        let max = z.iter().copied().fold(z[0], |m, x| if x > m { x } else { m });
        let e: Vec<R> = z.iter().map(|&x| (x - max).exp()).collect();
        let total = e.iter().copied().fold(R::of(0.0), |a, b| a + b);
        e.into_iter().map(|x| x / total).collect()
    }
}

trait Floored {
    fn max_floor(self) -> Self;
}

impl<R: Real> Floored for R {
    fn max_floor(self) -> R {
        let p = if self > R::of(PROB_FLOOR) { self } else { R::of(PROB_FLOOR) };
        -p.ln()
    }
}

/// The objective of [`super::ModelTape::objective`] with one scalar of tensor
/// `perturb.0` shifted by `perturb.2`.
pub fn objective<R: Real>(
    params: &HlstcmParams,
    config: &HlstcmConfig,
    sample: &Sample,
    perturb: Option<(usize, usize, R)>,
) -> R {
    let c = config;
    let mut map = HashMap::new();
    for (ti, (name, t)) in params.tensors().into_iter().enumerate() {
        let mut data: Vec<R> = t.data().iter().map(|&x| R::of(x)).collect();
        if let Some((pt, pj, delta)) = perturb {
            if pt == ti {
                data[pj] = data[pj] + delta;
            }
        }
        let cols = *t.dims().last().expect("tensors have a shape");
        map.insert(name, Tensor { cols, data });
    }
    let w = Weights(map);

    let feats: Vec<Vec<Vec<R>>> =
        sample.features.iter().map(|track| track.iter().map(|v| v.iter().map(|&x| R::of(x)).collect()).collect()).collect();
    let n = c.seq_len;
    let linear = c.head_is_linear();
    let classified: Vec<usize> =
        if c.cumulative_loss && c.variant != ArchVariant::B1StaticPool { (0..n).collect() } else { vec![n - 1] };
    let person_hidden = || -> Vec<Vec<Vec<R>>> {
        feats.iter().enumerate().map(|(s, xs)| w.lstm(&format!("sp{}", c.sp_index(s)), xs, c.d_sp)).collect()
    };
    let project = |hs: Vec<Vec<Vec<R>>>| -> Vec<Vec<Vec<R>>> {
        if c.d_proj == 0 {
            return hs;
        }
        hs.iter()
            .map(|seq| seq.iter().map(|h| w.affine(&[("proj.w", h)], "proj.b").into_iter().map(R::tanh).collect()).collect())
            .collect()
    };
    let sum = |xs: Vec<R>| xs.into_iter().fold(R::of(0.0), |a, b| a + b);

    let top_seq: Vec<Vec<R>> = match &c.variant {
        ArchVariant::HLstcm => w.co_lstm("co0", &project(person_hidden()), &sample.present, c.d_co),
        ArchVariant::TwoGroupHLstcm { .. } => {
            let inputs = project(person_hidden());
            let groups: Vec<Vec<Vec<R>>> = [Group::A, Group::B]
                .into_iter()
                .enumerate()
                .map(|(gi, g)| {
                    let slots = c.group_slots(g);
                    let sub: Vec<Vec<Vec<R>>> = slots.iter().map(|&s| inputs[s].clone()).collect();
                    let present: Vec<bool> = slots.iter().map(|&s| sample.present[s]).collect();
                    w.co_lstm(&format!("co{gi}"), &sub, &present, c.d_co)
                })
                .collect();
            let joined: Vec<Vec<R>> = (0..n).map(|t| [groups[0][t].clone(), groups[1][t].clone()].concat()).collect();
            w.lstm("top", &joined, c.d_top)
        }
        ArchVariant::B2ConcatLstm => {
            let xs: Vec<Vec<R>> = (0..n).map(|t| feats.iter().flat_map(|f| f[t].clone()).collect()).collect();
            w.lstm("sp0", &xs, c.d_sp)
        }
        ArchVariant::B4PooledLstms => {
            let hs = person_hidden();
            let pooled: Vec<Vec<R>> = (0..n)
                .map(|t| {
                    (0..c.d_sp)
                        .map(|k| {
                            let mut best: Option<R> = None;
                            for (s, seq) in hs.iter().enumerate() {
                                if sample.present[s] && best.map_or(true, |b| seq[t][k] > b) {
                                    best = Some(seq[t][k]);
                                }
                            }
                            best.expect("a present slot")
                        })
                        .collect()
                })
                .collect();
            w.lstm("top", &pooled, c.d_co)
        }
        ArchVariant::B3IndependentLstms => {
            let hs = person_hidden();
            let active: Vec<usize> = (0..c.p).filter(|&s| sample.present[s]).collect();
            let losses = classified.iter().map(|&t| {
                let mut mean = vec![R::of(0.0); c.k];
                for &s in &active {
                    let probs = w.head_probs(&format!("head{}", c.sp_index(s)), &hs[s][t], linear);
                    for k in 0..c.k {
                        mean[k] = mean[k] + probs[k];
                    }
                }
                (mean[sample.label] / R::of(active.len() as f64)).max_floor()
            });
            return sum(losses.collect());
        }
        ArchVariant::B1StaticPool => {
            let mut pooled = vec![R::of(0.0); c.d_x];
            let mut count = 0usize;
            for (s, track) in feats.iter().enumerate() {
                if sample.present[s] {
                    for x in track {
                        for k in 0..c.d_x {
                            pooled[k] = pooled[k] + x[k];
                        }
                        count += 1;
                    }
                }
            }
            let pooled: Vec<R> = pooled.into_iter().map(|v| v / R::of(count as f64)).collect();
            return w.head_loss("head0", &pooled, true, sample.label);
        }
    };
    sum(classified.iter().map(|&t| w.head_loss("head0", &top_seq[t], linear, sample.label)).collect())
}

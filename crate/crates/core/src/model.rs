//! Full architectures built from the two recurrent units, plus the
//! classifier head and the video-level loss.
//!
//! | variant            | pipeline                                                              |
//! |--------------------|-----------------------------------------------------------------------|
//! | `HLstcm`           | per-person LSTM → optional tanh projection → concurrent LSTM → head   |
//! | `TwoGroupHLstcm`   | as above with one concurrent LSTM per group, concatenated → LSTM → head |
//! | `B2ConcatLstm`     | all persons' features concatenated per step → LSTM → head              |
//! | `B3IndependentLstms` | per-person LSTM → per-person head; softmax scores averaged          |
//! | `B4PooledLstms`    | per-person LSTM → element-wise max over persons → scene LSTM → head   |
//! | `B1StaticPool`     | features averaged over persons and time → head                        |
//!
//! The head computes `z = tanh(W_zh·h + b_z)` (or the bare affine map with
//! `linear_logits`) followed by softmax. Training minimises `-ln y[label]` at
//! the last step, or its sum over steps with `cumulative_loss`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::co_lstm::{CoLstmParams, CoLstmState, CoLstmTape, GateOverride};
use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax, Matrix, Vector};
use crate::sp_lstm::{init_matrix, InitScheme, SpLstmParams, SpLstmState, SpLstmTape};
use crate::tensors::{impl_flat_tensors, prefixed, prefixed_mut, NamedMut, NamedRef, Tensors};

/// Probability floor applied before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArchVariant {
    HLstcm,
    TwoGroupHLstcm { groups: Vec<Group> },
    B2ConcatLstm,
    B3IndependentLstms,
    B4PooledLstms,
    B1StaticPool,
}

impl ArchVariant {
    /// Two-group variant with the first `ceil(p/2)` slots in group A.
    pub fn two_group_split(p: usize) -> Self {
        let a = p.div_ceil(2);
        ArchVariant::TwoGroupHLstcm { groups: (0..p).map(|s| if s < a { Group::A } else { Group::B }).collect() }
    }

    fn uses_person_lstms(&self) -> bool {
        matches!(
            self,
            ArchVariant::HLstcm
                | ArchVariant::TwoGroupHLstcm { .. }
                | ArchVariant::B3IndependentLstms
                | ArchVariant::B4PooledLstms
        )
    }
}

impl fmt::Display for ArchVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArchVariant::HLstcm => f.write_str("hlstcm"),
            ArchVariant::TwoGroupHLstcm { groups } => {
                let g: String = groups.iter().map(|g| if *g == Group::A { 'A' } else { 'B' }).collect();
                write!(f, "two-group:{g}")
            }
            ArchVariant::B2ConcatLstm => f.write_str("b2"),
            ArchVariant::B3IndependentLstms => f.write_str("b3"),
            ArchVariant::B4PooledLstms => f.write_str("b4"),
            ArchVariant::B1StaticPool => f.write_str("b1"),
        }
    }
}

/// Parses `hlstcm`, `b1`..`b4`, `two-group` or `two-group:AABB`. A bare
/// `two-group` carries no assignment yet; see [`HlstcmConfig::resolve_groups`].
impl FromStr for ArchVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "hlstcm" | "h-lstcm" => ArchVariant::HLstcm,
            "b1" => ArchVariant::B1StaticPool,
            "b2" => ArchVariant::B2ConcatLstm,
            "b3" => ArchVariant::B3IndependentLstms,
            "b4" => ArchVariant::B4PooledLstms,
            "two-group" | "twogroup" => ArchVariant::TwoGroupHLstcm { groups: Vec::new() },
            other => {
                let Some(spec) = other.strip_prefix("two-group:") else {
                    return Err(Error::Config(format!(
                        "unknown variant '{s}' (expected hlstcm, two-group[:AB..], b1, b2, b3 or b4)"
                    )));
                };
                let groups = spec
                    .chars()
                    .map(|c| match c {
                        'a' => Ok(Group::A),
                        'b' => Ok(Group::B),
                        _ => Err(Error::Config(format!("bad group letter '{c}' in '{s}'"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                ArchVariant::TwoGroupHLstcm { groups }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlstcmConfig {
    /// Person slots.
    pub p: usize,
    pub d_x: usize,
    /// Person-LSTM hidden size.
    pub d_sp: usize,
    /// Projection size between the layers; 0 feeds person hidden states directly.
    pub d_proj: usize,
    pub d_co: usize,
    /// Top LSTM size for the two-group variant.
    pub d_top: usize,
    /// Classes.
    pub k: usize,
    /// Sequence length.
    pub seq_len: usize,
    pub variant: ArchVariant,
    pub share_sp_params: bool,
    pub linear_logits: bool,
    pub cumulative_loss: bool,
}

impl Default for HlstcmConfig {
    fn default() -> Self {
        HlstcmConfig {
            p: 3,
            d_x: 16,
            d_sp: 32,
            d_proj: 16,
            d_co: 32,
            d_top: 32,
            k: 4,
            seq_len: 10,
            variant: ArchVariant::HLstcm,
            share_sp_params: false,
            linear_logits: false,
            cumulative_loss: false,
        }
    }
}

impl HlstcmConfig {
    /// Fills in a default group split for a bare `two-group` variant.
    pub fn resolve_groups(&mut self) {
        if let ArchVariant::TwoGroupHLstcm { groups } = &self.variant {
            if groups.is_empty() {
                self.variant = ArchVariant::two_group_split(self.p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("p", self.p),
            ("d_x", self.d_x),
            ("d_sp", self.d_sp),
            ("d_co", self.d_co),
            ("seq_len", self.seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if let ArchVariant::TwoGroupHLstcm { groups } = &self.variant {
            if groups.len() != self.p {
                return Err(Error::Config(format!(
                    "two-group assignment covers {} slots but p = {}",
                    groups.len(),
                    self.p
                )));
            }
            if !groups.contains(&Group::A) || !groups.contains(&Group::B) {
                return Err(Error::Config("two-group assignment needs both groups nonempty".into()));
            }
            if self.d_top == 0 {
                return Err(Error::Config("two-group variant needs d_top >= 1".into()));
            }
        }
        Ok(())
    }

    /// Every field as `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("p", self.p.to_string()),
            ("d_x", self.d_x.to_string()),
            ("d_sp", self.d_sp.to_string()),
            ("d_proj", self.d_proj.to_string()),
            ("d_co", self.d_co.to_string()),
            ("d_top", self.d_top.to_string()),
            ("k", self.k.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("variant", self.variant.to_string()),
            ("share_sp_params", self.share_sp_params.to_string()),
            ("linear_logits", self.linear_logits.to_string()),
            ("cumulative_loss", self.cumulative_loss.to_string()),
        ]
    }

    /// Sets one field from its textual form. Returns `Ok(false)` for a key
    /// this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "p" => self.p = parse_value(key, value)?,
            "d_x" => self.d_x = parse_value(key, value)?,
            "d_sp" => self.d_sp = parse_value(key, value)?,
            "d_proj" => self.d_proj = parse_value(key, value)?,
            "d_co" => self.d_co = parse_value(key, value)?,
            "d_top" => self.d_top = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "seq_len" => self.seq_len = parse_value(key, value)?,
            "variant" => self.variant = value.parse()?,
            "share_sp_params" => self.share_sp_params = parse_value(key, value)?,
            "linear_logits" => self.linear_logits = parse_value(key, value)?,
            "cumulative_loss" => self.cumulative_loss = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Width of the per-slot input to the concurrent LSTM.
    pub fn co_input_dim(&self) -> usize {
        if self.d_proj > 0 {
            self.d_proj
        } else {
            self.d_sp
        }
    }

    fn group_slots(&self, which: Group) -> Vec<usize> {
        match &self.variant {
            ArchVariant::TwoGroupHLstcm { groups } => {
                groups.iter().enumerate().filter(|(_, g)| **g == which).map(|(s, _)| s).collect()
            }
            _ => Vec::new(),
        }
    }

    fn person_lstm_count(&self) -> usize {
        if self.share_sp_params {
            1
        } else {
            self.p
        }
    }

    /// B1 is a plain linear classifier; every other head follows `linear_logits`.
    fn head_is_linear(&self) -> bool {
        self.linear_logits || self.variant == ArchVariant::B1StaticPool
    }

    fn sp_index(&self, slot: usize) -> usize {
        if self.share_sp_params {
            0
        } else {
            slot
        }
    }
}

/// Parses a config value, naming the key on failure.
pub fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e| Error::Config(format!("invalid value '{value}' for {key}: {e}")))
}

/// `tanh(W·h + b)` between the person LSTMs and the concurrent LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub w: Matrix,
    pub b: Vector,
}

impl_flat_tensors!(Projection { w: Matrix, b: Vector });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub w_zh: Matrix,
    pub b_z: Vector,
}

impl_flat_tensors!(Head { w_zh: Matrix, b_z: Vector });

impl Head {
    fn forward(&self, h: &Vector, linear: bool) -> (Vector, Vector) {
        let mut pre = self.b_z.clone();
        self.w_zh.matvec_acc(h, &mut pre);
        let z = if linear { pre } else { pre.map(f64::tanh) };
        let probs = softmax(&z);
        (z, probs)
    }

    /// Accumulates parameter gradients for an upstream `dL/dz`; returns `dL/dh`.
    fn backward(&self, h: &Vector, z: &Vector, dz: &Vector, linear: bool, grads: &mut Head) -> Vector {
        let dpre = if linear {
            dz.clone()
        } else {
            Vector::from_vec(dz.iter().zip(z.iter()).map(|(d, z)| d * (1.0 - z * z)).collect())
        };
        grads.w_zh.add_outer(&dpre, h);
        grads.b_z.add_assign(&dpre);
        self.w_zh.matvec_t(&dpre)
    }
}

/// Every trainable tensor of one model. Unused parts stay empty for a given
/// variant; gradients and optimizer velocities reuse this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HlstcmParams {
    /// One LSTM per slot, or a single shared one. B2 keeps its concatenated
    /// LSTM here.
    pub sp: Vec<SpLstmParams>,
    pub proj: Option<Projection>,
    /// One concurrent LSTM, or two for the two-group variant.
    pub co: Vec<CoLstmParams>,
    /// Top LSTM (two-group) or scene LSTM (B4).
    pub top: Option<SpLstmParams>,
    /// One head, or one per person for B3.
    pub heads: Vec<Head>,
}

pub type HlstcmGrads = HlstcmParams;

impl Tensors for HlstcmParams {
    fn tensors(&self) -> Vec<NamedRef<'_>> {
        let mut out = Vec::new();
        for (i, sp) in self.sp.iter().enumerate() {
            out.extend(prefixed(&format!("sp{i}"), sp.tensors()));
        }
        if let Some(p) = &self.proj {
            out.extend(prefixed("proj", p.tensors()));
        }
        for (i, co) in self.co.iter().enumerate() {
            out.extend(prefixed(&format!("co{i}"), co.tensors()));
        }
        if let Some(t) = &self.top {
            out.extend(prefixed("top", t.tensors()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            out.extend(prefixed(&format!("head{i}"), h.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<NamedMut<'_>> {
        let mut out = Vec::new();
        for (i, sp) in self.sp.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("sp{i}"), sp.tensors_mut()));
        }
        if let Some(p) = &mut self.proj {
            out.extend(prefixed_mut("proj", p.tensors_mut()));
        }
        for (i, co) in self.co.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("co{i}"), co.tensors_mut()));
        }
        if let Some(t) = &mut self.top {
            out.extend(prefixed_mut("top", t.tensors_mut()));
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("head{i}"), h.tensors_mut()));
        }
        out
    }
}

impl HlstcmParams {
    /// Seeded initialization; every tensor is drawn from one stream in
    /// declaration order.
    pub fn init(config: &HlstcmConfig, seed: u64) -> Result<Self> {
        Self::build(config, InitScheme::XavierUniform, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// All-zero parameters (zero forget bias included).
    pub fn zeros(config: &HlstcmConfig) -> Result<Self> {
        let p = Self::build(config, InitScheme::Zeros, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(p.zeros_like())
    }

    fn build(config: &HlstcmConfig, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = config;
        let head = |d_in: usize, rng: &mut ChaCha8Rng| Head {
            w_zh: init_matrix(c.k, d_in, scheme, rng),
            b_z: Vector::zeros(c.k),
        };

        let mut sp = Vec::new();
        let mut proj = None;
        let mut co = Vec::new();
        let mut top = None;
        let mut heads = Vec::new();
        match &c.variant {
            ArchVariant::HLstcm | ArchVariant::TwoGroupHLstcm { .. } => {
                for _ in 0..c.person_lstm_count() {
                    sp.push(SpLstmParams::init_with_rng(c.d_x, c.d_sp, scheme, rng)?);
                }
                if c.d_proj > 0 {
                    proj = Some(Projection { w: init_matrix(c.d_proj, c.d_sp, scheme, rng), b: Vector::zeros(c.d_proj) });
                }
                if c.variant == ArchVariant::HLstcm {
                    co.push(CoLstmParams::init_with_rng(c.p, c.co_input_dim(), c.d_co, scheme, rng)?);
                    heads.push(head(c.d_co, rng));
                } else {
                    for g in [Group::A, Group::B] {
                        let n = c.group_slots(g).len();
                        co.push(CoLstmParams::init_with_rng(n, c.co_input_dim(), c.d_co, scheme, rng)?);
                    }
                    top = Some(SpLstmParams::init_with_rng(2 * c.d_co, c.d_top, scheme, rng)?);
                    heads.push(head(c.d_top, rng));
                }
            }
            ArchVariant::B2ConcatLstm => {
                sp.push(SpLstmParams::init_with_rng(c.p * c.d_x, c.d_sp, scheme, rng)?);
                heads.push(head(c.d_sp, rng));
            }
            ArchVariant::B3IndependentLstms => {
                for _ in 0..c.person_lstm_count() {
                    sp.push(SpLstmParams::init_with_rng(c.d_x, c.d_sp, scheme, rng)?);
                }
                for _ in 0..c.person_lstm_count() {
                    heads.push(head(c.d_sp, rng));
                }
            }
            ArchVariant::B4PooledLstms => {
                for _ in 0..c.person_lstm_count() {
                    sp.push(SpLstmParams::init_with_rng(c.d_x, c.d_sp, scheme, rng)?);
                }
                top = Some(SpLstmParams::init_with_rng(c.d_sp, c.d_co, scheme, rng)?);
                heads.push(head(c.d_co, rng));
            }
            ArchVariant::B1StaticPool => {
                heads.push(head(c.d_x, rng));
            }
        }
        Ok(HlstcmParams { sp, proj, co, top, heads })
    }

    /// Checks every tensor shape against `config`.
    pub fn check_against(&self, config: &HlstcmConfig) -> Result<()> {
        let expected = Self::zeros(config)?;
        let want = expected.tensors();
        let have = self.tensors();
        if want.len() != have.len() {
            return Err(Error::Config(format!(
                "parameter bundle has {} tensors, configuration expects {}",
                have.len(),
                want.len()
            )));
        }
        for ((wn, wt), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || wt.dims() != ht.dims() {
                return Err(Error::Config(format!(
                    "tensor {hn} {:?} does not match expected {wn} {:?}",
                    ht.dims(),
                    wt.dims()
                )));
            }
        }
        Ok(())
    }
}

/// One clip: `features[slot][t]` per person, with absent slots zero-padded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub label: usize,
    pub features: Vec<Vec<Vector>>,
    pub present: Vec<bool>,
}

impl Sample {
    pub fn new(id: impl Into<String>, label: usize, features: Vec<Vec<Vector>>) -> Self {
        let present = vec![true; features.len()];
        Sample { id: id.into(), label, features, present }
    }

    pub fn seq_len(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn validate(&self, config: &HlstcmConfig) -> Result<()> {
        let err = |msg: String| Err(Error::Sample { id: self.id.clone(), msg });
        if self.features.len() != config.p || self.present.len() != config.p {
            return err(format!(
                "has {} person tracks and {} presence flags, model expects p = {}",
                self.features.len(),
                self.present.len(),
                config.p
            ));
        }
        if self.label >= config.k {
            return err(format!("label {} is outside 0..{}", self.label, config.k));
        }
        if !self.present.iter().any(|&b| b) {
            return err("no person slot is present".into());
        }
        for (s, track) in self.features.iter().enumerate() {
            if track.len() != config.seq_len {
                return err(format!("person {s} has {} steps, expected {}", track.len(), config.seq_len));
            }
            if let Some((t, v)) = track.iter().enumerate().find(|(_, v)| v.len() != config.d_x) {
                return err(format!("person {s} step {t} has dimension {}, expected {}", v.len(), config.d_x));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HeadRecord {
    head: usize,
    /// Slot feeding this head (B3), otherwise 0.
    slot: usize,
    h: Vector,
    z: Vector,
    probs: Vector,
}

/// Classifier output at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub t: usize,
    pub probs: Vector,
    heads: Vec<HeadRecord>,
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTape {
    pub steps: usize,
    variant: ArchVariant,
    present: Vec<bool>,
    sp: Vec<SpLstmTape>,
    /// Projected person states `[slot][t]`.
    proj_out: Vec<Vec<Vector>>,
    co: Vec<CoLstmTape>,
    top: Option<SpLstmTape>,
    /// B4: winning slot per step and element.
    pool_argmax: Vec<Vec<usize>>,
    /// B1 pooled feature.
    pooled: Option<Vector>,
    pub outputs: Vec<StepOutput>,
}

impl ModelTape {
    /// Class probabilities at the last evaluated step.
    pub fn probs(&self) -> &Vector {
        &self.outputs.last().expect("tape has outputs").probs
    }

    /// Training objective: last-step loss, or the sum over every recorded step.
    pub fn objective(&self, label: usize) -> f64 {
        self.outputs.iter().map(|o| loss(&o.probs, label)).sum()
    }
}

/// `-ln probs[label]`, with `probs[label]` floored at [`PROB_FLOOR`].
pub fn loss(probs: &Vector, label: usize) -> f64 {
    loss_checked(probs, label).0
}

/// Like [`loss`], also reporting whether the floor was hit.
pub fn loss_checked(probs: &Vector, label: usize) -> (f64, bool) {
    let p = probs[label];
    if p <= 0.0 {
        (-PROB_FLOOR.ln(), true)
    } else {
        // -ln(1) is -0.0; normalize so the loss is never negative zero.
        (-(p.max(PROB_FLOOR).ln()) + 0.0, false)
    }
}

/// Argmax, lowest index on ties.
pub fn predict(probs: &Vector) -> usize {
    argmax(probs)
}

pub fn forward(params: &HlstcmParams, config: &HlstcmConfig, sample: &Sample) -> Result<(Vector, ModelTape)> {
    sample.validate(config)?;
    let tape = run(params, config, sample, config.seq_len, GateOverride::None);
    Ok((tape.probs().clone(), tape))
}

/// Forward with the concurrent-LSTM cell gates overridden. Test hook only.
#[doc(hidden)]
pub fn forward_with_gate_override(
    params: &HlstcmParams,
    config: &HlstcmConfig,
    sample: &Sample,
    gate_override: GateOverride,
) -> Result<(Vector, ModelTape)> {
    sample.validate(config)?;
    let tape = run(params, config, sample, config.seq_len, gate_override);
    Ok((tape.probs().clone(), tape))
}

/// Steps consumed at observation ratio `ratio`: `ceil(ratio · T)`.
pub fn observed_steps(ratio: f64, seq_len: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("observation ratio must lie in (0, 1], got {ratio}")));
    }
    // 0.3 * 10 must give 3 even though the product rounds above 3.
    let n = (ratio * seq_len as f64 - 1e-9).ceil() as usize;
    Ok(n.clamp(1, seq_len))
}

/// Classifies from the first `ceil(ratio · T)` steps only.
pub fn forward_partial(params: &HlstcmParams, config: &HlstcmConfig, sample: &Sample, ratio: f64) -> Result<Vector> {
    sample.validate(config)?;
    let n = observed_steps(ratio, config.seq_len)?;
    let tape = run(params, config, sample, n, GateOverride::None);
    Ok(tape.probs().clone())
}

fn run(params: &HlstcmParams, config: &HlstcmConfig, sample: &Sample, n: usize, ov: GateOverride) -> ModelTape {
    let c = config;
    let feats: Vec<&[Vector]> = sample.features.iter().map(|f| &f[..n]).collect();
    let mut tape = ModelTape {
        steps: n,
        variant: c.variant.clone(),
        present: sample.present.clone(),
        sp: Vec::new(),
        proj_out: Vec::new(),
        co: Vec::new(),
        top: None,
        pool_argmax: Vec::new(),
        pooled: None,
        outputs: Vec::new(),
    };

    let person_hidden: Vec<Vec<Vector>> = if c.variant.uses_person_lstms() {
        feats
            .iter()
            .enumerate()
            .map(|(s, xs)| {
                let lstm = &params.sp[c.sp_index(s)];
                let (_, t) = lstm.forward_seq(xs, &SpLstmState::zeros(c.d_sp));
                let hs = t.hidden();
                tape.sp.push(t);
                hs
            })
            .collect()
    } else {
        Vec::new()
    };

    let co_inputs = |tape: &mut ModelTape| -> Vec<Vec<Vector>> {
        let inputs: Vec<Vec<Vector>> = match &params.proj {
            Some(pr) => person_hidden
                .iter()
                .map(|hs| {
                    hs.iter()
                        .map(|h| {
                            let mut v = pr.b.clone();
                            pr.w.matvec_acc(h, &mut v);
                            v.map(f64::tanh)
                        })
                        .collect()
                })
                .collect(),
            None => person_hidden.clone(),
        };
        tape.proj_out = inputs.clone();
        inputs
    };

    // Top-level hidden sequence feeding the single head, for every variant but B1/B3.
    let top_seq: Option<Vec<Vector>> = match &c.variant {
        ArchVariant::HLstcm => {
            let inputs = co_inputs(&mut tape);
            let co = &params.co[0];
            let (hs, t) = co.forward_seq_masked(&inputs, &sample.present, &CoLstmState::zeros(c.p, c.d_co), ov);
            tape.co.push(t);
            Some(hs)
        }
        ArchVariant::TwoGroupHLstcm { .. } => {
            let inputs = co_inputs(&mut tape);
            let mut group_hs = Vec::new();
            for (gi, g) in [Group::A, Group::B].into_iter().enumerate() {
                let slots = c.group_slots(g);
                let sub: Vec<Vec<Vector>> = slots.iter().map(|&s| inputs[s].clone()).collect();
                let present: Vec<bool> = slots.iter().map(|&s| sample.present[s]).collect();
                let co = &params.co[gi];
                let (hs, t) = co.forward_seq_masked(&sub, &present, &CoLstmState::zeros(slots.len(), c.d_co), ov);
                tape.co.push(t);
                group_hs.push(hs);
            }
            let joined: Vec<Vector> = (0..n).map(|t| Vector::concat(&[&group_hs[0][t], &group_hs[1][t]])).collect();
            let top = params.top.as_ref().expect("two-group model has a top LSTM");
            let (_, t) = top.forward_seq(&joined, &SpLstmState::zeros(c.d_top));
            let hs = t.hidden();
            tape.top = Some(t);
            Some(hs)
        }
        ArchVariant::B2ConcatLstm => {
            let xs: Vec<Vector> = (0..n).map(|t| Vector::concat(&feats.iter().map(|f| &f[t]).collect::<Vec<_>>())).collect();
            let (_, t) = params.sp[0].forward_seq(&xs, &SpLstmState::zeros(c.d_sp));
            let hs = t.hidden();
            tape.sp.push(t);
            Some(hs)
        }
        ArchVariant::B4PooledLstms => {
            let mut pooled = Vec::with_capacity(n);
            for t in 0..n {
                let mut best = vec![usize::MAX; c.d_sp];
                let mut v = Vector::filled(c.d_sp, f64::NEG_INFINITY);
                for (s, hs) in person_hidden.iter().enumerate() {
                    if !sample.present[s] {
                        continue;
                    }
                    for k in 0..c.d_sp {
                        if hs[t][k] > v[k] {
                            v[k] = hs[t][k];
                            best[k] = s;
                        }
                    }
                }
                tape.pool_argmax.push(best);
                pooled.push(v);
            }
            let top = params.top.as_ref().expect("B4 model has a scene LSTM");
            let (_, t) = top.forward_seq(&pooled, &SpLstmState::zeros(c.d_co));
            let hs = t.hidden();
            tape.top = Some(t);
            Some(hs)
        }
        ArchVariant::B3IndependentLstms | ArchVariant::B1StaticPool => None,
    };

    let classified: Vec<usize> = if c.cumulative_loss && c.variant != ArchVariant::B1StaticPool {
        (0..n).collect()
    } else {
        vec![n - 1]
    };

    match &c.variant {
        ArchVariant::B1StaticPool => {
            let mut sum = Vector::zeros(c.d_x);
            let mut count = 0usize;
            for (s, f) in feats.iter().enumerate() {
                if sample.present[s] {
                    for x in f.iter() {
                        sum.add_assign(x);
                        count += 1;
                    }
                }
            }
            let pooled = sum.scale(1.0 / count as f64);
            let (z, probs) = params.heads[0].forward(&pooled, c.head_is_linear());
            tape.outputs.push(StepOutput {
                t: n - 1,
                probs: probs.clone(),
                heads: vec![HeadRecord { head: 0, slot: 0, h: pooled.clone(), z, probs }],
            });
            tape.pooled = Some(pooled);
        }
        ArchVariant::B3IndependentLstms => {
            let active: Vec<usize> = (0..c.p).filter(|&s| sample.present[s]).collect();
            for &t in &classified {
                let mut mean = Vector::zeros(c.k);
                let mut heads = Vec::new();
                for &s in &active {
                    let hi = c.sp_index(s);
                    let h = person_hidden[s][t].clone();
                    let (z, probs) = params.heads[hi].forward(&h, c.head_is_linear());
                    mean.add_assign(&probs);
                    heads.push(HeadRecord { head: hi, slot: s, h, z, probs });
                }
                tape.outputs.push(StepOutput { t, probs: mean.scale(1.0 / active.len() as f64), heads });
            }
        }
        _ => {
            let hs = top_seq.expect("variant produces a top-level sequence");
            for &t in &classified {
                let (z, probs) = params.heads[0].forward(&hs[t], c.head_is_linear());
                tape.outputs.push(StepOutput {
                    t,
                    probs: probs.clone(),
                    heads: vec![HeadRecord { head: 0, slot: 0, h: hs[t].clone(), z, probs }],
                });
            }
        }
    }
    tape
}

/// Exact gradient of [`ModelTape::objective`] with respect to every tensor.
pub fn backward(params: &HlstcmParams, config: &HlstcmConfig, tape: &ModelTape, label: usize) -> Result<HlstcmGrads> {
    let c = config;
    if tape.variant != c.variant {
        return Err(Error::Config(format!("tape was recorded for variant {} but config is {}", tape.variant, c.variant)));
    }
    if label >= c.k {
        return Err(Error::Config(format!("label {label} is outside 0..{}", c.k)));
    }
    let n = tape.steps;
    let mut grads = params.zeros_like();

    // dL/dh for the top-level sequence, or per slot for B3.
    let mut d_top = vec![Vector::zeros(0); n];
    let mut d_person: Vec<Vec<Vector>> = vec![vec![Vector::zeros(c.d_sp); n]; c.p];

    for out in &tape.outputs {
        if c.variant == ArchVariant::B3IndependentLstms {
            // L = -ln(mean_s y_s[l]); dL/dz_s = (y_s[l] / (m · ybar[l])) (y_s - e_l)
            let m = out.heads.len() as f64;
            let ybar = out.probs[label].max(PROB_FLOOR);
            for rec in &out.heads {
                let w = rec.probs[label] / (m * ybar);
                let dz = Vector::from_vec(
                    rec.probs.iter().enumerate().map(|(j, &y)| w * (y - if j == label { 1.0 } else { 0.0 })).collect(),
                );
                let dh = params.heads[rec.head].backward(&rec.h, &rec.z, &dz, c.head_is_linear(), &mut grads.heads[rec.head]);
                d_person[rec.slot][out.t].add_assign(&dh);
            }
        } else {
            let rec = &out.heads[0];
            let mut dz = rec.probs.clone();
            dz[label] -= 1.0;
            let dh = params.heads[0].backward(&rec.h, &rec.z, &dz, c.head_is_linear(), &mut grads.heads[0]);
            if c.variant == ArchVariant::B1StaticPool {
                continue;
            }
            if d_top[out.t].is_empty() {
                d_top[out.t] = dh;
            } else {
                d_top[out.t].add_assign(&dh);
            }
        }
    }
    let top_width = match &c.variant {
        ArchVariant::HLstcm | ArchVariant::B4PooledLstms => c.d_co,
        ArchVariant::TwoGroupHLstcm { .. } => c.d_top,
        ArchVariant::B2ConcatLstm => c.d_sp,
        _ => 0,
    };
    for d in d_top.iter_mut().filter(|d| d.is_empty()) {
        *d = Vector::zeros(top_width);
    }

    // Gradient arriving at each slot's concurrent-LSTM input, if any.
    let mut d_co_in: Option<Vec<Vec<Vector>>> = None;
    match &c.variant {
        ArchVariant::B1StaticPool | ArchVariant::B3IndependentLstms => {}
        ArchVariant::HLstcm => {
            let (g, d_in) = params.co[0].backward_seq(&tape.co[0], &d_top);
            grads.co[0] = g;
            d_co_in = Some(d_in);
        }
        ArchVariant::TwoGroupHLstcm { .. } => {
            let top = params.top.as_ref().expect("two-group model has a top LSTM");
            let top_tape = tape.top.as_ref().expect("two-group tape has a top LSTM");
            let (g, d_joined) = top.backward_seq(top_tape, &d_top, &Vector::zeros(c.d_top));
            grads.top = Some(g);
            let mut d_in = vec![vec![Vector::zeros(c.co_input_dim()); n]; c.p];
            for (gi, grp) in [Group::A, Group::B].into_iter().enumerate() {
                let slots = c.group_slots(grp);
                let range = gi * c.d_co..(gi + 1) * c.d_co;
                let dh: Vec<Vector> = d_joined.iter().map(|d| Vector::from_vec(d.as_slice()[range.clone()].to_vec())).collect();
                let (g, d_sub) = params.co[gi].backward_seq(&tape.co[gi], &dh);
                grads.co[gi] = g;
                for (j, &s) in slots.iter().enumerate() {
                    d_in[s] = d_sub[j].clone();
                }
            }
            d_co_in = Some(d_in);
        }
        ArchVariant::B2ConcatLstm => {
            let (g, _) = params.sp[0].backward_seq(&tape.sp[0], &d_top, &Vector::zeros(c.d_sp));
            grads.sp[0] = g;
        }
        ArchVariant::B4PooledLstms => {
            let top = params.top.as_ref().expect("B4 model has a scene LSTM");
            let top_tape = tape.top.as_ref().expect("B4 tape has a scene LSTM");
            let (g, d_pooled) = top.backward_seq(top_tape, &d_top, &Vector::zeros(c.d_co));
            grads.top = Some(g);
            for (t, dp) in d_pooled.iter().enumerate() {
                for (k, &s) in tape.pool_argmax[t].iter().enumerate() {
                    d_person[s][t][k] += dp[k];
                }
            }
        }
    }

    if let Some(d_in) = d_co_in {
        match &params.proj {
            Some(pr) => {
                let gp = grads.proj.as_mut().expect("projection gradient");
                for s in 0..c.p {
                    for t in 0..n {
                        let u = &tape.proj_out[s][t];
                        let dpre = Vector::from_vec(d_in[s][t].iter().zip(u.iter()).map(|(d, u)| d * (1.0 - u * u)).collect());
                        gp.w.add_outer(&dpre, &tape.sp[s].steps[t].h);
                        gp.b.add_assign(&dpre);
                        d_person[s][t] = pr.w.matvec_t(&dpre);
                    }
                }
            }
            None => d_person = d_in,
        }
    }

    if c.variant.uses_person_lstms() {
        for s in 0..c.p {
            let idx = c.sp_index(s);
            let (g, _) = params.sp[idx].backward_seq(&tape.sp[s], &d_person[s], &Vector::zeros(c.d_sp));
            grads.sp[idx].add_scaled(&g, 1.0);
        }
    }
    Ok(grads)
}

/// Convenience: forward, objective and gradient for one sample.
pub fn loss_and_grad(params: &HlstcmParams, config: &HlstcmConfig, sample: &Sample) -> Result<(f64, Vector, HlstcmGrads)> {
    let (probs, tape) = forward(params, config, sample)?;
    let grads = backward(params, config, &tape, sample.label)?;
    Ok((tape.objective(sample.label), probs, grads))
}

/// Random sample conforming to `config`, for tests and gradient checks.
pub fn random_sample(config: &HlstcmConfig, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features = (0..config.p)
        .map(|_| {
            (0..config.seq_len)
                .map(|_| Vector::from_vec((0..config.d_x).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect()
        })
        .collect();
    Sample::new(format!("random-{seed}"), rng.gen_range(0..config.k), features)
}

pub(crate) mod precise;

//! Concurrent LSTM: one sub-memory unit per person slot, a cell gate per slot
//! deciding how much of that sub-cell enters a shared co-memory cell, and one
//! output gate producing a common hidden state.
//!
//! Per step, for each slot `s` with input `a_s` (the person's hidden state
//! from the layer below) and the previous common hidden state `h'`:
//!
//! ```text
//! i_s, f_s = σ(W_*x_s·a_s + W_*h_s·h' + b_*_s)      g_s = tanh(…)
//! c_s      = f_s ⊙ c_s' + i_s ⊙ g_s
//! π_s      = σ(W_πin_s·a_s + W_πrec·h' + b_π)
//! c        = Σ_s π_s ⊙ c_s
//! o        = σ(Σ_s W_ox_s·a_s + W_oh·h' + b_o)
//! h        = o ⊙ tanh(c)
//! ```
//!
//! `W_πrec`, `b_π`, `W_oh` and `b_o` exist once and are shared by all slots.
//! The co-memory `c` is rebuilt from the sub-cells every step; only the
//! sub-cells and `h` are carried forward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Matrix, Vector};
use crate::sp_lstm::{affine2, init_matrix, InitScheme};
use crate::tensors::{impl_flat_tensors, prefixed, prefixed_mut, NamedMut, NamedRef, TensorMut, TensorRef, Tensors};

/// Private weights of one sub-memory unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoSlotParams {
    pub w_ix: Matrix,
    pub w_ih: Matrix,
    pub w_fx: Matrix,
    pub w_fh: Matrix,
    pub w_gx: Matrix,
    pub w_gh: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_g: Vector,
    /// Cell-gate weight on this slot's input.
    pub w_pi_in: Matrix,
    /// This slot's term in the shared output gate.
    pub w_ox: Matrix,
}

impl_flat_tensors!(CoSlotParams {
    w_ix: Matrix, w_ih: Matrix, w_fx: Matrix, w_fh: Matrix, w_gx: Matrix, w_gh: Matrix,
    b_i: Vector, b_f: Vector, b_g: Vector, w_pi_in: Matrix, w_ox: Matrix,
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoLstmParams {
    pub slots: Vec<CoSlotParams>,
    /// Cell-gate weight on the previous common hidden state.
    pub w_pi_rec: Matrix,
    pub b_pi: Vector,
    pub w_oh: Matrix,
    pub b_o: Vector,
}

pub type CoLstmGrads = CoLstmParams;

impl Tensors for CoLstmParams {
    fn tensors(&self) -> Vec<NamedRef<'_>> {
        let mut out = Vec::new();
        for (s, slot) in self.slots.iter().enumerate() {
            out.extend(prefixed(&format!("slot{s}"), slot.tensors()));
        }
        out.push(("w_pi_rec".into(), TensorRef::Matrix(&self.w_pi_rec)));
        out.push(("b_pi".into(), TensorRef::Vector(&self.b_pi)));
        out.push(("w_oh".into(), TensorRef::Matrix(&self.w_oh)));
        out.push(("b_o".into(), TensorRef::Vector(&self.b_o)));
        out
    }

    fn tensors_mut(&mut self) -> Vec<NamedMut<'_>> {
        let mut out = Vec::new();
        for (s, slot) in self.slots.iter_mut().enumerate() {
            out.extend(prefixed_mut(&format!("slot{s}"), slot.tensors_mut()));
        }
        out.push(("w_pi_rec".into(), TensorMut::Matrix(&mut self.w_pi_rec)));
        out.push(("b_pi".into(), TensorMut::Vector(&mut self.b_pi)));
        out.push(("w_oh".into(), TensorMut::Matrix(&mut self.w_oh)));
        out.push(("b_o".into(), TensorMut::Vector(&mut self.b_o)));
        out
    }
}

/// Test hook replacing the cell gates. Never set on the training path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateOverride {
    #[default]
    None,
    /// Every `π_s` becomes the all-ones vector.
    ClampCellGatesToOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoLstmState {
    pub sub_cells: Vec<Vector>,
    pub h: Vector,
}

impl CoLstmState {
    pub fn zeros(slots: usize, d_co: usize) -> Self {
        CoLstmState { sub_cells: vec![Vector::zeros(d_co); slots], h: Vector::zeros(d_co) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoSlotStep {
    pub i: Vector,
    pub f: Vector,
    pub g: Vector,
    pub c_prev: Vector,
    pub c: Vector,
    pub pi: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoLstmStep {
    pub inputs: Vec<Vector>,
    pub h_prev: Vector,
    pub slots: Vec<CoSlotStep>,
    /// Co-memory cell.
    pub c: Vector,
    pub tanh_c: Vector,
    pub o: Vector,
    pub h: Vector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoLstmTape {
    pub steps: Vec<CoLstmStep>,
    pub present: Vec<bool>,
    pub gate_override: GateOverride,
}

impl CoLstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

impl CoLstmParams {
    pub fn init(slots: usize, d_in: usize, d_co: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(slots, d_in, d_co, InitScheme::XavierUniform, &mut rng)
    }

    pub fn init_with_rng(
        slots: usize,
        d_in: usize,
        d_co: usize,
        scheme: InitScheme,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if slots == 0 {
            return Err(Error::Config("concurrent LSTM needs at least one slot".into()));
        }
        if d_in == 0 || d_co == 0 {
            return Err(Error::Config(format!(
                "concurrent LSTM dimensions must be positive (d_in={d_in}, d_co={d_co})"
            )));
        }
        let slot_params = (0..slots)
            .map(|_| {
                let mut mx = || init_matrix(d_co, d_in, scheme, rng);
                let (w_ix, w_fx, w_gx, w_pi_in, w_ox) = (mx(), mx(), mx(), mx(), mx());
                let mut mh = || init_matrix(d_co, d_co, scheme, rng);
                let (w_ih, w_fh, w_gh) = (mh(), mh(), mh());
                CoSlotParams {
                    w_ix,
                    w_ih,
                    w_fx,
                    w_fh,
                    w_gx,
                    w_gh,
                    b_i: Vector::zeros(d_co),
                    b_f: Vector::filled(d_co, 1.0),
                    b_g: Vector::zeros(d_co),
                    w_pi_in,
                    w_ox,
                }
            })
            .collect();
        let w_pi_rec = init_matrix(d_co, d_co, scheme, rng);
        let w_oh = init_matrix(d_co, d_co, scheme, rng);
        Ok(CoLstmParams { slots: slot_params, w_pi_rec, b_pi: Vector::zeros(d_co), w_oh, b_o: Vector::zeros(d_co) })
    }

    pub fn zeros(slots: usize, d_in: usize, d_co: usize) -> Self {
        let mx = || Matrix::zeros(d_co, d_in);
        let mh = || Matrix::zeros(d_co, d_co);
        let slot = CoSlotParams {
            w_ix: mx(),
            w_ih: mh(),
            w_fx: mx(),
            w_fh: mh(),
            w_gx: mx(),
            w_gh: mh(),
            b_i: Vector::zeros(d_co),
            b_f: Vector::zeros(d_co),
            b_g: Vector::zeros(d_co),
            w_pi_in: mx(),
            w_ox: mx(),
        };
        CoLstmParams { slots: vec![slot; slots], w_pi_rec: mh(), b_pi: Vector::zeros(d_co), w_oh: mh(), b_o: Vector::zeros(d_co) }
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn input_dim(&self) -> usize {
        self.slots[0].w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_oh.rows()
    }

    pub fn forward_step(
        &self,
        inputs: &[Vector],
        prev: &CoLstmState,
        gate_override: GateOverride,
    ) -> (CoLstmState, CoLstmStep) {
        self.forward_step_masked(inputs, &vec![true; self.num_slots()], prev, gate_override)
    }

    /// One step with a slot-occupancy mask. Absent slots get `π_s = 0` and
    /// drop their output-gate term, so they contribute nothing to `c` or `o`.
    ///
    /// Panics on a wrong slot count or input dimension.
    pub fn forward_step_masked(
        &self,
        inputs: &[Vector],
        present: &[bool],
        prev: &CoLstmState,
        gate_override: GateOverride,
    ) -> (CoLstmState, CoLstmStep) {
        let (p, d_in, d_co) = (self.num_slots(), self.input_dim(), self.hidden_dim());
        assert!(
            inputs.len() == p && present.len() == p && prev.sub_cells.len() == p,
            "shape mismatch in concurrent LSTM step: expected {p} slots, got {} inputs, {} mask entries, {} sub-cells",
            inputs.len(),
            present.len(),
            prev.sub_cells.len()
        );
        for (s, a) in inputs.iter().enumerate() {
            assert!(
                a.len() == d_in && prev.sub_cells[s].len() == d_co,
                "shape mismatch in concurrent LSTM step: slot {s} expected input[{d_in}] and cell[{d_co}], got input[{}] and cell[{}]",
                a.len(),
                prev.sub_cells[s].len()
            );
        }
        assert_eq!(prev.h.len(), d_co, "shape mismatch in concurrent LSTM step: hidden state");

        // Shared recurrent part of every cell gate.
        let pi_rec = {
            let mut v = self.b_pi.clone();
            self.w_pi_rec.matvec_acc(&prev.h, &mut v);
            v
        };
        let mut o_pre = self.b_o.clone();
        self.w_oh.matvec_acc(&prev.h, &mut o_pre);

        let mut c = Vector::zeros(d_co);
        let mut slot_steps = Vec::with_capacity(p);
        for (s, (w, a)) in self.slots.iter().zip(inputs).enumerate() {
            let i = affine2(&w.w_ix, a, &w.w_ih, &prev.h, &w.b_i).map(sigmoid_scalar);
            let f = affine2(&w.w_fx, a, &w.w_fh, &prev.h, &w.b_f).map(sigmoid_scalar);
            let g = affine2(&w.w_gx, a, &w.w_gh, &prev.h, &w.b_g).map(f64::tanh);
            let c_prev = &prev.sub_cells[s];
            let c_s = Vector::from_vec((0..d_co).map(|k| f[k] * c_prev[k] + i[k] * g[k]).collect());
            let pi = if !present[s] {
                Vector::zeros(d_co)
            } else if gate_override == GateOverride::ClampCellGatesToOne {
                Vector::filled(d_co, 1.0)
            } else {
                let mut pre = pi_rec.clone();
                w.w_pi_in.matvec_acc(a, &mut pre);
                pre.map(sigmoid_scalar)
            };
            for k in 0..d_co {
                c[k] += pi[k] * c_s[k];
            }
            if present[s] {
                w.w_ox.matvec_acc(a, &mut o_pre);
            }
            slot_steps.push(CoSlotStep { i, f, g, c_prev: c_prev.clone(), c: c_s, pi });
        }
        let o = o_pre.map(sigmoid_scalar);
        let tanh_c = c.map(f64::tanh);
        let h = Vector::from_vec((0..d_co).map(|k| o[k] * tanh_c[k]).collect());
        let state = CoLstmState { sub_cells: slot_steps.iter().map(|s| s.c.clone()).collect(), h: h.clone() };
        let step = CoLstmStep { inputs: inputs.to_vec(), h_prev: prev.h.clone(), slots: slot_steps, c, tanh_c, o, h };
        (state, step)
    }

    pub fn forward_seq(
        &self,
        input_seqs: &[Vec<Vector>],
        init: &CoLstmState,
        gate_override: GateOverride,
    ) -> (Vec<Vector>, CoLstmTape) {
        self.forward_seq_masked(input_seqs, &vec![true; self.num_slots()], init, gate_override)
    }

    /// Unrolls over `input_seqs[s][t]`. Panics on ragged or empty sequences.
    pub fn forward_seq_masked(
        &self,
        input_seqs: &[Vec<Vector>],
        present: &[bool],
        init: &CoLstmState,
        gate_override: GateOverride,
    ) -> (Vec<Vector>, CoLstmTape) {
        assert_eq!(
            input_seqs.len(),
            self.num_slots(),
            "concurrent LSTM expects {} input sequences, got {}",
            self.num_slots(),
            input_seqs.len()
        );
        let t_len = input_seqs[0].len();
        assert!(t_len > 0, "concurrent LSTM forward over an empty sequence");
        assert!(
            input_seqs.iter().all(|s| s.len() == t_len),
            "ragged input sequences: lengths {:?}",
            input_seqs.iter().map(Vec::len).collect::<Vec<_>>()
        );
        let mut tape = CoLstmTape { steps: Vec::with_capacity(t_len), present: present.to_vec(), gate_override };
        let mut hs = Vec::with_capacity(t_len);
        let mut state = init.clone();
        for t in 0..t_len {
            let inputs: Vec<Vector> = input_seqs.iter().map(|s| s[t].clone()).collect();
            let (next, step) = self.forward_step_masked(&inputs, present, &state, gate_override);
            hs.push(next.h.clone());
            tape.steps.push(step);
            state = next;
        }
        (hs, tape)
    }

    /// Reverse-mode gradients over a recorded unroll.
    ///
    /// Returns the parameter gradients and `d_inputs[s][t]`, the gradient for
    /// slot `s`'s input at step `t`. Backward carries the common hidden-state
    /// gradient plus one sub-cell gradient per slot; the co-memory feeds each
    /// sub-cell through `π_s` and each cell gate through `c_s`.
    pub fn backward_seq(&self, tape: &CoLstmTape, dh_seq: &[Vector]) -> (CoLstmGrads, Vec<Vec<Vector>>) {
        assert!(!tape.is_empty(), "concurrent LSTM backward over an empty tape");
        assert_eq!(
            tape.len(),
            dh_seq.len(),
            "concurrent LSTM backward: tape has {} steps but {} hidden-state gradients were given",
            tape.len(),
            dh_seq.len()
        );
        let (p, d_in, d_co) = (self.num_slots(), self.input_dim(), self.hidden_dim());
        let t_len = tape.len();
        let mut grads = CoLstmParams::zeros(p, d_in, d_co);
        let mut d_inputs = vec![vec![Vector::zeros(d_in); t_len]; p];
        let mut dh_next = Vector::zeros(d_co);
        let mut dc_sub_next = vec![Vector::zeros(d_co); p];
        let pi_trainable = tape.gate_override == GateOverride::None;

        for (t, step) in tape.steps.iter().enumerate().rev() {
            let dh = dh_seq[t].add(&dh_next);
            let mut dc = Vector::zeros(d_co);
            let mut do_pre = Vector::zeros(d_co);
            for k in 0..d_co {
                dc[k] = dh[k] * step.o[k] * (1.0 - step.tanh_c[k] * step.tanh_c[k]);
                do_pre[k] = dh[k] * step.tanh_c[k] * step.o[k] * (1.0 - step.o[k]);
            }
            let mut dh_prev = Vector::zeros(d_co);
            grads.w_oh.add_outer(&do_pre, &step.h_prev);
            grads.b_o.add_assign(&do_pre);
            self.w_oh.matvec_t_acc(&do_pre, &mut dh_prev);

            for (s, w) in self.slots.iter().enumerate() {
                let rec = &step.slots[s];
                let a = &step.inputs[s];
                let gw = &mut grads.slots[s];
                let mut da = Vector::zeros(d_in);

                let mut dpi_pre = Vector::zeros(d_co);
                let mut di = Vector::zeros(d_co);
                let mut df = Vector::zeros(d_co);
                let mut dg = Vector::zeros(d_co);
                for k in 0..d_co {
                    if pi_trainable && tape.present[s] {
                        let dpi = dc[k] * rec.c[k];
                        dpi_pre[k] = dpi * rec.pi[k] * (1.0 - rec.pi[k]);
                    }
                    let dcs = dc[k] * rec.pi[k] + dc_sub_next[s][k];
                    di[k] = dcs * rec.g[k] * rec.i[k] * (1.0 - rec.i[k]);
                    df[k] = dcs * rec.c_prev[k] * rec.f[k] * (1.0 - rec.f[k]);
                    dg[k] = dcs * rec.i[k] * (1.0 - rec.g[k] * rec.g[k]);
                    dc_sub_next[s][k] = dcs * rec.f[k];
                }

                gw.w_ix.add_outer(&di, a);
                gw.w_fx.add_outer(&df, a);
                gw.w_gx.add_outer(&dg, a);
                gw.w_ih.add_outer(&di, &step.h_prev);
                gw.w_fh.add_outer(&df, &step.h_prev);
                gw.w_gh.add_outer(&dg, &step.h_prev);
                gw.b_i.add_assign(&di);
                gw.b_f.add_assign(&df);
                gw.b_g.add_assign(&dg);
                w.w_ix.matvec_t_acc(&di, &mut da);
                w.w_fx.matvec_t_acc(&df, &mut da);
                w.w_gx.matvec_t_acc(&dg, &mut da);
                w.w_ih.matvec_t_acc(&di, &mut dh_prev);
                w.w_fh.matvec_t_acc(&df, &mut dh_prev);
                w.w_gh.matvec_t_acc(&dg, &mut dh_prev);

                gw.w_pi_in.add_outer(&dpi_pre, a);
                grads.w_pi_rec.add_outer(&dpi_pre, &step.h_prev);
                grads.b_pi.add_assign(&dpi_pre);
                w.w_pi_in.matvec_t_acc(&dpi_pre, &mut da);
                self.w_pi_rec.matvec_t_acc(&dpi_pre, &mut dh_prev);

                if tape.present[s] {
                    grads.slots[s].w_ox.add_outer(&do_pre, a);
                    w.w_ox.matvec_t_acc(&do_pre, &mut da);
                }
                d_inputs[s][t] = da;
            }
            dh_next = dh_prev;
        }
        (grads, d_inputs)
    }
}

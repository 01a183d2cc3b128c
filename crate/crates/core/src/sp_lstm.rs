//! Standard LSTM unit used for each person's track (and for the baselines):
//! one forward step, a full unroll that records a tape, and exact BPTT over
//! that tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_scalar, Matrix, Vector};
use crate::tensors::impl_flat_tensors;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InitScheme {
    /// Uniform in `[-r, r]`, `r = sqrt(6 / (fan_in + fan_out))`.
    #[default]
    XavierUniform,
    Zeros,
}

pub(crate) fn init_matrix(rows: usize, cols: usize, scheme: InitScheme, rng: &mut impl Rng) -> Matrix {
    match scheme {
        InitScheme::Zeros => Matrix::zeros(rows, cols),
        InitScheme::XavierUniform => {
            let r = (6.0 / (rows + cols) as f64).sqrt();
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-r..=r)).collect())
        }
    }
}

/// Gate weights of one LSTM. Input-side matrices are `d_h x d_x`, recurrent
/// ones `d_h x d_h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpLstmParams {
    pub w_ix: Matrix,
    pub w_ih: Matrix,
    pub w_fx: Matrix,
    pub w_fh: Matrix,
    pub w_ox: Matrix,
    pub w_oh: Matrix,
    pub w_gx: Matrix,
    pub w_gh: Matrix,
    pub b_i: Vector,
    pub b_f: Vector,
    pub b_o: Vector,
    pub b_g: Vector,
}

impl_flat_tensors!(SpLstmParams {
    w_ix: Matrix, w_ih: Matrix, w_fx: Matrix, w_fh: Matrix,
    w_ox: Matrix, w_oh: Matrix, w_gx: Matrix, w_gh: Matrix,
    b_i: Vector, b_f: Vector, b_o: Vector, b_g: Vector,
});

/// Gradients share the parameter layout.
pub type SpLstmGrads = SpLstmParams;

#[derive(Debug, Clone, PartialEq)]
pub struct SpLstmState {
    pub h: Vector,
    pub c: Vector,
}

impl SpLstmState {
    pub fn zeros(d_h: usize) -> Self {
        SpLstmState { h: Vector::zeros(d_h), c: Vector::zeros(d_h) }
    }
}

/// Everything one step needs for its backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SpLstmStep {
    pub x: Vector,
    pub h_prev: Vector,
    pub c_prev: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub g: Vector,
    pub c: Vector,
    pub tanh_c: Vector,
    pub h: Vector,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SpLstmTape {
    pub steps: Vec<SpLstmStep>,
}

impl SpLstmTape {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn hidden(&self) -> Vec<Vector> {
        self.steps.iter().map(|s| s.h.clone()).collect()
    }
}

/// `W_x·x + W_h·h + b`.
pub(crate) fn affine2(w_x: &Matrix, x: &Vector, w_h: &Matrix, h: &Vector, b: &Vector) -> Vector {
    let mut out = b.clone();
    w_x.matvec_acc(x, &mut out);
    w_h.matvec_acc(h, &mut out);
    out
}

impl SpLstmParams {
    pub fn init(d_x: usize, d_h: usize, scheme: InitScheme, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with_rng(d_x, d_h, scheme, &mut rng)
    }

    /// Draws weights in declaration order; `b_f` starts at one, other biases at zero.
    pub fn init_with_rng(d_x: usize, d_h: usize, scheme: InitScheme, rng: &mut impl Rng) -> Result<Self> {
        if d_x == 0 || d_h == 0 {
            return Err(Error::Config(format!("LSTM dimensions must be positive (d_x={d_x}, d_h={d_h})")));
        }
        let mut mx = || init_matrix(d_h, d_x, scheme, rng);
        let (w_ix, w_fx, w_ox, w_gx) = (mx(), mx(), mx(), mx());
        let mut mh = || init_matrix(d_h, d_h, scheme, rng);
        let (w_ih, w_fh, w_oh, w_gh) = (mh(), mh(), mh(), mh());
        Ok(SpLstmParams {
            w_ix,
            w_ih,
            w_fx,
            w_fh,
            w_ox,
            w_oh,
            w_gx,
            w_gh,
            b_i: Vector::zeros(d_h),
            b_f: Vector::filled(d_h, 1.0),
            b_o: Vector::zeros(d_h),
            b_g: Vector::zeros(d_h),
        })
    }

    pub fn zeros(d_x: usize, d_h: usize) -> Self {
        SpLstmParams {
            w_ix: Matrix::zeros(d_h, d_x),
            w_ih: Matrix::zeros(d_h, d_h),
            w_fx: Matrix::zeros(d_h, d_x),
            w_fh: Matrix::zeros(d_h, d_h),
            w_ox: Matrix::zeros(d_h, d_x),
            w_oh: Matrix::zeros(d_h, d_h),
            w_gx: Matrix::zeros(d_h, d_x),
            w_gh: Matrix::zeros(d_h, d_h),
            b_i: Vector::zeros(d_h),
            b_f: Vector::zeros(d_h),
            b_o: Vector::zeros(d_h),
            b_g: Vector::zeros(d_h),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ix.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_ix.rows()
    }

    /// One step of the recurrence.
    ///
    /// Panics if `x` or `prev` do not match the parameter dimensions.
    pub fn forward_step(&self, x: &Vector, prev: &SpLstmState) -> (SpLstmState, SpLstmStep) {
        let (d_x, d_h) = (self.input_dim(), self.hidden_dim());
        assert!(
            x.len() == d_x && prev.h.len() == d_h && prev.c.len() == d_h,
            "shape mismatch in lstm step: expected x[{d_x}], h[{d_h}], c[{d_h}]; got x[{}], h[{}], c[{}]",
            x.len(),
            prev.h.len(),
            prev.c.len()
        );
        let i = affine2(&self.w_ix, x, &self.w_ih, &prev.h, &self.b_i).map(sigmoid_scalar);
        let f = affine2(&self.w_fx, x, &self.w_fh, &prev.h, &self.b_f).map(sigmoid_scalar);
        let o = affine2(&self.w_ox, x, &self.w_oh, &prev.h, &self.b_o).map(sigmoid_scalar);
        let g = affine2(&self.w_gx, x, &self.w_gh, &prev.h, &self.b_g).map(f64::tanh);
        let c = Vector::from_vec((0..d_h).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect());
        let tanh_c = c.map(f64::tanh);
        let h = Vector::from_vec((0..d_h).map(|k| o[k] * tanh_c[k]).collect());
        let state = SpLstmState { h: h.clone(), c: c.clone() };
        let step = SpLstmStep { x: x.clone(), h_prev: prev.h.clone(), c_prev: prev.c.clone(), i, f, o, g, c, tanh_c, h };
        (state, step)
    }

    /// Unrolls over `xs` from `init`. Panics on an empty sequence.
    pub fn forward_seq(&self, xs: &[Vector], init: &SpLstmState) -> (Vec<SpLstmState>, SpLstmTape) {
        assert!(!xs.is_empty(), "lstm forward over an empty sequence");
        let mut states = Vec::with_capacity(xs.len());
        let mut tape = SpLstmTape { steps: Vec::with_capacity(xs.len()) };
        let mut state = init.clone();
        for x in xs {
            let (next, step) = self.forward_step(x, &state);
            tape.steps.push(step);
            states.push(next.clone());
            state = next;
        }
        (states, tape)
    }

    /// Reverse-mode gradients over a recorded unroll.
    ///
    /// `dh_seq[t]` is the loss gradient arriving at `h_t` from outside the
    /// recurrence and `dc_final` the gradient at the last memory cell. Returns
    /// the parameter gradients (summed over time) and the gradient for every
    /// input `x_t`.
    pub fn backward_seq(&self, tape: &SpLstmTape, dh_seq: &[Vector], dc_final: &Vector) -> (SpLstmGrads, Vec<Vector>) {
        assert!(!tape.is_empty(), "lstm backward over an empty tape");
        assert_eq!(
            tape.len(),
            dh_seq.len(),
            "lstm backward: tape has {} steps but {} hidden-state gradients were given",
            tape.len(),
            dh_seq.len()
        );
        let d_h = self.hidden_dim();
        let mut grads = SpLstmParams::zeros(self.input_dim(), d_h);
        let mut dxs = vec![Vector::zeros(0); tape.len()];
        let mut dh_next = Vector::zeros(d_h);
        let mut dc_next = dc_final.clone();

        for (t, s) in tape.steps.iter().enumerate().rev() {
            let mut di = Vector::zeros(d_h);
            let mut df = Vector::zeros(d_h);
            let mut d_o = Vector::zeros(d_h);
            let mut dg = Vector::zeros(d_h);
            for k in 0..d_h {
                let dh = dh_seq[t][k] + dh_next[k];
                let dc = dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                d_o[k] = dh * s.tanh_c[k] * s.o[k] * (1.0 - s.o[k]);
                di[k] = dc * s.g[k] * s.i[k] * (1.0 - s.i[k]);
                df[k] = dc * s.c_prev[k] * s.f[k] * (1.0 - s.f[k]);
                dg[k] = dc * s.i[k] * (1.0 - s.g[k] * s.g[k]);
                dc_next[k] = dc * s.f[k];
            }

            grads.w_ix.add_outer(&di, &s.x);
            grads.w_fx.add_outer(&df, &s.x);
            grads.w_ox.add_outer(&d_o, &s.x);
            grads.w_gx.add_outer(&dg, &s.x);
            grads.w_ih.add_outer(&di, &s.h_prev);
            grads.w_fh.add_outer(&df, &s.h_prev);
            grads.w_oh.add_outer(&d_o, &s.h_prev);
            grads.w_gh.add_outer(&dg, &s.h_prev);
            grads.b_i.add_assign(&di);
            grads.b_f.add_assign(&df);
            grads.b_o.add_assign(&d_o);
            grads.b_g.add_assign(&dg);

            let mut dx = Vector::zeros(self.input_dim());
            self.w_ix.matvec_t_acc(&di, &mut dx);
            self.w_fx.matvec_t_acc(&df, &mut dx);
            self.w_ox.matvec_t_acc(&d_o, &mut dx);
            self.w_gx.matvec_t_acc(&dg, &mut dx);
            dxs[t] = dx;

            let mut dh_prev = Vector::zeros(d_h);
            self.w_ih.matvec_t_acc(&di, &mut dh_prev);
            self.w_fh.matvec_t_acc(&df, &mut dh_prev);
            self.w_oh.matvec_t_acc(&d_o, &mut dh_prev);
            self.w_gh.matvec_t_acc(&dg, &mut dh_prev);
            dh_next = dh_prev;
        }
        (grads, dxs)
    }
}

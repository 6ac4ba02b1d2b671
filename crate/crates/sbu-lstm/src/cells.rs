//! Single-timestep forward and backward computation for RNN and LSTM cells.
//!
//! The LSTM step follows the standard gated form: sigmoid input/forget/output
//! gates, tanh candidate, `C_t = f∘C_{t-1} + i∘C̃`, `h_t = o∘tanh(C_t)`.
//! The backward pass is the exact chain rule through those definitions,
//! computed from a [`StepCache`] recorded during the forward step.

use serde::{Deserialize, Serialize};

use crate::linalg::{add, hadamard, matvec, matvec_t, sigmoid, tanh_vec, Mat};

/// Hidden-state activation for the plain RNN cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(&self, v: Vec<f64>) -> Vec<f64> {
        match self {
            Activation::Tanh => tanh_vec(&v),
            Activation::Identity => v,
        }
    }
}

/// Plain RNN cell: `h_t = act(W_xh·x_t + W_hh·h_{t-1} + b_h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnCellParams {
    pub w_xh: Mat,
    pub w_hh: Mat,
    pub b_h: Vec<f64>,
}

impl RnnCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        RnnCellParams {
            w_xh: Mat::zeros(hidden, input),
            w_hh: Mat::zeros(hidden, hidden),
            b_h: vec![0.0; hidden],
        }
    }
}

pub fn rnn_step(params: &RnnCellParams, x_t: &[f64], h_prev: &[f64], act: Activation) -> Vec<f64> {
    let mut z = add(&matvec(&params.w_xh, x_t), &matvec(&params.w_hh, h_prev));
    crate::linalg::add_assign(&mut z, &params.b_h);
    act.apply(z)
}

/// The eight weight matrices and four bias vectors of the LSTM cell.
///
/// `w_*` map the step input, `u_*` map the previous layer output; suffixes
/// `f`, `i`, `o`, `c` are the forget gate, input gate, output gate, and
/// candidate state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_f: Mat,
    pub w_i: Mat,
    pub w_o: Mat,
    pub w_c: Mat,
    pub u_f: Mat,
    pub u_i: Mat,
    pub u_o: Mat,
    pub u_c: Mat,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_o: Vec<f64>,
    pub b_c: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w_f: Mat::zeros(hidden, input),
            w_i: Mat::zeros(hidden, input),
            w_o: Mat::zeros(hidden, input),
            w_c: Mat::zeros(hidden, input),
            u_f: Mat::zeros(hidden, hidden),
            u_i: Mat::zeros(hidden, hidden),
            u_o: Mat::zeros(hidden, hidden),
            u_c: Mat::zeros(hidden, hidden),
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_f.cols()
    }

    pub fn hidden_size(&self) -> usize {
        self.b_f.len()
    }

    pub fn num_params(&self) -> usize {
        self.buffers().iter().map(|b| b.len()).sum()
    }

    /// All parameter buffers in a fixed order (matrices row-major, then
    /// biases); the flat layouts of checkpoints and optimizer state follow
    /// this order.
    pub fn buffers(&self) -> [&[f64]; 12] {
        [
            self.w_f.data(),
            self.w_i.data(),
            self.w_o.data(),
            self.w_c.data(),
            self.u_f.data(),
            self.u_i.data(),
            self.u_o.data(),
            self.u_c.data(),
            &self.b_f,
            &self.b_i,
            &self.b_o,
            &self.b_c,
        ]
    }

    /// Elementwise `self += other` across all twelve buffers (gradient
    /// accumulation over timesteps and batch samples).
    pub fn accumulate(&mut self, other: &Self) {
        let theirs = other.buffers();
        for (mine, b) in self.buffers_mut().into_iter().zip(theirs) {
            crate::linalg::add_assign(mine, b);
        }
    }

    pub fn buffers_mut(&mut self) -> [&mut [f64]; 12] {
        [
            self.w_f.data_mut(),
            self.w_i.data_mut(),
            self.w_o.data_mut(),
            self.w_c.data_mut(),
            self.u_f.data_mut(),
            self.u_i.data_mut(),
            self.u_o.data_mut(),
            self.u_c.data_mut(),
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_o,
            &mut self.b_c,
        ]
    }
}

/// Gradients of a scalar loss w.r.t. every field of [`LstmCellParams`];
/// same shapes, same buffer order.
pub type LstmCellGrads = LstmCellParams;

/// The `(h, C)` pair carried between timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState { h: vec![0.0; hidden], c: vec![0.0; hidden] }
    }
}

/// Intermediates of one forward step, memoized for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    pub x_t: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub f_t: Vec<f64>,
    pub i_t: Vec<f64>,
    pub o_t: Vec<f64>,
    pub c_tilde_t: Vec<f64>,
    pub c_t: Vec<f64>,
    pub tanh_c_t: Vec<f64>,
}

fn gate_preact(w: &Mat, u: &Mat, b: &[f64], x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut z = add(&matvec(w, x), &matvec(u, h));
    crate::linalg::add_assign(&mut z, b);
    z
}

/// One LSTM forward step.
pub fn lstm_step(params: &LstmCellParams, x_t: &[f64], prev: &LstmState) -> (LstmState, StepCache) {
    assert_eq!(
        x_t.len(),
        params.input_size(),
        "lstm_step: input length {} vs cell input size {}",
        x_t.len(),
        params.input_size()
    );
    assert_eq!(
        prev.h.len(),
        params.hidden_size(),
        "lstm_step: state length {} vs cell hidden size {}",
        prev.h.len(),
        params.hidden_size()
    );

    let f_t = sigmoid(&gate_preact(&params.w_f, &params.u_f, &params.b_f, x_t, &prev.h));
    let i_t = sigmoid(&gate_preact(&params.w_i, &params.u_i, &params.b_i, x_t, &prev.h));
    let o_t = sigmoid(&gate_preact(&params.w_o, &params.u_o, &params.b_o, x_t, &prev.h));
    let c_tilde_t = tanh_vec(&gate_preact(&params.w_c, &params.u_c, &params.b_c, x_t, &prev.h));

    let c_t = add(&hadamard(&f_t, &prev.c), &hadamard(&i_t, &c_tilde_t));
    let tanh_c_t = tanh_vec(&c_t);
    let h_t = hadamard(&o_t, &tanh_c_t);

    let cache = StepCache {
        x_t: x_t.to_vec(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        f_t: f_t.clone(),
        i_t,
        o_t,
        c_tilde_t,
        c_t: c_t.clone(),
        tanh_c_t,
    };
    (LstmState { h: h_t, c: c_t }, cache)
}

/// Exact gradients of one LSTM step.
///
/// `dh_t` and `dc_t` are the upstream gradients w.r.t. this step's layer
/// output and cell state. Returns parameter gradients for this step alone
/// (accumulation across timesteps is the caller's job) plus gradients
/// w.r.t. the step input and both previous-state components.
pub fn lstm_step_backward(
    params: &LstmCellParams,
    cache: &StepCache,
    dh_t: &[f64],
    dc_t: &[f64],
) -> (LstmCellGrads, Vec<f64>, Vec<f64>, Vec<f64>) {
    let hidden = params.hidden_size();
    assert_eq!(dh_t.len(), hidden, "lstm_step_backward: dh length {} vs hidden {}", dh_t.len(), hidden);
    assert_eq!(dc_t.len(), hidden, "lstm_step_backward: dC length {} vs hidden {}", dc_t.len(), hidden);

    // h_t = o ∘ tanh(C_t)
    let d_o = hadamard(dh_t, &cache.tanh_c_t);
    let mut d_c: Vec<f64> = dc_t.to_vec();
    for k in 0..hidden {
        d_c[k] += dh_t[k] * cache.o_t[k] * (1.0 - cache.tanh_c_t[k] * cache.tanh_c_t[k]);
    }

    // C_t = f ∘ C_{t-1} + i ∘ C̃
    let d_f = hadamard(&d_c, &cache.c_prev);
    let d_i = hadamard(&d_c, &cache.c_tilde_t);
    let d_c_tilde = hadamard(&d_c, &cache.i_t);
    let dc_prev = hadamard(&d_c, &cache.f_t);

    // Through the activations to the pre-activations.
    let mut dz_f = vec![0.0; hidden];
    let mut dz_i = vec![0.0; hidden];
    let mut dz_o = vec![0.0; hidden];
    let mut dz_c = vec![0.0; hidden];
    for k in 0..hidden {
        dz_f[k] = d_f[k] * cache.f_t[k] * (1.0 - cache.f_t[k]);
        dz_i[k] = d_i[k] * cache.i_t[k] * (1.0 - cache.i_t[k]);
        dz_o[k] = d_o[k] * cache.o_t[k] * (1.0 - cache.o_t[k]);
        dz_c[k] = d_c_tilde[k] * (1.0 - cache.c_tilde_t[k] * cache.c_tilde_t[k]);
    }

    let mut grads = LstmCellGrads::zeros(params.input_size(), hidden);
    grads.w_f.add_outer(&dz_f, &cache.x_t);
    grads.w_i.add_outer(&dz_i, &cache.x_t);
    grads.w_o.add_outer(&dz_o, &cache.x_t);
    grads.w_c.add_outer(&dz_c, &cache.x_t);
    grads.u_f.add_outer(&dz_f, &cache.h_prev);
    grads.u_i.add_outer(&dz_i, &cache.h_prev);
    grads.u_o.add_outer(&dz_o, &cache.h_prev);
    grads.u_c.add_outer(&dz_c, &cache.h_prev);
    grads.b_f.copy_from_slice(&dz_f);
    grads.b_i.copy_from_slice(&dz_i);
    grads.b_o.copy_from_slice(&dz_o);
    grads.b_c.copy_from_slice(&dz_c);

    let mut dx = matvec_t(&params.w_f, &dz_f);
    crate::linalg::add_assign(&mut dx, &matvec_t(&params.w_i, &dz_i));
    crate::linalg::add_assign(&mut dx, &matvec_t(&params.w_o, &dz_o));
    crate::linalg::add_assign(&mut dx, &matvec_t(&params.w_c, &dz_c));

    let mut dh_prev = matvec_t(&params.u_f, &dz_f);
    crate::linalg::add_assign(&mut dh_prev, &matvec_t(&params.u_i, &dz_i));
    crate::linalg::add_assign(&mut dh_prev, &matvec_t(&params.u_o, &dz_o));
    crate::linalg::add_assign(&mut dh_prev, &matvec_t(&params.u_c, &dz_c));

    (grads, dx, dh_prev, dc_prev)
}

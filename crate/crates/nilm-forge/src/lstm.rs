//! LSTM cell, sequence unrolling, and backpropagation through time.
//!
//! Gate equations, per step, with `z = concat(hidden_prev, x)`:
//!
//! ```text
//! forget    F = sigmoid(W_f z + b_f)
//! input     G = sigmoid(W_i z + b_i)
//! candidate N = tanh(W_c z + b_c)
//! cell      C = F ∘ C_prev + G ∘ N
//! output    O = sigmoid(W_o z + b_o)
//! hidden    d = O ∘ tanh(C)
//! ```
//!
//! Naming note: some formulations write the input gate as `h_t`, which
//! collides with the conventional hidden-state name — here the gate is
//! `input_gate` and the per-step output is `hidden`. Each weight matrix
//! maps the concatenated `hidden + input` width to `hidden`.

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};

/// The four gate weight matrices (`hidden × (hidden + input)`) and bias
/// vectors (`hidden`).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_forget: Tensor,
    pub b_forget: Tensor,
    pub w_input: Tensor,
    pub b_input: Tensor,
    pub w_candidate: Tensor,
    pub b_candidate: Tensor,
    pub w_output: Tensor,
    pub b_output: Tensor,
}

impl LstmParams {
    pub fn new(
        w_forget: Tensor,
        b_forget: Tensor,
        w_input: Tensor,
        b_input: Tensor,
        w_candidate: Tensor,
        b_candidate: Tensor,
        w_output: Tensor,
        b_output: Tensor,
    ) -> Result<Self> {
        let shape = w_forget.shape().to_vec();
        if shape.len() != 2 || shape[1] <= shape[0] {
            return Err(Error::dim("LstmParams gate weights (hidden × hidden+input)", &shape, &[]));
        }
        for w in [&w_input, &w_candidate, &w_output] {
            if w.shape() != shape.as_slice() {
                return Err(Error::dim("LstmParams gate weights", w.shape(), &shape));
            }
        }
        for b in [&b_forget, &b_input, &b_candidate, &b_output] {
            if b.shape() != [shape[0]] {
                return Err(Error::dim("LstmParams gate bias", b.shape(), &shape));
            }
        }
        Ok(LstmParams {
            w_forget,
            b_forget,
            w_input,
            b_input,
            w_candidate,
            b_candidate,
            w_output,
            b_output,
        })
    }

    /// Gate weights ~ normal(0, sqrt(2/(hidden+input))), biases zero.
    pub fn kaiming(hidden: usize, input: usize, rng: &mut RngState) -> Result<Self> {
        let width = hidden + input;
        let std = (2.0 / width as f64).sqrt();
        let mut w = || rng.sample_normal(vec![hidden, width], 0.0, std);
        let (wf, wi, wc, wo) = (w()?, w()?, w()?, w()?);
        LstmParams::new(
            wf,
            Tensor::zeros(vec![hidden]),
            wi,
            Tensor::zeros(vec![hidden]),
            wc,
            Tensor::zeros(vec![hidden]),
            wo,
            Tensor::zeros(vec![hidden]),
        )
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_forget.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.w_forget.shape()[1] - self.w_forget.shape()[0]
    }
}

/// Recurrent state: cell vector (unbounded, finite) and hidden output
/// (each element in (−1, 1)).
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub cell: Tensor,
    pub hidden: Tensor,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            cell: Tensor::zeros(vec![hidden]),
            hidden: Tensor::zeros(vec![hidden]),
        }
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
pub struct GateCache {
    /// concat(hidden_prev, x), width hidden+input.
    pub z: Vec<f64>,
    pub forget: Vec<f64>,
    pub input_gate: Vec<f64>,
    pub candidate: Vec<f64>,
    pub output_gate: Vec<f64>,
    pub cell_prev: Vec<f64>,
    pub cell: Vec<f64>,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `W z + b` for one gate, into a fresh vector.
fn gate_affine(w: &Tensor, b: &Tensor, z: &[f64]) -> Vec<f64> {
    let hidden = w.shape()[0];
    let width = w.shape()[1];
    let wd = w.data();
    let mut out = b.data().to_vec();
    for (h, acc) in out.iter_mut().enumerate() {
        let row = &wd[h * width..(h + 1) * width];
        *acc += row.iter().zip(z.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    debug_assert_eq!(out.len(), hidden);
    out
}

pub fn lstm_cell_forward(
    params: &LstmParams,
    prev: &LstmState,
    x: &Tensor,
) -> Result<(LstmState, GateCache)> {
    let hidden = params.hidden_dim();
    let input = params.input_dim();
    if prev.hidden.shape() != [hidden] || prev.cell.shape() != [hidden] {
        return Err(Error::dim("lstm_cell_forward prev state", prev.hidden.shape(), &[hidden]));
    }
    if x.shape() != [input] {
        return Err(Error::dim("lstm_cell_forward input", x.shape(), &[input]));
    }

    let mut z = Vec::with_capacity(hidden + input);
    z.extend_from_slice(prev.hidden.data());
    z.extend_from_slice(x.data());

    let forget: Vec<f64> = gate_affine(&params.w_forget, &params.b_forget, &z)
        .into_iter()
        .map(sigmoid)
        .collect();
    let input_gate: Vec<f64> = gate_affine(&params.w_input, &params.b_input, &z)
        .into_iter()
        .map(sigmoid)
        .collect();
    let candidate: Vec<f64> = gate_affine(&params.w_candidate, &params.b_candidate, &z)
        .into_iter()
        .map(f64::tanh)
        .collect();
    let output_gate: Vec<f64> = gate_affine(&params.w_output, &params.b_output, &z)
        .into_iter()
        .map(sigmoid)
        .collect();

    let cell: Vec<f64> = (0..hidden)
        .map(|h| forget[h] * prev.cell.data()[h] + input_gate[h] * candidate[h])
        .collect();
    let hidden_out: Vec<f64> = (0..hidden).map(|h| output_gate[h] * cell[h].tanh()).collect();

    let next = LstmState {
        cell: Tensor::from_raw(vec![hidden], cell.clone()),
        hidden: Tensor::from_raw(vec![hidden], hidden_out),
    };
    let cache = GateCache {
        z,
        forget,
        input_gate,
        candidate,
        output_gate,
        cell_prev: prev.cell.data().to_vec(),
        cell,
    };
    Ok((next, cache))
}

/// Left fold of the cell over a `T × input` sequence. Returns every
/// step's hidden output as a `T × hidden` tensor plus the step caches.
pub fn lstm_sequence_forward(
    params: &LstmParams,
    x_seq: &Tensor,
    init: &LstmState,
) -> Result<(Tensor, Vec<GateCache>)> {
    if x_seq.shape().len() != 2 || x_seq.shape()[1] != params.input_dim() {
        return Err(Error::dim(
            "lstm_sequence_forward input (T × input)",
            x_seq.shape(),
            &[params.input_dim()],
        ));
    }
    let steps = x_seq.shape()[0];
    if steps == 0 {
        return Err(Error::Argument("empty sequence".into()));
    }
    let input = params.input_dim();
    let hidden = params.hidden_dim();
    let mut state = init.clone();
    let mut caches = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps * hidden);
    for t in 0..steps {
        let x = Tensor::from_raw(
            vec![input],
            x_seq.data()[t * input..(t + 1) * input].to_vec(),
        );
        let (next, cache) = lstm_cell_forward(params, &state, &x)?;
        outputs.extend_from_slice(next.hidden.data());
        caches.push(cache);
        state = next;
    }
    Ok((Tensor::from_raw(vec![steps, hidden], outputs), caches))
}

/// Backpropagation through time. `grad_hidden_seq` is `T × hidden`, the
/// loss gradient w.r.t. every step's hidden output (zero rows for unused
/// steps). Gradients accumulate across time into a params-shaped bundle;
/// the input-sequence gradient comes back as `T × input`.
pub fn lstm_backward(
    params: &LstmParams,
    caches: &[GateCache],
    grad_hidden_seq: &Tensor,
) -> Result<(LstmParams, Tensor)> {
    let hidden = params.hidden_dim();
    let input = params.input_dim();
    let steps = caches.len();
    if grad_hidden_seq.shape() != [steps, hidden] {
        return Err(Error::dim(
            "lstm_backward grad (T × hidden)",
            grad_hidden_seq.shape(),
            &[steps, hidden],
        ));
    }
    if steps == 0 {
        return Err(Error::Argument("empty cache sequence".into()));
    }
    let width = hidden + input;

    let mut gw_f = vec![0.0; hidden * width];
    let mut gw_i = vec![0.0; hidden * width];
    let mut gw_c = vec![0.0; hidden * width];
    let mut gw_o = vec![0.0; hidden * width];
    let mut gb_f = vec![0.0; hidden];
    let mut gb_i = vec![0.0; hidden];
    let mut gb_c = vec![0.0; hidden];
    let mut gb_o = vec![0.0; hidden];
    let mut grad_x_seq = vec![0.0; steps * input];

    // Carried across time: gradient w.r.t. the previous step's hidden and
    // cell vectors.
    let mut carry_hidden = vec![0.0; hidden];
    let mut carry_cell = vec![0.0; hidden];

    for t in (0..steps).rev() {
        let cache = &caches[t];
        let mut grad_z = vec![0.0; width];
        for h in 0..hidden {
            let gd = grad_hidden_seq.data()[t * hidden + h] + carry_hidden[h];
            let tanh_c = cache.cell[h].tanh();
            let d_output = gd * tanh_c;
            let mut d_cell = gd * cache.output_gate[h] * (1.0 - tanh_c * tanh_c) + carry_cell[h];

            let d_forget = d_cell * cache.cell_prev[h];
            let d_input = d_cell * cache.candidate[h];
            let d_candidate = d_cell * cache.input_gate[h];
            d_cell *= cache.forget[h]; // becomes carry for t-1

            // chain through the gate nonlinearities
            let a_f = d_forget * cache.forget[h] * (1.0 - cache.forget[h]);
            let a_i = d_input * cache.input_gate[h] * (1.0 - cache.input_gate[h]);
            let a_c = d_candidate * (1.0 - cache.candidate[h] * cache.candidate[h]);
            let a_o = d_output * cache.output_gate[h] * (1.0 - cache.output_gate[h]);

            gb_f[h] += a_f;
            gb_i[h] += a_i;
            gb_c[h] += a_c;
            gb_o[h] += a_o;
            let row = h * width;
            for (w, &zv) in cache.z.iter().enumerate() {
                gw_f[row + w] += a_f * zv;
                gw_i[row + w] += a_i * zv;
                gw_c[row + w] += a_c * zv;
                gw_o[row + w] += a_o * zv;
                grad_z[w] += a_f * params.w_forget.data()[row + w]
                    + a_i * params.w_input.data()[row + w]
                    + a_c * params.w_candidate.data()[row + w]
                    + a_o * params.w_output.data()[row + w];
            }
            carry_cell[h] = d_cell;
        }
        carry_hidden.copy_from_slice(&grad_z[..hidden]);
        grad_x_seq[t * input..(t + 1) * input].copy_from_slice(&grad_z[hidden..]);
    }

    let grads = LstmParams {
        w_forget: Tensor::from_raw(vec![hidden, width], gw_f),
        b_forget: Tensor::from_raw(vec![hidden], gb_f),
        w_input: Tensor::from_raw(vec![hidden, width], gw_i),
        b_input: Tensor::from_raw(vec![hidden], gb_i),
        w_candidate: Tensor::from_raw(vec![hidden, width], gw_c),
        b_candidate: Tensor::from_raw(vec![hidden], gb_c),
        w_output: Tensor::from_raw(vec![hidden, width], gw_o),
        b_output: Tensor::from_raw(vec![hidden], gb_o),
    };
    Ok((grads, Tensor::from_raw(vec![steps, input], grad_x_seq)))
}

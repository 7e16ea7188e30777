//! Projected LSTM recursion and its exact reverse-mode derivative.
//!
//! Gate pre-activations are stacked `[input, forget, candidate, output]`:
//!
//! ```text
//! z_t = W_in x_t + W_rec r_{t-1} + b
//! i, f, o = σ(z_i), σ(z_f), σ(z_o);  g = tanh(z_g)
//! c_t = f ⊙ c_{t-1} + i ⊙ g
//! m_t = o ⊙ tanh(c_t)
//! r_t = W_proj m_t
//! ```
//!
//! `r_t` is both the layer output and the recurrent state. A reversed layer
//! runs the same recursion from the last frame to the first.

use crate::numerics::{matvec_acc, matvec_t_acc, outer_acc, sigmoid, Matrix};

/// Trainable parameters of one projected LSTM.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayerParams {
    /// `4H × I`
    pub w_in: Matrix,
    /// `4H × P`
    pub w_rec: Matrix,
    /// `1 × 4H`
    pub bias: Matrix,
    /// `P × H`
    pub w_proj: Matrix,
}

impl LstmLayerParams {
    pub fn zeros(input: usize, cells: usize, projection: usize) -> Self {
        LstmLayerParams {
            w_in: Matrix::zeros(4 * cells, input),
            w_rec: Matrix::zeros(4 * cells, projection),
            bias: Matrix::zeros(1, 4 * cells),
            w_proj: Matrix::zeros(projection, cells),
        }
    }

    pub fn cells(&self) -> usize {
        self.w_proj.cols()
    }

    pub fn projection(&self) -> usize {
        self.w_proj.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.cols()
    }

    pub(crate) fn blocks(&self) -> [&Matrix; 4] {
        [&self.w_in, &self.w_rec, &self.bias, &self.w_proj]
    }

    pub(crate) fn blocks_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_in, &mut self.w_rec, &mut self.bias, &mut self.w_proj]
    }
}

/// Activations recorded by [`forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct LstmTrace {
    reverse: bool,
    /// Activated gates, `T × 4H`.
    gates: Matrix,
    cells: Matrix,
    tanh_cells: Matrix,
    hidden: Matrix,
    /// Projected outputs `r_t`, `T × P`.
    pub out: Matrix,
}

#[inline]
fn step_index(step: usize, frames: usize, reverse: bool) -> usize {
    if reverse {
        frames - 1 - step
    } else {
        step
    }
}

pub fn forward(p: &LstmLayerParams, input: &Matrix, reverse: bool) -> LstmTrace {
    let frames = input.rows();
    let h = p.cells();
    let proj = p.projection();
    let mut gates = Matrix::zeros(frames, 4 * h);
    let mut cells = Matrix::zeros(frames, h);
    let mut tanh_cells = Matrix::zeros(frames, h);
    let mut hidden = Matrix::zeros(frames, h);
    let mut out = Matrix::zeros(frames, proj);

    let zero_state = vec![0.0; h.max(proj)];
    let mut z = vec![0.0; 4 * h];
    for step in 0..frames {
        let t = step_index(step, frames, reverse);
        z.copy_from_slice(p.bias.row(0));
        matvec_acc(&p.w_in, input.row(t), &mut z);
        let (prev_r, prev_c): (&[f64], &[f64]) = if step == 0 {
            (&zero_state[..proj], &zero_state[..h])
        } else {
            let tp = step_index(step - 1, frames, reverse);
            (out.row(tp), cells.row(tp))
        };
        matvec_acc(&p.w_rec, prev_r, &mut z);

        let mut c_new = vec![0.0; h];
        {
            let g_row = gates.row_mut(t);
            for j in 0..h {
                let i = sigmoid(z[j]);
                let f = sigmoid(z[h + j]);
                let g = z[2 * h + j].tanh();
                let o = sigmoid(z[3 * h + j]);
                g_row[j] = i;
                g_row[h + j] = f;
                g_row[2 * h + j] = g;
                g_row[3 * h + j] = o;
                c_new[j] = f * prev_c[j] + i * g;
            }
        }
        cells.row_mut(t).copy_from_slice(&c_new);
        let o_gate = 3 * h;
        for j in 0..h {
            let tc = c_new[j].tanh();
            tanh_cells.set(t, j, tc);
            hidden.set(t, j, gates.get(t, o_gate + j) * tc);
        }
        let r = out.row_mut(t);
        matvec_acc(&p.w_proj, hidden.row(t), r);
    }
    LstmTrace {
        reverse,
        gates,
        cells,
        tanh_cells,
        hidden,
        out,
    }
}

/// Back-propagates `d_out` (`T × P`, gradient wrt the layer outputs) through
/// time, accumulating into `grads`. Returns the gradient wrt `input` when
/// `want_input_grad` is set.
pub fn backward(
    p: &LstmLayerParams,
    input: &Matrix,
    trace: &LstmTrace,
    d_out: &Matrix,
    grads: &mut LstmLayerParams,
    want_input_grad: bool,
) -> Option<Matrix> {
    let frames = input.rows();
    let h = p.cells();
    let proj = p.projection();
    let reverse = trace.reverse;

    let mut dz_all = Matrix::zeros(frames, 4 * h);
    let mut dr_next = vec![0.0; proj];
    let mut dc_next = vec![0.0; h];
    let mut dr = vec![0.0; proj];
    let mut dm = vec![0.0; h];

    for step in (0..frames).rev() {
        let t = step_index(step, frames, reverse);
        for (k, v) in dr.iter_mut().enumerate() {
            *v = d_out.get(t, k) + dr_next[k];
        }
        outer_acc(&mut grads.w_proj, &dr, trace.hidden.row(t));
        dm.iter_mut().for_each(|v| *v = 0.0);
        matvec_t_acc(&p.w_proj, &dr, &mut dm);

        let g_row = trace.gates.row(t);
        let tc = trace.tanh_cells.row(t);
        let prev_c: Option<&[f64]> = if step == 0 {
            None
        } else {
            Some(trace.cells.row(step_index(step - 1, frames, reverse)))
        };
        let dz = dz_all.row_mut(t);
        for j in 0..h {
            let (i, f, g, o) = (g_row[j], g_row[h + j], g_row[2 * h + j], g_row[3 * h + j]);
            let d_o = dm[j] * tc[j];
            let dc = dc_next[j] + dm[j] * o * (1.0 - tc[j] * tc[j]);
            let d_i = dc * g;
            let d_g = dc * i;
            let d_f = prev_c.map_or(0.0, |c| dc * c[j]);
            dc_next[j] = dc * f;
            dz[j] = d_i * i * (1.0 - i);
            dz[h + j] = d_f * f * (1.0 - f);
            dz[2 * h + j] = d_g * (1.0 - g * g);
            dz[3 * h + j] = d_o * o * (1.0 - o);
        }

        dr_next.iter_mut().for_each(|v| *v = 0.0);
        if step > 0 {
            let dz = dz_all.row(t);
            matvec_t_acc(&p.w_rec, dz, &mut dr_next);
            let tp = step_index(step - 1, frames, reverse);
            outer_acc(&mut grads.w_rec, dz, trace.out.row(tp));
        }
    }

    let mut d_input = want_input_grad.then(|| Matrix::zeros(frames, input.cols()));
    let db = grads.bias.row_mut(0);
    for t in 0..frames {
        for (b, v) in db.iter_mut().zip(dz_all.row(t)) {
            *b += v;
        }
    }
    for t in 0..frames {
        let dz = dz_all.row(t);
        outer_acc(&mut grads.w_in, dz, input.row(t));
        if let Some(di) = d_input.as_mut() {
            matvec_t_acc(&p.w_in, dz, di.row_mut(t));
        }
    }
    d_input
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{matvec_add, matvec_t_add, outer_add, sigmoid};
use crate::error::Result;
use crate::numerics::{ParamId, ParameterStore};

/// Single-direction LSTM with gate blocks laid out `[i, f, g, o]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    /// Post-activation gates per step, `4 × hidden`.
    gates: Vec<Vec<f64>>,
    cells: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
}

impl Lstm {
    pub fn init(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        let wx = store.glorot(&format!("{prefix}.wx"), 4 * hidden, input, rng)?;
        let wh = store.glorot(&format!("{prefix}.wh"), 4 * hidden, hidden, rng)?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(&format!("{prefix}.b"), &[4 * hidden], bias)?;
        Ok(Lstm { wx, wh, b, input, hidden })
    }

    pub fn forward(&self, store: &ParameterStore, xs: &[Vec<f64>]) -> LstmTrace {
        let h = self.hidden;
        let wx = &store.get(self.wx).values;
        let wh = &store.get(self.wh).values;
        let b = &store.get(self.b).values;
        let mut trace = LstmTrace {
            gates: Vec::with_capacity(xs.len()),
            cells: Vec::with_capacity(xs.len()),
            hidden: Vec::with_capacity(xs.len()),
        };
        let mut h_prev = vec![0.0; h];
        let mut c_prev = vec![0.0; h];
        for x in xs {
            let mut z = b.clone();
            matvec_add(wx, 4 * h, self.input, x, &mut z);
            matvec_add(wh, 4 * h, h, &h_prev, &mut z);
            for k in 0..h {
                z[k] = sigmoid(z[k]);
                z[h + k] = sigmoid(z[h + k]);
                z[2 * h + k] = z[2 * h + k].tanh();
                z[3 * h + k] = sigmoid(z[3 * h + k]);
            }
            let mut c = vec![0.0; h];
            let mut hn = vec![0.0; h];
            for k in 0..h {
                c[k] = z[h + k] * c_prev[k] + z[k] * z[2 * h + k];
                hn[k] = z[3 * h + k] * c[k].tanh();
            }
            trace.gates.push(z);
            c_prev.clone_from(&c);
            h_prev.clone_from(&hn);
            trace.cells.push(c);
            trace.hidden.push(hn);
        }
        trace
    }

    /// Backpropagates `d_hidden[t]` (gradient w.r.t. each output state),
    /// accumulating weight gradients into `store` and returning input
    /// gradients.
    pub fn backward(
        &self,
        store: &mut ParameterStore,
        xs: &[Vec<f64>],
        trace: &LstmTrace,
        d_hidden: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let n = xs.len();
        let mut dxs = vec![vec![0.0; self.input]; n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let zero = vec![0.0; h];

        let wx = store.get(self.wx).values.clone();
        let wh = store.get(self.wh).values.clone();
        for t in (0..n).rev() {
            let g = &trace.gates[t];
            let c = &trace.cells[t];
            let c_prev = if t > 0 { &trace.cells[t - 1] } else { &zero };
            let h_prev = if t > 0 { &trace.hidden[t - 1] } else { &zero };
            for k in 0..h {
                let dh = d_hidden[t][k] + dh_next[k];
                let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                let tc = c[k].tanh();
                let d_o = dh * tc;
                let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                dz[k] = dc * gg * i * (1.0 - i);
                dz[h + k] = dc * c_prev[k] * f * (1.0 - f);
                dz[2 * h + k] = dc * i * (1.0 - gg * gg);
                dz[3 * h + k] = d_o * o * (1.0 - o);
                dc_next[k] = dc * f;
            }
            outer_add(&mut store.get_mut(self.wx).grad, 4 * h, self.input, &dz, &xs[t]);
            outer_add(&mut store.get_mut(self.wh).grad, 4 * h, h, &dz, h_prev);
            for (gb, d) in store.get_mut(self.b).grad.iter_mut().zip(&dz) {
                *gb += d;
            }
            matvec_t_add(&wx, 4 * h, self.input, &dz, &mut dxs[t]);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_add(&wh, 4 * h, h, &dz, &mut dh_next);
        }
        dxs
    }
}

/// Forward and backward LSTMs over the same sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

#[derive(Debug, Clone)]
pub struct BiLstmTrace {
    pub fwd: LstmTrace,
    /// Trace of the backward LSTM over the reversed sequence.
    pub bwd: LstmTrace,
}

impl BiLstmTrace {
    /// `[h_fwd(t); h_bwd(t)]` for each position `t`.
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        let n = self.fwd.hidden.len();
        (0..n)
            .map(|t| {
                let mut v = self.fwd.hidden[t].clone();
                v.extend_from_slice(&self.bwd.hidden[n - 1 - t]);
                v
            })
            .collect()
    }

    /// Final forward state concatenated with the final backward state.
    pub fn summary(&self) -> Vec<f64> {
        let mut v = self.fwd.hidden.last().cloned().unwrap_or_default();
        v.extend(self.bwd.hidden.last().cloned().unwrap_or_default());
        v
    }
}

impl BiLstm {
    pub fn init(store: &mut ParameterStore, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(BiLstm {
            fwd: Lstm::init(store, &format!("{prefix}.fwd"), input, hidden, rng)?,
            bwd: Lstm::init(store, &format!("{prefix}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fwd.hidden
    }

    pub fn forward(&self, store: &ParameterStore, xs: &[Vec<f64>]) -> BiLstmTrace {
        let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        BiLstmTrace {
            fwd: self.fwd.forward(store, xs),
            bwd: self.bwd.forward(store, &reversed),
        }
    }

    /// `d_out[t]` is the gradient w.r.t. `outputs()[t]`.
    pub fn backward(&self, store: &mut ParameterStore, xs: &[Vec<f64>], trace: &BiLstmTrace, d_out: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let h = self.hidden();
        let n = xs.len();
        let d_fwd: Vec<Vec<f64>> = d_out.iter().map(|d| d[..h].to_vec()).collect();
        let d_bwd: Vec<Vec<f64>> = (0..n).map(|s| d_out[n - 1 - s][h..].to_vec()).collect();
        self.backward_split(store, xs, trace, &d_fwd, &d_bwd)
    }

    /// Gradient w.r.t. `summary()` only.
    pub fn backward_summary(&self, store: &mut ParameterStore, xs: &[Vec<f64>], trace: &BiLstmTrace, d_summary: &[f64]) -> Vec<Vec<f64>> {
        let h = self.hidden();
        let n = xs.len();
        let mut d_fwd = vec![vec![0.0; h]; n];
        let mut d_bwd = vec![vec![0.0; h]; n];
        d_fwd[n - 1].copy_from_slice(&d_summary[..h]);
        d_bwd[n - 1].copy_from_slice(&d_summary[h..]);
        self.backward_split(store, xs, trace, &d_fwd, &d_bwd)
    }

    /// `d_bwd` is indexed in the backward LSTM's own (reversed) step order.
    fn backward_split(
        &self,
        store: &mut ParameterStore,
        xs: &[Vec<f64>],
        trace: &BiLstmTrace,
        d_fwd: &[Vec<f64>],
        d_bwd: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let reversed: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let mut dx = self.fwd.backward(store, xs, &trace.fwd, d_fwd);
        let dx_rev = self.bwd.backward(store, &reversed, &trace.bwd, d_bwd);
        let n = xs.len();
        for (s, d) in dx_rev.into_iter().enumerate() {
            for (acc, v) in dx[n - 1 - s].iter_mut().zip(d) {
                *acc += v;
            }
        }
        dx
    }
}

//! Fused recurrent cell steps. One tape node per time step keeps the
//! per-step bookkeeping small next to the recurrent matmul.

use super::fastmath::{sigmoid_inplace, tanh_inplace};
use super::graph::gemm_acc;

/// Gate activations saved by the forward pass.
#[derive(Debug, Clone)]
pub(super) struct CellCache {
    /// GRU: `[r | u | n]`; LSTM: `[i | f | o | g]`.
    pub gates: Vec<f64>,
    /// GRU: `h·Whn + bhn`; LSTM: `tanh(c')`.
    pub aux: Vec<f64>,
}

/// `h·Wh + bh` for `h: [b,k]`, `wh: [k,n]`.
fn recurrent_preact(b: usize, k: usize, n: usize, h: &[f64], wh: &[f64], bh: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(b * n);
    for _ in 0..b {
        out.extend_from_slice(bh);
    }
    gemm_acc(b, k, n, h, (k as isize, 1), wh, (n as isize, 1), &mut out);
    out
}

/// Input-side pre-activations for row `r`: `x[row + r] + extra[r]`.
fn input_row<'a>(x: &'a [f64], extra: Option<&[f64]>, row: usize, r: usize, width: usize, buf: &'a mut Vec<f64>) -> &'a [f64] {
    let base = &x[(row + r) * width..(row + r + 1) * width];
    match extra {
        None => base,
        Some(e) => {
            buf.clear();
            buf.extend(base.iter().zip(&e[r * width..(r + 1) * width]).map(|(a, b)| a + b));
            buf
        }
    }
}

pub(super) struct StepInputs<'a> {
    pub x: &'a [f64],
    pub row: usize,
    pub extra: Option<&'a [f64]>,
    pub state: &'a [f64],
    pub wh: &'a [f64],
    pub bh: &'a [f64],
    pub rows: usize,
    pub hidden: usize,
}

pub(super) fn gru_forward(s: &StepInputs) -> (Vec<f64>, CellCache) {
    let (b, h) = (s.rows, s.hidden);
    let w = 3 * h;
    let hp = recurrent_preact(b, h, w, s.state, s.wh, s.bh);
    let mut gates = vec![0.0; b * w];
    let mut aux = vec![0.0; b * h];
    let mut out = vec![0.0; b * h];
    let mut buf = Vec::new();
    for r in 0..b {
        let xr = input_row(s.x, s.extra, s.row, r, w, &mut buf);
        let hr = &hp[r * w..(r + 1) * w];
        let g = &mut gates[r * w..(r + 1) * w];
        for j in 0..2 * h {
            g[j] = xr[j] + hr[j];
        }
        sigmoid_inplace(&mut g[..2 * h]);
        for j in 0..h {
            let hn = hr[2 * h + j];
            aux[r * h + j] = hn;
            g[2 * h + j] = xr[2 * h + j] + g[j] * hn;
        }
        tanh_inplace(&mut g[2 * h..]);
        for j in 0..h {
            let (u, n) = (g[h + j], g[2 * h + j]);
            out[r * h + j] = n + u * (s.state[r * h + j] - n);
        }
    }
    (out, CellCache { gates, aux })
}

/// Gradients of one GRU step given the upstream `dout: [b,h]`.
/// Returns `(d_input_preact [b,3h], d_recurrent_preact [b,3h], d_state_direct [b,h])`.
pub(super) fn gru_backward(s: &StepInputs, cache: &CellCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, h) = (s.rows, s.hidden);
    let w = 3 * h;
    let mut dx = vec![0.0; b * w];
    let mut dhp = vec![0.0; b * w];
    let mut dstate = vec![0.0; b * h];
    for r in 0..b {
        let g = &cache.gates[r * w..(r + 1) * w];
        for j in 0..h {
            let (rg, u, n) = (g[j], g[h + j], g[2 * h + j]);
            let hprev = s.state[r * h + j];
            let d = dout[r * h + j];
            let dn = d * (1.0 - u);
            let du = d * (hprev - n);
            dstate[r * h + j] = d * u;
            let dpre_n = dn * (1.0 - n * n);
            let dr = dpre_n * cache.aux[r * h + j];
            let dpre_r = dr * rg * (1.0 - rg);
            let dpre_u = du * u * (1.0 - u);
            dx[r * w + j] = dpre_r;
            dx[r * w + h + j] = dpre_u;
            dx[r * w + 2 * h + j] = dpre_n;
            dhp[r * w + j] = dpre_r;
            dhp[r * w + h + j] = dpre_u;
            dhp[r * w + 2 * h + j] = dpre_n * rg;
        }
    }
    (dx, dhp, dstate)
}

/// LSTM state rows are `[h | c]`.
pub(super) fn lstm_forward(s: &StepInputs) -> (Vec<f64>, CellCache) {
    let (b, h) = (s.rows, s.hidden);
    let w = 4 * h;
    let mut hprev = Vec::with_capacity(b * h);
    for r in 0..b {
        hprev.extend_from_slice(&s.state[r * 2 * h..r * 2 * h + h]);
    }
    let hp = recurrent_preact(b, h, w, &hprev, s.wh, s.bh);
    let mut gates = vec![0.0; b * w];
    let mut aux = vec![0.0; b * h];
    let mut out = vec![0.0; b * 2 * h];
    let mut buf = Vec::new();
    for r in 0..b {
        let xr = input_row(s.x, s.extra, s.row, r, w, &mut buf);
        let hr = &hp[r * w..(r + 1) * w];
        let g = &mut gates[r * w..(r + 1) * w];
        for j in 0..w {
            g[j] = xr[j] + hr[j];
        }
        sigmoid_inplace(&mut g[..3 * h]);
        tanh_inplace(&mut g[3 * h..]);
        let tc = &mut aux[r * h..(r + 1) * h];
        for j in 0..h {
            let c = g[h + j] * s.state[r * 2 * h + h + j] + g[j] * g[3 * h + j];
            tc[j] = c;
            out[r * 2 * h + h + j] = c;
        }
        tanh_inplace(tc);
        for j in 0..h {
            out[r * 2 * h + j] = g[2 * h + j] * tc[j];
        }
    }
    (out, CellCache { gates, aux })
}

/// As [`gru_backward`] for the LSTM; `dout` and the returned state gradient are `[b,2h]`.
pub(super) fn lstm_backward(s: &StepInputs, cache: &CellCache, dout: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (b, h) = (s.rows, s.hidden);
    let w = 4 * h;
    let mut dpre = vec![0.0; b * w];
    let mut dstate = vec![0.0; b * 2 * h];
    for r in 0..b {
        let g = &cache.gates[r * w..(r + 1) * w];
        for j in 0..h {
            let (i, f, o, cand) = (g[j], g[h + j], g[2 * h + j], g[3 * h + j]);
            let tc = cache.aux[r * h + j];
            let dh = dout[r * 2 * h + j];
            let dc = dout[r * 2 * h + h + j] + dh * o * (1.0 - tc * tc);
            let cprev = s.state[r * 2 * h + h + j];
            dpre[r * w + j] = dc * cand * i * (1.0 - i);
            dpre[r * w + h + j] = dc * cprev * f * (1.0 - f);
            dpre[r * w + 2 * h + j] = dh * tc * o * (1.0 - o);
            dpre[r * w + 3 * h + j] = dc * i * (1.0 - cand * cand);
            dstate[r * 2 * h + h + j] = dc * f;
        }
    }
    (dpre.clone(), dpre, dstate)
}

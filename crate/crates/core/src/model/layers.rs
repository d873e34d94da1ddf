//! Forward/backward primitives: RMS norm, GELU MLP and rotary multi-head
//! attention with an arbitrary visibility predicate.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{Attention, Ffw};
use crate::pos_encoding::rotate_pairs;

pub(crate) const RMS_EPS: f64 = 1e-6;

/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rms_norm(x: &Array2<f64>, gain: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|r| 1.0 / (r.dot(&r) / d + RMS_EPS).sqrt())
        .collect();
    let mut y = x.clone();
    for (mut row, &r) in y.rows_mut().into_iter().zip(&inv) {
        row.zip_mut_with(gain, |a, &g| *a *= r * g);
    }
    (y, inv)
}

/// Returns `dx` and accumulates the gain gradient into `dgain`.
pub(crate) fn rms_norm_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    inv: &Array1<f64>,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for (i, &r) in inv.iter().enumerate() {
        let (xr, dyr) = (x.row(i), dy.row(i));
        let mut dot = 0.0;
        for j in 0..x.ncols() {
            dot += dyr[j] * gain[j] * xr[j];
            dgain[j] += dyr[j] * xr[j] * r;
        }
        let coef = r * r * r * dot / d;
        let mut out = dx.row_mut(i);
        for j in 0..x.ncols() {
            out[j] = r * gain[j] * dyr[j] - coef * xr[j];
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct FfwCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn ffw_forward(p: &Ffw, input: Array2<f64>) -> (Array2<f64>, FfwCache) {
    let pre = input.dot(&p.w1) + &p.b1;
    let act = pre.mapv(gelu);
    let out = act.dot(&p.w2) + &p.b2;
    (out, FfwCache { input, pre, act })
}

pub(crate) fn ffw_backward(p: &Ffw, c: &FfwCache, dout: &Array2<f64>, grad: &mut Ffw) -> Array2<f64> {
    grad.w2 += &c.act.t().dot(dout);
    grad.b2 += &dout.sum_axis(Axis(0));
    let mut dpre = dout.dot(&p.w2.t());
    dpre.zip_mut_with(&c.pre, |g, &x| *g *= gelu_grad(x));
    grad.w1 += &c.input.t().dot(&dpre);
    grad.b1 += &dpre.sum_axis(Axis(0));
    dpre.dot(&p.w1.t())
}

/// Rotates each head slice of each row by `sign * pos[row]`.
pub(crate) fn rotate_rows(m: &mut Array2<f64>, pos: &[usize], heads: usize, freqs: &[f64], sign: f64) {
    let hd = m.ncols() / heads;
    for (mut row, &p) in m.rows_mut().into_iter().zip(pos) {
        let slice = row.as_slice_mut().expect("row-major activations");
        for chunk in slice.chunks_exact_mut(hd) {
            rotate_pairs(chunk, sign * p as f64, freqs);
        }
    }
}

/// Row-wise softmax restricted to visible entries; a row with nothing
/// visible becomes all zeros.
pub(crate) fn masked_softmax_row(scores: &mut [f64], visible: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, &s) in scores.iter().enumerate() {
        if visible(j) && s > max {
            max = s;
        }
    }
    if max == f64::NEG_INFINITY {
        scores.fill(0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        if visible(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    scores.iter_mut().for_each(|s| *s /= sum);
}

pub(crate) struct AttnCache {
    pub a_q: Array2<f64>,
    pub a_kv: Option<Array2<f64>>,
    /// Rotated queries and keys.
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// One (queries x keys) matrix per head.
    pub probs: Vec<Array2<f64>>,
    pub ctx: Array2<f64>,
}

pub(crate) struct AttnSpec<'a> {
    pub heads: usize,
    pub freqs: &'a [f64],
    pub pos_q: &'a [usize],
    pub pos_k: &'a [usize],
}

/// Multi-head attention. `a_kv = None` means self-attention over `a_q`.
pub(crate) fn attention_forward(
    p: &Attention,
    spec: &AttnSpec<'_>,
    a_q: Array2<f64>,
    a_kv: Option<Array2<f64>>,
    visible: &dyn Fn(usize, usize) -> bool,
) -> (Array2<f64>, AttnCache) {
    let src = a_kv.as_ref().unwrap_or(&a_q);
    let mut q = a_q.dot(&p.wq);
    let mut k = src.dot(&p.wk);
    let v = src.dot(&p.wv);
    rotate_rows(&mut q, spec.pos_q, spec.heads, spec.freqs, 1.0);
    rotate_rows(&mut k, spec.pos_k, spec.heads, spec.freqs, 1.0);
    let hd = q.ncols() / spec.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut ctx = Array2::zeros(q.raw_dim());
    let mut probs = Vec::with_capacity(spec.heads);
    for h in 0..spec.heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t());
        sc *= scale;
        for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
            masked_softmax_row(row.as_slice_mut().expect("contiguous"), |j| visible(i, j));
        }
        ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let out = ctx.dot(&p.wo);
    (
        out,
        AttnCache {
            a_q,
            a_kv,
            q,
            k,
            v,
            probs,
            ctx,
        },
    )
}

/// Returns `(d a_q, d a_kv)`; for self-attention the caller adds both.
pub(crate) fn attention_backward(
    p: &Attention,
    spec: &AttnSpec<'_>,
    c: &AttnCache,
    dout: &Array2<f64>,
    grad: &mut Attention,
) -> (Array2<f64>, Array2<f64>) {
    grad.wo += &c.ctx.t().dot(dout);
    let dctx = dout.dot(&p.wo.t());
    let hd = c.q.ncols() / spec.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for (h, probs) in c.probs.iter().enumerate() {
        let cols = s![.., h * hd..(h + 1) * hd];
        let dctx_h = dctx.slice(cols);
        let mut ds = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        for (mut drow, prow) in ds.rows_mut().into_iter().zip(probs.rows()) {
            let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
            drow.zip_mut_with(&prow, |g, &pp| *g = pp * (*g - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    rotate_rows(&mut dq, spec.pos_q, spec.heads, spec.freqs, -1.0);
    rotate_rows(&mut dk, spec.pos_k, spec.heads, spec.freqs, -1.0);
    let src = c.a_kv.as_ref().unwrap_or(&c.a_q);
    grad.wq += &c.a_q.t().dot(&dq);
    grad.wk += &src.t().dot(&dk);
    grad.wv += &src.t().dot(&dv);
    let da_q = dq.dot(&p.wq.t());
    let da_kv = dk.dot(&p.wk.t()) + dv.dot(&p.wv.t());
    (da_q, da_kv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_differences() {
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_softmax_row_is_zero() {
        let mut row = [1.0, 2.0, 3.0];
        masked_softmax_row(&mut row, |_| false);
        assert_eq!(row, [0.0; 3]);
        let mut row = [1.0, 2.0, 3.0];
        masked_softmax_row(&mut row, |j| j != 1);
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rms_norm_unit_rms() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64 - 10.0);
        let (y, _) = rms_norm(&x, &Array1::ones(8));
        for r in y.rows() {
            assert!((r.dot(&r) / 8.0 - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn rotation_keeps_head_norms() {
        let freqs = crate::pos_encoding::RopeConfig::with_default_base(4)
            .unwrap()
            .freqs()
            .to_vec();
        let m = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 8 + j) as f64).sin());
        let mut r = m.clone();
        rotate_rows(&mut r, &[0, 5, 900], 2, &freqs, 1.0);
        for (a, b) in m.rows().into_iter().zip(r.rows()) {
            for h in 0..2 {
                let na: f64 = a.slice(s![h * 4..h * 4 + 4]).iter().map(|v| v * v).sum();
                let nb: f64 = b.slice(s![h * 4..h * 4 + 4]).iter().map(|v| v * v).sum();
                assert!((na - nb).abs() < 1e-12);
            }
        }
        rotate_rows(&mut r, &[0, 5, 900], 2, &freqs, -1.0);
        assert!(r.iter().zip(m.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

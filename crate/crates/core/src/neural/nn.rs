//! Shared layer primitives with hand-written backward passes.
//!
//! Forward functions return whatever the matching backward needs as an
//! explicit cache; no graph is recorded. Gradient conventions follow
//! `y = x · Wᵀ + b` with `x: L x d_in`, `W: d_out x d_in`, `b: 1 x d_out`.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

const LN_EPS: f64 = 1e-5;

/// `x · Wᵀ + b`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let mut y = matmul_nt(x, w);
    y.add_bias(b);
    y
}

/// Input gradient of a linear layer: `dy · W`.
pub fn linear_dx(dy: &Tensor, w: &Tensor) -> Tensor {
    matmul(dy, w)
}

/// Weight gradient of a linear layer: `dyᵀ · x`.
pub fn linear_dw(dy: &Tensor, x: &Tensor) -> Tensor {
    matmul_tn(dy, x)
}

/// Bias gradient of a linear layer: column sums of `dy`.
pub fn linear_db(dy: &Tensor) -> Tensor {
    dy.col_sums()
}

/// Per-row layer normalisation cache.
pub struct LnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Per-row layer normalisation: `gamma ⊙ (x - mean)/std + beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> (Tensor, LnCache) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut y = Tensor::zeros(rows, cols);
    let mut x_hat = Tensor::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let (xh, yr) = (x_hat.row_mut(i), y.row_mut(i));
        for j in 0..cols {
            xh[j] = (row[j] - mean) * inv;
            yr[j] = gamma.get(0, j) * xh[j] + beta.get(0, j);
        }
    }
    (y, LnCache { x_hat, inv_std })
}

/// Backward of [`layer_norm`]; returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(dy: &Tensor, cache: &LnCache, gamma: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (rows, cols) = (dy.rows(), dy.cols());
    let mut dx = Tensor::zeros(rows, cols);
    let mut dgamma = Tensor::zeros(1, cols);
    let mut dbeta = Tensor::zeros(1, cols);
    for i in 0..rows {
        let (dyr, xh) = (dy.row(i), cache.x_hat.row(i));
        let mut dxhat = vec![0.0; cols];
        for j in 0..cols {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma.get(0, j);
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
        let mean_dxhat_xhat =
            dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / cols as f64;
        let inv = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..cols {
            dxr[j] = inv * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044715;

/// Gaussian error linear unit (tanh approximation).
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

fn gelu_scalar(v: f64) -> f64 {
    0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
}

/// Backward of [`gelu`]: `dy ⊙ gelu'(x)`.
pub fn gelu_vjp(x: &Tensor, dy: &Tensor) -> Tensor {
    assert_eq!((x.rows(), x.cols()), (dy.rows(), dy.cols()), "shape mismatch");
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    for ((out, &v), &d) in dx.data_mut().iter_mut().zip(x.data()).zip(dy.data()) {
        let u = GELU_C * (v + GELU_A * v * v * v);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *out = d * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
    dx
}

/// In-place softmax over one row; `-inf` entries become exact zeros.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax backward for one row: `ds = a ⊙ (da - Σ a ⊙ da)`.
pub fn softmax_vjp_row(a: &[f64], da: &[f64], ds: &mut [f64]) {
    let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
    for j in 0..a.len() {
        ds[j] = a[j] * (da[j] - dot);
    }
}

/// Column range of head `h` when `d` is split into `heads` equal parts.
pub fn head_range(d: usize, heads: usize, h: usize) -> std::ops::Range<usize> {
    let dh = d / heads;
    h * dh..(h + 1) * dh
}

/// Scaled dot-product attention for one head with a pre-applied score
/// mask; returns the attention weights and the context rows.
///
/// `q: L x dh`, `k, v: M x dh`; `mask(i, j)` true means position `j` is
/// visible from query `i`.
pub fn head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: impl Fn(usize, usize) -> bool,
) -> (Tensor, Tensor) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut scores = matmul_nt(q, k);
    scores.scale(scale);
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            if !mask(i, j) {
                *s = f64::NEG_INFINITY;
            }
        }
        softmax_row(row);
    }
    let ctx = matmul(&scores, v);
    (scores, ctx)
}

/// Backward of [`head_attention`]; returns `(dq, dk, dv)`.
pub fn head_attention_backward(
    attn: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dctx: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let da = matmul_nt(dctx, v);
    let dv = matmul_tn(attn, dctx);
    let mut ds = Tensor::zeros(attn.rows(), attn.cols());
    for i in 0..attn.rows() {
        softmax_vjp_row(attn.row(i), da.row(i), ds.row_mut(i));
    }
    ds.scale(scale);
    let dq = matmul(&ds, k);
    let dk = matmul_tn(&ds, q);
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(f64) -> f64, x: f64, analytic: f64) {
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        assert!(
            (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-9) < 1e-6,
            "fd {fd} vs analytic {analytic} at {x}"
        );
    }

    #[test]
    fn gelu_gradient_matches_finite_differences() {
        for &x in &[-2.5, -0.7, 0.0, 0.3, 1.9] {
            let t = Tensor::from_vec(1, 1, vec![x]);
            let dy = Tensor::from_vec(1, 1, vec![1.0]);
            let g = gelu_vjp(&t, &dy).get(0, 0);
            fd_check(|v| gelu_scalar(v), x, g);
        }
    }

    #[test]
    fn gelu_known_values() {
        assert!(gelu_scalar(0.0).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841192).abs() < 1e-5);
        assert!((gelu_scalar(-1.0) + 0.158808).abs() < 1e-5);
    }

    #[test]
    fn softmax_handles_masking_exactly() {
        let mut row = vec![1.0, f64::NEG_INFINITY, 3.0];
        softmax_row(&mut row);
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row[2] > row[0]);
    }

    #[test]
    fn layer_norm_rows_are_standardised() {
        let x = Tensor::from_vec(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 8.0]);
        let gamma = Tensor::from_vec(1, 4, vec![1.0; 4]);
        let beta = Tensor::zeros(1, 4);
        let (y, _) = layer_norm(&x, &gamma, &beta);
        for i in 0..2 {
            let mean: f64 = y.row(i).iter().sum::<f64>() / 4.0;
            let var: f64 = y.row(i).iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let x = Tensor::from_vec(1, 3, vec![0.4, -1.1, 2.0]);
        let gamma = Tensor::from_vec(1, 3, vec![1.2, 0.8, -0.5]);
        let beta = Tensor::from_vec(1, 3, vec![0.1, -0.2, 0.0]);
        let dy = Tensor::from_vec(1, 3, vec![0.7, -0.3, 0.9]);
        let loss = |xv: &Tensor| {
            let (y, _) = layer_norm(xv, &gamma, &beta);
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let (dx, _, _) = layer_norm_backward(&dy, &cache, &gamma);
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x.clone();
            xp.set(0, j, x.get(0, j) + h);
            let mut xm = x.clone();
            xm.set(0, j, x.get(0, j) - h);
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
            assert!((fd - dx.get(0, j)).abs() < 1e-6, "col {j}: fd {fd} vs {}", dx.get(0, j));
        }
    }

    #[test]
    fn attention_respects_mask_and_grads_stay_zero_there() {
        let q = Tensor::from_vec(1, 2, vec![0.3, -0.9]);
        let k = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 5.0, 5.0]);
        let v = Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 100.0, 100.0]);
        let (attn, ctx) = head_attention(&q, &k, &v, |_, j| j < 2);
        assert_eq!(attn.get(0, 2), 0.0);
        assert!(ctx.get(0, 0) < 3.0);
        let dctx = Tensor::from_vec(1, 2, vec![1.0, 1.0]);
        let (_, dk, dv) = head_attention_backward(&attn, &q, &k, &v, &dctx);
        assert_eq!(dk.row(2), &[0.0, 0.0]);
        assert_eq!(dv.row(2), &[0.0, 0.0]);
    }
}

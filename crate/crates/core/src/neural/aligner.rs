//! Window-level query aligner and the two intensity-vector fusion points.
//!
//! The aligner splits its input into consecutive windows of
//! `window_frames` frames, zero-pads the last window, and lets a small
//! set of learned queries cross-attend over each window through a stack
//! of post-norm blocks. Padded frame positions are masked out of the
//! attention, so their values cannot reach the output.

use rand_chacha::ChaCha8Rng;

use crate::foa::IntensityFrames;

use super::nn::{
    gelu, gelu_vjp, head_attention, head_attention_backward, head_range, layer_norm,
    layer_norm_backward, linear, linear_db, linear_dw, linear_dx, LnCache,
};
use super::params::{gaussian, Grads, ParamSet};
use super::tensor::Tensor;
use super::{ModelConfig, NeuralError};

/// Maximum frame-count difference `fuse_before` will trim away.
pub const FUSE_TRIM_TOLERANCE: usize = 2;

/// Width of the aligner input for a fusion mode.
pub(super) fn aligner_input_dim(cfg: &ModelConfig) -> usize {
    match cfg.fusion {
        super::FusionMode::Before => cfg.d_enc + 3,
        _ => cfg.d_enc,
    }
}

pub(super) fn init_aligner(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d_in = aligner_input_dim(cfg);
    let d = cfg.d_q;
    params.insert("align.query", gaussian(rng, cfg.queries_per_window, d, 0.02), false);
    for l in 0..cfg.aligner_layers {
        let p = format!("align.l{l}");
        params.insert(&format!("{p}.attn.wq"), gaussian(rng, d, d, 0.02), false);
        params.insert(&format!("{p}.attn.bq"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.attn.wk"), gaussian(rng, d, d_in, 0.02), false);
        params.insert(&format!("{p}.attn.bk"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.attn.wv"), gaussian(rng, d, d_in, 0.02), false);
        params.insert(&format!("{p}.attn.bv"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.attn.wo"), gaussian(rng, d, d, 0.02), false);
        params.insert(&format!("{p}.attn.bo"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.ln1.g"), Tensor::from_fn(1, d, |_, _| 1.0), false);
        params.insert(&format!("{p}.ln1.b"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.ffn.w1"), gaussian(rng, cfg.aligner_ffn, d, 0.02), false);
        params.insert(&format!("{p}.ffn.b1"), Tensor::zeros(1, cfg.aligner_ffn), false);
        params.insert(&format!("{p}.ffn.w2"), gaussian(rng, d, cfg.aligner_ffn, 0.02), false);
        params.insert(&format!("{p}.ffn.b2"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.ln2.g"), Tensor::from_fn(1, d, |_, _| 1.0), false);
        params.insert(&format!("{p}.ln2.b"), Tensor::zeros(1, d), false);
    }
}

pub(super) fn init_projection(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d_in = match cfg.fusion {
        super::FusionMode::After => cfg.d_q + 3,
        _ => cfg.d_q,
    };
    params.insert("proj.w", gaussian(rng, cfg.d_llm, d_in, 0.02), false);
    params.insert("proj.b", Tensor::zeros(1, cfg.d_llm), false);
}

/// Concatenates intensity-vector rows onto encoder frames.
///
/// Frame counts may differ by at most [`FUSE_TRIM_TOLERANCE`]; both
/// inputs are trimmed to the shorter length.
pub fn fuse_before(z: &Tensor, iv: &IntensityFrames) -> Result<Tensor, NeuralError> {
    let (tz, ti) = (z.rows(), iv.len());
    if tz.abs_diff(ti) > FUSE_TRIM_TOLERANCE {
        return Err(NeuralError::FrameMismatch { z: tz, iv: ti });
    }
    let t = tz.min(ti);
    let mut out = Tensor::zeros(t, z.cols() + 3);
    for i in 0..t {
        let row = out.row_mut(i);
        row[..z.cols()].copy_from_slice(z.row(i));
        row[z.cols()..].copy_from_slice(&iv.vectors[i]);
    }
    Ok(out)
}

/// Linearly resamples intensity-vector rows onto `l` uniformly spaced
/// points with the endpoints mapped to each other. Rows are used as-is;
/// invalid frames are zero vectors and interpolate like any other value.
pub fn interpolate_iv(iv: &IntensityFrames, l: usize) -> Result<Tensor, NeuralError> {
    let t = iv.len();
    if t == 0 || l == 0 {
        return Err(NeuralError::Interpolation { t, l });
    }
    let mut out = Tensor::zeros(l, 3);
    for i in 0..l {
        let u = if t == 1 {
            0.0
        } else if l == 1 {
            (t - 1) as f64 / 2.0
        } else {
            i as f64 * (t - 1) as f64 / (l - 1) as f64
        };
        let j0 = (u.floor() as usize).min(t - 1);
        let j1 = (j0 + 1).min(t - 1);
        let frac = u - j0 as f64;
        let (a, b) = (iv.vectors[j0], iv.vectors[j1]);
        for c in 0..3 {
            out.set(i, c, (1.0 - frac) * a[c] + frac * b[c]);
        }
    }
    Ok(out)
}

pub(super) struct WindowLayerCache {
    x_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<Tensor>,
    ctx: Tensor,
    ln1: LnCache,
    x1: Tensor,
    ffn_u: Tensor,
    ffn_f: Tensor,
    ln2: LnCache,
}

pub(super) struct WindowCache {
    frames: Tensor,
    layers: Vec<WindowLayerCache>,
}

pub(super) struct QformerCache {
    windows: Vec<WindowCache>,
}

/// Runs the query stack over one padded window; `flen` is the number of
/// real (unpadded) frame rows.
fn window_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    frames: &Tensor,
    flen: usize,
) -> (Tensor, Vec<WindowLayerCache>) {
    let d = cfg.d_q;
    let heads = cfg.aligner_heads;
    let mut x = params.get("align.query").clone();
    let mut layers = Vec::with_capacity(cfg.aligner_layers);
    for l in 0..cfg.aligner_layers {
        let p = format!("align.l{l}");
        let x_in = x.clone();
        let q = linear(&x, params.get(&format!("{p}.attn.wq")), params.get(&format!("{p}.attn.bq")));
        let k = linear(frames, params.get(&format!("{p}.attn.wk")), params.get(&format!("{p}.attn.bk")));
        let v = linear(frames, params.get(&format!("{p}.attn.wv")), params.get(&format!("{p}.attn.bv")));
        let mut ctx = Tensor::zeros(q.rows(), d);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let r = head_range(d, heads, h);
            let (a, c) = head_attention(
                &q.col_slice(r.start, r.end),
                &k.col_slice(r.start, r.end),
                &v.col_slice(r.start, r.end),
                |_, j| j < flen,
            );
            ctx.add_col_slice(r.start, &c);
            attn.push(a);
        }
        let attn_out =
            linear(&ctx, params.get(&format!("{p}.attn.wo")), params.get(&format!("{p}.attn.bo")));
        let mut sum1 = x.clone();
        sum1.add_assign(&attn_out);
        let (x1, ln1) =
            layer_norm(&sum1, params.get(&format!("{p}.ln1.g")), params.get(&format!("{p}.ln1.b")));
        let ffn_u =
            linear(&x1, params.get(&format!("{p}.ffn.w1")), params.get(&format!("{p}.ffn.b1")));
        let ffn_f = gelu(&ffn_u);
        let y = linear(&ffn_f, params.get(&format!("{p}.ffn.w2")), params.get(&format!("{p}.ffn.b2")));
        let mut sum2 = x1.clone();
        sum2.add_assign(&y);
        let (x2, ln2) =
            layer_norm(&sum2, params.get(&format!("{p}.ln2.g")), params.get(&format!("{p}.ln2.b")));
        layers.push(WindowLayerCache { x_in, q, k, v, attn, ctx, ln1, x1, ffn_u, ffn_f, ln2 });
        x = x2;
    }
    (x, layers)
}

/// Aligns frame-level features to window-level ones, `Tw x d_q` with
/// `Tw = ceil(T / window_frames) * queries_per_window`.
pub(super) fn qformer_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    zp: &Tensor,
) -> (Tensor, QformerCache) {
    let t = zp.rows();
    assert!(t >= 1, "aligner needs at least one input frame");
    let wf = cfg.window_frames;
    let nq = cfg.queries_per_window;
    let n_win = t.div_ceil(wf);
    let mut h = Tensor::zeros(n_win * nq, cfg.d_q);
    let mut windows = Vec::with_capacity(n_win);
    for w in 0..n_win {
        let start = w * wf;
        let end = (start + wf).min(t);
        let mut frames = Tensor::zeros(wf, zp.cols());
        for (i, row) in (start..end).enumerate() {
            frames.set_row(i, zp.row(row));
        }
        let (x, layers) = window_forward(params, cfg, &frames, end - start);
        for i in 0..nq {
            h.set_row(w * nq + i, x.row(i));
        }
        windows.push(WindowCache { frames, layers });
    }
    (h, QformerCache { windows })
}

/// Accumulates aligner parameter gradients for upstream gradient `dh`.
///
/// Nothing flows past the window frames: the encoder below is frozen and
/// the fused intensity rows are input data, so no frame gradient is
/// produced.
pub(super) fn qformer_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    cache: &QformerCache,
    dh: &Tensor,
    grads: &mut Grads,
) {
    let d = cfg.d_q;
    let heads = cfg.aligner_heads;
    let nq = cfg.queries_per_window;
    let mut d_query = Tensor::zeros(nq, d);
    for (w, win) in cache.windows.iter().enumerate() {
        let mut d_x = dh.row_slice(w * nq, (w + 1) * nq);
        for l in (0..cfg.aligner_layers).rev() {
            let p = format!("align.l{l}");
            let c = &win.layers[l];
            let (d_sum2, dg2, db2) =
                layer_norm_backward(&d_x, &c.ln2, params.get(&format!("{p}.ln2.g")));
            grads.accumulate(params, &format!("{p}.ln2.g"), dg2);
            grads.accumulate(params, &format!("{p}.ln2.b"), db2);

            let w2 = params.get(&format!("{p}.ffn.w2"));
            grads.accumulate(params, &format!("{p}.ffn.w2"), linear_dw(&d_sum2, &c.ffn_f));
            grads.accumulate(params, &format!("{p}.ffn.b2"), linear_db(&d_sum2));
            let d_f = linear_dx(&d_sum2, w2);
            let d_u = gelu_vjp(&c.ffn_u, &d_f);
            let w1 = params.get(&format!("{p}.ffn.w1"));
            grads.accumulate(params, &format!("{p}.ffn.w1"), linear_dw(&d_u, &c.x1));
            grads.accumulate(params, &format!("{p}.ffn.b1"), linear_db(&d_u));
            let mut d_x1 = d_sum2;
            d_x1.add_assign(&linear_dx(&d_u, w1));

            let (d_sum1, dg1, db1) =
                layer_norm_backward(&d_x1, &c.ln1, params.get(&format!("{p}.ln1.g")));
            grads.accumulate(params, &format!("{p}.ln1.g"), dg1);
            grads.accumulate(params, &format!("{p}.ln1.b"), db1);

            let wo = params.get(&format!("{p}.attn.wo"));
            grads.accumulate(params, &format!("{p}.attn.wo"), linear_dw(&d_sum1, &c.ctx));
            grads.accumulate(params, &format!("{p}.attn.bo"), linear_db(&d_sum1));
            let d_ctx = linear_dx(&d_sum1, wo);

            let mut dq = Tensor::zeros(c.q.rows(), d);
            let mut dk = Tensor::zeros(c.k.rows(), d);
            let mut dv = Tensor::zeros(c.v.rows(), d);
            for h in 0..heads {
                let r = head_range(d, heads, h);
                let (dq_h, dk_h, dv_h) = head_attention_backward(
                    &c.attn[h],
                    &c.q.col_slice(r.start, r.end),
                    &c.k.col_slice(r.start, r.end),
                    &c.v.col_slice(r.start, r.end),
                    &d_ctx.col_slice(r.start, r.end),
                );
                dq.add_col_slice(r.start, &dq_h);
                dk.add_col_slice(r.start, &dk_h);
                dv.add_col_slice(r.start, &dv_h);
            }
            let wq = params.get(&format!("{p}.attn.wq"));
            grads.accumulate(params, &format!("{p}.attn.wq"), linear_dw(&dq, &c.x_in));
            grads.accumulate(params, &format!("{p}.attn.bq"), linear_db(&dq));
            grads.accumulate(params, &format!("{p}.attn.wk"), linear_dw(&dk, &win.frames));
            grads.accumulate(params, &format!("{p}.attn.bk"), linear_db(&dk));
            grads.accumulate(params, &format!("{p}.attn.wv"), linear_dw(&dv, &win.frames));
            grads.accumulate(params, &format!("{p}.attn.bv"), linear_db(&dv));

            let mut d_in = d_sum1;
            d_in.add_assign(&linear_dx(&dq, wq));
            d_x = d_in;
        }
        d_query.add_assign(&d_x);
    }
    grads.accumulate(params, "align.query", d_query);
}

pub(super) struct ProjCache {
    input: Tensor,
}

/// Projects window features (optionally concatenated with interpolated
/// intensity rows) into the decoder width.
pub(super) fn project_forward(
    params: &ParamSet,
    h: &Tensor,
    ivp: Option<&Tensor>,
) -> Result<(Tensor, ProjCache), NeuralError> {
    let input = match ivp {
        Some(p) => {
            if p.rows() != h.rows() {
                return Err(NeuralError::LengthMismatch { h: h.rows(), iv: p.rows() });
            }
            let mut joined = Tensor::zeros(h.rows(), h.cols() + 3);
            for i in 0..h.rows() {
                let row = joined.row_mut(i);
                row[..h.cols()].copy_from_slice(h.row(i));
                row[h.cols()..].copy_from_slice(p.row(i));
            }
            joined
        }
        None => h.clone(),
    };
    let out = linear(&input, params.get("proj.w"), params.get("proj.b"));
    Ok((out, ProjCache { input }))
}

/// Backward of [`project_forward`]; returns the gradient for the window
/// features (the intensity columns are input data).
pub(super) fn project_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    cache: &ProjCache,
    dy: &Tensor,
    grads: &mut Grads,
) -> Tensor {
    grads.accumulate(params, "proj.w", linear_dw(dy, &cache.input));
    grads.accumulate(params, "proj.b", linear_db(dy));
    let dx = linear_dx(dy, params.get("proj.w"));
    dx.col_slice(0, cfg.d_q)
}

#[cfg(test)]
mod tests {
    use crate::neural::{fuse_after, qformer, FusionMode, ModelState};

    use super::*;

    fn iv_of(rows: Vec<[f64; 3]>) -> IntensityFrames {
        let valid = rows.iter().map(|r| r.iter().any(|v| *v != 0.0)).collect();
        IntensityFrames { vectors: rows, valid, frame_rate: 50.0 }
    }

    fn ramp(rows: usize, cols: usize) -> Tensor {
        Tensor::from_fn(rows, cols, |i, j| ((i * 13 + j * 7) % 23) as f64 * 0.05 - 0.5)
    }

    #[test]
    fn fuse_before_concatenates_and_trims() {
        let z = ramp(100, 64);
        let iv = iv_of((0..100).map(|i| [i as f64, 0.5, -0.5]).collect());
        let zp = fuse_before(&z, &iv).unwrap();
        assert_eq!((zp.rows(), zp.cols()), (100, 67));
        assert_eq!(&zp.row(42)[64..], &[42.0, 0.5, -0.5]);
        assert_eq!(&zp.row(42)[..64], z.row(42));

        let longer = ramp(101, 64);
        let trimmed = fuse_before(&longer, &iv).unwrap();
        assert_eq!(trimmed.rows(), 100);

        let way_off = ramp(103, 64);
        assert!(matches!(
            fuse_before(&way_off, &iv),
            Err(NeuralError::FrameMismatch { z: 103, iv: 100 })
        ));
    }

    #[test]
    fn window_counts() {
        let state = ModelState::new(Default::default()).unwrap();
        for (t, rows) in [(34, 2), (17, 1), (20, 2), (1, 1), (35, 3)] {
            let h = qformer(&state, &ramp(t, 64));
            assert_eq!((h.rows(), h.cols()), (rows, 64), "T={t}");
        }
    }

    #[test]
    fn padded_positions_cannot_reach_the_output() {
        let state = ModelState::new(Default::default()).unwrap();
        let cfg = &state.config;
        let mut frames = Tensor::zeros(17, 64);
        for i in 0..3 {
            frames.set_row(i, ramp(17, 64).row(i));
        }
        let (clean, _) = window_forward(&state.params, cfg, &frames, 3);
        for i in 3..17 {
            for j in 0..64 {
                frames.set(i, j, 1e6 * (i as f64 - j as f64));
            }
        }
        let (junk, _) = window_forward(&state.params, cfg, &frames, 3);
        assert_eq!(clean, junk);
    }

    #[test]
    fn partial_window_matches_standalone_input() {
        let state = ModelState::new(Default::default()).unwrap();
        let zp = ramp(20, 64);
        let h_full = qformer(&state, &zp);
        let h_tail = qformer(&state, &zp.row_slice(17, 20));
        assert_eq!(h_full.row(1), h_tail.row(0));
    }

    #[test]
    fn interpolation_examples() {
        let iv = iv_of(vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let mid = interpolate_iv(&iv, 3).unwrap();
        assert_eq!(mid.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(mid.row(1), &[0.5, 0.5, 0.0]);
        assert_eq!(mid.row(2), &[0.0, 1.0, 0.0]);

        let same = interpolate_iv(&iv, 2).unwrap();
        assert_eq!(same.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(same.row(1), &[0.0, 1.0, 0.0]);

        let constant = iv_of(vec![[0.2, -0.3, 0.5]; 7]);
        let out = interpolate_iv(&constant, 4).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((out.get(i, c) - constant.vectors[0][c]).abs() < 1e-12);
            }
        }

        let single = interpolate_iv(&iv, 1).unwrap();
        assert_eq!(single.row(0), &[0.5, 0.5, 0.0]);

        assert!(matches!(
            interpolate_iv(&iv_of(vec![]), 4),
            Err(NeuralError::Interpolation { t: 0, l: 4 })
        ));
    }

    #[test]
    fn projection_is_affine_in_its_inputs() {
        let mut cfg = crate::neural::ModelConfig { fusion: FusionMode::After, ..Default::default() };
        cfg.seed = 11;
        let state = ModelState::new(cfg).unwrap();
        let h = ramp(5, 64);
        let ivp = ramp(5, 3);
        let bias = {
            let zero_h = Tensor::zeros(5, 64);
            let zero_iv = Tensor::zeros(5, 3);
            fuse_after(&state, &zero_h, &zero_iv).unwrap()
        };
        for i in 0..5 {
            for j in 0..state.config.d_llm {
                assert!((bias.get(i, j) - state.params.get("proj.b").get(0, j)).abs() < 1e-15);
            }
        }
        let mut h2 = h.clone();
        h2.scale(2.0);
        let mut iv2 = ivp.clone();
        iv2.scale(2.0);
        let once = fuse_after(&state, &h, &ivp).unwrap();
        let twice = fuse_after(&state, &h2, &iv2).unwrap();
        for i in 0..5 {
            for j in 0..state.config.d_llm {
                let lhs = twice.get(i, j) - bias.get(i, j);
                let rhs = 2.0 * (once.get(i, j) - bias.get(i, j));
                assert!((lhs - rhs).abs() < 1e-9);
            }
        }

        let short = ramp(4, 3);
        assert!(matches!(
            fuse_after(&state, &h, &short),
            Err(NeuralError::LengthMismatch { h: 5, iv: 4 })
        ));
    }

    #[test]
    fn aligner_dimensions_follow_fusion_mode() {
        let before = ModelState::new(crate::neural::ModelConfig {
            fusion: FusionMode::Before,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(before.params.get("align.l0.attn.wk").cols(), 67);
        assert_eq!(before.params.get("proj.w").cols(), 64);

        let after = ModelState::new(crate::neural::ModelConfig {
            fusion: FusionMode::After,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(after.params.get("align.l0.attn.wk").cols(), 64);
        assert_eq!(after.params.get("proj.w").cols(), 67);
    }
}

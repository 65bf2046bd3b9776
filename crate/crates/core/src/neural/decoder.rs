//! Causal decoder with LoRA adapters and optional vocabulary expansion.
//!
//! Input sequences are soft rows (projected audio windows) followed by
//! prompt and answer token embeddings, with learned positions added.
//! Two post-norm blocks of causal self-attention and a feed-forward feed
//! a bias-free output head. Cross-entropy is averaged over the answer
//! tokens plus one end-of-sequence target; an empty answer yields zero
//! loss and no gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::nn::{
    gelu, gelu_vjp, head_attention, head_attention_backward, head_range, layer_norm,
    layer_norm_backward, linear, linear_db, linear_dw, linear_dx, LnCache,
};
use super::params::{gaussian, Grads, ParamSet};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::tokenizer::{ANGLE_TOKENS, BASE_VOCAB, TOK_EOS};
use super::{ModelConfig, ModelState, NeuralError};

const LORA_SEED_SALT: u64 = 0x6c6f_7261;
const VOCAB_SEED_SALT: u64 = 0x766f_6361;

pub(super) fn init_decoder(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let d = cfg.d_llm;
    params.insert("dec.embed", gaussian(rng, BASE_VOCAB, d, 0.02), false);
    params.insert("dec.pos", gaussian(rng, cfg.max_seq, d, 0.02), false);
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.l{l}");
        params.insert(&format!("{p}.attn.wq"), gaussian(rng, d, d, 0.02), false);
        params.insert(&format!("{p}.attn.bq"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.attn.wk"), gaussian(rng, d, d, 0.02), false);
        params.insert(&format!("{p}.attn.bk"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.attn.wv"), gaussian(rng, d, d, 0.02), false);
        params.insert(&format!("{p}.attn.bv"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.attn.wo"), gaussian(rng, d, d, 0.02), false);
        params.insert(&format!("{p}.attn.bo"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.ln1.g"), Tensor::from_fn(1, d, |_, _| 1.0), false);
        params.insert(&format!("{p}.ln1.b"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.ffn.w1"), gaussian(rng, cfg.decoder_ffn, d, 0.02), false);
        params.insert(&format!("{p}.ffn.b1"), Tensor::zeros(1, cfg.decoder_ffn), false);
        params.insert(&format!("{p}.ffn.w2"), gaussian(rng, d, cfg.decoder_ffn, 0.02), false);
        params.insert(&format!("{p}.ffn.b2"), Tensor::zeros(1, d), false);
        params.insert(&format!("{p}.ln2.g"), Tensor::from_fn(1, d, |_, _| 1.0), false);
        params.insert(&format!("{p}.ln2.b"), Tensor::zeros(1, d), false);
    }
    params.insert("dec.out", gaussian(rng, d, BASE_VOCAB, 0.02), false);
}

/// Adds zero-initialised LoRA adapters to the attention query/value
/// projections of every decoder layer.
pub fn attach_lora(state: &mut ModelState) -> Result<(), NeuralError> {
    if state.params.contains("dec.l0.lora.q.down") {
        return Err(NeuralError::LoraAttached);
    }
    let cfg = &state.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ LORA_SEED_SALT);
    let (d, r) = (cfg.d_llm, cfg.lora_rank);
    for l in 0..cfg.decoder_layers {
        for proj in ["q", "v"] {
            let p = format!("dec.l{l}.lora.{proj}");
            state.params.insert(&format!("{p}.down"), gaussian(&mut rng, r, d, 0.02), false);
            state.params.insert(&format!("{p}.up"), Tensor::zeros(d, r), false);
        }
    }
    Ok(())
}

/// Freezes every base decoder table (embeddings, positions, blocks, and
/// the output head); LoRA adapters are unaffected.
pub fn freeze_decoder_base(state: &mut ModelState) {
    let names: Vec<String> = state
        .params
        .names()
        .filter(|n| n.starts_with("dec.") && !n.contains(".lora."))
        .map(String::from)
        .collect();
    for name in names {
        state.params.set_frozen(&name, true);
    }
}

/// Appends 361 angle-token rows to the embedding and output tables.
///
/// With `enable` false this is a no-op. The new embedding rows are
/// Gaussian and trainable; the new output columns start at zero, so
/// base-token logits are bit-identical until training moves them.
pub fn expand_vocab(state: &mut ModelState, enable: bool) -> Result<(), NeuralError> {
    if !enable {
        return Ok(());
    }
    if state.config.angle_vocab {
        return Err(NeuralError::AlreadyExpanded);
    }
    let d = state.config.d_llm;
    let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed ^ VOCAB_SEED_SALT);
    insert_vocab_tables(&mut state.params, d, &mut rng);
    state.config.angle_vocab = true;
    Ok(())
}

pub(super) fn insert_vocab_tables(params: &mut ParamSet, d: usize, rng: &mut ChaCha8Rng) {
    params.insert("vocab.new_embed", gaussian(rng, ANGLE_TOKENS, d, 0.02), false);
    params.insert("vocab.new_out", Tensor::zeros(d, ANGLE_TOKENS), false);
}

fn vocab_size(params: &ParamSet) -> usize {
    BASE_VOCAB + if params.contains("vocab.new_embed") { ANGLE_TOKENS } else { 0 }
}

fn lora_scale(cfg: &ModelConfig) -> f64 {
    cfg.lora_alpha / cfg.lora_rank as f64
}

/// Query/key/value projections for block `l`, with LoRA deltas on the
/// query and value paths when adapters are attached. Returns the cached
/// LoRA intermediates `x · downᵀ` needed by the backward pass.
fn lora_qv(
    params: &ParamSet,
    cfg: &ModelConfig,
    l: usize,
    x: &Tensor,
) -> Option<((Tensor, Tensor), (Tensor, Tensor))> {
    let p = format!("dec.l{l}");
    if !params.contains(&format!("{p}.lora.q.down")) {
        return None;
    }
    let s = lora_scale(cfg);
    let branch = |which: &str| {
        let u = matmul_nt(x, params.get(&format!("{p}.lora.{which}.down")));
        let mut delta = matmul_nt(&u, params.get(&format!("{p}.lora.{which}.up")));
        delta.scale(s);
        (delta, u)
    };
    Some((branch("q"), branch("v")))
}

/// What the attached adapters add to each layer's query and value
/// projections for input rows `x`, without the base projections.
/// Empty when no adapters are attached.
pub(crate) fn adapter_deltas(
    params: &ParamSet,
    cfg: &ModelConfig,
    x: &Tensor,
) -> Vec<(Tensor, Tensor)> {
    (0..cfg.decoder_layers)
        .filter_map(|l| lora_qv(params, cfg, l, x).map(|((dq, _), (dv, _))| (dq, dv)))
        .collect()
}

fn qkv_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    l: usize,
    x: &Tensor,
) -> (Tensor, Tensor, Tensor, Option<Tensor>, Option<Tensor>) {
    let p = format!("dec.l{l}");
    let mut q = linear(x, params.get(&format!("{p}.attn.wq")), params.get(&format!("{p}.attn.bq")));
    let k = linear(x, params.get(&format!("{p}.attn.wk")), params.get(&format!("{p}.attn.bk")));
    let mut v = linear(x, params.get(&format!("{p}.attn.wv")), params.get(&format!("{p}.attn.bv")));
    let mut uq = None;
    let mut uv = None;
    if let Some(((dq, q_u), (dv, v_u))) = lora_qv(params, cfg, l, x) {
        q.add_assign(&dq);
        v.add_assign(&dv);
        uq = Some(q_u);
        uv = Some(v_u);
    }
    (q, k, v, uq, uv)
}

pub(super) struct DecoderLayerCache {
    x_in: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    lora_uq: Option<Tensor>,
    lora_uv: Option<Tensor>,
    attn: Vec<Tensor>,
    ctx: Tensor,
    ln1: LnCache,
    x1: Tensor,
    ffn_u: Tensor,
    ffn_f: Tensor,
    ln2: LnCache,
}

pub(super) struct DecoderCache {
    layers: Vec<DecoderLayerCache>,
    ids: Vec<Option<usize>>,
    soft_rows: usize,
    x_final: Tensor,
    targets: Vec<(usize, usize)>,
    gathered: Tensor,
    probs: Vec<Vec<f64>>,
    pub(super) loss: f64,
}

/// Builds the input rows: soft rows, then token embeddings, plus learned
/// positions. `ids[i]` is `None` for soft rows.
fn build_input(
    params: &ParamSet,
    cfg: &ModelConfig,
    hp: Option<&Tensor>,
    tokens: &[usize],
) -> Result<(Tensor, Vec<Option<usize>>), NeuralError> {
    let tw = hp.map_or(0, Tensor::rows);
    let len = tw + tokens.len();
    if len > cfg.max_seq {
        return Err(NeuralError::SequenceTooLong { len, max: cfg.max_seq });
    }
    let d = cfg.d_llm;
    let vocab = vocab_size(params);
    let mut x = Tensor::zeros(len, d);
    let mut ids = vec![None; len];
    if let Some(h) = hp {
        assert_eq!(h.cols(), d, "soft rows must match the decoder width");
        for i in 0..tw {
            x.set_row(i, h.row(i));
        }
    }
    let embed = params.get("dec.embed");
    for (i, &id) in tokens.iter().enumerate() {
        if id >= vocab {
            return Err(NeuralError::TokenOutOfRange { id, vocab });
        }
        let row = if id < BASE_VOCAB {
            embed.row(id)
        } else {
            params.get("vocab.new_embed").row(id - BASE_VOCAB)
        };
        x.set_row(tw + i, row);
        ids[tw + i] = Some(id);
    }
    let pos = params.get("dec.pos");
    for i in 0..len {
        let row = x.row_mut(i);
        for (v, p) in row.iter_mut().zip(pos.row(i)) {
            *v += *p;
        }
    }
    Ok((x, ids))
}

/// Runs the block stack over `x0`, caching per-layer intermediates.
fn run_blocks(
    params: &ParamSet,
    cfg: &ModelConfig,
    x0: &Tensor,
) -> (Tensor, Vec<DecoderLayerCache>) {
    let d = cfg.d_llm;
    let heads = cfg.decoder_heads;
    let mut x = x0.clone();
    let mut layers = Vec::with_capacity(cfg.decoder_layers);
    for l in 0..cfg.decoder_layers {
        let p = format!("dec.l{l}");
        let x_in = x.clone();
        let (q, k, v, lora_uq, lora_uv) = qkv_forward(params, cfg, l, &x);
        let mut ctx = Tensor::zeros(x.rows(), d);
        let mut attn = Vec::with_capacity(heads);
        for h in 0..heads {
            let r = head_range(d, heads, h);
            let (a, c) = head_attention(
                &q.col_slice(r.start, r.end),
                &k.col_slice(r.start, r.end),
                &v.col_slice(r.start, r.end),
                |i, j| j <= i,
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
        layers.push(DecoderLayerCache {
            x_in,
            q,
            k,
            v,
            lora_uq,
            lora_uv,
            attn,
            ctx,
            ln1,
            x1,
            ffn_u,
            ffn_f,
            ln2,
        });
        x = x2;
    }
    (x, layers)
}

/// Logits for the given hidden rows over the full vocabulary.
fn head_logits(params: &ParamSet, rows: &Tensor) -> Tensor {
    let base = matmul(rows, params.get("dec.out"));
    if !params.contains("vocab.new_out") {
        return base;
    }
    let extra = matmul(rows, params.get("vocab.new_out"));
    let mut out = Tensor::zeros(rows.rows(), base.cols() + extra.cols());
    for i in 0..rows.rows() {
        let row = out.row_mut(i);
        row[..base.cols()].copy_from_slice(base.row(i));
        row[base.cols()..].copy_from_slice(extra.row(i));
    }
    out
}

/// Forward pass caching everything the backward pass needs. Loss is the
/// mean cross-entropy over answer positions plus the end-of-sequence
/// target; logits are only materialised at those positions.
pub(super) fn decoder_train_forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    hp: Option<&Tensor>,
    prompt: &[usize],
    answer: &[usize],
) -> Result<DecoderCache, NeuralError> {
    let tw = hp.map_or(0, Tensor::rows);
    let tokens: Vec<usize> = prompt.iter().chain(answer).copied().collect();
    let (x0, ids) = build_input(params, cfg, hp, &tokens)?;
    let (x_final, layers) = run_blocks(params, cfg, &x0);

    let mut targets = Vec::new();
    if !answer.is_empty() {
        let start = tw + prompt.len();
        for (k, &id) in answer.iter().enumerate() {
            if start + k >= 1 {
                targets.push((start + k - 1, id));
            }
        }
        targets.push((tw + tokens.len() - 1, TOK_EOS));
    }

    let mut gathered = Tensor::zeros(targets.len(), cfg.d_llm);
    for (r, &(pos, _)) in targets.iter().enumerate() {
        gathered.set_row(r, x_final.row(pos));
    }
    let logits = head_logits(params, &gathered);
    let mut probs = Vec::with_capacity(targets.len());
    let mut loss = 0.0;
    for (r, &(_, target)) in targets.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut p: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        for v in &p {
            sum += *v;
        }
        for v in &mut p {
            *v /= sum;
        }
        loss += max + sum.ln() - row[target];
        probs.push(p);
    }
    if !targets.is_empty() {
        loss /= targets.len() as f64;
    }

    Ok(DecoderCache { layers, ids, soft_rows: tw, x_final, targets, gathered, probs, loss })
}

/// Accumulates decoder gradients and returns the gradient of the soft
/// rows, when there are any. Frozen tables get no entries; with no
/// targets the pass is a no-op.
pub(super) fn decoder_backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    cache: &DecoderCache,
    grads: &mut Grads,
) -> Option<Tensor> {
    let nt = cache.targets.len();
    if nt == 0 {
        return None;
    }
    let d = cfg.d_llm;
    let heads = cfg.decoder_heads;
    let vocab = vocab_size(params);
    let scale = 1.0 / nt as f64;

    let mut dlogits = Tensor::zeros(nt, vocab);
    for (r, &(_, target)) in cache.targets.iter().enumerate() {
        let row = dlogits.row_mut(r);
        for (j, p) in cache.probs[r].iter().enumerate() {
            row[j] = p * scale;
        }
        row[target] -= scale;
    }
    let dl_base = dlogits.col_slice(0, BASE_VOCAB);
    if params.is_trainable("dec.out") {
        grads.accumulate(params, "dec.out", matmul_tn(&cache.gathered, &dl_base));
    }
    let mut d_gathered = matmul_nt(&dl_base, params.get("dec.out"));
    if vocab > BASE_VOCAB {
        let dl_new = dlogits.col_slice(BASE_VOCAB, vocab);
        if params.is_trainable("vocab.new_out") {
            grads.accumulate(params, "vocab.new_out", matmul_tn(&cache.gathered, &dl_new));
        }
        d_gathered.add_assign(&matmul_nt(&dl_new, params.get("vocab.new_out")));
    }

    let len = cache.x_final.rows();
    let mut d_x = Tensor::zeros(len, d);
    for (r, &(pos, _)) in cache.targets.iter().enumerate() {
        let row = d_x.row_mut(pos);
        for (v, g) in row.iter_mut().zip(d_gathered.row(r)) {
            *v += *g;
        }
    }

    for l in (0..cfg.decoder_layers).rev() {
        let p = format!("dec.l{l}");
        let c = &cache.layers[l];
        let frozen_base = params.is_frozen(&format!("{p}.attn.wq"));

        let (d_sum2, dg2, db2) = layer_norm_backward(&d_x, &c.ln2, params.get(&format!("{p}.ln2.g")));
        if !frozen_base {
            grads.accumulate(params, &format!("{p}.ln2.g"), dg2);
            grads.accumulate(params, &format!("{p}.ln2.b"), db2);
        }

        let w2 = params.get(&format!("{p}.ffn.w2"));
        if !frozen_base {
            grads.accumulate(params, &format!("{p}.ffn.w2"), linear_dw(&d_sum2, &c.ffn_f));
            grads.accumulate(params, &format!("{p}.ffn.b2"), linear_db(&d_sum2));
        }
        let d_f = linear_dx(&d_sum2, w2);
        let d_u = gelu_vjp(&c.ffn_u, &d_f);
        let w1 = params.get(&format!("{p}.ffn.w1"));
        if !frozen_base {
            grads.accumulate(params, &format!("{p}.ffn.w1"), linear_dw(&d_u, &c.x1));
            grads.accumulate(params, &format!("{p}.ffn.b1"), linear_db(&d_u));
        }
        let mut d_x1 = d_sum2;
        d_x1.add_assign(&linear_dx(&d_u, w1));

        let (d_sum1, dg1, db1) = layer_norm_backward(&d_x1, &c.ln1, params.get(&format!("{p}.ln1.g")));
        if !frozen_base {
            grads.accumulate(params, &format!("{p}.ln1.g"), dg1);
            grads.accumulate(params, &format!("{p}.ln1.b"), db1);
        }

        let wo = params.get(&format!("{p}.attn.wo"));
        if !frozen_base {
            grads.accumulate(params, &format!("{p}.attn.wo"), linear_dw(&d_sum1, &c.ctx));
            grads.accumulate(params, &format!("{p}.attn.bo"), linear_db(&d_sum1));
        }
        let d_ctx = linear_dx(&d_sum1, wo);

        let mut dq = Tensor::zeros(len, d);
        let mut dk = Tensor::zeros(len, d);
        let mut dv = Tensor::zeros(len, d);
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

        let mut d_in = d_sum1;
        if !frozen_base {
            grads.accumulate(params, &format!("{p}.attn.wq"), linear_dw(&dq, &c.x_in));
            grads.accumulate(params, &format!("{p}.attn.bq"), linear_db(&dq));
            grads.accumulate(params, &format!("{p}.attn.wk"), linear_dw(&dk, &c.x_in));
            grads.accumulate(params, &format!("{p}.attn.bk"), linear_db(&dk));
            grads.accumulate(params, &format!("{p}.attn.wv"), linear_dw(&dv, &c.x_in));
            grads.accumulate(params, &format!("{p}.attn.bv"), linear_db(&dv));
        }
        d_in.add_assign(&linear_dx(&dq, params.get(&format!("{p}.attn.wq"))));
        d_in.add_assign(&linear_dx(&dk, params.get(&format!("{p}.attn.wk"))));
        d_in.add_assign(&linear_dx(&dv, params.get(&format!("{p}.attn.wv"))));

        if let (Some(uq), Some(uv)) = (&c.lora_uq, &c.lora_uv) {
            let s = lora_scale(cfg);
            for (proj, dproj, u) in [("q", &dq, uq), ("v", &dv, uv)] {
                let pl = format!("{p}.lora.{proj}");
                if params.is_trainable(&format!("{pl}.up")) {
                    let mut dup = matmul_tn(dproj, u);
                    dup.scale(s);
                    grads.accumulate(params, &format!("{pl}.up"), dup);
                }
                let mut du = matmul(dproj, params.get(&format!("{pl}.up")));
                du.scale(s);
                if params.is_trainable(&format!("{pl}.down")) {
                    grads.accumulate(params, &format!("{pl}.down"), matmul_tn(&du, &c.x_in));
                }
                d_in.add_assign(&matmul(&du, params.get(&format!("{pl}.down"))));
            }
        }
        d_x = d_in;
    }

    if params.is_trainable("dec.pos") {
        let pos = params.get("dec.pos");
        let mut dpos = Tensor::zeros(pos.rows(), d);
        for i in 0..len {
            dpos.row_mut(i).copy_from_slice(d_x.row(i));
        }
        grads.accumulate(params, "dec.pos", dpos);
    }
    let embed_trainable = params.is_trainable("dec.embed");
    let new_embed_trainable =
        params.contains("vocab.new_embed") && params.is_trainable("vocab.new_embed");
    if embed_trainable || new_embed_trainable {
        let mut dembed = Tensor::zeros(BASE_VOCAB, d);
        let mut dnew = Tensor::zeros(ANGLE_TOKENS, d);
        for (i, id) in cache.ids.iter().enumerate() {
            if let Some(id) = id {
                let (tensor, row) =
                    if *id < BASE_VOCAB { (&mut dembed, *id) } else { (&mut dnew, id - BASE_VOCAB) };
                let dst = tensor.row_mut(row);
                for (v, g) in dst.iter_mut().zip(d_x.row(i)) {
                    *v += *g;
                }
            }
        }
        if embed_trainable {
            grads.accumulate(params, "dec.embed", dembed);
        }
        if new_embed_trainable {
            grads.accumulate(params, "vocab.new_embed", dnew);
        }
    }

    if cache.soft_rows > 0 {
        Some(d_x.row_slice(0, cache.soft_rows))
    } else {
        None
    }
}

/// Full-sequence logits and the training loss, for inspection and tests.
pub fn decoder_forward(
    state: &ModelState,
    hp: Option<&Tensor>,
    prompt: &[usize],
    answer: &[usize],
) -> Result<(Tensor, f64), NeuralError> {
    let cache = decoder_train_forward(&state.params, &state.config, hp, prompt, answer)?;
    let logits = head_logits(&state.params, &cache.x_final);
    Ok((logits, cache.loss))
}

struct GenLayerState {
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Runs one input row through the block stack, appending its keys and
/// values to the per-layer caches, and returns the final hidden row.
fn advance(
    params: &ParamSet,
    cfg: &ModelConfig,
    states: &mut [GenLayerState],
    row: &[f64],
) -> Vec<f64> {
    let d = cfg.d_llm;
    let heads = cfg.decoder_heads;
    let dh = d / heads;
    let mut x = Tensor::from_vec(1, d, row.to_vec());
    for (l, st) in states.iter_mut().enumerate() {
        let p = format!("dec.l{l}");
        let (q, k, v, _, _) = qkv_forward(params, cfg, l, &x);
        st.k.extend_from_slice(k.row(0));
        st.v.extend_from_slice(v.row(0));
        let rows = st.k.len() / d;
        let mut ctx = Tensor::zeros(1, d);
        for h in 0..heads {
            let hr = head_range(d, heads, h);
            let qh = &q.row(0)[hr.clone()];
            let scale = 1.0 / (dh as f64).sqrt();
            let mut scores: Vec<f64> = (0..rows)
                .map(|j| {
                    let kh = &st.k[j * d + hr.start..j * d + hr.end];
                    qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale
                })
                .collect();
            super::nn::softmax_row(&mut scores);
            let out = &mut ctx.row_mut(0)[hr.clone()];
            for (j, a) in scores.iter().enumerate() {
                let vh = &st.v[j * d + hr.start..j * d + hr.end];
                for (o, vv) in out.iter_mut().zip(vh) {
                    *o += a * vv;
                }
            }
        }
        let attn_out =
            linear(&ctx, params.get(&format!("{p}.attn.wo")), params.get(&format!("{p}.attn.bo")));
        let mut sum1 = x.clone();
        sum1.add_assign(&attn_out);
        let (x1, _) =
            layer_norm(&sum1, params.get(&format!("{p}.ln1.g")), params.get(&format!("{p}.ln1.b")));
        let u = linear(&x1, params.get(&format!("{p}.ffn.w1")), params.get(&format!("{p}.ffn.b1")));
        let f = gelu(&u);
        let y = linear(&f, params.get(&format!("{p}.ffn.w2")), params.get(&format!("{p}.ffn.b2")));
        let mut sum2 = x1;
        sum2.add_assign(&y);
        let (x2, _) =
            layer_norm(&sum2, params.get(&format!("{p}.ln2.g")), params.get(&format!("{p}.ln2.b")));
        x = x2;
    }
    x.row(0).to_vec()
}

/// Greedy decoding: argmax token by token until the end-of-sequence
/// token, `max_new` generated tokens, or the context limit is reached.
pub fn generate(
    state: &ModelState,
    hp: Option<&Tensor>,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>, NeuralError> {
    let params = &state.params;
    let cfg = &state.config;
    let (x0, _) = build_input(params, cfg, hp, prompt)?;
    let mut len = x0.rows();
    if len == 0 {
        return Ok(Vec::new());
    }
    let mut states: Vec<GenLayerState> = (0..cfg.decoder_layers)
        .map(|_| GenLayerState { k: Vec::new(), v: Vec::new() })
        .collect();
    let mut last = Vec::new();
    for i in 0..len {
        last = advance(params, cfg, &mut states, x0.row(i));
    }
    let mut out = Vec::new();
    let vocab = vocab_size(params);
    let embed = params.get("dec.embed");
    let pos = params.get("dec.pos");
    while out.len() < max_new {
        let hidden = Tensor::from_vec(1, cfg.d_llm, last.clone());
        let logits = head_logits(params, &hidden);
        let mut best = 0;
        for j in 1..vocab {
            if logits.get(0, j) > logits.get(0, best) {
                best = j;
            }
        }
        out.push(best);
        if best == TOK_EOS || len >= cfg.max_seq {
            break;
        }
        let src =
            if best < BASE_VOCAB { embed.row(best) } else { params.get("vocab.new_embed").row(best - BASE_VOCAB) };
        let mut row: Vec<f64> = src.to_vec();
        for (v, p) in row.iter_mut().zip(pos.row(len)) {
            *v += *p;
        }
        last = advance(params, cfg, &mut states, &row);
        len += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use crate::neural::tokenizer::Tokenizer;
    use crate::neural::{backward, forward, FusionMode, ModelConfig, ModelState, TrainExample};

    use super::*;

    fn tiny_state(seed: u64) -> ModelState {
        ModelState::new(ModelConfig { seed, ..ModelConfig::tiny() }).unwrap()
    }

    #[test]
    fn forced_maximal_target_beats_uniform_head() {
        let mut state = tiny_state(3);
        let d = state.config.d_llm;
        *state.params.get_mut("dec.out") = Tensor::zeros(d, BASE_VOCAB);
        let prompt = [20, 21, 22];
        let answer = [23];
        let (_, uniform_loss) = decoder_forward(&state, None, &prompt, &answer).unwrap();
        let cache =
            decoder_train_forward(&state.params, &state.config, None, &prompt, &answer).unwrap();
        assert!((uniform_loss - (BASE_VOCAB as f64).ln()).abs() < 1e-12);

        let x_row: Vec<f64> = cache.gathered.row(0).to_vec();
        {
            let out = state.params.get_mut("dec.out");
            for (i, v) in x_row.iter().enumerate() {
                out.set(i, answer[0], *v);
            }
        }
        let (_, forced_loss) = decoder_forward(&state, None, &prompt, &answer).unwrap();
        assert!(forced_loss < uniform_loss);
    }

    #[test]
    fn loss_is_sensitive_to_answer_order() {
        let state = tiny_state(5);
        let (_, l1) = decoder_forward(&state, None, &[20, 21], &[22, 23, 24]).unwrap();
        let (_, l2) = decoder_forward(&state, None, &[20, 21], &[24, 23, 22]).unwrap();
        assert!((l1 - l2).abs() > 1e-9);
    }

    #[test]
    fn fresh_lora_is_bit_identical_to_no_lora() {
        let base = tiny_state(7);
        let mut with = base.clone();
        attach_lora(&mut with).unwrap();
        let prompt = [16, 17, 18];
        let answer = [19, 20];
        let (lb, _) = decoder_forward(&base, None, &prompt, &answer).unwrap();
        let (lw, _) = decoder_forward(&with, None, &prompt, &answer).unwrap();
        assert_eq!(lb, lw);
        assert!(matches!(attach_lora(&mut with), Err(NeuralError::LoraAttached)));
    }

    #[test]
    fn doubling_alpha_doubles_the_adapter_delta() {
        let base = tiny_state(9);
        let mut noisy = base.clone();
        attach_lora(&mut noisy).unwrap();
        crate::neural::jitter_trainable(&mut noisy, 0.05, 123);
        for (name, p) in base.params.iter() {
            *noisy.params.get_mut(name) = p.tensor.clone();
        }
        let x = Tensor::from_fn(3, noisy.config.d_llm, |i, j| ((i * 31 + j * 7) as f64).sin());
        assert!(adapter_deltas(&base.params, &base.config, &x).is_empty());
        let one = adapter_deltas(&noisy.params, &noisy.config, &x);
        let mut doubled = noisy.clone();
        doubled.config.lora_alpha *= 2.0;
        let two = adapter_deltas(&doubled.params, &doubled.config, &x);
        assert_eq!(one.len(), noisy.config.decoder_layers);
        let mut max_delta: f64 = 0.0;
        let mut max_err: f64 = 0.0;
        for ((q1, v1), (q2, v2)) in one.iter().zip(&two) {
            for (st, dbl) in [(q1, q2), (v1, v2)] {
                for (a, b) in st.data().iter().zip(dbl.data()) {
                    max_delta = max_delta.max(a.abs());
                    max_err = max_err.max((b - 2.0 * a).abs());
                }
            }
        }
        assert!(max_delta > 1e-6, "jittered adapters should produce a nonzero delta");
        assert!(max_err < 1e-9, "delta should scale linearly with alpha, err {max_err}");
    }

    #[test]
    fn expansion_preserves_base_logits_exactly() {
        let mut state = tiny_state(11);
        let prompt = [16, 17];
        let answer = [18];
        let (before, _) = decoder_forward(&state, None, &prompt, &answer).unwrap();
        expand_vocab(&mut state, true).unwrap();
        let (after, _) = decoder_forward(&state, None, &prompt, &answer).unwrap();
        assert_eq!(after.cols(), BASE_VOCAB + ANGLE_TOKENS);
        for i in 0..before.rows() {
            assert_eq!(before.row(i), &after.row(i)[..BASE_VOCAB]);
        }
        assert!(matches!(expand_vocab(&mut state, true), Err(NeuralError::AlreadyExpanded)));
    }

    #[test]
    fn expanded_tokens_embed_and_score() {
        let mut state = tiny_state(13);
        expand_vocab(&mut state, true).unwrap();
        let tok = Tokenizer::new(true);
        let answer = tok.encode("45");
        assert_eq!(answer.len(), 1);
        let (logits, loss) = decoder_forward(&state, None, &[16], &answer).unwrap();
        assert_eq!(logits.cols(), BASE_VOCAB + ANGLE_TOKENS);
        assert!(loss.is_finite());
    }

    #[test]
    fn empty_answer_has_zero_loss_and_no_gradients() {
        let state = tiny_state(15);
        let ex = TrainExample { audio: None, prompt: vec![16, 17, 18], answer: vec![] };
        let rec = forward(&state, &ex).unwrap();
        assert_eq!(rec.loss, 0.0);
        let grads = backward(&state, &rec);
        assert!(grads.is_empty());
    }

    #[test]
    fn frozen_base_receives_no_gradient_entries() {
        let mut state = tiny_state(17);
        freeze_decoder_base(&mut state);
        attach_lora(&mut state).unwrap();
        crate::neural::jitter_trainable(&mut state, 0.05, 5);
        let ex = TrainExample { audio: None, prompt: vec![16, 17], answer: vec![18, 19] };
        let rec = forward(&state, &ex).unwrap();
        let grads = backward(&state, &rec);
        assert!(!grads.is_empty());
        for (name, _) in grads.iter() {
            assert!(name.contains(".lora."), "unexpected gradient for {name}");
        }
        assert!(grads.get("dec.l0.lora.q.down").is_some());
        assert!(grads.get("dec.l0.lora.v.up").is_some());
    }

    #[test]
    fn sequence_length_is_enforced() {
        let state = tiny_state(19);
        let long = vec![16usize; state.config.max_seq + 1];
        assert!(matches!(
            decoder_forward(&state, None, &long, &[]),
            Err(NeuralError::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn generation_is_deterministic_and_terminates() {
        let state = tiny_state(21);
        let a = generate(&state, None, &[16, 17, 18], 10).unwrap();
        let b = generate(&state, None, &[16, 17, 18], 10).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty() && a.len() <= 10);

        let zeros = Tensor::zeros(4, state.config.d_llm);
        let c = generate(&state, Some(&zeros), &[], 6).unwrap();
        assert!(c.len() <= 6);
    }

    #[test]
    fn generation_matches_block_forward_logits() {
        let state = tiny_state(23);
        let prompt = [16, 29, 40, 2, 17];
        let gen = generate(&state, None, &prompt, 1).unwrap();
        let (logits, _) = decoder_forward(&state, None, &prompt, &[]).unwrap();
        let last = logits.row(prompt.len() - 1);
        let mut best = 0;
        for j in 1..logits.cols() {
            if last[j] > last[best] {
                best = j;
            }
        }
        assert_eq!(gen[0], best);
    }

    #[test]
    fn fusion_none_ignores_intensity_input() {
        let cfg = ModelConfig { fusion: FusionMode::None, ..ModelConfig::tiny() };
        let state = ModelState::new(cfg).unwrap();
        let mel = crate::foa::MelFrames {
            features: (0..40 * 80).map(|i| -20.0 + (i % 17) as f64).collect(),
            frames: 40,
            bands: 80,
            frame_rate: 50.0,
        };
        let iv1 = crate::foa::IntensityFrames {
            vectors: vec![[1.0, 0.0, 0.0]; 40],
            valid: vec![true; 40],
            frame_rate: 50.0,
        };
        let iv2 = crate::foa::IntensityFrames {
            vectors: vec![[0.0, -1.0, 0.0]; 40],
            valid: vec![true; 40],
            frame_rate: 50.0,
        };
        let ex1 = TrainExample {
            audio: Some((mel.clone(), iv1)),
            prompt: vec![16, 17],
            answer: vec![18],
        };
        let ex2 = TrainExample { audio: Some((mel, iv2)), prompt: vec![16, 17], answer: vec![18] };
        let r1 = forward(&state, &ex1).unwrap();
        let r2 = forward(&state, &ex2).unwrap();
        assert_eq!(r1.loss, r2.loss);
    }
}

//! Tape-recorded forward passes for training.
//!
//! Two users: the lookahead pass (gradients flow into soft embeddings and
//! adapters while the prompt cache stays constant) and toy-model
//! pretraining (gradients flow into the base weights themselves). Both run
//! the same decoder stack; only the leaf set differs.

use super::cache::KVCache;
use super::lookahead::LookaheadParams;
use super::{Model, TokenId, RMS_EPS};
use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Tape handles for the trainable lookahead parameters, in the same order
/// as `LookaheadParams::named_tensors`.
pub struct LookaheadVars {
    pub embeddings: Var,
    pub adapters: Vec<[Option<(Var, Var)>; 7]>,
    pub lora_scale: f64,
}

pub fn insert_lookahead_leaves<T: Scalar>(
    tape: &mut Tape<T>,
    params: &LookaheadParams<T>,
) -> LookaheadVars {
    let embeddings = tape.leaf(params.embeddings.clone().with_grad());
    let mut adapters = Vec::with_capacity(params.adapters.len());
    for layer in &params.adapters {
        let mut vars: [Option<(Var, Var)>; 7] = Default::default();
        for (i, pair) in layer.pairs.iter().enumerate() {
            if let Some(p) = pair {
                let a = tape.leaf(p.a.clone().with_grad());
                let b = tape.leaf(p.b.clone().with_grad());
                vars[i] = Some((a, b));
            }
        }
        adapters.push(vars);
    }
    LookaheadVars { embeddings, adapters, lora_scale: params.cfg.lora_scale() }
}

/// Read gradients back out in `named_tensors` order.
pub fn lookahead_grads<T: Scalar>(
    tape: &Tape<T>,
    vars: &LookaheadVars,
) -> Result<Vec<Tensor<T>>> {
    let mut out = Vec::new();
    let grad_or_zero = |tape: &Tape<T>, v: Var| -> Tensor<T> {
        tape.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
    };
    out.push(grad_or_zero(tape, vars.embeddings));
    for layer in &vars.adapters {
        for slot in layer.iter().flatten() {
            out.push(grad_or_zero(tape, slot.0));
            out.push(grad_or_zero(tape, slot.1));
        }
    }
    Ok(out)
}

/// Tape handles for base weights (pretraining); norm gains stay frozen.
pub struct BaseVars {
    pub embed: Var,
    pub layers: Vec<[Var; 7]>,
    pub lm_head: Var,
}

struct WeightVars {
    embed: Var,
    layers: Vec<[Var; 7]>,
    lm_head: Var,
}

fn insert_weights<T: Scalar>(tape: &mut Tape<T>, model: &Model<T>, trainable: bool) -> WeightVars {
    let insert = |tape: &mut Tape<T>, t: &Tensor<T>| {
        if trainable {
            tape.leaf(t.clone().with_grad())
        } else {
            tape.constant(t.clone())
        }
    };
    let embed = insert(tape, &model.embed);
    let mut layers = Vec::with_capacity(model.layers.len());
    for lw in &model.layers {
        let vars = [
            insert(tape, &lw.w_q),
            insert(tape, &lw.w_k),
            insert(tape, &lw.w_v),
            insert(tape, &lw.w_o),
            insert(tape, &lw.w_gate),
            insert(tape, &lw.w_up),
            insert(tape, &lw.w_down),
        ];
        layers.push(vars);
    }
    let lm_head = insert(tape, &model.lm_head);
    WeightVars { embed, layers, lm_head }
}

fn project<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var)>,
    lora_scale: f64,
) -> Result<Var> {
    let mut y = tape.matmul_nt(x, w)?;
    if let Some((a, b)) = adapter {
        let u = tape.matmul_nt(x, a)?;
        let delta = tape.matmul_nt(u, b)?;
        let scaled = tape.scale(delta, lora_scale);
        y = tape.add(y, scaled)?;
    }
    Ok(y)
}

/// Decoder stack over tail rows, optionally attending to a constant prompt
/// cache. When `scores` is given, collects the per-(layer, query head)
/// column means of attention over the prompt columns.
#[allow(clippy::too_many_arguments)]
fn decoder_stack<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    wv: &WeightVars,
    adapters: Option<&LookaheadVars>,
    prompt: Option<&KVCache<T>>,
    h0: Var,
    positions: &[usize],
    mut scores: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let cfg = &model.cfg;
    let dh = cfg.d_head;
    let t = tape.value(h0).rows();
    let c = prompt.map_or(0, |p| p.len());
    let limits: Vec<usize> = (0..t).map(|i| c + i + 1).collect();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let lora_scale = adapters.map_or(0.0, |a| a.lora_scale);

    let mut h = h0;
    for layer in 0..cfg.n_layers {
        let lw = &model.layers[layer];
        let slot_var = |slot: usize| -> Option<(Var, Var)> {
            adapters.and_then(|a| a.adapters[layer][slot])
        };
        let x = tape.rmsnorm(h, &lw.attn_norm, RMS_EPS)?;
        let q = project(tape, x, wv.layers[layer][0], slot_var(0), lora_scale)?;
        let k = project(tape, x, wv.layers[layer][1], slot_var(1), lora_scale)?;
        let v = project(tape, x, wv.layers[layer][2], slot_var(2), lora_scale)?;

        let mut kv_full: Vec<(Var, Var)> = Vec::with_capacity(cfg.n_kv_heads);
        for g in 0..cfg.n_kv_heads {
            let k_g = tape.slice_cols(k, g * dh, dh)?;
            let k_g = if cfg.rope_enabled { tape.rope(k_g, positions, cfg.rope_base)? } else { k_g };
            let v_g = tape.slice_cols(v, g * dh, dh)?;
            let (k_all, v_all) = match prompt {
                Some(cache) if c > 0 => {
                    let head = cache.head(layer, g);
                    let kp = tape.constant(Tensor::from_vec(vec![c, dh], head.keys.clone())?);
                    let vp = tape.constant(Tensor::from_vec(vec![c, dh], head.values.clone())?);
                    (tape.concat_rows(kp, k_g)?, tape.concat_rows(vp, v_g)?)
                }
                _ => (k_g, v_g),
            };
            kv_full.push((k_all, v_all));
        }

        let mut head_outputs = Vec::with_capacity(cfg.n_query_heads);
        for hq in 0..cfg.n_query_heads {
            let g = cfg.kv_group(hq);
            let q_h = tape.slice_cols(q, hq * dh, dh)?;
            let q_h = if cfg.rope_enabled { tape.rope(q_h, positions, cfg.rope_base)? } else { q_h };
            let (k_all, v_all) = kv_full[g];
            let logits = tape.matmul_nt(q_h, k_all)?;
            let scaled = tape.scale(logits, inv_sqrt);
            let probs = tape.softmax_rows(scaled, Some(limits.clone()))?;
            if let Some(collect) = scores.as_deref_mut() {
                if c == 0 {
                    return Err(Error::contract(
                        "score collection needs a prompt cache".to_string(),
                    ));
                }
                let cross = tape.slice_cols(probs, 0, c)?;
                collect.push(tape.mean_over_rows(cross));
            }
            head_outputs.push(tape.matmul(probs, v_all)?);
        }
        let concat = tape.concat_cols(&head_outputs)?;
        let o = project(tape, concat, wv.layers[layer][3], slot_var(3), lora_scale)?;
        h = tape.add(h, o)?;

        let x2 = tape.rmsnorm(h, &lw.mlp_norm, RMS_EPS)?;
        let gate = project(tape, x2, wv.layers[layer][4], slot_var(4), lora_scale)?;
        let up = project(tape, x2, wv.layers[layer][5], slot_var(5), lora_scale)?;
        let silu = tape.silu(gate);
        let act = tape.mul(silu, up)?;
        let down = project(tape, act, wv.layers[layer][6], slot_var(6), lora_scale)?;
        h = tape.add(h, down)?;
    }
    Ok(h)
}

/// Lookahead pass on tape: returns raw (un-normalized) mean attention of
/// the lookahead rows over prompt columns, one handle per (layer, head) in
/// layer-major order.
pub fn taped_lookahead_scores<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    cache: &KVCache<T>,
    vars: &LookaheadVars,
    start_position: usize,
) -> Result<Vec<Var>> {
    if cache.is_empty() {
        return Err(Error::contract("lookahead pass over an empty cache".to_string()));
    }
    let n_la = tape.value(vars.embeddings).rows();
    let positions: Vec<usize> = (start_position..start_position + n_la).collect();
    let wv = insert_weights(tape, model, false);
    let mut scores = Vec::with_capacity(model.cfg.n_layers * model.cfg.n_query_heads);
    decoder_stack(
        tape,
        model,
        &wv,
        Some(vars),
        Some(cache),
        vars.embeddings,
        &positions,
        Some(&mut scores),
    )?;
    Ok(scores)
}

/// Full-sequence language-model loss for toy-model pretraining: mean
/// cross-entropy of rows `loss_start-1 .. n-1` predicting the next token.
/// Returns the loss handle plus the weight leaves for the optimizer.
pub fn taped_lm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &Model<T>,
    tokens: &[TokenId],
    loss_start: usize,
) -> Result<(Var, BaseVars)> {
    let n = tokens.len();
    if loss_start == 0 || loss_start >= n {
        return Err(Error::input(format!(
            "loss_start {} outside sequence of {}",
            loss_start, n
        )));
    }
    let wv = insert_weights(tape, model, true);
    let h0 = tape.gather_rows(wv.embed, tokens)?;
    let positions: Vec<usize> = (0..n).collect();
    let h = decoder_stack(tape, model, &wv, None, None, h0, &positions, None)?;
    let xf = tape.rmsnorm(h, &model.final_norm, RMS_EPS)?;
    let logits = tape.matmul_nt(xf, wv.lm_head)?;
    // row i predicts token i+1; keep rows loss_start-1 .. n-2
    let rows = tape.slice_rows(logits, loss_start - 1, n - loss_start)?;
    let targets: Vec<usize> = tokens[loss_start..].to_vec();
    let loss = tape.cross_entropy(rows, &targets)?;
    Ok((loss, BaseVars { embed: wv.embed, layers: wv.layers, lm_head: wv.lm_head }))
}

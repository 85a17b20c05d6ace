//! Inference engine: one streaming attention path shared by prefill,
//! decode, and scoring passes.
//!
//! A pass processes a block of "tail" rows against an existing cache. The
//! prompt prefill is a tail pass over an empty cache; appending lookahead
//! tokens is a second tail pass over the prompt cache; a decode step is a
//! one-row tail pass. Prompt rows therefore go through byte-identical code
//! whether or not lookahead tokens follow, which is what makes the
//! selective-activation invariant hold bitwise.
//!
//! Attention probabilities are never materialized as an n x n matrix: each
//! row's probabilities live in a scratch buffer (or directly in the probe
//! block for probed rows), so peak transient allocation per head stays
//! bounded by `tail_rows * seq_len`.

use super::cache::KVCache;
use super::lookahead::{AdapterSlot, LookaheadParams, LoraPair};
use super::{Model, TokenId, RMS_EPS};
use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

/// Cross-attention probability rows captured during a pass.
///
/// `blocks[layer * n_query_heads + head]` holds the last `tail_rows` rows of
/// that head's attention matrix over all `n_cols` columns (cache + tail);
/// masked columns are exactly zero.
#[derive(Clone, Debug)]
pub struct AttentionProbe<T> {
    pub tail_rows: usize,
    pub n_cols: usize,
    pub blocks: Vec<Tensor<T>>,
    /// Peak floats allocated for attention probabilities in any single
    /// layer of the pass (probe blocks plus scratch).
    pub peak_prob_floats_per_layer: usize,
}

impl<T: Scalar> AttentionProbe<T> {
    pub fn block(&self, layer: usize, head: usize, n_heads: usize) -> &Tensor<T> {
        &self.blocks[layer * n_heads + head]
    }
}

/// Rows fed to a tail pass: vocabulary tokens or the learned soft tokens
/// (the latter activate the lookahead adapters).
#[derive(Clone, Copy)]
pub enum TailInput<'a, T> {
    Tokens(&'a [TokenId]),
    Lookahead(&'a LookaheadParams<T>),
}

impl<T> TailInput<'_, T> {
    fn len(&self) -> usize
    where
        T: Scalar,
    {
        match self {
            TailInput::Tokens(ids) => ids.len(),
            TailInput::Lookahead(p) => p.cfg.n_lookahead,
        }
    }
}

pub struct PrefillOutput<T> {
    /// Logits for every processed row (prompt rows first, then lookahead
    /// rows when present).
    pub logits: Tensor<T>,
    pub cache: KVCache<T>,
    pub probe: Option<AttentionProbe<T>>,
}

pub(crate) struct TailRun<T> {
    pub logits: Tensor<T>,
    /// Post-rope keys and values per (layer, kv head), tail rows only.
    pub tail_kv: Vec<(Tensor<T>, Tensor<T>)>,
    pub probe: Option<AttentionProbe<T>>,
}

impl<T: Scalar> Model<T> {
    /// Causal forward over the prompt, optionally appending lookahead rows.
    ///
    /// With `probe_rows > 0` the probe captures the last rows of the final
    /// pass: the prompt suffix for a plain forward, the lookahead rows when
    /// lookahead parameters are given.
    pub fn prefill(
        &self,
        tokens: &[TokenId],
        lookahead: Option<&LookaheadParams<T>>,
        probe_rows: usize,
    ) -> Result<PrefillOutput<T>> {
        let n = tokens.len();
        let n_la = lookahead.map_or(0, |p| p.cfg.n_lookahead);
        if n + n_la > self.cfg.max_seq_len {
            return Err(Error::input(format!(
                "sequence of {} + {} lookahead exceeds max_seq_len {}",
                n, n_la, self.cfg.max_seq_len
            )));
        }
        let mut cache = KVCache::new(self.cfg.n_layers, self.cfg.n_kv_heads, self.cfg.d_head);

        let prompt_probe = if lookahead.is_none() { probe_rows } else { 0 };
        let positions: Vec<usize> = (0..n).collect();
        let run = self.run_tail(&cache, TailInput::Tokens(tokens), &positions, prompt_probe)?;
        append_tail_kv(&mut cache, &run.tail_kv, &positions)?;
        cache.set_prompt_len(n);

        let (logits, probe) = if let Some(params) = lookahead {
            let la_positions: Vec<usize> = (n..n + n_la).collect();
            let la_run =
                self.run_tail(&cache, TailInput::Lookahead(params), &la_positions, probe_rows)?;
            append_tail_kv(&mut cache, &la_run.tail_kv, &la_positions)?;
            (ops::concat_rows(&run.logits, &la_run.logits)?, la_run.probe)
        } else {
            (run.logits, run.probe)
        };
        Ok(PrefillOutput { logits, cache, probe })
    }

    /// Append one token at `position` and return its logits row.
    /// Adapters are never applied here: lookahead modules are prefill-only.
    pub fn decode_step(
        &self,
        cache: &mut KVCache<T>,
        token: TokenId,
        position: usize,
    ) -> Result<Tensor<T>> {
        self.check_cache_shape(cache)?;
        if let Some(max) = cache.max_position() {
            if position <= max {
                return Err(Error::input(format!(
                    "decode position {} conflicts with cache max {}",
                    position, max
                )));
            }
        }
        if cache.len() + 1 > self.cfg.max_seq_len {
            return Err(Error::input("cache full at max_seq_len".to_string()));
        }
        let positions = [position];
        let run = self.run_tail(cache, TailInput::Tokens(&[token]), &positions, 0)?;
        append_tail_kv(cache, &run.tail_kv, &positions)?;
        Ok(Tensor::vector(run.logits.row(0).to_vec()))
    }

    /// Run tail rows against a cache without mutating it; used by scoring
    /// passes (ground-truth response rows, draft windows, lookahead rows).
    pub fn scoring_pass(
        &self,
        cache: &KVCache<T>,
        input: TailInput<'_, T>,
        start_position: usize,
        probe_rows: usize,
    ) -> Result<(Tensor<T>, AttentionProbe<T>)> {
        self.check_cache_shape(cache)?;
        let t = input.len();
        let positions: Vec<usize> = (start_position..start_position + t).collect();
        let probe_rows = if probe_rows == 0 { t } else { probe_rows };
        let run = self.run_tail(cache, input, &positions, probe_rows)?;
        let probe = run.probe.expect("probe requested");
        Ok((run.logits, probe))
    }

    fn check_cache_shape(&self, cache: &KVCache<T>) -> Result<()> {
        if cache.n_layers() != self.cfg.n_layers
            || cache.n_kv_heads() != self.cfg.n_kv_heads
            || cache.d_head() != self.cfg.d_head
        {
            return Err(Error::contract(format!(
                "cache shape ({} layers, {} kv heads, d_head {}) does not match model",
                cache.n_layers(),
                cache.n_kv_heads(),
                cache.d_head()
            )));
        }
        Ok(())
    }

    pub(crate) fn run_tail(
        &self,
        cache: &KVCache<T>,
        input: TailInput<'_, T>,
        positions: &[usize],
        probe_rows: usize,
    ) -> Result<TailRun<T>> {
        let cfg = &self.cfg;
        let t = input.len();
        if t == 0 {
            return Err(Error::input("empty tail pass".to_string()));
        }
        if positions.len() != t {
            return Err(Error::shape(format!("{} positions for {} rows", positions.len(), t)));
        }
        let c = cache.len();
        let n_total = c + t;
        let dh = cfg.d_head;
        let n_heads = cfg.n_query_heads;
        let inv_sqrt = T::from_f64(1.0 / (dh as f64).sqrt());
        let probe_rows = probe_rows.min(t);

        let (mut h, adapters): (Tensor<T>, Option<&LookaheadParams<T>>) = match input {
            TailInput::Tokens(ids) => (ops::gather_rows(&self.embed, ids)?, None),
            TailInput::Lookahead(p) => (p.embeddings.clone(), Some(p)),
        };

        let mut tail_kv: Vec<(Tensor<T>, Tensor<T>)> = Vec::with_capacity(cfg.n_layers * cfg.n_kv_heads);
        let mut probe_blocks: Vec<Vec<T>> = Vec::new();
        let mut peak_prob_floats = 0usize;

        for layer in 0..cfg.n_layers {
            let lw = &self.layers[layer];
            let x = ops::rmsnorm_rows(&h, &lw.attn_norm, RMS_EPS)?;
            let q = self.project(&x, layer, AdapterSlot::Q, adapters)?;
            let k = self.project(&x, layer, AdapterSlot::K, adapters)?;
            let v = self.project(&x, layer, AdapterSlot::V, adapters)?;

            for g in 0..cfg.n_kv_heads {
                let k_g = ops::slice_cols(&k, g * dh, dh)?;
                let k_g = self.maybe_rope(&k_g, positions)?;
                let v_g = ops::slice_cols(&v, g * dh, dh)?;
                tail_kv.push((k_g, v_g));
            }

            let mut layer_prob_floats = 0usize;
            let mut head_outputs: Vec<Tensor<T>> = Vec::with_capacity(n_heads);
            for hq in 0..n_heads {
                let g = cfg.kv_group(hq);
                let q_h = ops::slice_cols(&q, hq * dh, dh)?;
                let q_h = self.maybe_rope(&q_h, positions)?;
                let head = cache.head(layer, g);
                let (k_tail, v_tail) = &tail_kv[layer * cfg.n_kv_heads + g];

                // Probed rows write probabilities straight into the probe
                // block; earlier rows reuse its first row as scratch, so a
                // probed pass allocates exactly tail_rows * n_total floats
                // per head.
                let mut block = if probe_rows > 0 {
                    vec![T::zero(); probe_rows * n_total]
                } else {
                    vec![T::zero(); n_total]
                };
                layer_prob_floats += block.len();
                let mut out_h = vec![T::zero(); t * dh];

                for i in 0..t {
                    let visible = c + i + 1;
                    let probed = probe_rows > 0 && i >= t - probe_rows;
                    let offset = if probed { (i - (t - probe_rows)) * n_total } else { 0 };
                    let qrow = q_h.row(i);
                    {
                        let buf = &mut block[offset..offset + n_total];
                        for j in 0..c {
                            buf[j] = ops::dot(qrow, head.key_row(j, dh)) * inv_sqrt;
                        }
                        for j in 0..=i {
                            buf[c + j] = ops::dot(qrow, k_tail.row(j)) * inv_sqrt;
                        }
                        softmax_inplace(&mut buf[..visible])?;
                        for b in buf[visible..].iter_mut() {
                            *b = T::zero();
                        }
                    }
                    let buf = &block[offset..offset + visible];
                    let orow = &mut out_h[i * dh..(i + 1) * dh];
                    for j in 0..c {
                        let w = buf[j];
                        for (o, &vv) in orow.iter_mut().zip(head.value_row(j, dh)) {
                            *o = *o + w * vv;
                        }
                    }
                    for j in 0..=i {
                        let w = buf[c + j];
                        for (o, &vv) in orow.iter_mut().zip(v_tail.row(j)) {
                            *o = *o + w * vv;
                        }
                    }
                }
                if probe_rows > 0 {
                    probe_blocks.push(block);
                }
                head_outputs.push(Tensor::from_vec(vec![t, dh], out_h)?);
            }
            peak_prob_floats = peak_prob_floats.max(layer_prob_floats);

            let refs: Vec<&Tensor<T>> = head_outputs.iter().collect();
            let concat = ops::concat_cols(&refs)?;
            let o = self.project(&concat, layer, AdapterSlot::O, adapters)?;
            h = ops::add(&h, &o)?;

            let x2 = ops::rmsnorm_rows(&h, &lw.mlp_norm, RMS_EPS)?;
            let gate = self.project(&x2, layer, AdapterSlot::Gate, adapters)?;
            let up = self.project(&x2, layer, AdapterSlot::Up, adapters)?;
            let act = ops::mul(&ops::silu(&gate), &up)?;
            let down = self.project(&act, layer, AdapterSlot::Down, adapters)?;
            h = ops::add(&h, &down)?;
        }

        let xf = ops::rmsnorm_rows(&h, &self.final_norm, RMS_EPS)?;
        let logits = ops::matmul_nt(&xf, &self.lm_head)?;

        let probe = if probe_rows > 0 {
            let blocks = probe_blocks
                .into_iter()
                .map(|b| Tensor::from_vec(vec![probe_rows, n_total], b))
                .collect::<Result<Vec<_>>>()?;
            Some(AttentionProbe {
                tail_rows: probe_rows,
                n_cols: n_total,
                blocks,
                peak_prob_floats_per_layer: peak_prob_floats,
            })
        } else {
            None
        };
        Ok(TailRun { logits, tail_kv, probe })
    }

    /// Linear projection with the frozen weight plus, when the pass carries
    /// lookahead rows, the selectively-activated adapter delta.
    fn project(
        &self,
        x: &Tensor<T>,
        layer: usize,
        slot: AdapterSlot,
        adapters: Option<&LookaheadParams<T>>,
    ) -> Result<Tensor<T>> {
        let w = self.layers[layer].weight(slot);
        let mut y = ops::matmul_nt(x, w)?;
        if let Some(params) = adapters {
            if let Some(pair) = params.adapters[layer].get(slot) {
                apply_lora(&mut y, x, pair, params.cfg.lora_scale())?;
            }
        }
        Ok(y)
    }

    fn maybe_rope(&self, x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
        if self.cfg.rope_enabled {
            ops::rope_rows(x, positions, self.cfg.rope_base)
        } else {
            Ok(x.clone())
        }
    }

    /// Greedy argmax over a logits row, ties toward the smaller id.
    pub fn greedy_token(logits_row: &[T]) -> TokenId {
        ops::argmax(logits_row)
    }
}

/// `y += scale * (x A^T) B^T`, in place.
fn apply_lora<T: Scalar>(
    y: &mut Tensor<T>,
    x: &Tensor<T>,
    pair: &LoraPair<T>,
    scale: f64,
) -> Result<()> {
    let u = ops::matmul_nt(x, &pair.a)?;
    let delta = ops::matmul_nt(&u, &pair.b)?;
    let s = T::from_f64(scale);
    for (yv, &dv) in y.data_mut().iter_mut().zip(delta.data()) {
        *yv = *yv + s * dv;
    }
    Ok(())
}

fn softmax_inplace<T: Scalar>(row: &mut [T]) -> Result<()> {
    let copy: Vec<T> = row.to_vec();
    ops::softmax_into(&copy, row)
}

pub(crate) fn append_tail_kv<T: Scalar>(
    cache: &mut KVCache<T>,
    tail_kv: &[(Tensor<T>, Tensor<T>)],
    positions: &[usize],
) -> Result<()> {
    let n_kv = cache.n_kv_heads();
    let dh = cache.d_head();
    for (idx, (keys, values)) in tail_kv.iter().enumerate() {
        let layer = idx / n_kv;
        let g = idx % n_kv;
        for (row, &pos) in positions.iter().enumerate() {
            cache.append(layer, g, &keys.data()[row * dh..(row + 1) * dh],
                &values.data()[row * dh..(row + 1) * dh], pos)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LookaheadConfig, ModelConfig};

    fn toy() -> Model<f32> {
        let cfg = ModelConfig {
            n_layers: 2,
            n_query_heads: 4,
            n_kv_heads: 2,
            d_model: 16,
            d_head: 4,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 128,
            rope_base: 10000.0,
            rope_enabled: true,
            rng_seed: 7,
        };
        build_model(&cfg).unwrap()
    }

    fn la_params(model: &Model<f32>, seed: u64) -> LookaheadParams<f32> {
        let lcfg = LookaheadConfig { n_lookahead: 4, lora_rank: 2, ..Default::default() };
        LookaheadParams::init(&model.cfg, lcfg, seed).unwrap()
    }

    fn randomize_b(params: &mut LookaheadParams<f32>, seed: u64) {
        let mut r = crate::rng::seeded(seed);
        for (_, t) in params.named_tensors_mut() {
            for v in t.data_mut() {
                *v = 0.1 * crate::rng::standard_normal(&mut r) as f32 + *v;
            }
        }
    }

    #[test]
    fn zero_delta_adapters_do_not_change_lookahead_logits() {
        let model = toy();
        let tokens = [3, 9, 1, 14, 5];
        // B = 0 at init, so adapters contribute nothing anywhere.
        let with = model.prefill(&tokens, Some(&la_params(&model, 1)), 0).unwrap();
        let mut no_adapter = la_params(&model, 1);
        no_adapter.cfg.target_modules = crate::model::TargetModules::EmbOnly;
        for layer in &mut no_adapter.adapters {
            layer.pairs = Default::default();
        }
        let without = model.prefill(&tokens, Some(&no_adapter), 0).unwrap();
        assert_eq!(with.logits, without.logits);
    }

    #[test]
    fn prompt_logits_bit_identical_with_and_without_lookahead() {
        let model = toy();
        let tokens = [3, 9, 1, 14, 5, 22];
        let mut params = la_params(&model, 2);
        randomize_b(&mut params, 3); // arbitrary adapter values
        let with = model.prefill(&tokens, Some(&params), 0).unwrap();
        let without = model.prefill(&tokens, None, 0).unwrap();
        for i in 0..tokens.len() {
            assert_eq!(with.logits.row(i), without.logits.row(i), "row {}", i);
        }
    }

    #[test]
    fn decode_matches_full_forward() {
        let model = toy();
        let tokens = [3, 9, 1, 14, 5, 22, 7];
        let full = model.prefill(&tokens, None, 0).unwrap();
        let mut out = model.prefill(&tokens[..6], None, 0).unwrap();
        let logits = model.decode_step(&mut out.cache, tokens[6], 6).unwrap();
        let want = full.logits.row(6);
        for (a, b) in logits.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5, "{} vs {}", a, b);
        }
    }

    #[test]
    fn empty_prompt_decode_equals_single_token_forward() {
        let model = toy();
        let mut cache = KVCache::new(2, 2, 4);
        let logits = model.decode_step(&mut cache, 11, 0).unwrap();
        let full = model.prefill(&[11], None, 0).unwrap();
        assert_eq!(logits.data(), full.logits.row(0));
    }

    #[test]
    fn decode_position_conflict_is_input_error() {
        let model = toy();
        let mut out = model.prefill(&[1, 2, 3], None, 0).unwrap();
        assert!(model.decode_step(&mut out.cache, 4, 2).is_err());
        assert!(model.decode_step(&mut out.cache, 4, 3).is_ok());
    }

    #[test]
    fn token_out_of_vocab_is_input_error() {
        let model = toy();
        assert!(model.prefill(&[1, 999], None, 0).is_err());
    }

    #[test]
    fn probe_rows_sum_to_one_and_mask_is_zero() {
        let model = toy();
        let tokens = [3, 9, 1, 14, 5, 22];
        let out = model.prefill(&tokens, None, 2).unwrap();
        let probe = out.probe.unwrap();
        assert_eq!(probe.tail_rows, 2);
        assert_eq!(probe.n_cols, 6);
        let block = probe.block(1, 3, 4);
        // probe row 0 is sequence row 4: visible 5 cols, last col masked
        assert_eq!(block.at(0, 5), 0.0);
        let sum: f32 = block.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        // alloc bound: tail_rows * seq_len * n_heads floats per layer
        assert!(probe.peak_prob_floats_per_layer <= 2 * 6 * 4);
    }

    #[test]
    fn gqa_sharing_perturbation_affects_exactly_one_group() {
        // Perturb kv head 0's keys at layer 0 and check that exactly
        // H / H_kv query heads (heads 0 and 1) see different attention
        // rows at that layer, while the other group is bit-identical.
        let model = toy();
        let tokens = [3, 9, 1, 14, 5];
        let out = model.prefill(&tokens, None, 0).unwrap();
        let (_, probe) =
            model.scoring_pass(&out.cache, TailInput::Tokens(&[8]), 5, 1).unwrap();

        let mut broken = out.cache.clone();
        for k in broken.head_mut(0, 0).keys.iter_mut() {
            *k = -*k;
        }
        let (_, probe2) =
            model.scoring_pass(&broken, TailInput::Tokens(&[8]), 5, 1).unwrap();

        let changed: Vec<usize> = (0..4)
            .filter(|&h| probe.block(0, h, 4) != probe2.block(0, h, 4))
            .collect();
        assert_eq!(changed, vec![0, 1]);
    }
}

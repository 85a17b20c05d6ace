//! Importance scores over prompt positions.
//!
//! Three estimators share one memory-bounded engine: ground-truth scores
//! observe the real response rows, surrogate scores observe a prompt suffix
//! or appended draft tokens, lookahead scores observe the learned soft
//! tokens. Each returns mean cross-attention from the observation rows onto
//! prompt columns, per layer and query head, without materializing any
//! full n x n attention matrix.
//!
//! Eviction-time pipeline order is fixed: mean over window rows, GQA mean
//! reduction, max pooling, then top-k selection. Loss-path scores are never
//! pooled or reduced.

use crate::error::{Error, Result};
use crate::model::{AttentionProbe, LookaheadParams, Model, TailInput, TokenId};
use crate::tensor::{ops, Scalar, Tensor};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadSpace {
    QueryHeads,
    KvHeads,
}

impl HeadSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadSpace::QueryHeads => "query-heads",
            HeadSpace::KvHeads => "kv-heads",
        }
    }
}

/// Nonnegative importance per prompt column, per (layer, head).
///
/// `n_cols` is the number of scored prompt columns: the full prompt for
/// response/draft/lookahead observation windows, the columns strictly
/// before the window for suffix windows.
#[derive(Clone, Debug)]
pub struct ImportanceScores<T> {
    pub values: Vec<Vec<Vec<T>>>,
    pub head_space: HeadSpace,
    pub n_cols: usize,
}

impl<T: Scalar> ImportanceScores<T> {
    pub fn n_layers(&self) -> usize {
        self.values.len()
    }

    pub fn n_heads(&self) -> usize {
        self.values.first().map_or(0, |l| l.len())
    }

    pub fn get(&self, layer: usize, head: usize) -> &[T] {
        &self.values[layer][head]
    }

    /// Element-wise map over every (layer, head) vector.
    pub fn map_vectors<F>(&self, mut f: F) -> Result<ImportanceScores<T>>
    where
        F: FnMut(&[T]) -> Result<Vec<T>>,
    {
        let mut values = Vec::with_capacity(self.values.len());
        for layer in &self.values {
            let mut heads = Vec::with_capacity(layer.len());
            for v in layer {
                heads.push(f(v)?);
            }
            values.push(heads);
        }
        Ok(ImportanceScores { values, head_space: self.head_space, n_cols: self.n_cols })
    }

    /// Debug export: one JSON object per (layer, head) line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (layer, heads) in self.values.iter().enumerate() {
            for (head, v) in heads.iter().enumerate() {
                let vals: Vec<f64> = v.iter().map(|x| x.to_f64()).collect();
                let line = serde_json::json!({
                    "layer": layer,
                    "head": head,
                    "head_space": self.head_space.as_str(),
                    "values": vals,
                });
                writeln!(w, "{}", line)?;
            }
        }
        Ok(())
    }
}

/// Which rows serve as observation queries for surrogate scores.
#[derive(Clone, Copy, Debug)]
pub enum WindowSpec<'a> {
    /// The last `n` prompt tokens; scores cover the columns strictly
    /// before the window.
    Suffix(usize),
    /// Tokens appended after the prompt (draft responses); scores cover
    /// every prompt column.
    Appended(&'a [TokenId]),
}

fn scores_from_probe<T: Scalar>(
    probe: &AttentionProbe<T>,
    n_layers: usize,
    n_heads: usize,
    n_cols: usize,
) -> Result<ImportanceScores<T>> {
    let mut values = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let mut heads = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let block = probe.block(layer, head, n_heads);
            let cross = ops::slice_cols(block, 0, n_cols)?;
            heads.push(ops::mean_over_rows(&cross).data().to_vec());
        }
        values.push(heads);
    }
    Ok(ImportanceScores { values, head_space: HeadSpace::QueryHeads, n_cols })
}

/// Ground-truth importance: mean attention of the response rows onto the
/// prompt columns, from a causal forward over `[X; Y]`.
pub fn gt_importance<T: Scalar>(
    model: &Model<T>,
    x: &[TokenId],
    y: &[TokenId],
) -> Result<ImportanceScores<T>> {
    if y.is_empty() {
        return Err(Error::contract("ground-truth scores need a nonempty response".to_string()));
    }
    let out = model.prefill(x, None, 0)?;
    let (_, probe) = model.scoring_pass(&out.cache, TailInput::Tokens(y), x.len(), y.len())?;
    scores_from_probe(&probe, model.cfg.n_layers, model.cfg.n_query_heads, x.len())
}

/// Surrogate importance from a suffix or appended observation window.
pub fn surrogate_importance<T: Scalar>(
    model: &Model<T>,
    x: &[TokenId],
    window: WindowSpec<'_>,
) -> Result<ImportanceScores<T>> {
    match window {
        WindowSpec::Suffix(w) => {
            if w == 0 {
                return Err(Error::input("empty suffix window".to_string()));
            }
            if w >= x.len() {
                return Err(Error::input(format!(
                    "suffix window {} covers the whole prompt of {}",
                    w,
                    x.len()
                )));
            }
            let out = model.prefill(x, None, w)?;
            let probe = out.probe.expect("probe requested");
            scores_from_probe(&probe, model.cfg.n_layers, model.cfg.n_query_heads, x.len() - w)
        }
        WindowSpec::Appended(tokens) => {
            if tokens.is_empty() {
                return Err(Error::input("empty appended window".to_string()));
            }
            let out = model.prefill(x, None, 0)?;
            let (_, probe) =
                model.scoring_pass(&out.cache, TailInput::Tokens(tokens), x.len(), tokens.len())?;
            scores_from_probe(&probe, model.cfg.n_layers, model.cfg.n_query_heads, x.len())
        }
    }
}

/// Lookahead importance: mean attention of the learned lookahead rows onto
/// the prompt columns, with selectively-activated adapters.
pub fn lookahead_importance<T: Scalar>(
    model: &Model<T>,
    params: &LookaheadParams<T>,
    x: &[TokenId],
) -> Result<ImportanceScores<T>> {
    let out = model.prefill(x, Some(params), params.cfg.n_lookahead)?;
    let probe = out.probe.expect("probe requested");
    scores_from_probe(&probe, model.cfg.n_layers, model.cfg.n_query_heads, x.len())
}

/// Raw engine entry: mean attention of the last `tail_rows` rows of the
/// prompt onto all prompt columns, plus the probe's allocation counter.
/// The blockwise path is the only path; it must agree with an eager
/// full-matrix computation exactly.
pub fn blockwise_cross_scores<T: Scalar>(
    model: &Model<T>,
    x: &[TokenId],
    tail_rows: usize,
) -> Result<(ImportanceScores<T>, usize)> {
    if tail_rows == 0 || tail_rows > x.len() {
        return Err(Error::input(format!(
            "tail_rows {} outside sequence of {}",
            tail_rows,
            x.len()
        )));
    }
    let out = model.prefill(x, None, tail_rows)?;
    let probe = out.probe.expect("probe requested");
    let peak = probe.peak_prob_floats_per_layer;
    let scores =
        scores_from_probe(&probe, model.cfg.n_layers, model.cfg.n_query_heads, x.len())?;
    Ok((scores, peak))
}

/// Mean over each KV group's query heads.
pub fn gqa_mean_reduce<T: Scalar>(
    scores: &ImportanceScores<T>,
    n_query_heads: usize,
    n_kv_heads: usize,
) -> Result<ImportanceScores<T>> {
    if scores.head_space != HeadSpace::QueryHeads {
        return Err(Error::contract("gqa_mean_reduce expects query-head scores".to_string()));
    }
    if scores.n_heads() != n_query_heads || n_kv_heads == 0 || n_query_heads % n_kv_heads != 0 {
        return Err(Error::contract(format!(
            "gqa_mean_reduce with {} heads into {} groups",
            scores.n_heads(),
            n_kv_heads
        )));
    }
    let group = n_query_heads / n_kv_heads;
    let inv = T::from_f64(1.0 / group as f64);
    let mut values = Vec::with_capacity(scores.n_layers());
    for layer in &scores.values {
        let mut heads = Vec::with_capacity(n_kv_heads);
        for g in 0..n_kv_heads {
            let mut acc = vec![T::zero(); scores.n_cols];
            for h in g * group..(g + 1) * group {
                for (a, &v) in acc.iter_mut().zip(&layer[h]) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
            heads.push(acc);
        }
        values.push(heads);
    }
    Ok(ImportanceScores { values, head_space: HeadSpace::KvHeads, n_cols: scores.n_cols })
}

/// Sliding max with truncated boundary windows; output has the same length.
pub fn maxpool1d<T: Scalar>(v: &[T], kernel: usize) -> Result<Vec<T>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::config(format!("pooling kernel must be odd, got {}", kernel)));
    }
    let r = (kernel - 1) / 2;
    let n = v.len();
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let lo = j.saturating_sub(r);
        let hi = (j + r + 1).min(n);
        let mut m = v[lo];
        for &x in &v[lo + 1..hi] {
            if x > m {
                m = x;
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// Pool every (layer, head) vector.
pub fn pool_scores<T: Scalar>(
    scores: &ImportanceScores<T>,
    kernel: usize,
) -> Result<ImportanceScores<T>> {
    scores.map_vectors(|v| maxpool1d(v, kernel))
}

/// Normalize a score vector to sum 1 (order preserved; zero vectors are a
/// contract violation).
pub fn l1_normalize<T: Scalar>(v: &[T]) -> Result<Vec<T>> {
    Ok(ops::l1_normalize(&Tensor::vector(v.to_vec()))?.data().to_vec())
}

/// Element-wise mean of two score sets (suffix-window combination).
pub fn combine_with_suffix<T: Scalar>(
    lkv: &ImportanceScores<T>,
    snap: &ImportanceScores<T>,
) -> Result<ImportanceScores<T>> {
    if lkv.head_space != snap.head_space {
        return Err(Error::contract("combine_with_suffix head-space mismatch".to_string()));
    }
    if lkv.n_layers() != snap.n_layers()
        || lkv.n_heads() != snap.n_heads()
        || lkv.n_cols != snap.n_cols
    {
        return Err(Error::shape(format!(
            "combine_with_suffix shapes ({},{},{}) vs ({},{},{})",
            lkv.n_layers(),
            lkv.n_heads(),
            lkv.n_cols,
            snap.n_layers(),
            snap.n_heads(),
            snap.n_cols
        )));
    }
    let half = T::from_f64(0.5);
    let mut values = Vec::with_capacity(lkv.n_layers());
    for (la, sa) in lkv.values.iter().zip(&snap.values) {
        let mut heads = Vec::with_capacity(la.len());
        for (lv, sv) in la.iter().zip(sa) {
            heads.push(lv.iter().zip(sv).map(|(&a, &b)| (a + b) * half).collect());
        }
        values.push(heads);
    }
    Ok(ImportanceScores { values, head_space: lkv.head_space, n_cols: lkv.n_cols })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, LookaheadConfig, Model, ModelConfig, TargetModules};
    use rand::Rng;

    fn cfg(layers: usize, rope: bool) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            n_query_heads: 4,
            n_kv_heads: 2,
            d_model: 16,
            d_head: 4,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 256,
            rope_base: 10000.0,
            rope_enabled: rope,
            rng_seed: 11,
        }
    }

    /// Identical embeddings for every token make all keys equal, so
    /// attention is uniform over visible columns.
    fn uniform_attention_model() -> Model<f32> {
        let mut model = build_model::<f32>(&cfg(1, false)).unwrap();
        let row: Vec<f32> = model.embed.row(0).to_vec();
        let d = row.len();
        let vocab = model.cfg.vocab_size;
        let mut data = Vec::with_capacity(vocab * d);
        for _ in 0..vocab {
            data.extend_from_slice(&row);
        }
        model.embed = Tensor::from_vec(vec![vocab, d], data).unwrap();
        model
    }

    #[test]
    fn gt_uniform_attention_gives_one_over_visible() {
        let model = uniform_attention_model();
        let scores = gt_importance(&model, &[1, 2, 3, 4], &[5]).unwrap();
        // one response row attends uniformly over 4 prompt tokens + itself
        for head in 0..4 {
            for &s in scores.get(0, head) {
                assert!((s - 0.2).abs() < 1e-6, "got {}", s);
            }
        }
    }

    #[test]
    fn gt_identical_keys_gives_equal_scores() {
        let model = uniform_attention_model();
        let scores = gt_importance(&model, &[7, 7, 7, 7, 7, 7], &[3, 9]).unwrap();
        for head in 0..4 {
            let v = scores.get(0, head);
            for &s in v {
                assert!((s - v[0]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn gt_requires_nonempty_response() {
        let model = build_model::<f32>(&cfg(1, true)).unwrap();
        assert!(gt_importance(&model, &[1, 2, 3], &[]).is_err());
    }

    #[test]
    fn appended_window_of_gt_rows_reproduces_gt_exactly() {
        let model = build_model::<f32>(&cfg(2, true)).unwrap();
        let x = [3, 9, 1, 14, 5, 22];
        let y = [7, 2, 11];
        let gt = gt_importance(&model, &x, &y).unwrap();
        let sur = surrogate_importance(&model, &x, WindowSpec::Appended(&y)).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                assert_eq!(gt.get(l, h), sur.get(l, h));
            }
        }
    }

    #[test]
    fn suffix_window_covers_prefix_columns_only() {
        let model = build_model::<f32>(&cfg(2, true)).unwrap();
        let x = [3, 9, 1, 14, 5, 22];
        let s = surrogate_importance(&model, &x, WindowSpec::Suffix(2)).unwrap();
        assert_eq!(s.n_cols, 4);
        assert!(surrogate_importance(&model, &x, WindowSpec::Suffix(6)).is_err());
    }

    #[test]
    fn suffix_window_uniform_attention_is_uniform() {
        let model = uniform_attention_model();
        // 1-token window over a 5-token prompt: row sees 5 columns
        let s = surrogate_importance(&model, &[1, 2, 3, 4, 9], WindowSpec::Suffix(1)).unwrap();
        for &v in s.get(0, 0) {
            assert!((v - 0.2).abs() < 1e-6);
        }
    }

    #[test]
    fn lookahead_zero_adapters_equals_emb_only() {
        let mcfg = cfg(2, true);
        let model = build_model::<f32>(&mcfg).unwrap();
        let x = [3, 9, 1, 14, 5];
        let full = LookaheadParams::init(
            &mcfg,
            LookaheadConfig { n_lookahead: 4, lora_rank: 2, ..Default::default() },
            5,
        )
        .unwrap();
        let mut emb_only = full.clone();
        emb_only.cfg.target_modules = TargetModules::EmbOnly;
        for layer in &mut emb_only.adapters {
            layer.pairs = Default::default();
        }
        let a = lookahead_importance(&model, &full, &x).unwrap();
        let b = lookahead_importance(&model, &emb_only, &x).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                assert_eq!(a.get(l, h), b.get(l, h));
            }
        }
    }

    #[test]
    fn first_layer_scores_permute_with_swapped_tokens_content_only() {
        // With rotary disabled, first-layer keys depend only on token
        // content, so swapping two prompt tokens permutes the scores.
        let model = build_model::<f32>(&cfg(1, false)).unwrap();
        let x = [3, 9, 1, 14, 5];
        let mut swapped = x;
        swapped.swap(1, 3);
        let w = [8, 2];
        let a = surrogate_importance(&model, &x, WindowSpec::Appended(&w)).unwrap();
        let b = surrogate_importance(&model, &swapped, WindowSpec::Appended(&w)).unwrap();
        for h in 0..4 {
            let av = a.get(0, h);
            let bv = b.get(0, h);
            assert!((av[1] - bv[3]).abs() < 1e-6);
            assert!((av[3] - bv[1]).abs() < 1e-6);
            assert!((av[0] - bv[0]).abs() < 1e-6);
            assert!((av[2] - bv[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn blockwise_full_tail_allocation_bound() {
        let model = build_model::<f32>(&cfg(2, true)).unwrap();
        let x: Vec<usize> = (0..16).map(|i| (i * 5 + 1) % 32).collect();
        let (scores, peak) = blockwise_cross_scores(&model, &x, 8).unwrap();
        assert_eq!(scores.n_cols, 16);
        assert!(peak <= 8 * 16 * 4, "peak {} above bound", peak);
    }

    #[test]
    fn gqa_reduce_identity_and_group_means() {
        let s = ImportanceScores::<f64> {
            values: vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]]],
            head_space: HeadSpace::QueryHeads,
            n_cols: 2,
        };
        let r = gqa_mean_reduce(&s, 4, 2).unwrap();
        assert_eq!(r.get(0, 0), &[2.0, 3.0]);
        assert_eq!(r.get(0, 1), &[6.0, 7.0]);
        assert_eq!(r.head_space, HeadSpace::KvHeads);
        // identity when H == H_kv
        let id = gqa_mean_reduce(&s, 4, 4).unwrap();
        for h in 0..4 {
            assert_eq!(id.get(0, h), s.get(0, h));
        }
        // reducing twice is a contract error
        assert!(gqa_mean_reduce(&r, 2, 1).is_err());
    }

    #[test]
    fn gqa_reduce_matches_group_loop_oracle() {
        let mut r = crate::rng::seeded(17);
        let values: Vec<Vec<Vec<f64>>> = vec![(0..8)
            .map(|_| (0..5).map(|_| r.gen_range(0.0..1.0)).collect())
            .collect()];
        let s = ImportanceScores { values, head_space: HeadSpace::QueryHeads, n_cols: 5 };
        let red = gqa_mean_reduce(&s, 8, 4).unwrap();
        for g in 0..4 {
            for c in 0..5 {
                let want = (s.get(0, 2 * g)[c] + s.get(0, 2 * g + 1)[c]) / 2.0;
                assert_eq!(red.get(0, g)[c], want);
            }
        }
    }

    #[test]
    fn maxpool_examples() {
        assert_eq!(maxpool1d(&[1.0, 5.0, 2.0, 0.0, 3.0], 1).unwrap(), vec![1.0, 5.0, 2.0, 0.0, 3.0]);
        assert_eq!(maxpool1d(&[1.0, 5.0, 2.0, 0.0, 3.0], 3).unwrap(), vec![5.0, 5.0, 5.0, 3.0, 3.0]);
        assert!(maxpool1d(&[1.0], 2).is_err());
    }

    #[test]
    fn maxpool_matches_sliding_window_oracle() {
        let mut r = crate::rng::seeded(23);
        let v: Vec<f64> = (0..40).map(|_| r.gen_range(0.0..1.0)).collect();
        let got = maxpool1d(&v, 7).unwrap();
        for j in 0..v.len() {
            let mut m = f64::MIN;
            for k in 0..v.len() {
                if (k as i64 - j as i64).abs() <= 3 && v[k] > m {
                    m = v[k];
                }
            }
            assert_eq!(got[j], m);
        }
    }

    #[test]
    fn combine_examples_and_loop_oracle() {
        let mk = |vals: Vec<f64>| ImportanceScores {
            values: vec![vec![vals]],
            head_space: HeadSpace::QueryHeads,
            n_cols: 2,
        };
        let a = mk(vec![1.0, 0.0]);
        let b = mk(vec![0.0, 1.0]);
        let c = combine_with_suffix(&a, &b).unwrap();
        assert_eq!(c.get(0, 0), &[0.5, 0.5]);
        let same = combine_with_suffix(&a, &a).unwrap();
        assert_eq!(same.get(0, 0), a.get(0, 0));
        let mut r = crate::rng::seeded(31);
        let x: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
        let sx = ImportanceScores {
            values: vec![vec![x.clone()]],
            head_space: HeadSpace::KvHeads,
            n_cols: 6,
        };
        let sy = ImportanceScores {
            values: vec![vec![y.clone()]],
            head_space: HeadSpace::KvHeads,
            n_cols: 6,
        };
        let c = combine_with_suffix(&sx, &sy).unwrap();
        for j in 0..6 {
            assert_eq!(c.get(0, 0)[j], (x[j] + y[j]) / 2.0);
        }
        // shape mismatch
        assert!(combine_with_suffix(&a, &sx).is_err());
    }

    #[test]
    fn scores_in_unit_interval_and_row_mass_bounded() {
        let model = build_model::<f32>(&cfg(2, true)).unwrap();
        let x: Vec<usize> = (0..12).map(|i| (i * 7 + 3) % 32).collect();
        let y = [1, 2, 3, 4];
        let s = gt_importance(&model, &x, &y).unwrap();
        for l in 0..2 {
            for h in 0..4 {
                let v = s.get(l, h);
                let sum: f32 = v.iter().sum();
                assert!(v.iter().all(|&p| (0.0..=1.0).contains(&p)));
                assert!(sum <= 1.0 + 1e-5, "prompt mass {} exceeds 1", sum);
            }
        }
    }

    #[test]
    fn jsonl_export_shape() {
        let s = ImportanceScores::<f32> {
            values: vec![vec![vec![0.5, 0.5]; 2]; 2],
            head_space: HeadSpace::KvHeads,
            n_cols: 2,
        };
        let mut buf = Vec::new();
        s.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("\"head_space\":\"kv-heads\""));
    }
}

//! Training: the ground-truth pass, the lookahead pass, the KL objective,
//! and an Adam loop that touches only the lookahead parameters. Also hosts
//! the toy-model pretraining loop used to produce task-capable fixtures.

use crate::error::{Error, Result};
use crate::model::taped::{
    insert_lookahead_leaves, lookahead_grads, taped_lm_loss, taped_lookahead_scores,
};
use crate::model::{KVCache, LookaheadConfig, LookaheadParams, Model, TailInput, TokenId};
use crate::rng;
use crate::scoring::{HeadSpace, ImportanceScores};
use crate::tensor::tape::Tape;
use crate::tensor::{io, ops, Scalar, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const EOS: TokenId = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "model-generated")]
    ModelGenerated,
    #[serde(rename = "source-response")]
    SourceResponse,
}

/// Span annotations carried by synthetic corpora; `needle_spans` lists the
/// `[start, end)` token ranges that external ground truth marks relevant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub needle_spans: Vec<(usize, usize)>,
}

/// One (prompt, response) pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSample {
    #[serde(rename = "X")]
    pub x: Vec<TokenId>,
    #[serde(rename = "Y")]
    pub y: Vec<TokenId>,
    pub origin: Origin,
    #[serde(default)]
    pub annotations: Annotations,
}

impl TrainSample {
    pub fn validate(&self, max_seq_len: usize, n_lookahead: usize) -> Result<()> {
        if self.y.is_empty() {
            return Err(Error::contract("training sample with empty response".to_string()));
        }
        if self.x.len() + self.y.len().max(n_lookahead) > max_seq_len {
            return Err(Error::input(format!(
                "sample of {}+{} tokens exceeds max_seq_len {}",
                self.x.len(),
                self.y.len(),
                max_seq_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Cosine,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Effective batch size, reached by gradient accumulation.
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub warmup_frac: f64,
    pub grad_clip: f64,
    pub steps: usize,
    pub eps_kl: f64,
    pub rng_seed: u64,
    /// Checkpoint cadence in steps; 0 disables checkpointing.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            batch_size: 32,
            schedule: LrSchedule::Cosine,
            warmup_frac: 0.02,
            grad_clip: 1.0,
            steps: 100,
            eps_kl: 1e-8,
            rng_seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.grad_clip <= 0.0 || self.batch_size == 0 || self.eps_kl <= 0.0 {
            return Err(Error::config("training hyperparameters must be positive".to_string()));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::config("warmup_frac must lie in [0, 1)".to_string()));
        }
        Ok(())
    }

    /// Linear warmup to the peak, then cosine decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = (self.warmup_frac * self.steps as f64).round() as usize;
        if step < warmup {
            return self.lr * step as f64 / warmup as f64;
        }
        if self.steps <= warmup {
            return self.lr;
        }
        let progress = (step - warmup) as f64 / (self.steps - warmup) as f64;
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Average KL divergence between normalized score sets (Listwise ranking
/// objective; identity transform). Both sides are L1-normalized per
/// (layer, head); epsilon guards 32-bit underflow inside the log ratio.
pub fn kl_loss<T: Scalar>(
    gt: &ImportanceScores<T>,
    est: &ImportanceScores<T>,
    eps: f64,
) -> Result<f64> {
    if gt.head_space != HeadSpace::QueryHeads || est.head_space != HeadSpace::QueryHeads {
        return Err(Error::contract("kl_loss expects query-head scores".to_string()));
    }
    if gt.n_layers() != est.n_layers() || gt.n_heads() != est.n_heads() || gt.n_cols != est.n_cols
    {
        return Err(Error::shape(format!(
            "kl_loss shapes ({},{},{}) vs ({},{},{})",
            gt.n_layers(),
            gt.n_heads(),
            gt.n_cols,
            est.n_layers(),
            est.n_heads(),
            est.n_cols
        )));
    }
    if gt.n_cols == 0 {
        return Err(Error::contract("kl_loss over zero columns".to_string()));
    }
    let mut total = 0.0;
    for (gl, el) in gt.values.iter().zip(&est.values) {
        for (gv, ev) in gl.iter().zip(el) {
            let p = ops::l1_normalize(&Tensor::vector(gv.clone()))?;
            let q = ops::l1_normalize(&Tensor::vector(ev.clone()))?;
            for (&pi, &qi) in p.data().iter().zip(q.data()) {
                let (pi, qi) = (pi.to_f64(), qi.to_f64());
                total += pi * ((pi + eps) / (qi + eps)).ln();
            }
        }
    }
    Ok(total / (gt.n_layers() * gt.n_heads()) as f64)
}

/// Adam moments for a fixed ordered parameter list.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params<T: Scalar>(params: &LookaheadParams<T>) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamState::new(&sizes)
    }

    /// One update over parameters given gradients in the same order.
    /// Moments are kept in f64 regardless of the run precision.
    pub fn update<T: Scalar>(
        &mut self,
        params: Vec<&mut Tensor<T>>,
        grads: &[Tensor<T>],
        lr: f64,
        beta1: f64,
        beta2: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer saw {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - beta1.powf(t);
        let bias2 = 1.0 - beta2.powf(t);
        const ADAM_EPS: f64 = 1e-8;
        for ((p, g), (m, v)) in
            params.into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j].to_f64();
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *pj = T::from_f64(pj.to_f64() - lr * mhat / (vhat.sqrt() + ADAM_EPS));
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], clip: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        for &x in g.data() {
            let x = x.to_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > clip && norm > 0.0 {
        let factor = T::from_f64(clip / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * factor;
            }
        }
    }
    norm
}

/// Ground-truth scores against an existing prompt cache (avoids a second
/// prompt prefill inside the training step).
fn gt_scores_from_cache<T: Scalar>(
    model: &Model<T>,
    cache: &KVCache<T>,
    n_in: usize,
    y: &[TokenId],
) -> Result<ImportanceScores<T>> {
    let (_, probe) = model.scoring_pass(cache, TailInput::Tokens(y), n_in, y.len())?;
    let mut values = Vec::with_capacity(model.cfg.n_layers);
    for layer in 0..model.cfg.n_layers {
        let mut heads = Vec::with_capacity(model.cfg.n_query_heads);
        for head in 0..model.cfg.n_query_heads {
            let block = probe.block(layer, head, model.cfg.n_query_heads);
            let cross = ops::slice_cols(block, 0, n_in)?;
            heads.push(ops::mean_over_rows(&cross).data().to_vec());
        }
        values.push(heads);
    }
    Ok(ImportanceScores { values, head_space: HeadSpace::QueryHeads, n_cols: n_in })
}

/// Loss and gradients for one sample: gradient-free GT pass, taped
/// lookahead pass, Eq.-style averaged KL, backward into the lookahead
/// leaves only.
pub fn sample_loss_and_grads<T: Scalar>(
    model: &Model<T>,
    params: &LookaheadParams<T>,
    sample: &TrainSample,
    eps_kl: f64,
) -> Result<(f64, Vec<Tensor<T>>)> {
    sample.validate(model.cfg.max_seq_len, params.cfg.n_lookahead)?;
    let n_in = sample.x.len();
    let prefill = model.prefill(&sample.x, None, 0)?;
    let gt = gt_scores_from_cache(model, &prefill.cache, n_in, &sample.y)?;

    let mut tape = Tape::<T>::new();
    let vars = insert_lookahead_leaves(&mut tape, params);
    let raw = taped_lookahead_scores(&mut tape, model, &prefill.cache, &vars, n_in)?;

    let mut acc = None;
    for (idx, &score_var) in raw.iter().enumerate() {
        let (layer, head) = (idx / model.cfg.n_query_heads, idx % model.cfg.n_query_heads);
        let p = ops::l1_normalize(&Tensor::vector(gt.get(layer, head).to_vec()))?;
        let q = tape.l1_normalize(score_var)?;
        let kl = tape.kl_const_p(&p, q, eps_kl)?;
        acc = Some(match acc {
            None => kl,
            Some(a) => tape.add(a, kl)?,
        });
    }
    let total = acc.ok_or_else(|| Error::contract("no heads produced scores".to_string()))?;
    let loss = tape.scale(total, 1.0 / raw.len() as f64);
    tape.backward(loss)?;
    let grads = lookahead_grads(&tape, &vars)?;
    Ok((tape.value(loss).item()?.to_f64(), grads))
}

/// One full optimizer step on a single sample.
pub fn train_step<T: Scalar>(
    model: &Model<T>,
    params: &mut LookaheadParams<T>,
    sample: &TrainSample,
    opt: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<f64> {
    let (loss, mut grads) = sample_loss_and_grads(model, params, sample, cfg.eps_kl)?;
    clip_global_norm(&mut grads, cfg.grad_clip);
    let slots: Vec<&mut Tensor<T>> =
        params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
    opt.update(slots, &grads, cfg.lr, cfg.beta1, cfg.beta2)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_trace_csv<P: AsRef<Path>>(path: P, trace: &[TraceRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,lr,loss")?;
    for row in trace {
        writeln!(w, "{},{},{}", row.step, row.lr, row.loss)?;
    }
    Ok(())
}

pub struct TrainRun<T> {
    pub params: LookaheadParams<T>,
    pub trace: Vec<TraceRow>,
}

/// Checkpoint layout: lookahead tensors plus `adam.m.*` / `adam.v.*`
/// moments and an `opt.meta` tensor holding (step, next_train_step).
pub fn save_checkpoint<T: Scalar, P: AsRef<Path>>(
    path: P,
    params: &LookaheadParams<T>,
    opt: &AdamState,
    train_step: usize,
) -> Result<()> {
    let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
    for (name, t) in params.named_tensors() {
        tensors.push((name, t.clone()));
    }
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        tensors.push((
            format!("adam.m.{}", i),
            Tensor::vector(m.iter().map(|&x| T::from_f64(x)).collect()),
        ));
        tensors.push((
            format!("adam.v.{}", i),
            Tensor::vector(v.iter().map(|&x| T::from_f64(x)).collect()),
        ));
    }
    tensors.push((
        "opt.meta".to_string(),
        Tensor::vector(vec![T::from_f64(opt.step as f64), T::from_f64(train_step as f64)]),
    ));
    let refs: Vec<(String, &Tensor<T>)> =
        tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    io::save_tensors(path, &refs)
}

pub fn load_checkpoint<T: Scalar, P: AsRef<Path>>(
    path: P,
    model_cfg: &crate::model::ModelConfig,
    lcfg: LookaheadConfig,
) -> Result<(LookaheadParams<T>, AdamState, usize)> {
    let mut tensors = io::load_tensors::<T, _>(path)?;
    let mut params = LookaheadParams::<T>::init(model_cfg, lcfg, 0)?;
    for (name, slot) in params.named_tensors_mut() {
        *slot = io::take_tensor(&mut tensors, &name)?;
    }
    let n = params.named_tensors().len();
    let mut opt = AdamState::new(
        &params.named_tensors().iter().map(|(_, t)| t.numel()).collect::<Vec<_>>(),
    );
    for i in 0..n {
        let m = io::take_tensor::<T>(&mut tensors, &format!("adam.m.{}", i))?;
        let v = io::take_tensor::<T>(&mut tensors, &format!("adam.v.{}", i))?;
        opt.m[i] = m.data().iter().map(|x| x.to_f64()).collect();
        opt.v[i] = v.data().iter().map(|x| x.to_f64()).collect();
    }
    let meta = io::take_tensor::<T>(&mut tensors, "opt.meta")?;
    opt.step = meta.data()[0].to_f64() as usize;
    let train_step = meta.data()[1].to_f64() as usize;
    Ok((params, opt, train_step))
}

/// Cosine-scheduled Adam over the lookahead parameters with gradient
/// accumulation to the effective batch size. Deterministic under a fixed
/// seed. `checkpoint` names a file written every `cfg.checkpoint_every`
/// steps; training resumes from it when it already exists.
pub fn train_loop<T: Scalar>(
    model: &Model<T>,
    params: LookaheadParams<T>,
    corpus: &[TrainSample],
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("training corpus is empty".to_string()));
    }
    let base_checksum = model.weight_checksum();

    let (mut params, mut opt, start_step) = match checkpoint {
        Some(path) if path.exists() && cfg.checkpoint_every > 0 => {
            load_checkpoint::<T, _>(path, &model.cfg, params.cfg.clone())?
        }
        _ => {
            let opt = AdamState::for_params(&params);
            (params, opt, 0)
        }
    };

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::child_seed(cfg.rng_seed, "order"));
    order.shuffle(&mut shuffle_rng);
    // replay the sample stream consumed before the checkpoint so a resumed
    // run sees the same draws as an uninterrupted one
    let mut cursor = 0usize;
    for _ in 0..start_step * cfg.batch_size {
        cursor += 1;
        if cursor == order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
    }

    let mut trace = Vec::with_capacity(cfg.steps.saturating_sub(start_step));
    for step in start_step..cfg.steps {
        let lr = cfg.lr_at(step);
        let mut batch_loss = 0.0;
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for _ in 0..cfg.batch_size {
            let sample = &corpus[order[cursor]];
            cursor += 1;
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let (loss, grads) = sample_loss_and_grads(model, &params, sample, cfg.eps_kl)?;
            batch_loss += loss;
            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (ai, gi) in a.iter_mut().zip(&grads) {
                        for (x, &y) in ai.data_mut().iter_mut().zip(gi.data()) {
                            *x = *x + y;
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("batch_size >= 1");
        let inv = T::from_f64(1.0 / cfg.batch_size as f64);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * inv;
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let slots: Vec<&mut Tensor<T>> =
            params.named_tensors_mut().into_iter().map(|(_, t)| t).collect();
        opt.update(slots, &grads, lr, cfg.beta1, cfg.beta2)?;
        trace.push(TraceRow { step, lr, loss: batch_loss / cfg.batch_size as f64 });

        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(path) = checkpoint {
                save_checkpoint(path, &params, &opt, step + 1)?;
            }
        }
    }
    debug_assert_eq!(model.weight_checksum(), base_checksum);
    Ok(TrainRun { params, trace })
}

/// Next-token pretraining of the toy base model itself (all linear weights
/// and embeddings; norm gains stay at one). Used to build task-capable
/// fixtures; the lookahead machinery is not involved.
pub fn pretrain_base<T: Scalar>(
    model: &mut Model<T>,
    corpus: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<Vec<TraceRow>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::config("pretraining corpus is empty".to_string()));
    }
    let weight_names: Vec<String> = base_weight_names(model);
    let sizes: Vec<usize> = {
        let named = model.named_tensors();
        weight_names
            .iter()
            .map(|n| named.iter().find(|(name, _)| name == n).expect("name").1.numel())
            .collect()
    };
    let mut opt = AdamState::new(&sizes);

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut shuffle_rng = rng::seeded(rng::child_seed(cfg.rng_seed, "pretrain-order"));
    order.shuffle(&mut shuffle_rng);
    let mut cursor = 0usize;

    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let mut batch_loss = 0.0;
        let mut acc: Option<Vec<Tensor<T>>> = None;
        for _ in 0..cfg.batch_size {
            let sample = &corpus[order[cursor]];
            cursor += 1;
            if cursor == order.len() {
                order.shuffle(&mut shuffle_rng);
                cursor = 0;
            }
            let mut tokens = sample.x.clone();
            tokens.extend_from_slice(&sample.y);
            tokens.push(EOS);
            let mut tape = Tape::<T>::new();
            let (loss, vars) = taped_lm_loss(&mut tape, model, &tokens, sample.x.len())?;
            tape.backward(loss)?;
            batch_loss += tape.value(loss).item()?.to_f64();

            let mut grads = Vec::with_capacity(weight_names.len());
            let mut collect = |v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
            };
            grads.push(collect(vars.embed));
            for layer in &vars.layers {
                for &w in layer {
                    grads.push(collect(w));
                }
            }
            grads.push(collect(vars.lm_head));

            acc = Some(match acc {
                None => grads,
                Some(mut a) => {
                    for (ai, gi) in a.iter_mut().zip(&grads) {
                        for (x, &y) in ai.data_mut().iter_mut().zip(gi.data()) {
                            *x = *x + y;
                        }
                    }
                    a
                }
            });
        }
        let mut grads = acc.expect("batch_size >= 1");
        let inv = T::from_f64(1.0 / cfg.batch_size as f64);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * inv;
            }
        }
        clip_global_norm(&mut grads, cfg.grad_clip);
        let mut named = model.named_tensors_mut();
        let mut slots: Vec<&mut Tensor<T>> = Vec::with_capacity(weight_names.len());
        for want in &weight_names {
            let pos = named.iter().position(|(n, _)| n == want).expect("weight name");
            let (_, t) = named.remove(pos);
            slots.push(t);
        }
        opt.update(slots, &grads, lr, cfg.beta1, cfg.beta2)?;
        trace.push(TraceRow { step, lr, loss: batch_loss / cfg.batch_size as f64 });
    }
    Ok(trace)
}

fn base_weight_names<T: Scalar>(model: &Model<T>) -> Vec<String> {
    let mut names = vec!["embed".to_string()];
    for l in 0..model.cfg.n_layers {
        for w in ["w_q", "w_k", "w_v", "w_o", "w_gate", "w_up", "w_down"] {
            names.push(format!("layers.{}.{}", l, w));
        }
    }
    names.push("lm_head".to_string());
    names
}

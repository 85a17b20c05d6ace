//! Trainable lookahead parameters: soft token embeddings plus low-rank
//! adapters that activate only at lookahead positions.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{io, Scalar, Tensor};
use std::path::Path;

/// Which linear layers carry lookahead adapters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetModules {
    /// Soft embeddings only, no adapters.
    EmbOnly,
    /// Query and value projections.
    Qv,
    /// Every projection and feed-forward module.
    All,
}

impl TargetModules {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "emb-only" => Ok(TargetModules::EmbOnly),
            "qv" | "QV" => Ok(TargetModules::Qv),
            "all" => Ok(TargetModules::All),
            other => Err(Error::config(format!(
                "target_modules must be emb-only, qv, or all (got '{}')",
                other
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetModules::EmbOnly => "emb-only",
            TargetModules::Qv => "qv",
            TargetModules::All => "all",
        }
    }
}

/// The seven adapter slots of a decoder layer.
pub const ADAPTER_SLOTS: [AdapterSlot; 7] = [
    AdapterSlot::Q,
    AdapterSlot::K,
    AdapterSlot::V,
    AdapterSlot::O,
    AdapterSlot::Gate,
    AdapterSlot::Up,
    AdapterSlot::Down,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSlot {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl AdapterSlot {
    pub fn name(&self) -> &'static str {
        match self {
            AdapterSlot::Q => "q",
            AdapterSlot::K => "k",
            AdapterSlot::V => "v",
            AdapterSlot::O => "o",
            AdapterSlot::Gate => "gate",
            AdapterSlot::Up => "up",
            AdapterSlot::Down => "down",
        }
    }

    /// (d_in, d_out) of the adapted linear layer.
    pub fn dims(&self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.d_model;
        let attn_q = cfg.n_query_heads * cfg.d_head;
        let attn_kv = cfg.n_kv_heads * cfg.d_head;
        match self {
            AdapterSlot::Q => (d, attn_q),
            AdapterSlot::K => (d, attn_kv),
            AdapterSlot::V => (d, attn_kv),
            AdapterSlot::O => (attn_q, d),
            AdapterSlot::Gate => (d, cfg.d_ff),
            AdapterSlot::Up => (d, cfg.d_ff),
            AdapterSlot::Down => (cfg.d_ff, d),
        }
    }

    pub fn enabled_for(&self, targets: TargetModules) -> bool {
        match targets {
            TargetModules::EmbOnly => false,
            TargetModules::Qv => matches!(self, AdapterSlot::Q | AdapterSlot::V),
            TargetModules::All => true,
        }
    }
}

/// Lookahead and adapter hyperparameters.
#[derive(Clone, Debug)]
pub struct LookaheadConfig {
    pub n_lookahead: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub target_modules: TargetModules,
    pub pooling_kernel: usize,
}

impl Default for LookaheadConfig {
    fn default() -> Self {
        LookaheadConfig {
            n_lookahead: 32,
            lora_rank: 8,
            lora_alpha: 32.0,
            target_modules: TargetModules::All,
            pooling_kernel: 7,
        }
    }
}

impl LookaheadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lookahead < 1 {
            return Err(Error::config("n_lookahead must be >= 1".to_string()));
        }
        if self.pooling_kernel == 0 || self.pooling_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "pooling_kernel must be odd, got {}",
                self.pooling_kernel
            )));
        }
        if self.target_modules != TargetModules::EmbOnly && self.lora_rank == 0 {
            return Err(Error::config("lora_rank must be >= 1 when adapters are enabled".to_string()));
        }
        Ok(())
    }

    /// `alpha / r` applied to every adapter delta.
    pub fn lora_scale(&self) -> f64 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f64
        }
    }
}

/// One low-rank adapter pair; effective delta is `(alpha/r) * x A^T B^T`.
#[derive(Clone, Debug)]
pub struct LoraPair<T> {
    pub a: Tensor<T>, // r x d_in
    pub b: Tensor<T>, // d_out x r
}

/// Per-layer adapter set, `None` for slots outside the target modules.
#[derive(Clone, Debug)]
pub struct LayerAdapters<T> {
    pub pairs: [Option<LoraPair<T>>; 7], // indexed in ADAPTER_SLOTS order
}

impl<T> LayerAdapters<T> {
    pub fn get(&self, slot: AdapterSlot) -> Option<&LoraPair<T>> {
        self.pairs[slot_index(slot)].as_ref()
    }
}

fn slot_index(slot: AdapterSlot) -> usize {
    ADAPTER_SLOTS.iter().position(|s| *s == slot).unwrap()
}

/// All trainable parameters: lookahead embeddings and adapters. Base model
/// weights never receive gradients.
#[derive(Clone, Debug)]
pub struct LookaheadParams<T> {
    pub cfg: LookaheadConfig,
    pub embeddings: Tensor<T>, // n_lookahead x d_model
    pub adapters: Vec<LayerAdapters<T>>, // one per layer
}

impl<T: Scalar> LookaheadParams<T> {
    /// Random init: embeddings ~ N(0, 0.02), adapter A ~ N(0, 1/r), B = 0,
    /// so the first lookahead pass equals a plain forward over the soft
    /// tokens (zero delta).
    pub fn init(model_cfg: &ModelConfig, cfg: LookaheadConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::seeded(seed);
        let d = model_cfg.d_model;
        let emb_data: Vec<T> = (0..cfg.n_lookahead * d)
            .map(|_| T::from_f64(0.02 * rng::standard_normal(&mut r)))
            .collect();
        let embeddings = Tensor::from_vec(vec![cfg.n_lookahead, d], emb_data)?;

        let a_std = if cfg.lora_rank > 0 { (1.0 / cfg.lora_rank as f64).sqrt() } else { 0.0 };
        let mut adapters = Vec::with_capacity(model_cfg.n_layers);
        for _ in 0..model_cfg.n_layers {
            let mut pairs: [Option<LoraPair<T>>; 7] = Default::default();
            for (i, slot) in ADAPTER_SLOTS.iter().enumerate() {
                if !slot.enabled_for(cfg.target_modules) {
                    continue;
                }
                let (d_in, d_out) = slot.dims(model_cfg);
                let a_data: Vec<T> = (0..cfg.lora_rank * d_in)
                    .map(|_| T::from_f64(a_std * rng::standard_normal(&mut r)))
                    .collect();
                pairs[i] = Some(LoraPair {
                    a: Tensor::from_vec(vec![cfg.lora_rank, d_in], a_data)?,
                    b: Tensor::zeros(vec![d_out, cfg.lora_rank]),
                });
            }
            adapters.push(LayerAdapters { pairs });
        }
        Ok(LookaheadParams { cfg, embeddings, adapters })
    }

    /// Ordered view over every trainable tensor (stable across calls; the
    /// optimizer state is keyed by this order).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("lookahead.embeddings".to_string(), &self.embeddings)];
        for (l, layer) in self.adapters.iter().enumerate() {
            for (i, slot) in ADAPTER_SLOTS.iter().enumerate() {
                if let Some(pair) = &layer.pairs[i] {
                    out.push((format!("layers.{}.{}.lora_a", l, slot.name()), &pair.a));
                    out.push((format!("layers.{}.{}.lora_b", l, slot.name()), &pair.b));
                }
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> =
            vec![("lookahead.embeddings".to_string(), &mut self.embeddings)];
        for (l, layer) in self.adapters.iter_mut().enumerate() {
            for (i, pair) in layer.pairs.iter_mut().enumerate() {
                if let Some(pair) = pair {
                    let name = ADAPTER_SLOTS[i].name();
                    out.push((format!("layers.{}.{}.lora_a", l, name), &mut pair.a));
                    out.push((format!("layers.{}.{}.lora_b", l, name), &mut pair.b));
                }
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(String, &Tensor<T>)> = named.into_iter().collect();
        io::save_tensors(path, &refs)
    }

    /// Load parameters saved by [`save`], validating shapes against the
    /// given configs.
    pub fn load<P: AsRef<Path>>(
        path: P,
        model_cfg: &ModelConfig,
        cfg: LookaheadConfig,
    ) -> Result<Self> {
        let mut tensors = io::load_tensors::<T, _>(path)?;
        let mut params = LookaheadParams::init(model_cfg, cfg, 0)?;
        for (name, slot) in params.named_tensors_mut() {
            let loaded = io::take_tensor(&mut tensors, &name)?;
            if loaded.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    name,
                    loaded.shape(),
                    slot.shape()
                )));
            }
            *slot = loaded;
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
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
            rng_seed: 0,
        }
    }

    #[test]
    fn init_is_zero_delta() {
        let params =
            LookaheadParams::<f32>::init(&small_cfg(), LookaheadConfig::default(), 3).unwrap();
        for layer in &params.adapters {
            for pair in layer.pairs.iter().flatten() {
                assert!(pair.b.data().iter().all(|&x| x == 0.0));
                assert!(pair.a.data().iter().any(|&x| x != 0.0));
            }
        }
    }

    #[test]
    fn emb_only_has_no_adapters() {
        let cfg = LookaheadConfig { target_modules: TargetModules::EmbOnly, ..Default::default() };
        let params = LookaheadParams::<f32>::init(&small_cfg(), cfg, 3).unwrap();
        assert!(params.adapters.iter().all(|l| l.pairs.iter().all(|p| p.is_none())));
        assert_eq!(params.n_params(), 32 * 16);
    }

    #[test]
    fn even_pooling_kernel_rejected() {
        let cfg = LookaheadConfig { pooling_kernel: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let mcfg = small_cfg();
        let params = LookaheadParams::<f32>::init(&mcfg, LookaheadConfig::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("la.lkvt");
        params.save(&path).unwrap();
        let loaded =
            LookaheadParams::<f32>::load(&path, &mcfg, LookaheadConfig::default()).unwrap();
        assert_eq!(loaded.embeddings, params.embeddings);
        for (a, b) in loaded.adapters.iter().zip(&params.adapters) {
            for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
                match (pa, pb) {
                    (Some(x), Some(y)) => {
                        assert_eq!(x.a, y.a);
                        assert_eq!(x.b, y.b);
                    }
                    (None, None) => {}
                    _ => panic!("adapter layout mismatch"),
                }
            }
        }
    }
}

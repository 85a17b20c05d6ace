//! Toy decoder-only transformer: rotary positions, grouped-query attention,
//! SiLU-gated MLP, RMS norms, untied output head.

pub mod cache;
pub mod forward;
pub mod lookahead;
pub mod taped;

pub use cache::KVCache;
pub use forward::{AttentionProbe, PrefillOutput, TailInput};
pub use lookahead::{
    AdapterSlot, LayerAdapters, LookaheadConfig, LookaheadParams, LoraPair, TargetModules,
    ADAPTER_SLOTS,
};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{io, Scalar, Tensor};
use std::path::Path;

pub type TokenId = usize;

/// RMS norm epsilon used everywhere.
pub const RMS_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    /// Content-only attention when false (test mode).
    pub rope_enabled: bool,
    pub rng_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers,
            self.n_query_heads,
            self.n_kv_heads,
            self.d_model,
            self.d_head,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
        ];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config("all model dimensions must be >= 1".to_string()));
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return Err(Error::config(format!(
                "n_query_heads {} not divisible by n_kv_heads {}",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if self.d_model != self.n_query_heads * self.d_head {
            return Err(Error::config(format!(
                "d_model {} != n_query_heads {} * d_head {}",
                self.d_model, self.n_query_heads, self.d_head
            )));
        }
        if self.rope_enabled && self.d_head % 2 != 0 {
            return Err(Error::config("rotary positions require an even d_head".to_string()));
        }
        Ok(())
    }

    /// Query heads per KV group.
    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    /// KV group of a query head.
    pub fn kv_group(&self, query_head: usize) -> usize {
        query_head / self.group_size()
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights<T> {
    pub attn_norm: Tensor<T>, // [d]
    pub w_q: Tensor<T>,       // [H*dh, d]
    pub w_k: Tensor<T>,       // [Hkv*dh, d]
    pub w_v: Tensor<T>,       // [Hkv*dh, d]
    pub w_o: Tensor<T>,       // [d, H*dh]
    pub mlp_norm: Tensor<T>,  // [d]
    pub w_gate: Tensor<T>,    // [dff, d]
    pub w_up: Tensor<T>,      // [dff, d]
    pub w_down: Tensor<T>,    // [d, dff]
}

impl<T: Scalar> LayerWeights<T> {
    pub fn weight(&self, slot: AdapterSlot) -> &Tensor<T> {
        match slot {
            AdapterSlot::Q => &self.w_q,
            AdapterSlot::K => &self.w_k,
            AdapterSlot::V => &self.w_v,
            AdapterSlot::O => &self.w_o,
            AdapterSlot::Gate => &self.w_gate,
            AdapterSlot::Up => &self.w_up,
            AdapterSlot::Down => &self.w_down,
        }
    }
}

/// Frozen decoder weights. Immutable after construction; forwards are pure
/// so many may run concurrently over shared weights.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub embed: Tensor<T>,   // [vocab, d]
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Tensor<T>, // [d]
    pub lm_head: Tensor<T>, // [vocab, d]
}

/// Deterministic scaled-Gaussian init from `cfg.rng_seed`.
pub fn build_model<T: Scalar>(cfg: &ModelConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let mut r = rng::seeded(cfg.rng_seed);
    let d = cfg.d_model;
    let attn_q = cfg.n_query_heads * cfg.d_head;
    let attn_kv = cfg.n_kv_heads * cfg.d_head;

    let mut gauss = |rows: usize, cols: usize, std: f64| -> Tensor<T> {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(std * rng::standard_normal(&mut r)))
            .collect();
        Tensor::from_vec(vec![rows, cols], data).expect("init shape")
    };

    let glorot = |rows: usize, cols: usize| (2.0 / (rows + cols) as f64).sqrt();

    let embed = gauss(cfg.vocab_size, d, 0.02);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            attn_norm: Tensor::full(vec![d], T::one()),
            w_q: gauss(attn_q, d, glorot(attn_q, d)),
            w_k: gauss(attn_kv, d, glorot(attn_kv, d)),
            w_v: gauss(attn_kv, d, glorot(attn_kv, d)),
            w_o: gauss(d, attn_q, glorot(d, attn_q)),
            mlp_norm: Tensor::full(vec![d], T::one()),
            w_gate: gauss(cfg.d_ff, d, glorot(cfg.d_ff, d)),
            w_up: gauss(cfg.d_ff, d, glorot(cfg.d_ff, d)),
            w_down: gauss(d, cfg.d_ff, glorot(d, cfg.d_ff)),
        });
    }
    let final_norm = Tensor::full(vec![d], T::one());
    let lm_head = gauss(cfg.vocab_size, d, 0.02);
    Ok(Model { cfg: cfg.clone(), embed, layers, final_norm, lm_head })
}

impl<T: Scalar> Model<T> {
    /// Total parameter count, by enumeration over stored tensors.
    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{}.attn_norm", l), &layer.attn_norm));
            out.push((format!("layers.{}.w_q", l), &layer.w_q));
            out.push((format!("layers.{}.w_k", l), &layer.w_k));
            out.push((format!("layers.{}.w_v", l), &layer.w_v));
            out.push((format!("layers.{}.w_o", l), &layer.w_o));
            out.push((format!("layers.{}.mlp_norm", l), &layer.mlp_norm));
            out.push((format!("layers.{}.w_gate", l), &layer.w_gate));
            out.push((format!("layers.{}.w_up", l), &layer.w_up));
            out.push((format!("layers.{}.w_down", l), &layer.w_down));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = vec![("embed".to_string(), &mut self.embed)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{}.attn_norm", l), &mut layer.attn_norm));
            out.push((format!("layers.{}.w_q", l), &mut layer.w_q));
            out.push((format!("layers.{}.w_k", l), &mut layer.w_k));
            out.push((format!("layers.{}.w_v", l), &mut layer.w_v));
            out.push((format!("layers.{}.w_o", l), &mut layer.w_o));
            out.push((format!("layers.{}.mlp_norm", l), &mut layer.mlp_norm));
            out.push((format!("layers.{}.w_gate", l), &mut layer.w_gate));
            out.push((format!("layers.{}.w_up", l), &mut layer.w_up));
            out.push((format!("layers.{}.w_down", l), &mut layer.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// FNV-style checksum over the exact bit patterns of all weights; used
    /// to assert the frozen-base invariant during training.
    pub fn weight_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for &x in t.data() {
                let bits = x.to_f64().to_bits();
                h ^= bits;
                h = h.wrapping_mul(0x100_0000_01b3);
            }
        }
        h
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let named = self.named_tensors();
        io::save_tensors(path, &named)
    }

    pub fn load<P: AsRef<Path>>(path: P, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = io::load_tensors::<T, _>(path)?;
        let mut model = build_model::<T>(&ModelConfig { rng_seed: 0, ..cfg.clone() })?;
        for (name, slot) in model.named_tensors_mut() {
            let loaded = io::take_tensor(&mut tensors, &name)?;
            if loaded.shape() != slot.shape() {
                return Err(Error::format(format!(
                    "weight '{}' has shape {:?}, expected {:?}",
                    name,
                    loaded.shape(),
                    slot.shape()
                )));
            }
            *slot = loaded;
        }
        Ok(model)
    }
}

/// Trainable parameters introduced by the lookahead modules:
/// `n_lookahead * d + sum over adapted layers of r * (d_in + d_out)`.
pub fn count_trainable_params(cfg: &ModelConfig, lcfg: &LookaheadConfig) -> usize {
    let mut total = lcfg.n_lookahead * cfg.d_model;
    if lcfg.target_modules == TargetModules::EmbOnly {
        return total;
    }
    for _ in 0..cfg.n_layers {
        for slot in ADAPTER_SLOTS {
            if slot.enabled_for(lcfg.target_modules) {
                let (d_in, d_out) = slot.dims(cfg);
                total += lcfg.lora_rank * (d_in + d_out);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_query_heads: 4,
            n_kv_heads: 2,
            d_model: 16,
            d_head: 4,
            d_ff: 32,
            vocab_size: 32,
            max_seq_len: 256,
            rope_base: 10000.0,
            rope_enabled: true,
            rng_seed: 7,
        }
    }

    #[test]
    fn same_seed_gives_bit_identical_weights() {
        let cfg = toy_config();
        let a = build_model::<f32>(&cfg).unwrap();
        let b = build_model::<f32>(&cfg).unwrap();
        assert_eq!(a.weight_checksum(), b.weight_checksum());
        assert_eq!(a.embed, b.embed);
    }

    #[test]
    fn gqa_grouping() {
        let cfg = toy_config();
        assert_eq!(cfg.group_size(), 2);
        assert_eq!(cfg.kv_group(0), 0);
        assert_eq!(cfg.kv_group(1), 0);
        assert_eq!(cfg.kv_group(2), 1);
        assert_eq!(cfg.kv_group(3), 1);
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = toy_config();
        let model = build_model::<f32>(&cfg).unwrap();
        let d = cfg.d_model;
        let per_layer = 2 * d                           // norms
            + (cfg.n_query_heads * cfg.d_head) * d      // w_q
            + 2 * (cfg.n_kv_heads * cfg.d_head) * d     // w_k, w_v
            + d * (cfg.n_query_heads * cfg.d_head)      // w_o
            + 2 * cfg.d_ff * d                          // gate, up
            + d * cfg.d_ff;                             // down
        let expected = cfg.vocab_size * d               // embed
            + cfg.n_layers * per_layer
            + d                                          // final norm
            + cfg.vocab_size * d;                        // lm head
        assert_eq!(model.n_params(), expected);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = toy_config();
        cfg.n_kv_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.d_model = 20;
        assert!(cfg.validate().is_err());
        let mut cfg = toy_config();
        cfg.n_layers = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn trainable_param_count_examples() {
        // embeddings only
        let cfg = ModelConfig { d_model: 128, n_query_heads: 8, d_head: 16, ..toy_config() };
        let lcfg = LookaheadConfig {
            n_lookahead: 32,
            lora_rank: 0,
            target_modules: TargetModules::EmbOnly,
            ..Default::default()
        };
        assert_eq!(count_trainable_params(&cfg, &lcfg), 4096);
    }

    #[test]
    fn trainable_params_llama_1b_like_within_table_tolerance() {
        // d=2048, 16 layers, d_ff=8192, kv width 512, all modules, r=8.
        let cfg = ModelConfig {
            n_layers: 16,
            n_query_heads: 32,
            n_kv_heads: 8,
            d_model: 2048,
            d_head: 64,
            d_ff: 8192,
            vocab_size: 128_256,
            max_seq_len: 131_072,
            rope_base: 500_000.0,
            rope_enabled: true,
            rng_seed: 0,
        };
        let lcfg = LookaheadConfig::default();
        let count = count_trainable_params(&cfg, &lcfg) as f64;
        let reported = 5.4e6;
        assert!(
            (count - reported).abs() / reported < 0.10,
            "trainable count {} vs 5.4M",
            count
        );
    }

    #[test]
    fn model_save_load_roundtrip() {
        let cfg = toy_config();
        let model = build_model::<f32>(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.lkvt");
        model.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path, &cfg).unwrap();
        assert_eq!(loaded.weight_checksum(), model.weight_checksum());
    }
}

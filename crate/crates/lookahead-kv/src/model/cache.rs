//! Per-layer, per-KV-head key/value store with original rotary positions.
//!
//! This is the object being evicted: keys are stored post-rotation at their
//! original positions, so retained entries never need re-rotation and the
//! first generated token simply takes the next position after the prompt.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub(crate) struct HeadCache<T> {
    pub keys: Vec<T>,   // len * d_head, row-major
    pub values: Vec<T>, // len * d_head
    pub positions: Vec<usize>,
}

impl<T: Scalar> HeadCache<T> {
    fn new() -> Self {
        HeadCache { keys: Vec::new(), values: Vec::new(), positions: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn key_row(&self, i: usize, d_head: usize) -> &[T] {
        &self.keys[i * d_head..(i + 1) * d_head]
    }

    pub fn value_row(&self, i: usize, d_head: usize) -> &[T] {
        &self.values[i * d_head..(i + 1) * d_head]
    }
}

/// KV cache for one sequence. Owned by that sequence and mutated
/// single-threaded; eviction produces a fresh cache.
#[derive(Clone, Debug)]
pub struct KVCache<T> {
    n_layers: usize,
    n_kv_heads: usize,
    d_head: usize,
    /// Entries per head beyond this index are lookahead slots; they are
    /// dropped unconditionally by compression and never decoded against.
    prompt_len: usize,
    heads: Vec<HeadCache<T>>, // layer-major: layer * n_kv_heads + g
}

impl<T: Scalar> KVCache<T> {
    pub fn new(n_layers: usize, n_kv_heads: usize, d_head: usize) -> Self {
        KVCache {
            n_layers,
            n_kv_heads,
            d_head,
            prompt_len: 0,
            heads: (0..n_layers * n_kv_heads).map(|_| HeadCache::new()).collect(),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Entries currently stored per head (uniform across heads).
    pub fn len(&self) -> usize {
        self.heads.first().map_or(0, |h| h.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of leading entries that are prompt tokens (the rest are
    /// lookahead slots).
    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub(crate) fn set_prompt_len(&mut self, len: usize) {
        self.prompt_len = len;
    }

    pub(crate) fn head(&self, layer: usize, g: usize) -> &HeadCache<T> {
        &self.heads[layer * self.n_kv_heads + g]
    }

    #[cfg(test)]
    pub(crate) fn head_mut(&mut self, layer: usize, g: usize) -> &mut HeadCache<T> {
        &mut self.heads[layer * self.n_kv_heads + g]
    }

    /// Largest stored position, if any entries exist.
    pub fn max_position(&self) -> Option<usize> {
        self.heads.first().and_then(|h| h.positions.last().copied())
    }

    pub fn positions(&self, layer: usize, g: usize) -> &[usize] {
        &self.head(layer, g).positions
    }

    /// Append one entry to every given head row; positions must be strictly
    /// increasing per head.
    pub(crate) fn append(
        &mut self,
        layer: usize,
        g: usize,
        key: &[T],
        value: &[T],
        position: usize,
    ) -> Result<()> {
        let d = self.d_head;
        if key.len() != d || value.len() != d {
            return Err(Error::shape(format!(
                "cache row width {} (keys) / {} (values), expected {}",
                key.len(),
                value.len(),
                d
            )));
        }
        let h = &mut self.heads[layer * self.n_kv_heads + g];
        if let Some(&last) = h.positions.last() {
            if position <= last {
                return Err(Error::contract(format!(
                    "cache positions must increase: {} after {}",
                    position, last
                )));
            }
        }
        h.keys.extend_from_slice(key);
        h.values.extend_from_slice(value);
        h.positions.push(position);
        Ok(())
    }

    /// Keep only the listed prompt entries for each (layer, kv head);
    /// lookahead slots are dropped unconditionally. Indices must be sorted,
    /// unique, and within the prompt range.
    pub fn compress(&self, retained: &[Vec<Vec<usize>>]) -> Result<KVCache<T>> {
        if retained.len() != self.n_layers {
            return Err(Error::shape(format!(
                "retained sets for {} layers, cache has {}",
                retained.len(),
                self.n_layers
            )));
        }
        let mut out = KVCache::new(self.n_layers, self.n_kv_heads, self.d_head);
        for (layer, per_head) in retained.iter().enumerate() {
            if per_head.len() != self.n_kv_heads {
                return Err(Error::shape(format!(
                    "retained sets for {} heads at layer {}, cache has {}",
                    per_head.len(),
                    layer,
                    self.n_kv_heads
                )));
            }
            for (g, indices) in per_head.iter().enumerate() {
                let src = self.head(layer, g);
                let mut last: Option<usize> = None;
                for &i in indices {
                    if i >= self.prompt_len {
                        return Err(Error::contract(format!(
                            "retained index {} outside prompt of {}",
                            i, self.prompt_len
                        )));
                    }
                    if let Some(prev) = last {
                        if i <= prev {
                            return Err(Error::contract(
                                "retained indices must be sorted and unique".to_string(),
                            ));
                        }
                    }
                    last = Some(i);
                    out.append(
                        layer,
                        g,
                        src.key_row(i, self.d_head),
                        src.value_row(i, self.d_head),
                        src.positions[i],
                    )?;
                }
            }
        }
        out.prompt_len = retained[0][0].len();
        Ok(out)
    }

    /// Drop lookahead slots, keeping the full prompt.
    pub fn without_lookahead_rows(&self) -> Result<KVCache<T>> {
        let all: Vec<Vec<Vec<usize>>> = (0..self.n_layers)
            .map(|_| (0..self.n_kv_heads).map(|_| (0..self.prompt_len).collect()).collect())
            .collect();
        self.compress(&all)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn filled_cache() -> KVCache<f32> {
        let mut c = KVCache::new(2, 2, 2);
        for layer in 0..2 {
            for g in 0..2 {
                for i in 0..5 {
                    let v = (layer * 100 + g * 10 + i) as f32;
                    c.append(layer, g, &[v, v + 0.5], &[-v, v], i).unwrap();
                }
            }
        }
        c.set_prompt_len(4); // last entry is a lookahead slot
        c
    }

    #[test]
    fn append_rejects_non_increasing_positions() {
        let mut c = KVCache::<f32>::new(1, 1, 2);
        c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 5).unwrap();
        assert!(c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 5).is_err());
        assert!(c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 4).is_err());
        assert!(c.append(0, 0, &[1.0, 2.0], &[3.0, 4.0], 6).is_ok());
    }

    #[test]
    fn compress_keeps_rows_and_positions() {
        let c = filled_cache();
        let retained = vec![vec![vec![0, 2], vec![1, 3]], vec![vec![0, 1], vec![2, 3]]];
        let small = c.compress(&retained).unwrap();
        assert_eq!(small.len(), 2);
        assert_eq!(small.positions(0, 0), &[0, 2]);
        assert_eq!(small.positions(0, 1), &[1, 3]);
        assert_eq!(small.head(0, 0).key_row(1, 2), c.head(0, 0).key_row(2, 2));
        // lookahead slot (index 4) can never be retained
        let bad = vec![vec![vec![0, 4], vec![1, 3]], vec![vec![0, 1], vec![2, 3]]];
        assert!(c.compress(&bad).is_err());
    }

    #[test]
    fn compress_requires_sorted_unique() {
        let c = filled_cache();
        let bad = vec![vec![vec![2, 0], vec![1, 3]], vec![vec![0, 1], vec![2, 3]]];
        assert!(c.compress(&bad).is_err());
        let dup = vec![vec![vec![1, 1], vec![1, 3]], vec![vec![0, 1], vec![2, 3]]];
        assert!(c.compress(&dup).is_err());
    }

    #[test]
    fn without_lookahead_drops_tail_slots() {
        let c = filled_cache();
        let trimmed = c.without_lookahead_rows().unwrap();
        assert_eq!(trimmed.len(), 4);
        assert_eq!(trimmed.prompt_len(), 4);
    }
}

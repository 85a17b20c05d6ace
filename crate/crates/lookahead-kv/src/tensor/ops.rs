//! Eager tensor kernels.
//!
//! These are the forward implementations shared by the inference path and
//! the tape (the tape records the same kernels plus backward rules). All
//! kernels are 2-D row-major; no broadcasting beyond row-wise vector ops so
//! the backward rules stay auditable.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `a[m x k] @ b[k x n] -> [m x n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {}x{} @ {}x{}",
            m, k, kb, n
        )));
    }
    let mut out = vec![T::zero(); m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

/// `a[m x k] @ b[n x k]^T -> [m x n]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    if k != kb {
        return Err(Error::shape(format!(
            "matmul_nt inner dims disagree: {}x{} @ ({}x{})^T",
            m, k, n, kb
        )));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    Tensor::from_vec(vec![m, n], out)
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.at(i, j);
        }
    }
    Tensor::from_vec(vec![n, m], out).expect("transpose shape")
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise(a, b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise(a, b, "sub", |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_elementwise(a, b, "mul", |x, y| x * y)
}

fn zip_elementwise<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    name: &str,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{} between {:?} and {:?}",
            name,
            a.shape(),
            b.shape()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("scale shape")
}

/// SiLU activation `x * sigmoid(x)`, elementwise.
pub fn silu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).expect("silu shape")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-wise RMS normalization: each row divided by
/// `sqrt(mean(x^2) + eps)`, then scaled by `gain`.
pub fn rmsnorm_rows<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let d = x.cols();
    if d == 0 {
        return Err(Error::shape("rmsnorm on zero-width tensor".to_string()));
    }
    if gain.numel() != d {
        return Err(Error::shape(format!(
            "rmsnorm gain has {} entries for width {}",
            gain.numel(),
            d
        )));
    }
    let mut out = Vec::with_capacity(x.numel());
    let inv_d = T::from_f64(1.0 / d as f64);
    let eps = T::from_f64(eps);
    for r in 0..x.rows() {
        let row = x.row(r);
        let ms = dot(row, row) * inv_d;
        let inv_rms = T::one() / (ms + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push(v * inv_rms * gain.data()[j]);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Row-wise softmax with optional prefix-visibility masking.
///
/// `row_limits[i]` is the number of leading columns visible to row `i`;
/// masked columns are exactly zero. Stabilized by row-max subtraction.
pub fn softmax_rows<T: Scalar>(
    logits: &Tensor<T>,
    row_limits: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let (m, n) = (logits.rows(), logits.cols());
    if let Some(lims) = row_limits {
        if lims.len() != m {
            return Err(Error::shape(format!(
                "{} row limits for {} rows",
                lims.len(),
                m
            )));
        }
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let limit = row_limits.map_or(n, |l| l[i].min(n));
        if limit == 0 {
            return Err(Error::contract(format!("softmax row {} fully masked", i)));
        }
        let row = logits.row(i);
        softmax_into(&row[..limit], &mut out[i * n..i * n + limit])?;
    }
    Tensor::from_vec(logits.shape().to_vec(), out)
}

/// Stabilized softmax of `row` into `out` (same length).
pub(crate) fn softmax_into<T: Scalar>(row: &[T], out: &mut [T]) -> Result<()> {
    let mut max = row[0];
    for &v in row.iter().skip(1) {
        if v > max {
            max = v;
        }
    }
    if !max.is_finite() {
        return Err(Error::contract("softmax over non-finite logits".to_string()));
    }
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(())
}

/// Rotary position embedding over adjacent pairs of columns.
///
/// `x` is `rows x d` with even `d`; row `r` is rotated by angles
/// `positions[r] * base^(-2j/d)` for pair index `j`.
pub fn rope_rows<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let (m, d) = (x.rows(), x.cols());
    if d % 2 != 0 {
        return Err(Error::shape(format!("rope requires even head dim, got {}", d)));
    }
    if positions.len() != m {
        return Err(Error::shape(format!(
            "{} positions for {} rows",
            positions.len(),
            m
        )));
    }
    let mut out = Vec::with_capacity(m * d);
    for r in 0..m {
        let row = x.row(r);
        let pos = positions[r] as f64;
        for j in 0..d / 2 {
            let theta = pos * base.powf(-2.0 * j as f64 / d as f64);
            let (sin, cos) = (T::from_f64(theta.sin()), T::from_f64(theta.cos()));
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            out.push(a * cos - b * sin);
            out.push(a * sin + b * cos);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Column means: `[m x n] -> [n]`.
pub fn mean_over_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (x.rows(), x.cols());
    let mut out = vec![T::zero(); n];
    for i in 0..m {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o = *o + v;
        }
    }
    let inv = T::from_f64(1.0 / m as f64);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Tensor::vector(out)
}

/// Normalize a nonnegative vector to sum 1. Order preserved; zero vectors
/// are a contract violation (softmax-derived scores cannot be zero, but
/// the guard stays).
pub fn l1_normalize<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let sum = v.data().iter().fold(T::zero(), |acc, &x| acc + x.abs());
    if sum <= T::zero() {
        return Err(Error::contract("l1_normalize of zero vector".to_string()));
    }
    Ok(scale(v, T::one() / sum))
}

pub fn concat_rows<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "concat_rows widths {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::from_vec(vec![a.rows() + b.rows(), a.cols()], data)
}

pub fn concat_cols<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::shape("concat_cols of no tensors".to_string()));
    }
    let m = parts[0].rows();
    if parts.iter().any(|p| p.rows() != m) {
        return Err(Error::shape("concat_cols row counts disagree".to_string()));
    }
    let n: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(m * n);
    for r in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    Tensor::from_vec(vec![m, n], data)
}

pub fn slice_rows<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = (x.rows(), x.cols());
    if start + len > m {
        return Err(Error::shape(format!(
            "slice_rows {}..{} out of {} rows",
            start,
            start + len,
            m
        )));
    }
    let data = x.data()[start * n..(start + len) * n].to_vec();
    Tensor::from_vec(vec![len, n], data)
}

pub fn slice_cols<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (m, n) = (x.rows(), x.cols());
    if start + len > n {
        return Err(Error::shape(format!(
            "slice_cols {}..{} out of width {}",
            start,
            start + len,
            n
        )));
    }
    let mut data = Vec::with_capacity(m * len);
    for r in 0..m {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Tensor::from_vec(vec![m, len], data)
}

/// Row gather: `out[i] = table[ids[i]]`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let n = table.rows();
    let d = table.cols();
    let mut data = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= n {
            return Err(Error::input(format!("row id {} out of table size {}", id, n)));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::from_vec(vec![ids.len(), d], data)
}

/// Index of the largest entry, ties broken toward the smaller index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut r = rng::seeded(seed);
        let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(vec![rows, cols], data).unwrap()
    }

    /// Independent triple-loop product used as the matmul oracle.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::from_vec(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::<f64>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::<f64>::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &m).unwrap(), m);
    }

    #[test]
    fn matmul_basis_selection() {
        let a = Tensor::<f64>::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::<f64>::matrix(2, 1, vec![2.0, 5.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = random_tensor(4, 4, 11);
        let b = random_tensor(4, 4, 12);
        let got = matmul(&a, &b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = random_tensor(2, 3, 1);
        let b = random_tensor(2, 3, 2);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_associative_with_identity_8x8() {
        let a = random_tensor(8, 8, 21);
        let b = random_tensor(8, 8, 22);
        let c = random_tensor(8, 8, 23);
        let ab_c = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let a_bc = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(ab_c.max_abs_diff(&a_bc).unwrap() < 1e-10);
        let eye = {
            let mut d = vec![0.0; 64];
            for i in 0..8 {
                d[i * 8 + i] = 1.0;
            }
            Tensor::from_vec(vec![8, 8], d).unwrap()
        };
        assert!(matmul(&a, &eye).unwrap().max_abs_diff(&a).unwrap() < 1e-15);
    }

    #[test]
    fn matmul_nt_matches_transposed_matmul() {
        let a = random_tensor(3, 5, 31);
        let b = random_tensor(4, 5, 32);
        let got = matmul_nt(&a, &b).unwrap();
        let want = matmul(&a, &transpose(&b)).unwrap();
        assert!(got.max_abs_diff(&want).unwrap() < 1e-14);
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::<f64>::vector(vec![0.0, 0.0]);
        let s = softmax_rows(&t, None).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_column_is_exactly_zero() {
        let t = Tensor::<f64>::vector(vec![3.7, 100.0]);
        let s = softmax_rows(&t, Some(&[1])).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum_oracle() {
        let t = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]);
        let s = softmax_rows(&t, None).unwrap();
        let z: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (i, &v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_all_masked_row_is_contract_error() {
        let t = Tensor::<f64>::vector(vec![1.0, 2.0]);
        assert!(softmax_rows(&t, Some(&[0])).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_f32_and_f64() {
        let mut r = rng::seeded(7);
        for _ in 0..20 {
            let data: Vec<f64> = (0..24).map(|_| r.gen_range(-5.0..5.0)).collect();
            let t64 = Tensor::from_vec(vec![4, 6], data.clone()).unwrap();
            let t32: Tensor<f32> = t64.cast();
            let lims = [2usize, 4, 6, 6];
            let s64 = softmax_rows(&t64, Some(&lims)).unwrap();
            let s32 = softmax_rows(&t32, Some(&lims)).unwrap();
            for i in 0..4 {
                let sum64: f64 = s64.row(i).iter().sum();
                let sum32: f32 = s32.row(i).iter().sum();
                assert!((sum64 - 1.0).abs() < 1e-12);
                assert!((sum32 - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rmsnorm_ones_is_identity_at_zero_eps() {
        let x = Tensor::<f64>::full(vec![1, 4], 1.0);
        let gain = Tensor::<f64>::full(vec![4], 1.0);
        let y = rmsnorm_rows(&x, &gain, 0.0).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn rmsnorm_zero_row_stays_zero() {
        let x = Tensor::<f64>::zeros(vec![1, 4]);
        let gain = Tensor::<f64>::full(vec![4], 1.0);
        let y = rmsnorm_rows(&x, &gain, 1e-6).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn rmsnorm_matches_direct_formula() {
        let x = random_tensor(1, 6, 41);
        let gain = Tensor::<f64>::vector(vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
        let eps = 1e-5;
        let y = rmsnorm_rows(&x, &gain, eps).unwrap();
        let ms: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 6.0;
        for j in 0..6 {
            let want = x.data()[j] / (ms + eps).sqrt() * gain.data()[j];
            assert!((y.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_preserves_relative_position() {
        // Attention logits depend only on the offset between q and k.
        let q = random_tensor(1, 8, 51);
        let k = random_tensor(1, 8, 52);
        let base = 10000.0;
        let logit = |q_pos: usize, k_pos: usize| {
            let qr = rope_rows(&q, &[q_pos], base).unwrap();
            let kr = rope_rows(&k, &[k_pos], base).unwrap();
            dot(qr.row(0), kr.row(0))
        };
        assert!((logit(7, 3) - logit(12, 8)).abs() < 1e-10);
        assert!((logit(5, 5) - logit(9, 9)).abs() < 1e-10);
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let x = random_tensor(1, 8, 53);
        let y = rope_rows(&x, &[0], 10000.0).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn l1_normalize_basics() {
        let v = Tensor::<f64>::vector(vec![2.0, 2.0]);
        let n = l1_normalize(&v).unwrap();
        assert_eq!(n.data(), &[0.5, 0.5]);
        // idempotence
        let again = l1_normalize(&n).unwrap();
        assert!(again.max_abs_diff(&n).unwrap() < 1e-12);
        // zero vector guarded
        assert!(l1_normalize(&Tensor::<f64>::zeros(vec![3])).is_err());
    }

    #[test]
    fn l1_normalize_matches_direct_division() {
        let mut r = rng::seeded(61);
        let data: Vec<f64> = (0..10).map(|_| r.gen_range(0.01..2.0)).collect();
        let sum: f64 = data.iter().sum();
        let v = Tensor::vector(data.clone());
        let n = l1_normalize(&v).unwrap();
        for j in 0..10 {
            assert_eq!(n.data()[j], data[j] * (1.0 / sum));
        }
    }

    #[test]
    fn mean_over_rows_column_means() {
        let x = Tensor::<f64>::matrix(2, 3, vec![1.0, 2.0, 3.0, 3.0, 4.0, 5.0]).unwrap();
        let m = mean_over_rows(&x);
        assert_eq!(m.data(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn slice_and_concat_roundtrip() {
        let x = random_tensor(3, 6, 71);
        let a = slice_cols(&x, 0, 2).unwrap();
        let b = slice_cols(&x, 2, 4).unwrap();
        let back = concat_cols(&[&a, &b]).unwrap();
        assert_eq!(back, x);
        let top = random_tensor(2, 6, 72);
        let all = concat_rows(&top, &x).unwrap();
        assert_eq!(all.rows(), 5);
        assert_eq!(all.row(2), x.row(0));
    }

    #[test]
    fn argmax_ties_to_smaller_index() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0f64]), 0);
    }
}

//! Tensor-level attention kernels and their quadratic oracles.

use super::TokenSeq;
use crate::alloc;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check_nc<T: Scalar>(
    op: &'static str,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(usize, usize)> {
    let (n, c) = q.dims2(op)?;
    if k.shape() != [n, c] || v.shape() != [n, c] {
        return Err(Error::dimension(
            op,
            format!("Q {:?}, K {:?}, V {:?} must agree", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((n, c))
}

/// Reference scaled dot-product attention: softmax(Q K^T / sqrt(C)) V.
/// Materializes the NxN attention map; oracle and benchmark baseline only.
pub fn scaled_dot_product_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = check_nc("scaled_dot_product_attention", q, k, v)?;
    let mut out = Tensor::zeros(&[n, c]);
    full_attention_into(q, k, v, &mut out)?;
    Ok(out)
}

/// Same as [`scaled_dot_product_attention`] but writes into a caller
/// buffer, so a measurement window around the call sees only the NxN map
/// and row scratch as transient allocations.
pub fn full_attention_into<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &mut Tensor<T>,
) -> Result<()> {
    let (n, c) = check_nc("scaled_dot_product_attention", q, k, v)?;
    if out.shape() != [n, c] {
        return Err(Error::dimension(
            "scaled_dot_product_attention",
            format!("output buffer {:?} != [{n}, {c}]", out.shape()),
        ));
    }
    let inv_sqrt_c = T::from_f64(1.0 / (c as f64).sqrt());
    let mut scores = Tensor::<T>::try_zeros(&[n, n])?;

    // scores = Q K^T / sqrt(C)
    {
        let qd = q.data();
        let kd = k.data();
        let sd = scores.data_mut();
        for i in 0..n {
            let qi = &qd[i * c..(i + 1) * c];
            for j in 0..n {
                let kj = &kd[j * c..(j + 1) * c];
                let mut acc = T::zero();
                for t in 0..c {
                    acc += qi[t] * kj[t];
                }
                sd[i * n + j] = acc * inv_sqrt_c;
            }
        }
        // Row softmax in place.
        for i in 0..n {
            let row = &mut sd[i * n..(i + 1) * n];
            let mut max = T::neg_infinity();
            for &x in row.iter() {
                max = max.max(x);
            }
            let mut sum = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            let inv = T::one() / sum;
            for x in row.iter_mut() {
                *x = *x * inv;
            }
        }
    }

    for x in out.data_mut() {
        *x = T::zero();
    }
    crate::tensor::matmul_into(scores.data(), v.data(), out.data_mut(), n, n, c);
    Ok(())
}

/// Factorized attention: (Q / sqrt(C)) (softmax(K)^T V) with the softmax
/// taken across the tokens of the sequence. The CxC contraction is built
/// first, streaming over tokens, so no buffer grows with N; the only
/// transient allocations are the CxC table and three length-C lines.
pub fn factorized_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = check_nc("factorized_attention", q, k, v)?;
    let mut out = Tensor::zeros(&[n, c]);
    factor_attention_into(q, k, v, &mut out)?;
    let _ = n;
    Ok(out)
}

/// In-place variant of [`factorized_attention`]; the complexity-witness
/// measurements call this with a preallocated output.
pub fn factor_attention_into<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    out: &mut Tensor<T>,
) -> Result<()> {
    let (n, c) = check_nc("factorized_attention", q, k, v)?;
    if out.shape() != [n, c] {
        return Err(Error::dimension(
            "factorized_attention",
            format!("output buffer {:?} != [{n}, {c}]", out.shape()),
        ));
    }
    let entry_live = alloc::live_bytes();
    let saved_peak = alloc::peak_bytes();
    alloc::reset_peak();

    let kd = k.data();
    let vd = v.data();

    // Per-column max and sum of shifted exponentials over the token axis.
    let mut col_max = Tensor::<T>::filled(&[c], T::neg_infinity());
    let mut col_sum = Tensor::<T>::zeros(&[c]);
    for t in 0..n {
        let row = &kd[t * c..(t + 1) * c];
        let m = col_max.data_mut();
        for j in 0..c {
            m[j] = m[j].max(row[j]);
        }
    }
    for t in 0..n {
        let row = &kd[t * c..(t + 1) * c];
        let m = col_max.data();
        let s = col_sum.data_mut();
        for j in 0..c {
            s[j] += (row[j] - m[j]).exp();
        }
    }

    // L[c1][c2] = sum_t softmax(K)[t][c1] * V[t][c2], accumulated one token
    // at a time through a length-C weight line.
    let mut table = Tensor::<T>::zeros(&[c, c]);
    let mut weights = Tensor::<T>::zeros(&[c]);
    for t in 0..n {
        let krow = &kd[t * c..(t + 1) * c];
        let vrow = &vd[t * c..(t + 1) * c];
        {
            let wd = weights.data_mut();
            let m = col_max.data();
            let s = col_sum.data();
            for j in 0..c {
                wd[j] = (krow[j] - m[j]).exp() / s[j];
            }
        }
        let wd = weights.data();
        let ld = table.data_mut();
        for c1 in 0..c {
            let w = wd[c1];
            let lrow = &mut ld[c1 * c..(c1 + 1) * c];
            for c2 in 0..c {
                lrow[c2] += w * vrow[c2];
            }
        }
    }

    for x in out.data_mut() {
        *x = T::zero();
    }
    crate::tensor::matmul_into(q.data(), table.data(), out.data_mut(), n, c, c);
    let inv_sqrt_c = T::from_f64(1.0 / (c as f64).sqrt());
    for x in out.data_mut() {
        *x = *x * inv_sqrt_c;
    }

    // Audit hook: transient footprint must not depend on N.
    let transient = alloc::peak_bytes().saturating_sub(entry_live);
    debug_assert!(
        transient <= (c * c + 3 * c) * std::mem::size_of::<T>() + 256,
        "factorized attention allocated {transient} transient bytes at C={c}"
    );
    alloc::raise_peak_to(saved_peak);
    Ok(())
}

/// Explicit relative-attention term of the 1-D formulation: builds the
/// indicator-masked encoding matrix per channel and contracts it against
/// the values. Quadratic in N by construction; oracle only.
///
/// `p` holds the window weights as an MxC matrix, row `d + (M-1)/2`
/// holding the weight for offset `d`.
pub fn rel_position_term_oracle<T: Scalar>(
    q: &Tensor<T>,
    v: &Tensor<T>,
    p: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, c) = check_nc("rel_position_term_oracle", q, v, v)?;
    let (m, pc) = p.dims2("rel_position_term_oracle")?;
    if pc != c {
        return Err(Error::dimension(
            "rel_position_term_oracle",
            format!("position table {:?} does not match channels {}", p.shape(), c),
        ));
    }
    if m % 2 == 0 {
        return Err(Error::Config(format!("window must be odd, got {m}")));
    }
    let half = (m as isize - 1) / 2;
    let mut out = Tensor::zeros(&[n, c]);
    for l in 0..c {
        // E^{(l)}_{ij} = 1{|j-i| <= (M-1)/2} * q_i^{(l)} * p_{j-i}^{(l)}
        let mut e = Tensor::<T>::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let d = j as isize - i as isize;
                if d.abs() <= half {
                    let val = q.at(&[i, l]) * p.at(&[(d + half) as usize, l]);
                    e.set(&[i, j], val);
                }
            }
        }
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc += e.at(&[i, j]) * v.at(&[j, l]);
            }
            out.set(&[i, l], acc);
        }
    }
    Ok(out)
}

/// Factorized attention plus the explicit relative-attention term; the 1-D
/// oracle for the production CRPE path.
pub fn rel_factor_att_oracle<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    p: &Tensor<T>,
) -> Result<Tensor<T>> {
    let base = factorized_attention(q, k, v)?;
    let rel = rel_position_term_oracle(q, v, p)?;
    base.add(&rel)
}

/// Convolutional relative position encoding: the relative-attention term
/// realized as per-channel-group depthwise convolutions over the value
/// map, gated by the query map. Token row 0 is the class token; its output
/// row is exactly zero.
///
/// `kernels` carries one MxMxCh depthwise kernel per window group; the
/// channel extents must partition C in order.
pub fn crpe<T: Scalar>(
    q: &Tensor<T>,
    v: &Tensor<T>,
    kernels: &[&Tensor<T>],
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let (n, c) = check_nc("crpe", q, v, v)?;
    if n != h * w + 1 {
        return Err(Error::dimension(
            "crpe",
            format!("{} tokens != {}x{} image plus class token", n, h, w),
        ));
    }
    let total: usize = kernels.iter().map(|k| k.shape()[2]).sum();
    if total != c {
        return Err(Error::dimension(
            "crpe",
            format!("kernel channels sum to {}, expected {}", total, c),
        ));
    }
    let mut groups = Vec::with_capacity(kernels.len());
    let mut start = 0;
    for kernel in kernels {
        let ch = kernel.shape()[2];
        let q_img = q
            .slice_axis(0, 1, h * w)?
            .slice_axis(1, start, ch)?
            .reshape(&[h, w, ch])?;
        let v_img = v
            .slice_axis(0, 1, h * w)?
            .slice_axis(1, start, ch)?
            .reshape(&[h, w, ch])?;
        let conv = v_img.depthwise_conv2d(kernel)?;
        let gated = q_img.hadamard(&conv)?.reshape(&[h * w, ch])?;
        groups.push(gated);
        start += ch;
    }
    let refs: Vec<&Tensor<T>> = groups.iter().collect();
    let img_rows = Tensor::concat(&refs, 1)?;
    let zero_row = Tensor::zeros(&[1, c]);
    Tensor::concat(&[&zero_row, &img_rows], 0)
}

/// Convolutional position encoding: image tokens gain a depthwise
/// convolution of themselves; the class token passes through unchanged.
pub fn cpe<T: Scalar>(x: &TokenSeq<T>, kernel: &Tensor<T>) -> Result<TokenSeq<T>> {
    let conv = x.img.depthwise_conv2d(kernel)?;
    let img = x.img.add(&conv)?;
    TokenSeq::new(x.cls.clone(), img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    // Scalar triple-loop evaluation of softmax(Q K^T / sqrt(C)) V.
    fn sdpa_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (n, c) = (q.shape()[0], q.shape()[1]);
        let inv = 1.0 / (c as f64).sqrt();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut dot = 0.0;
                for t in 0..c {
                    dot += q.at(&[i, t]) * k.at(&[j, t]);
                }
                logits[j] = dot * inv;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut weights: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            for t in 0..c {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += weights[j] * v.at(&[j, t]);
                }
                out.set(&[i, t], acc);
            }
        }
        out
    }

    // Scalar triple-loop evaluation of (Q / sqrt(C)) (softmax(K)^T V) with
    // the softmax across tokens.
    fn factor_oracle(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Tensor<f64> {
        let (n, c) = (q.shape()[0], q.shape()[1]);
        let mut soft = Tensor::<f64>::zeros(&[n, c]);
        for col in 0..c {
            let mut max = f64::NEG_INFINITY;
            for t in 0..n {
                max = max.max(k.at(&[t, col]));
            }
            let mut sum = 0.0;
            for t in 0..n {
                sum += (k.at(&[t, col]) - max).exp();
            }
            for t in 0..n {
                soft.set(&[t, col], (k.at(&[t, col]) - max).exp() / sum);
            }
        }
        let mut table = Tensor::<f64>::zeros(&[c, c]);
        for c1 in 0..c {
            for c2 in 0..c {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += soft.at(&[t, c1]) * v.at(&[t, c2]);
                }
                table.set(&[c1, c2], acc);
            }
        }
        let inv = 1.0 / (c as f64).sqrt();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for c2 in 0..c {
                let mut acc = 0.0;
                for c1 in 0..c {
                    acc += q.at(&[i, c1]) * table.at(&[c1, c2]);
                }
                out.set(&[i, c2], acc * inv);
            }
        }
        out
    }

    fn rand_nc(n: usize, c: usize, rng: &mut SplitMix64) -> Tensor<f64> {
        Tensor::rand_uniform(&[n, c], -1.0, 1.0, rng)
    }

    #[test]
    fn sdpa_single_token_returns_value() {
        let mut rng = SplitMix64::new(1);
        let q = rand_nc(1, 4, &mut rng);
        let k = rand_nc(1, 4, &mut rng);
        let v = rand_nc(1, 4, &mut rng);
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn sdpa_equal_keys_average_values() {
        let mut rng = SplitMix64::new(2);
        let q = rand_nc(5, 3, &mut rng);
        let krow = rand_nc(1, 3, &mut rng);
        let k = Tensor::from_fn(&[5, 3], |i| krow.data()[i % 3]);
        let v = rand_nc(5, 3, &mut rng);
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        for i in 0..5 {
            for t in 0..3 {
                let mean: f64 = (0..5).map(|j| v.at(&[j, t])).sum::<f64>() / 5.0;
                assert!((out.at(&[i, t]) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sdpa_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(3);
        let q = rand_nc(4, 3, &mut rng);
        let k = rand_nc(4, 3, &mut rng);
        let v = rand_nc(4, 3, &mut rng);
        let out = scaled_dot_product_attention(&q, &k, &v).unwrap();
        assert!(out.max_abs_diff(&sdpa_oracle(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn factorized_single_token_closed_form() {
        // With one token the token-axis softmax is all ones, so the output
        // is (sum_c q_c) * v / sqrt(C).
        let mut rng = SplitMix64::new(4);
        let q = rand_nc(1, 6, &mut rng);
        let k = rand_nc(1, 6, &mut rng);
        let v = rand_nc(1, 6, &mut rng);
        let out = factorized_attention(&q, &k, &v).unwrap();
        let qsum: f64 = q.data().iter().sum();
        for t in 0..6 {
            let want = qsum * v.at(&[0, t]) / 6.0f64.sqrt();
            assert!((out.at(&[0, t]) - want).abs() < 1e-12);
        }
        assert!(out.max_abs_diff(&factor_oracle(&q, &k, &v)) < 1e-12);
    }

    #[test]
    fn factorized_zero_queries_zero_output() {
        let mut rng = SplitMix64::new(5);
        let q = Tensor::zeros(&[4, 3]);
        let k = rand_nc(4, 3, &mut rng);
        let v = rand_nc(4, 3, &mut rng);
        let out = factorized_attention(&q, &k, &v).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn factorized_matches_triple_loop_oracle() {
        let mut rng = SplitMix64::new(6);
        for &(n, c) in &[(1, 1), (2, 5), (7, 3), (16, 8), (33, 12)] {
            let q = rand_nc(n, c, &mut rng);
            let k = rand_nc(n, c, &mut rng);
            let v = rand_nc(n, c, &mut rng);
            let out = factorized_attention(&q, &k, &v).unwrap();
            let want = factor_oracle(&q, &k, &v);
            assert!(out.max_abs_diff(&want) < 1e-12, "n={n} c={c}");
        }
    }

    #[test]
    fn factorized_equal_queries_equal_outputs_bitwise() {
        // The CxC contraction is a global linear map, so duplicated query
        // rows must produce duplicated output rows, bit for bit.
        let mut rng = SplitMix64::new(7);
        let mut q = rand_nc(5, 4, &mut rng);
        for t in 0..4 {
            let v0 = q.at(&[0, t]);
            q.set(&[3, t], v0);
        }
        let k = rand_nc(5, 4, &mut rng);
        let v = rand_nc(5, 4, &mut rng);
        let out = factorized_attention(&q, &k, &v).unwrap();
        for t in 0..4 {
            assert_eq!(out.at(&[0, t]).to_bits(), out.at(&[3, t]).to_bits());
        }
    }

    #[test]
    fn factorized_is_permutation_equivariant() {
        let mut rng = SplitMix64::new(8);
        let (n, c) = (9, 5);
        let q = rand_nc(n, c, &mut rng);
        let k = rand_nc(n, c, &mut rng);
        let v = rand_nc(n, c, &mut rng);
        let perm: Vec<usize> = (0..n).map(|i| (i * 4 + 3) % n).collect();
        let permute = |t: &Tensor<f64>| {
            Tensor::from_fn(&[n, c], |idx| {
                let (i, j) = (idx / c, idx % c);
                t.at(&[perm[i], j])
            })
        };
        let base = factorized_attention(&q, &k, &v).unwrap();
        let permuted = factorized_attention(&permute(&q), &permute(&k), &permute(&v)).unwrap();
        assert!(permuted.max_abs_diff(&permute(&base)) < 1e-12);
    }

    #[test]
    fn rel_oracle_zero_table_reduces_to_factorized() {
        let mut rng = SplitMix64::new(9);
        let q = rand_nc(6, 4, &mut rng);
        let k = rand_nc(6, 4, &mut rng);
        let v = rand_nc(6, 4, &mut rng);
        let p = Tensor::zeros(&[3, 4]);
        let with = rel_factor_att_oracle(&q, &k, &v, &p).unwrap();
        let without = factorized_attention(&q, &k, &v).unwrap();
        assert_eq!(with.max_abs_diff(&without), 0.0);
    }

    #[test]
    fn rel_oracle_window_one_is_diagonal_gating() {
        let mut rng = SplitMix64::new(10);
        let q = rand_nc(5, 3, &mut rng);
        let v = rand_nc(5, 3, &mut rng);
        let p = rand_nc(1, 3, &mut rng);
        let term = rel_position_term_oracle(&q, &v, &p).unwrap();
        for i in 0..5 {
            for l in 0..3 {
                let want = q.at(&[i, l]) * p.at(&[0, l]) * v.at(&[i, l]);
                assert!((term.at(&[i, l]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rel_oracle_mask_is_tridiagonal_at_window_three() {
        // With q = p = 1 and a one-hot value column, the response marks
        // exactly the indicator band |j - i| <= 1.
        let n = 3;
        let q = Tensor::filled(&[n, 1], 1.0);
        let p = Tensor::filled(&[3, 1], 1.0);
        for hot in 0..n {
            let v = Tensor::from_fn(&[n, 1], |i| if i == hot { 1.0 } else { 0.0 });
            let term = rel_position_term_oracle(&q, &v, &p).unwrap();
            for i in 0..n {
                let want = if (i as isize - hot as isize).abs() <= 1 { 1.0 } else { 0.0 };
                assert_eq!(term.at(&[i, 0]), want);
            }
        }
    }

    #[test]
    fn rel_oracle_allows_saturating_window() {
        let mut rng = SplitMix64::new(11);
        let q = rand_nc(2, 2, &mut rng);
        let v = rand_nc(2, 2, &mut rng);
        // M = 7 > 2N - 1 = 3: the mask saturates, every pair interacts.
        let p = rand_nc(7, 2, &mut rng);
        assert!(rel_position_term_oracle(&q, &v, &p).is_ok());
        let even = rand_nc(4, 2, &mut rng);
        assert!(matches!(
            rel_position_term_oracle(&q, &v, &even),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn crpe_class_token_row_is_exactly_zero() {
        let mut rng = SplitMix64::new(12);
        let (h, w, c) = (3, 4, 6);
        let n = h * w + 1;
        let q = rand_nc(n, c, &mut rng);
        let v = rand_nc(n, c, &mut rng);
        let k3 = Tensor::rand_uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
        let k5 = Tensor::rand_uniform(&[5, 5, 4], -1.0, 1.0, &mut rng);
        let out = crpe(&q, &v, &[&k3, &k5], h, w).unwrap();
        for t in 0..c {
            assert_eq!(out.at(&[0, t]), 0.0);
        }
    }

    #[test]
    fn crpe_identity_kernels_gate_values_by_queries() {
        let mut rng = SplitMix64::new(13);
        let (h, w, c) = (2, 3, 4);
        let n = h * w + 1;
        let q = rand_nc(n, c, &mut rng);
        let v = rand_nc(n, c, &mut rng);
        let mut kernel = Tensor::zeros(&[3, 3, c]);
        for ch in 0..c {
            kernel.set(&[1, 1, ch], 1.0);
        }
        let out = crpe(&q, &v, &[&kernel], h, w).unwrap();
        for i in 1..n {
            for t in 0..c {
                let want = q.at(&[i, t]) * v.at(&[i, t]);
                assert!((out.at(&[i, t]) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn crpe_on_a_strip_matches_the_explicit_oracle() {
        // A height-1 image makes the 2-D depthwise convolution collapse to
        // the 1-D relative-attention window, realized by the kernel's center row.
        let mut rng = SplitMix64::new(14);
        for &m in &[3usize, 5, 7] {
            for &(w, c) in &[(5usize, 3usize), (9, 4), (16, 8)] {
                let n = w + 1;
                let q = rand_nc(n, c, &mut rng);
                let v = rand_nc(n, c, &mut rng);
                let kernel = Tensor::rand_uniform(&[m, m, c], -1.0, 1.0, &mut rng);
                let out = crpe(&q, &v, &[&kernel], 1, w).unwrap();

                let q_img = q.slice_axis(0, 1, w).unwrap();
                let v_img = v.slice_axis(0, 1, w).unwrap();
                let center = kernel.slice_axis(0, (m - 1) / 2, 1).unwrap();
                let table = center.reshape(&[m, c]).unwrap();
                let want = rel_position_term_oracle(&q_img, &v_img, &table).unwrap();
                let got = out.slice_axis(0, 1, w).unwrap();
                assert!(got.max_abs_diff(&want) < 1e-10, "m={m} w={w} c={c}");
            }
        }
    }

    #[test]
    fn crpe_rejects_bad_shapes() {
        let q = Tensor::<f64>::zeros(&[7, 4]);
        let v = Tensor::<f64>::zeros(&[7, 4]);
        let k = Tensor::<f64>::zeros(&[3, 3, 4]);
        // 7 != 2*4 + 1
        assert!(crpe(&q, &v, &[&k], 2, 4).is_err());
        // kernel channels don't partition C
        let k2 = Tensor::<f64>::zeros(&[3, 3, 3]);
        assert!(crpe(&q, &v, &[&k2], 2, 3).is_err());
    }

    #[test]
    fn cpe_zero_kernel_is_identity() {
        let mut rng = SplitMix64::new(15);
        let img = Tensor::<f64>::rand_uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
        let cls = Tensor::rand_uniform(&[2], -1.0, 1.0, &mut rng);
        let x = TokenSeq::new(Some(cls), img).unwrap();
        let out = cpe(&x, &Tensor::zeros(&[3, 3, 2])).unwrap();
        assert_eq!(out.img.max_abs_diff(&x.img), 0.0);
        assert_eq!(out.cls.unwrap().max_abs_diff(x.cls.as_ref().unwrap()), 0.0);
    }

    #[test]
    fn cpe_never_touches_the_class_token() {
        let mut rng = SplitMix64::new(16);
        let img = Tensor::<f64>::rand_uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
        let cls = Tensor::rand_uniform(&[3], -1.0, 1.0, &mut rng);
        let kernel = Tensor::rand_uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let x = TokenSeq::new(Some(cls.clone()), img).unwrap();
        let out = cpe(&x, &kernel).unwrap();
        assert_eq!(out.cls.unwrap().max_abs_diff(&cls), 0.0);
    }

    #[test]
    fn cpe_constant_tokens_shift_by_kernel_mass() {
        // Constant image + averaging kernel: interior tokens move by exactly
        // the kernel mass times the value; checked against the scalar
        // convolution directly.
        let value = 0.75;
        let img = Tensor::<f64>::filled(&[5, 5, 1], value);
        let cls = Tensor::<f64>::zeros(&[1]);
        let kernel = Tensor::<f64>::filled(&[3, 3, 1], 1.0 / 9.0);
        let x = TokenSeq::new(Some(cls), img).unwrap();
        let out = cpe(&x, &kernel).unwrap();
        // Interior cell (2,2): full 3x3 support.
        assert!((out.img.at(&[2, 2, 0]) - (value + value)).abs() < 1e-12);
        // Corner cell only sums its 2x2 neighborhood.
        let corner = value + value * 4.0 / 9.0;
        assert!((out.img.at(&[0, 0, 0]) - corner).abs() < 1e-12);
    }

    #[test]
    fn factorized_transient_allocation_does_not_grow_with_n() {
        let c = 16;
        let mut transients = Vec::new();
        for &n in &[64usize, 256, 1024] {
            let mut rng = SplitMix64::new(99);
            let q = Tensor::<f64>::rand_uniform(&[n, c], -1.0, 1.0, &mut rng);
            let k = Tensor::<f64>::rand_uniform(&[n, c], -1.0, 1.0, &mut rng);
            let v = Tensor::<f64>::rand_uniform(&[n, c], -1.0, 1.0, &mut rng);
            let mut out = Tensor::<f64>::zeros(&[n, c]);
            let ((), transient) =
                crate::alloc::with_window(|| factor_attention_into(&q, &k, &v, &mut out).unwrap());
            transients.push(transient);
        }
        assert_eq!(transients[0], transients[1]);
        assert_eq!(transients[1], transients[2]);
        // Exactly the CxC table plus three length-C lines.
        assert_eq!(transients[0], (c * c + 3 * c) * 8);
    }
}

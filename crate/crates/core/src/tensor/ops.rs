//! Operation set required by the conv-attentional forward passes.
//!
//! Everything is a plain loop over row-major data: the verification
//! suites compare these kernels against scalar oracles, so clarity and
//! bitwise determinism win over layout tricks.

use super::{checked_len, debug_check_finite, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, factor: T) -> Tensor<T> {
        Tensor::from_fn(self.shape(), |i| self.data()[i] * factor)
    }

    fn zip_with(
        &self,
        other: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        if self.shape() != other.shape() {
            return Err(Error::dimension(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(Tensor::from_fn(self.shape(), |i| {
            f(self.data()[i], other.data()[i])
        }))
    }

    /// Matrix product. Rank-2 operands use the standard definition; a
    /// higher-rank left operand against a rank-2 right broadcasts over the
    /// leading extents, and equal leading extents multiply pairwise.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (ar, br) = (self.rank(), other.rank());
        if ar < 2 || br < 2 {
            return Err(Error::dimension(
                "matmul",
                format!("need rank >= 2, got {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let (m, k) = (self.shape()[ar - 2], self.shape()[ar - 1]);
        let (k2, p) = (other.shape()[br - 2], other.shape()[br - 1]);
        if k != k2 {
            return Err(Error::dimension(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let lead_a = &self.shape()[..ar - 2];
        let lead_b = &other.shape()[..br - 2];
        let broadcast_rhs = lead_b.is_empty();
        if !broadcast_rhs && lead_a != lead_b {
            return Err(Error::dimension(
                "matmul",
                format!("leading extents differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let batches: usize = lead_a.iter().product();
        let mut out_shape = lead_a.to_vec();
        out_shape.push(m);
        out_shape.push(p);
        let mut out = Tensor::zeros(&out_shape);
        for batch in 0..batches {
            let a = &self.data()[batch * m * k..(batch + 1) * m * k];
            let b = if broadcast_rhs {
                other.data()
            } else {
                &other.data()[batch * k * p..(batch + 1) * k * p]
            };
            let dst = &mut out.data_mut()[batch * m * p..(batch + 1) * m * p];
            matmul_2d(a, b, dst, m, k, p);
        }
        Ok(out)
    }

    pub fn transpose2d(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::dimension(
                "transpose2d",
                format!("need rank 2, got {:?}", self.shape()),
            ));
        }
        let (r, c) = (self.shape()[0], self.shape()[1]);
        let src = self.data();
        Ok(Tensor::from_fn(&[c, r], |i| {
            let (j, k) = (i / r, i % r);
            src[k * c + j]
        }))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::dimension(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, self.shape()),
            ));
        }
        if !self.all_finite() {
            return Err(Error::numeric("softmax", "non-finite input"));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let n = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out = Tensor::zeros(self.shape());
        let src = self.data();
        let dst = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut max = T::neg_infinity();
                for t in 0..n {
                    max = max.max(src[base + t * inner]);
                }
                let mut sum = T::zero();
                for t in 0..n {
                    let e = (src[base + t * inner] - max).exp();
                    dst[base + t * inner] = e;
                    sum += e;
                }
                let inv = T::one() / sum;
                for t in 0..n {
                    dst[base + t * inner] = dst[base + t * inner] * inv;
                }
            }
        }
        debug_check_finite(&out, "softmax");
        Ok(out)
    }

    /// Per-vector normalization over the last extent, then affine scale and
    /// shift. Variance is the population variance.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let c = *self.shape().last().expect("rank >= 1");
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::dimension(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{}]",
                    gamma.shape(),
                    beta.shape(),
                    c
                ),
            ));
        }
        let rows = self.len() / c;
        let mut out = Tensor::zeros(self.shape());
        let src = self.data();
        let dst = out.data_mut();
        let inv_c = T::one() / T::from_usize(c);
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mut mean = T::zero();
            for &x in row {
                mean += x;
            }
            mean = mean * inv_c;
            let mut var = T::zero();
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var = var * inv_c;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..c {
                dst[r * c + j] = (row[j] - mean) * inv_std * gamma.data()[j] + beta.data()[j];
            }
        }
        debug_check_finite(&out, "layer_norm");
        Ok(out)
    }

    /// Exact GELU: x * Phi(x) with the Gaussian CDF written via erf.
    pub fn gelu(&self) -> Tensor<T> {
        let out = Tensor::from_fn(self.shape(), |i| gelu_scalar(self.data()[i]));
        debug_check_finite(&out, "gelu");
        out
    }

    /// Depthwise 2-D convolution with same-zero padding. `self` is HxWxC,
    /// `kernel` is MxMxC with M odd; channel c of the output depends only on
    /// channel c of the input and kernel slice c.
    pub fn depthwise_conv2d(&self, kernel: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w, c) = self.dims3("depthwise_conv2d")?;
        if kernel.rank() != 3 || kernel.shape()[0] != kernel.shape()[1] {
            return Err(Error::dimension(
                "depthwise_conv2d",
                format!("kernel must be MxMxC, got {:?}", kernel.shape()),
            ));
        }
        let m = kernel.shape()[0];
        if m % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise window must be odd, got {m}"
            )));
        }
        if kernel.shape()[2] != c {
            return Err(Error::dimension(
                "depthwise_conv2d",
                format!("kernel channels {} != input channels {}", kernel.shape()[2], c),
            ));
        }
        let p = (m - 1) / 2;
        let mut out = Tensor::zeros(self.shape());
        let src = self.data();
        let ker = kernel.data();
        let dst = out.data_mut();
        for i in 0..h {
            for j in 0..w {
                for dy in 0..m {
                    let y = (i + dy) as isize - p as isize;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for dx in 0..m {
                        let x = (j + dx) as isize - p as isize;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let s = &src[(y as usize * w + x as usize) * c..][..c];
                        let k = &ker[(dy * m + dx) * c..][..c];
                        let d = &mut dst[(i * w + j) * c..][..c];
                        for ch in 0..c {
                            d[ch] += s[ch] * k[ch];
                        }
                    }
                }
            }
        }
        debug_check_finite(&out, "depthwise_conv2d");
        Ok(out)
    }

    /// Bilinear resize with half-pixel sample centers: output cell (i, j)
    /// samples source coordinate ((i + 0.5) * H / outH - 0.5, ...) clamped to
    /// the valid range, so a same-size resize is exact.
    pub fn bilinear_resize(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let (h, w, c) = self.dims3("bilinear_resize")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dimension("bilinear_resize", "output extents must be >= 1"));
        }
        if out_h == h && out_w == w {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(&[out_h, out_w, c]);
        let src = self.data();
        let dst = out.data_mut();
        for i in 0..out_h {
            let (y0, y1, fy) = sample_line(i, h, out_h);
            for j in 0..out_w {
                let (x0, x1, fx) = sample_line(j, w, out_w);
                let w00 = T::from_f64((1.0 - fy) * (1.0 - fx));
                let w01 = T::from_f64((1.0 - fy) * fx);
                let w10 = T::from_f64(fy * (1.0 - fx));
                let w11 = T::from_f64(fy * fx);
                let d = &mut dst[(i * out_w + j) * c..][..c];
                let s00 = &src[(y0 * w + x0) * c..][..c];
                let s01 = &src[(y0 * w + x1) * c..][..c];
                let s10 = &src[(y1 * w + x0) * c..][..c];
                let s11 = &src[(y1 * w + x1) * c..][..c];
                for ch in 0..c {
                    d[ch] = s00[ch] * w00 + s01[ch] * w01 + s10[ch] * w10 + s11[ch] * w11;
                }
            }
        }
        debug_check_finite(&out, "bilinear_resize");
        Ok(out)
    }

    /// Copying reshape; the value count must be preserved.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let len = checked_len(shape)?;
        if len != self.len() {
            return Err(Error::dimension(
                "reshape",
                format!("{:?} ({} values) -> {:?} ({} values)", self.shape(), self.len(), shape, len),
            ));
        }
        Tensor::from_vec(shape.to_vec(), self.data().to_vec())
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dimension(
                "concat",
                format!("axis {} out of range for rank {}", axis, rank),
            ));
        }
        let mut axis_total = 0;
        for t in parts {
            if t.rank() != rank {
                return Err(Error::dimension("concat", "rank mismatch"));
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != first.shape()[d] {
                    return Err(Error::dimension(
                        "concat",
                        format!("{:?} vs {:?} at axis {}", t.shape(), first.shape(), d),
                    ));
                }
            }
            axis_total += t.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(checked_len(&out_shape)?);
        for o in 0..outer {
            for t in parts {
                let span = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        Tensor::from_vec(out_shape, data)
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::dimension(
                "slice_axis",
                format!("axis {} out of range for rank {}", axis, self.rank()),
            ));
        }
        if start + len > self.shape()[axis] || len == 0 {
            return Err(Error::dimension(
                "slice_axis",
                format!(
                    "range {}..{} out of bounds for extent {}",
                    start,
                    start + len,
                    self.shape()[axis]
                ),
            ));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let n = self.shape()[axis];
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        Tensor::from_vec(out_shape, data)
    }

    pub fn sum_all(&self) -> T {
        let mut acc = T::zero();
        for &x in self.data() {
            acc += x;
        }
        acc
    }

    /// HxWxC -> (H/b)x(W/b)x(b*b*C) patch flattening for strided patch
    /// embedding; inner order is (dy, dx, channel).
    pub fn space_to_depth(&self, block: usize) -> Result<Tensor<T>> {
        let (h, w, c) = self.dims3("space_to_depth")?;
        if block == 0 || h % block != 0 || w % block != 0 {
            return Err(Error::dimension(
                "space_to_depth",
                format!("{}x{} not divisible by block {}", h, w, block),
            ));
        }
        let (oh, ow) = (h / block, w / block);
        let mut out = Tensor::zeros(&[oh, ow, block * block * c]);
        let src = self.data();
        let dst = out.data_mut();
        let oc = block * block * c;
        for i in 0..oh {
            for j in 0..ow {
                for dy in 0..block {
                    for dx in 0..block {
                        let s = &src[((i * block + dy) * w + j * block + dx) * c..][..c];
                        let d = &mut dst[(i * ow + j) * oc + (dy * block + dx) * c..][..c];
                        d.copy_from_slice(s);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`space_to_depth`]; used by its gradient.
    pub fn depth_to_space(&self, block: usize, channels: usize) -> Result<Tensor<T>> {
        let (oh, ow, oc) = self.dims3("depth_to_space")?;
        if oc != block * block * channels {
            return Err(Error::dimension(
                "depth_to_space",
                format!("channel extent {} != {}*{}*{}", oc, block, block, channels),
            ));
        }
        let (h, w) = (oh * block, ow * block);
        let mut out = Tensor::zeros(&[h, w, channels]);
        let src = self.data();
        let dst = out.data_mut();
        for i in 0..oh {
            for j in 0..ow {
                for dy in 0..block {
                    for dx in 0..block {
                        let s = &src[(i * ow + j) * oc + (dy * block + dx) * channels..][..channels];
                        let d = &mut dst
                            [((i * block + dy) * w + j * block + dx) * channels..][..channels];
                        d.copy_from_slice(s);
                    }
                }
            }
        }
        Ok(out)
    }

    pub(crate) fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::dimension(
                op,
                format!("need HxWxC tensor, got {:?}", self.shape()),
            ));
        }
        Ok((self.shape()[0], self.shape()[1], self.shape()[2]))
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::dimension(
                op,
                format!("need rank-2 tensor, got {:?}", self.shape()),
            ));
        }
        Ok((self.shape()[0], self.shape()[1]))
    }
}

pub(crate) fn matmul_2d<T: Scalar>(a: &[T], b: &[T], dst: &mut [T], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut dst[i * p..(i + 1) * p];
        for (t, &aik) in arow.iter().enumerate() {
            let brow = &b[t * p..(t + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * gauss_cdf(x)
}

pub(crate) fn gauss_cdf<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (T::one() + (x * inv_sqrt2).erf())
}

pub(crate) fn gauss_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_tau = T::from_f64(1.0 / std::f64::consts::TAU.sqrt());
    inv_sqrt_tau * (-(x * x) * T::from_f64(0.5)).exp()
}

/// Half-pixel source interval for one output coordinate: returns the two
/// neighbor indices and the interpolation fraction toward the second.
fn sample_line(i: usize, src: usize, dst: usize) -> (usize, usize, f64) {
    let coord = (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5;
    let coord = coord.clamp(0.0, (src - 1) as f64);
    let lo = coord.floor() as usize;
    let hi = (lo + 1).min(src - 1);
    (lo, hi, coord - lo as f64)
}

/// Gradient of depthwise_conv2d with respect to its input: correlation of
/// the upstream gradient with the spatially flipped kernel.
pub(crate) fn depthwise_input_grad<T: Scalar>(
    grad: &Tensor<T>,
    kernel: &Tensor<T>,
) -> Result<Tensor<T>> {
    let m = kernel.shape()[0];
    let c = kernel.shape()[2];
    let flipped = Tensor::from_fn(kernel.shape(), |idx| {
        let ch = idx % c;
        let rest = idx / c;
        let (dy, dx) = (rest / m, rest % m);
        kernel.at(&[m - 1 - dy, m - 1 - dx, ch])
    });
    grad.depthwise_conv2d(&flipped)
}

/// Gradient of depthwise_conv2d with respect to its kernel.
pub(crate) fn depthwise_kernel_grad<T: Scalar>(
    input: &Tensor<T>,
    grad: &Tensor<T>,
    m: usize,
) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("depthwise_kernel_grad")?;
    let p = (m - 1) / 2;
    let mut out = Tensor::zeros(&[m, m, c]);
    let src = input.data();
    let g = grad.data();
    let dst = out.data_mut();
    for dy in 0..m {
        for dx in 0..m {
            let d = &mut dst[(dy * m + dx) * c..][..c];
            for i in 0..h {
                let y = (i + dy) as isize - p as isize;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for j in 0..w {
                    let x = (j + dx) as isize - p as isize;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let s = &src[(y as usize * w + x as usize) * c..][..c];
                    let gr = &g[(i * w + j) * c..][..c];
                    for ch in 0..c {
                        d[ch] += s[ch] * gr[ch];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of bilinear_resize with respect to its input: scatter the
/// upstream gradient through the same four-tap weights.
pub(crate) fn bilinear_input_grad<T: Scalar>(
    grad: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (out_h, out_w, c) = grad.dims3("bilinear_input_grad")?;
    let mut out = Tensor::zeros(&[in_h, in_w, c]);
    if out_h == in_h && out_w == in_w {
        out.data_mut().copy_from_slice(grad.data());
        return Ok(out);
    }
    let g = grad.data();
    let dst = out.data_mut();
    for i in 0..out_h {
        let (y0, y1, fy) = sample_line(i, in_h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = sample_line(j, in_w, out_w);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            let gr = &g[(i * out_w + j) * c..][..c];
            for (y, x, wgt) in taps {
                let wgt = T::from_f64(wgt);
                let d = &mut dst[(y * in_w + x) * c..][..c];
                for ch in 0..c {
                    d[ch] += gr[ch] * wgt;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn tensor2(rows: usize, cols: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![rows, cols], vals.to_vec()).unwrap()
    }

    // Scalar triple-loop matmul oracle, independent of the library path.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let p = b.shape()[1];
        let mut out = Tensor::zeros(&[m, p]);
        for i in 0..m {
            for j in 0..p {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.at(&[i, t]) * b.at(&[t, j]);
                }
                out.set(&[i, j], acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity_returns_rhs() {
        let id = Tensor::<f64>::eye(3);
        let mut rng = SplitMix64::new(1);
        let b = Tensor::rand_uniform(&[3, 5], -1.0, 1.0, &mut rng);
        let out = id.matmul(&b).unwrap();
        assert_eq!(out.max_abs_diff(&b), 0.0);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut rng = SplitMix64::new(2);
        let a = Tensor::<f64>::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let z = Tensor::zeros(&[3, 2]);
        let out = a.matmul(&z).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_two_by_two_matches_triple_loop() {
        let a = tensor2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor2(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(out.max_abs_diff(&matmul_oracle(&a, &b)), 0.0);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_batched_broadcasts_rhs() {
        let mut rng = SplitMix64::new(3);
        let a = Tensor::<f64>::rand_uniform(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 3, 5]);
        for batch in 0..2 {
            let slice = a.slice_axis(0, batch, 1).unwrap().reshape(&[3, 4]).unwrap();
            let expect = slice.matmul(&b).unwrap();
            let got = out.slice_axis(0, batch, 1).unwrap().reshape(&[3, 5]).unwrap();
            assert_eq!(got.max_abs_diff(&expect), 0.0);
        }
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::from_vec(vec![4], vec![0.0f64; 4]).unwrap();
        let s = x.softmax_axis(0).unwrap();
        for &v in s.data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_length_one_axis_is_one() {
        let x = Tensor::from_vec(vec![1], vec![3.7f64]).unwrap();
        let s = x.softmax_axis(0).unwrap();
        assert_eq!(s.data(), &[1.0]);
    }

    #[test]
    fn softmax_closed_form_quarter_three_quarters() {
        // e^0 / (e^0 + 3) = 1/4 when the second logit is ln 3.
        let x = Tensor::from_vec(vec![2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let s = x.softmax_axis(0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12);
        assert!((s.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_vec(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(x.softmax_axis(0), Err(Error::Numeric { .. })));
    }

    #[test]
    fn layer_norm_constant_vector_maps_to_beta() {
        let x = Tensor::from_vec(vec![1, 4], vec![2.5f64; 4]).unwrap();
        let gamma = Tensor::filled(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let out = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_input_is_fixed_point() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0f64, -1.0]).unwrap();
        let gamma = Tensor::filled(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let out = x.layer_norm(&gamma, &beta, 1e-12).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_zero_gamma_broadcasts_beta() {
        let mut rng = SplitMix64::new(4);
        let x = Tensor::<f64>::rand_uniform(&[3, 5], -2.0, 2.0, &mut rng);
        let gamma = Tensor::zeros(&[5]);
        let beta = Tensor::from_fn(&[5], |i| i as f64);
        let out = x.layer_norm(&gamma, &beta, 1e-6).unwrap();
        for r in 0..3 {
            for j in 0..5 {
                assert_eq!(out.at(&[r, j]), j as f64);
            }
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        let x = Tensor::from_vec(vec![1], vec![0.0f64]).unwrap();
        assert_eq!(x.gelu().data(), &[0.0]);
    }

    #[test]
    fn gelu_matches_quadrature_cdf() {
        // Simpson quadrature of the normal pdf as an independent oracle for
        // Phi, so the erf-based forward is checked against an integral.
        fn cdf_quadrature(x: f64) -> f64 {
            let steps = 20_000;
            let (a, b) = (0.0, x.abs());
            let h = (b - a) / steps as f64;
            let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let mut acc = pdf(a) + pdf(b);
            for i in 1..steps {
                let t = a + i as f64 * h;
                acc += pdf(t) * if i % 2 == 0 { 2.0 } else { 4.0 };
            }
            let half_integral = acc * h / 3.0;
            if x >= 0.0 {
                0.5 + half_integral
            } else {
                0.5 - half_integral
            }
        }
        for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.0, 2.5] {
            let t = Tensor::from_vec(vec![1], vec![x]).unwrap();
            let got = t.gelu().data()[0];
            let want = x * cdf_quadrature(x);
            assert!((got - want).abs() < 1e-10, "gelu({x}): {got} vs {want}");
        }
    }

    #[test]
    fn gelu_large_input_approaches_identity() {
        let x = Tensor::from_vec(vec![1], vec![10.0f64]).unwrap();
        assert!((x.gelu().data()[0] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = SplitMix64::new(5);
        let x = Tensor::<f64>::rand_uniform(&[4, 5, 3], -1.0, 1.0, &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            k.set(&[1, 1, c], 1.0);
        }
        let out = x.depthwise_conv2d(&k).unwrap();
        assert_eq!(out.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn depthwise_zero_kernel_is_zero() {
        let mut rng = SplitMix64::new(6);
        let x = Tensor::<f64>::rand_uniform(&[3, 3, 2], -1.0, 1.0, &mut rng);
        let k = Tensor::zeros(&[5, 5, 2]);
        let out = x.depthwise_conv2d(&k).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn depthwise_even_window_is_config_error() {
        let x = Tensor::<f64>::zeros(&[3, 3, 1]);
        let k = Tensor::<f64>::zeros(&[2, 2, 1]);
        assert!(matches!(x.depthwise_conv2d(&k), Err(Error::Config(_))));
    }

    // Scalar-loop convolution oracle over all positions.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>) -> Tensor<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let m = k.shape()[0];
        let p = (m - 1) / 2;
        let mut out = Tensor::zeros(x.shape());
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..m {
                        for dx in 0..m {
                            let y = i as isize + dy as isize - p as isize;
                            let xx = j as isize + dx as isize - p as isize;
                            if y >= 0 && y < h as isize && xx >= 0 && xx < w as isize {
                                acc += x.at(&[y as usize, xx as usize, ch]) * k.at(&[dy, dx, ch]);
                            }
                        }
                    }
                    out.set(&[i, j, ch], acc);
                }
            }
        }
        out
    }

    #[test]
    fn depthwise_averaging_kernel_matches_scalar_oracle() {
        let x = Tensor::from_fn(&[3, 3, 1], |i| (i + 1) as f64);
        let k = Tensor::filled(&[3, 3, 1], 1.0 / 9.0);
        let out = x.depthwise_conv2d(&k).unwrap();
        // Corner sees only its 2x2 neighborhood.
        let corner = (x.at(&[0, 0, 0]) + x.at(&[0, 1, 0]) + x.at(&[1, 0, 0]) + x.at(&[1, 1, 0])) / 9.0;
        assert!((out.at(&[0, 0, 0]) - corner).abs() < 1e-15);
        assert!(out.max_abs_diff(&conv_oracle(&x, &k)) < 1e-15);
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let mut rng = SplitMix64::new(7);
        let x = Tensor::<f64>::rand_uniform(&[5, 7, 2], -1.0, 1.0, &mut rng);
        let out = x.bilinear_resize(5, 7).unwrap();
        assert_eq!(out.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn bilinear_constant_input_stays_constant() {
        let x = Tensor::<f64>::filled(&[2, 3, 1], 1.25);
        for (oh, ow) in [(1, 1), (4, 4), (5, 9)] {
            let out = x.bilinear_resize(oh, ow).unwrap();
            for &v in out.data() {
                assert!((v - 1.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_two_by_two_matches_direct_formula() {
        // Direct evaluation of the half-pixel-center sampling formula.
        let x = Tensor::from_vec(vec![2, 2, 1], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let out = x.bilinear_resize(4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let cy = ((i as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
                let cx = ((j as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
                let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(1), (x0 + 1).min(1));
                let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
                let want = x.at(&[y0, x0, 0]) * (1.0 - fy) * (1.0 - fx)
                    + x.at(&[y0, x1, 0]) * (1.0 - fy) * fx
                    + x.at(&[y1, x0, 0]) * fy * (1.0 - fx)
                    + x.at(&[y1, x1, 0]) * fy * fx;
                assert!((out.at(&[i, j, 0]) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn space_to_depth_round_trips() {
        let mut rng = SplitMix64::new(8);
        let x = Tensor::<f64>::rand_uniform(&[4, 6, 3], -1.0, 1.0, &mut rng);
        let packed = x.space_to_depth(2).unwrap();
        assert_eq!(packed.shape(), &[2, 3, 12]);
        let back = packed.depth_to_space(2, 3).unwrap();
        assert_eq!(back.max_abs_diff(&x), 0.0);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut rng = SplitMix64::new(9);
        let a = Tensor::<f64>::rand_uniform(&[2, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::rand_uniform(&[2, 5], -1.0, 1.0, &mut rng);
        let cat = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[2, 8]);
        assert_eq!(cat.slice_axis(1, 0, 3).unwrap().max_abs_diff(&a), 0.0);
        assert_eq!(cat.slice_axis(1, 3, 5).unwrap().max_abs_diff(&b), 0.0);
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn prop_softmax_sums_to_one_and_shift_invariant(
            vals in prop::collection::vec(-10.0f64..10.0, 2..24),
            shift in -5.0f64..5.0,
        ) {
            let n = vals.len();
            let x = Tensor::from_vec(vec![n], vals.clone()).unwrap();
            let s = x.softmax_axis(0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&v| v > 0.0));

            let shifted = Tensor::from_vec(vec![n], vals.iter().map(|v| v + shift).collect()).unwrap();
            let s2 = shifted.softmax_axis(0).unwrap();
            prop_assert!(s.max_abs_diff(&s2) < 1e-12);
        }

        #[test]
        fn prop_depthwise_zero_channel_zeroes_only_that_channel(seed in 0u64..1000) {
            let mut rng = SplitMix64::new(seed);
            let x = Tensor::<f64>::rand_uniform(&[4, 4, 3], -1.0, 1.0, &mut rng);
            let mut k = Tensor::rand_uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
            let dead = (seed % 3) as usize;
            for dy in 0..3 {
                for dx in 0..3 {
                    k.set(&[dy, dx, dead], 0.0);
                }
            }
            let out = x.depthwise_conv2d(&k).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert_eq!(out.at(&[i, j, dead]), 0.0);
                }
            }
            // Other channels generically nonzero.
            let live: f64 = out.data().iter().map(|v| v.abs()).sum();
            prop_assert!(live > 0.0);
        }

        #[test]
        fn prop_bilinear_output_within_input_range(
            seed in 0u64..1000, oh in 1usize..9, ow in 1usize..9,
        ) {
            let mut rng = SplitMix64::new(seed);
            let x = Tensor::<f64>::rand_uniform(&[3, 5, 1], -1.0, 1.0, &mut rng);
            let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
            let out = x.bilinear_resize(oh, ow).unwrap();
            for &v in out.data() {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }

        #[test]
        fn prop_matmul_scalar_associativity(seed in 0u64..1000, alpha in -3.0f64..3.0) {
            let mut rng = SplitMix64::new(seed);
            let a = Tensor::<f64>::rand_uniform(&[3, 4], -1.0, 1.0, &mut rng);
            let b = Tensor::<f64>::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng);
            let left = a.scale(alpha).matmul(&b).unwrap();
            let right = a.matmul(&b).unwrap().scale(alpha);
            for (l, r) in left.data().iter().zip(right.data()) {
                prop_assert!(rel_close(*l, *r, 1e-6));
            }
        }

        #[test]
        fn prop_f32_and_f64_paths_agree(seed in 0u64..500) {
            let mut rng = SplitMix64::new(seed);
            let x64 = Tensor::<f64>::rand_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
            let k64 = Tensor::<f64>::rand_uniform(&[3, 3, 4], -1.0, 1.0, &mut rng);
            let x32: Tensor<f32> = x64.cast();
            let k32: Tensor<f32> = k64.cast();

            let pairs: Vec<(Tensor<f64>, Tensor<f32>)> = vec![
                (x64.gelu(), x32.gelu()),
                (x64.depthwise_conv2d(&k64).unwrap(), x32.depthwise_conv2d(&k32).unwrap()),
                (x64.bilinear_resize(5, 2).unwrap(), x32.bilinear_resize(5, 2).unwrap()),
                (
                    x64.reshape(&[12, 4]).unwrap().softmax_axis(0).unwrap(),
                    x32.reshape(&[12, 4]).unwrap().softmax_axis(0).unwrap(),
                ),
                (
                    x64.reshape(&[12, 4]).unwrap().matmul(&x64.reshape(&[4, 12]).unwrap()).unwrap(),
                    x32.reshape(&[12, 4]).unwrap().matmul(&x32.reshape(&[4, 12]).unwrap()).unwrap(),
                ),
            ];
            for (hi, lo) in pairs {
                let lo64: Tensor<f64> = lo.cast();
                for (a, b) in hi.data().iter().zip(lo64.data()) {
                    prop_assert!(rel_close(*a, *b, 1e-4), "{a} vs {b}");
                }
            }
        }
    }
}

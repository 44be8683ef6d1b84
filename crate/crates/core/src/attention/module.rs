//! The assembled multi-head conv-attentional module, recorded on the
//! autograd tape: convolutional position encoding on the input, pre-norm,
//! per-head factorized attention with the convolutional relative position
//! encoding, output projection, residual.

use super::TokenSeq;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Hyperparameters of one conv-attentional module.
#[derive(Debug, Clone)]
pub struct ConvAttConfig {
    pub channels: usize,
    pub heads: usize,
    /// (window size, heads assigned), ascending window order. The window
    /// channel spans partition the head-split channel axis in order.
    pub crpe_windows: Vec<(usize, usize)>,
    /// Window size of the convolutional position encoding.
    pub cpe_kernel: usize,
    pub use_cpe: bool,
    pub use_crpe: bool,
}

impl ConvAttConfig {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        Self::with_windows(channels, heads, default_window_split(heads))
    }

    pub fn with_windows(
        channels: usize,
        heads: usize,
        crpe_windows: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let cfg = ConvAttConfig {
            channels,
            heads,
            crpe_windows,
            cpe_kernel: 3,
            use_cpe: true,
            use_crpe: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            )));
        }
        let assigned: usize = self.crpe_windows.iter().map(|(_, h)| h).sum();
        if assigned != self.heads {
            return Err(Error::Config(format!(
                "window head counts {:?} sum to {}, expected {} heads",
                self.crpe_windows, assigned, self.heads
            )));
        }
        for &(m, _) in &self.crpe_windows {
            if m % 2 == 0 {
                return Err(Error::Config(format!("window size {m} must be odd")));
            }
        }
        if self.cpe_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "position-encoding kernel {} must be odd",
                self.cpe_kernel
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }
}

/// Near-even split of heads over windows 3/5/7, remainder to the larger
/// windows; zero-head windows are dropped.
pub fn default_window_split(heads: usize) -> Vec<(usize, usize)> {
    let base = heads / 3;
    let rem = heads % 3;
    let mut counts = [base; 3]; // windows 3, 5, 7
    if rem >= 1 {
        counts[2] += 1;
    }
    if rem == 2 {
        counts[1] += 1;
    }
    [(3usize, counts[0]), (5, counts[1]), (7, counts[2])]
        .into_iter()
        .filter(|&(_, h)| h > 0)
        .collect()
}

/// Per-module learned tensors: pre-norm affine and the four projections.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttentionParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let c = channels;
        AttentionParams {
            norm_gamma: store.add(format!("{prefix}.norm.gamma"), Tensor::filled(&[c], T::one())),
            norm_beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[c])),
            wq: store.add(
                format!("{prefix}.wq"),
                Tensor::rand_trunc_normal(&[c, c], INIT_STD, rng),
            ),
            wk: store.add(
                format!("{prefix}.wk"),
                Tensor::rand_trunc_normal(&[c, c], INIT_STD, rng),
            ),
            wv: store.add(
                format!("{prefix}.wv"),
                Tensor::rand_trunc_normal(&[c, c], INIT_STD, rng),
            ),
            wo: store.add(
                format!("{prefix}.wo"),
                Tensor::rand_trunc_normal(&[c, c], INIT_STD, rng),
            ),
        }
    }
}

/// Position-encoding kernels for one scale, shared by every conv-attentional
/// module operating at that scale (serial and parallel alike).
#[derive(Debug, Clone)]
pub struct PosEncParams {
    pub cpe_kernel: ParamId,
    /// One kernel per window group, aligned with `ConvAttConfig::crpe_windows`.
    pub crpe_kernels: Vec<ParamId>,
}

impl PosEncParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ConvAttConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let c = cfg.channels;
        let d = cfg.head_dim();
        let cpe_kernel = store.add(
            format!("{prefix}.cpe.kernel"),
            Tensor::rand_trunc_normal(&[cfg.cpe_kernel, cfg.cpe_kernel, c], INIT_STD, rng),
        );
        let crpe_kernels = cfg
            .crpe_windows
            .iter()
            .map(|&(m, heads)| {
                store.add(
                    format!("{prefix}.crpe.w{m}"),
                    Tensor::rand_trunc_normal(&[m, m, heads * d], INIT_STD, rng),
                )
            })
            .collect();
        PosEncParams {
            cpe_kernel,
            crpe_kernels,
        }
    }

    /// Zero every kernel; used by tests that disable position information.
    pub fn zero<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for x in store.get_mut(self.cpe_kernel).data_mut() {
            *x = T::zero();
        }
        for &id in &self.crpe_kernels {
            for x in store.get_mut(id).data_mut() {
                *x = T::zero();
            }
        }
    }
}

/// Token sequence on the tape: class token row plus the image grid.
#[derive(Debug, Clone, Copy)]
pub struct SeqVar {
    /// Shape [1, C].
    pub cls: Var,
    /// Shape [H, W, C].
    pub img: Var,
    pub h: usize,
    pub w: usize,
}

impl SeqVar {
    pub fn from_token_seq<T: Scalar>(g: &mut Graph<T>, x: &TokenSeq<T>) -> Result<SeqVar> {
        let cls = x
            .cls
            .as_ref()
            .ok_or_else(|| Error::Contract("sequence without a class token".into()))?;
        let (h, w) = x.grid();
        let c = x.channels();
        let cls = g.constant(cls.reshape(&[1, c])?);
        let img = g.constant(x.img.clone());
        Ok(SeqVar { cls, img, h, w })
    }

    pub fn to_token_seq<T: Scalar>(&self, g: &Graph<T>) -> Result<TokenSeq<T>> {
        let c = g.shape(self.cls)[1];
        TokenSeq::new(
            Some(g.value(self.cls).reshape(&[c])?),
            g.value(self.img).clone(),
        )
    }

    pub fn channels<T: Scalar>(&self, g: &Graph<T>) -> usize {
        g.shape(self.cls)[1]
    }
}

/// Flatten to the [1 + H*W, C] token matrix, class token first.
pub fn seq_to_matrix<T: Scalar>(g: &mut Graph<T>, x: &SeqVar) -> Result<Var> {
    let c = x.channels(g);
    let img = g.reshape(x.img, &[x.h * x.w, c])?;
    g.concat(&[x.cls, img], 0)
}

pub fn matrix_to_seq<T: Scalar>(g: &mut Graph<T>, mat: Var, h: usize, w: usize) -> Result<SeqVar> {
    let c = g.shape(mat)[1];
    let cls = g.slice_axis(mat, 0, 0, 1)?;
    let img_rows = g.slice_axis(mat, 0, 1, h * w)?;
    let img = g.reshape(img_rows, &[h, w, c])?;
    Ok(SeqVar { cls, img, h, w })
}

/// Convolutional position encoding on the tape: image tokens gain their own
/// depthwise convolution, the class token bypasses.
pub fn cpe_seq<T: Scalar>(g: &mut Graph<T>, x: &SeqVar, kernel: Var) -> Result<SeqVar> {
    let conv = g.depthwise_conv2d(x.img, kernel)?;
    let img = g.add(x.img, conv)?;
    Ok(SeqVar { img, ..*x })
}

/// Query/key/value projections of a normalized token matrix.
pub fn project_qkv<T: Scalar>(
    g: &mut Graph<T>,
    y: Var,
    att: &AttentionParams,
    pv: &ParamVars,
) -> Result<(Var, Var, Var)> {
    let q = g.matmul(y, pv.var(att.wq))?;
    let k = g.matmul(y, pv.var(att.wk))?;
    let v = g.matmul(y, pv.var(att.wv))?;
    Ok((q, k, v))
}

/// Per-head factorized attention on projected token matrices: heads are
/// channel slices of the CxC projections, each scaled by 1/sqrt(head_dim).
/// Queries and keys/values may have different token counts (cross-layer
/// attention resizes keys and values from another scale).
pub fn factor_heads<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let c = g.shape(q)[1];
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "channels {c} not divisible by heads {heads}"
        )));
    }
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_axis(q, 1, head * d, d)?;
        let kh = g.slice_axis(k, 1, head * d, d)?;
        let vh = g.slice_axis(v, 1, head * d, d)?;
        let soft = g.softmax_axis(kh, 0)?;
        let soft_t = g.transpose(soft)?;
        let table = g.matmul(soft_t, vh)?;
        let att = g.matmul(qh, table)?;
        head_outs.push(g.scale(att, scale));
    }
    g.concat(&head_outs, 1)
}

/// Per-head factorized attention plus the convolutional relative position
/// encoding, on projected token matrices.
pub fn attention_core<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    pos: &PosEncParams,
    cfg: &ConvAttConfig,
    pv: &ParamVars,
    h: usize,
    w: usize,
) -> Result<Var> {
    let factor = factor_heads(g, q, k, v, cfg.heads)?;
    if !cfg.use_crpe {
        return Ok(factor);
    }
    let rel = crpe_core(g, q, v, pos, cfg, pv, h, w)?;
    g.add(factor, rel)
}

/// The depthwise-convolution realization of the relative-attention term on
/// the tape; the class-token output row is a hard zero.
pub fn crpe_core<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    v: Var,
    pos: &PosEncParams,
    cfg: &ConvAttConfig,
    pv: &ParamVars,
    h: usize,
    w: usize,
) -> Result<Var> {
    let d = cfg.head_dim();
    let n_img = h * w;
    let mut parts = Vec::with_capacity(cfg.crpe_windows.len());
    let mut start = 0;
    for (group, &(_, heads)) in cfg.crpe_windows.iter().enumerate() {
        let ch = heads * d;
        let q_cols = g.slice_axis(q, 1, start, ch)?;
        let v_cols = g.slice_axis(v, 1, start, ch)?;
        let q_rows = g.slice_axis(q_cols, 0, 1, n_img)?;
        let v_rows = g.slice_axis(v_cols, 0, 1, n_img)?;
        let q_img = g.reshape(q_rows, &[h, w, ch])?;
        let v_img = g.reshape(v_rows, &[h, w, ch])?;
        let conv = g.depthwise_conv2d(v_img, pv.var(pos.crpe_kernels[group]))?;
        let gated = g.hadamard(q_img, conv)?;
        parts.push(g.reshape(gated, &[n_img, ch])?);
        start += ch;
    }
    let img = g.concat(&parts, 1)?;
    let zero = g.constant(Tensor::zeros(&[1, cfg.channels]));
    g.concat(&[zero, img], 0)
}

/// Full conv-attentional module: position encoding, pre-norm, attention
/// core, output projection, residual from the position-encoded input.
pub fn conv_attention_module<T: Scalar>(
    g: &mut Graph<T>,
    x: &SeqVar,
    att: &AttentionParams,
    pos: &PosEncParams,
    cfg: &ConvAttConfig,
    pv: &ParamVars,
) -> Result<SeqVar> {
    cfg.validate()?;
    if x.channels(g) != cfg.channels {
        return Err(Error::dimension(
            "conv_attention_module",
            format!("input channels {} != config {}", x.channels(g), cfg.channels),
        ));
    }
    let x1 = if cfg.use_cpe {
        cpe_seq(g, x, pv.var(pos.cpe_kernel))?
    } else {
        *x
    };
    let mat = seq_to_matrix(g, &x1)?;
    let y = g.layer_norm(mat, pv.var(att.norm_gamma), pv.var(att.norm_beta), LAYER_NORM_EPS)?;
    let (q, k, v) = project_qkv(g, y, att, pv)?;
    let core = attention_core(g, q, k, v, pos, cfg, pv, x1.h, x1.w)?;
    let projected = g.matmul(core, pv.var(att.wo))?;
    let out = g.add(mat, projected)?;
    matrix_to_seq(g, out, x1.h, x1.w)
}

/// Convenience wrapper that runs the module on plain tensors through a
/// throwaway tape.
pub fn conv_attention_apply<T: Scalar>(
    store: &ParamStore<T>,
    att: &AttentionParams,
    pos: &PosEncParams,
    cfg: &ConvAttConfig,
    x: &TokenSeq<T>,
) -> Result<TokenSeq<T>> {
    let mut g = Graph::new();
    let pv = ParamVars::bind_all(&mut g, store);
    let seq = SeqVar::from_token_seq(&mut g, x)?;
    let out = conv_attention_module(&mut g, &seq, att, pos, cfg, &pv)?;
    out.to_token_seq(&g)
}

//! Co-scale building blocks: the serial block (patch-embed downsample
//! followed by conv-attentional and feed-forward layers at one scale) and
//! the parallel group in both exchange strategies, direct cross-layer
//! attention and attention with feature interpolation.

use crate::attention::{
    attention_core, conv_attention_module, cpe_seq, crpe_core, factor_heads, matrix_to_seq,
    project_qkv, seq_to_matrix, AttentionParams, ConvAttConfig, PosEncParams, SeqVar, INIT_STD,
    LAYER_NORM_EPS,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SerialBlockConfig {
    pub in_channels: usize,
    pub channels: usize,
    /// Conv-attentional modules in this block.
    pub depth: usize,
    pub heads: usize,
    /// Feed-forward expansion ratio.
    pub ffn_ratio: usize,
    /// Patch-embed stride and kernel extent: 4 for the first block, 2 after.
    pub downsample: usize,
}

impl SerialBlockConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.downsample, 2 | 4) {
            return Err(Error::Config(format!(
                "downsample must be 2 or 4, got {}",
                self.downsample
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config("serial block depth must be >= 1".into()));
        }
        self.att_config()?.validate()
    }

    pub fn att_config(&self) -> Result<ConvAttConfig> {
        ConvAttConfig::new(self.channels, self.heads)
    }
}

/// Feed-forward parameters: pre-norm affine plus the two projections
/// (C -> R*C -> C).
#[derive(Debug, Clone)]
pub struct FfnParams {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
}

impl FfnParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        ratio: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let hidden = channels * ratio;
        FfnParams {
            norm_gamma: store.add(
                format!("{prefix}.norm.gamma"),
                Tensor::filled(&[channels], T::one()),
            ),
            norm_beta: store.add(format!("{prefix}.norm.beta"), Tensor::zeros(&[channels])),
            w1: store.add(
                format!("{prefix}.w1"),
                Tensor::rand_trunc_normal(&[channels, hidden], INIT_STD, rng),
            ),
            w2: store.add(
                format!("{prefix}.w2"),
                Tensor::rand_trunc_normal(&[hidden, channels], INIT_STD, rng),
            ),
        }
    }
}

/// One conv-attentional module plus its feed-forward network.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub att: AttentionParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub struct SerialBlockParams {
    /// Flattened patch kernel, [downsample^2 * Cin, C].
    pub patch_kernel: ParamId,
    pub patch_norm_gamma: ParamId,
    pub patch_norm_beta: ParamId,
    /// This block's learned class token, [C].
    pub cls: ParamId,
    pub layers: Vec<LayerParams>,
}

impl SerialBlockParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &SerialBlockConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let c = cfg.channels;
        let patch_rows = cfg.downsample * cfg.downsample * cfg.in_channels;
        let patch_kernel = store.add(
            format!("{prefix}.patch.kernel"),
            Tensor::rand_trunc_normal(&[patch_rows, c], INIT_STD, rng),
        );
        let patch_norm_gamma = store.add(
            format!("{prefix}.patch.norm.gamma"),
            Tensor::filled(&[c], T::one()),
        );
        let patch_norm_beta = store.add(format!("{prefix}.patch.norm.beta"), Tensor::zeros(&[c]));
        let cls = store.add(
            format!("{prefix}.cls"),
            Tensor::rand_trunc_normal(&[c], INIT_STD, rng),
        );
        let layers = (0..cfg.depth)
            .map(|layer| LayerParams {
                att: AttentionParams::init(store, &format!("{prefix}.layer{layer}.att"), c, rng),
                ffn: FfnParams::init(
                    store,
                    &format!("{prefix}.layer{layer}.ffn"),
                    c,
                    cfg.ffn_ratio,
                    rng,
                ),
            })
            .collect();
        SerialBlockParams {
            patch_kernel,
            patch_norm_gamma,
            patch_norm_beta,
            cls,
            layers,
        }
    }
}

/// Non-overlapping strided patch embedding: fold each downsample x
/// downsample patch into a row, project to the block width, normalize, and
/// prepend the block's learned class token.
pub fn patch_embed<T: Scalar>(
    g: &mut Graph<T>,
    img: Var,
    params: &SerialBlockParams,
    cfg: &SerialBlockConfig,
    pv: &ParamVars,
) -> Result<SeqVar> {
    let (h, w, cin) = {
        let shape = g.shape(img);
        if shape.len() != 3 {
            return Err(Error::dimension(
                "patch_embed",
                format!("need HxWxC input, got {:?}", shape),
            ));
        }
        (shape[0], shape[1], shape[2])
    };
    if cin != cfg.in_channels {
        return Err(Error::dimension(
            "patch_embed",
            format!("input channels {} != config {}", cin, cfg.in_channels),
        ));
    }
    let down = cfg.downsample;
    if h % down != 0 || w % down != 0 {
        return Err(Error::dimension(
            "patch_embed",
            format!("{}x{} not divisible by downsample {}", h, w, down),
        ));
    }
    let (oh, ow) = (h / down, w / down);
    let patches = g.space_to_depth(img, down)?;
    let flat = g.reshape(patches, &[oh * ow, down * down * cin])?;
    let tokens = g.matmul(flat, pv.var(params.patch_kernel))?;
    let normed = g.layer_norm(
        tokens,
        pv.var(params.patch_norm_gamma),
        pv.var(params.patch_norm_beta),
        LAYER_NORM_EPS,
    )?;
    let grid = g.reshape(normed, &[oh, ow, cfg.channels])?;
    let cls = pv.var(params.cls);
    let cls_row = g.reshape(cls, &[1, cfg.channels])?;
    Ok(SeqVar {
        cls: cls_row,
        img: grid,
        h: oh,
        w: ow,
    })
}

/// Pre-norm feed-forward with residual, applied to the class and image
/// tokens alike.
pub fn ffn_seq<T: Scalar>(
    g: &mut Graph<T>,
    x: &SeqVar,
    ffn: &FfnParams,
    pv: &ParamVars,
) -> Result<SeqVar> {
    let mat = seq_to_matrix(g, x)?;
    let out = ffn_matrix(g, mat, ffn.norm_gamma, ffn.norm_beta, ffn.w1, ffn.w2, pv)?;
    matrix_to_seq(g, out, x.h, x.w)
}

fn ffn_matrix<T: Scalar>(
    g: &mut Graph<T>,
    mat: Var,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    w1: ParamId,
    w2: ParamId,
    pv: &ParamVars,
) -> Result<Var> {
    let y = g.layer_norm(mat, pv.var(norm_gamma), pv.var(norm_beta), LAYER_NORM_EPS)?;
    let hidden = g.matmul(y, pv.var(w1))?;
    let act = g.gelu(hidden);
    let proj = g.matmul(act, pv.var(w2))?;
    g.add(mat, proj)
}

/// One serial block: patch-embed downsample, `depth` conv-attentional and
/// feed-forward pairs, then split the class token from the image tokens and
/// return the 2-D feature map.
pub fn serial_block<T: Scalar>(
    g: &mut Graph<T>,
    img: Var,
    params: &SerialBlockParams,
    cfg: &SerialBlockConfig,
    pos: &PosEncParams,
    pv: &ParamVars,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let att_cfg = cfg.att_config()?;
    let mut seq = patch_embed(g, img, params, cfg, pv)?;
    for layer in &params.layers {
        seq = conv_attention_module(g, &seq, &layer.att, pos, &att_cfg, pv)?;
        seq = ffn_seq(g, &seq, &layer.ffn, pv)?;
    }
    Ok((seq.img, seq.cls))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelStrategy {
    /// Attention with feature interpolation: per-scale conv-attention, then
    /// bilinear exchange of image maps summed per scale.
    Interp,
    /// Direct cross-layer attention: own queries against every scale's
    /// resized keys and values.
    CrossAttn,
}

#[derive(Debug, Clone)]
pub struct ParallelGroupConfig {
    /// Shared width across the three scales.
    pub channels: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Parallel steps; each step owns its own parameters.
    pub repeat: usize,
    pub strategy: ParallelStrategy,
}

impl ParallelGroupConfig {
    pub fn att_config(&self) -> Result<ConvAttConfig> {
        ConvAttConfig::new(self.channels, self.heads)
    }
}

/// Parameters of one parallel step: per-scale attention modules, per-scale
/// feed-forward norms, and the feed-forward projections shared by all
/// three scales.
#[derive(Debug, Clone)]
pub struct ParallelStepParams {
    pub att: [AttentionParams; 3],
    pub ffn_norms: [(ParamId, ParamId); 3],
    pub ffn_w1: ParamId,
    pub ffn_w2: ParamId,
}

impl ParallelStepParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ParallelGroupConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let c = cfg.channels;
        let att = std::array::from_fn(|scale| {
            AttentionParams::init(store, &format!("{prefix}.scale{scale}.att"), c, rng)
        });
        let ffn_norms = std::array::from_fn(|scale| {
            (
                store.add(
                    format!("{prefix}.scale{scale}.ffn.norm.gamma"),
                    Tensor::filled(&[c], T::one()),
                ),
                store.add(
                    format!("{prefix}.scale{scale}.ffn.norm.beta"),
                    Tensor::zeros(&[c]),
                ),
            )
        });
        let hidden = c * cfg.ffn_ratio;
        let ffn_w1 = store.add(
            format!("{prefix}.ffn.w1"),
            Tensor::rand_trunc_normal(&[c, hidden], INIT_STD, rng),
        );
        let ffn_w2 = store.add(
            format!("{prefix}.ffn.w2"),
            Tensor::rand_trunc_normal(&[hidden, c], INIT_STD, rng),
        );
        ParallelStepParams {
            att,
            ffn_norms,
            ffn_w1,
            ffn_w2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParallelGroupParams {
    pub steps: Vec<ParallelStepParams>,
}

impl ParallelGroupParams {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &ParallelGroupConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let steps = (0..cfg.repeat)
            .map(|step| ParallelStepParams::init(store, &format!("{prefix}.step{step}"), cfg, rng))
            .collect();
        ParallelGroupParams { steps }
    }
}

fn check_parallel_inputs<T: Scalar>(
    g: &Graph<T>,
    inputs: &[SeqVar; 3],
    cfg: &ParallelGroupConfig,
) -> Result<()> {
    for x in inputs {
        if x.channels(g) != cfg.channels {
            return Err(Error::Config(format!(
                "parallel group needs {} channels at every scale, got {}",
                cfg.channels,
                x.channels(g)
            )));
        }
    }
    Ok(())
}

/// The feature-interpolation exchange: every scale's image map is resized
/// to every other scale's resolution and the same-resolution maps are
/// summed (scale index ascending); class tokens are summed directly.
pub fn interp_exchange<T: Scalar>(
    g: &mut Graph<T>,
    ys: &[SeqVar; 3],
) -> Result<[SeqVar; 3]> {
    let cls_a = g.add(ys[0].cls, ys[1].cls)?;
    let cls_sum = g.add(cls_a, ys[2].cls)?;
    let mut out = Vec::with_capacity(3);
    for target in 0..3 {
        let (th, tw) = (ys[target].h, ys[target].w);
        let mut acc: Option<Var> = None;
        for source in 0..3 {
            let resized = if source == target {
                ys[source].img
            } else {
                g.bilinear_resize(ys[source].img, th, tw)?
            };
            acc = Some(match acc {
                None => resized,
                Some(a) => g.add(a, resized)?,
            });
        }
        out.push(SeqVar {
            cls: cls_sum,
            img: acc.expect("three scales"),
            h: th,
            w: tw,
        });
    }
    Ok([out[0], out[1], out[2]])
}

fn shared_ffn_per_scale<T: Scalar>(
    g: &mut Graph<T>,
    xs: [SeqVar; 3],
    step: &ParallelStepParams,
    pv: &ParamVars,
) -> Result<[SeqVar; 3]> {
    let mut out = Vec::with_capacity(3);
    for (scale, x) in xs.into_iter().enumerate() {
        let (gamma, beta) = step.ffn_norms[scale];
        let mat = seq_to_matrix(g, &x)?;
        let ffned = ffn_matrix(g, mat, gamma, beta, step.ffn_w1, step.ffn_w2, pv)?;
        out.push(matrix_to_seq(g, ffned, x.h, x.w)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Parallel group, feature-interpolation strategy. `pos` carries the
/// position-encoding kernels of the three scales, shared with the serial
/// blocks at the same scales.
pub fn parallel_group_interp<T: Scalar>(
    g: &mut Graph<T>,
    inputs: [SeqVar; 3],
    params: &ParallelGroupParams,
    cfg: &ParallelGroupConfig,
    pos: [&PosEncParams; 3],
    pv: &ParamVars,
) -> Result<[SeqVar; 3]> {
    check_parallel_inputs(g, &inputs, cfg)?;
    let att_cfg = cfg.att_config()?;
    let mut state = inputs;
    for step in &params.steps {
        let mut ys = Vec::with_capacity(3);
        for scale in 0..3 {
            ys.push(conv_attention_module(
                g,
                &state[scale],
                &step.att[scale],
                pos[scale],
                &att_cfg,
                pv,
            )?);
        }
        let exchanged = interp_exchange(g, &[ys[0], ys[1], ys[2]])?;
        state = shared_ffn_per_scale(g, exchanged, step, pv)?;
    }
    Ok(state)
}

/// Parallel group, direct cross-layer attention strategy: each scale runs
/// its own conv-attention and adds cross-attention terms whose keys and
/// values come from the other scales, bilinearly resized to the current
/// resolution (class tokens of other scales are not resized or attended).
pub fn parallel_group_cross_attn<T: Scalar>(
    g: &mut Graph<T>,
    inputs: [SeqVar; 3],
    params: &ParallelGroupParams,
    cfg: &ParallelGroupConfig,
    pos: [&PosEncParams; 3],
    pv: &ParamVars,
) -> Result<[SeqVar; 3]> {
    check_parallel_inputs(g, &inputs, cfg)?;
    let att_cfg = cfg.att_config()?;
    let c = cfg.channels;
    let mut state = inputs;
    for step in &params.steps {
        // Shared pre-attention pipeline per scale: position encoding,
        // norm, projections.
        let mut encoded = Vec::with_capacity(3);
        let mut mats = Vec::with_capacity(3);
        let mut qkv = Vec::with_capacity(3);
        for scale in 0..3 {
            let x1 = if att_cfg.use_cpe {
                cpe_seq(g, &state[scale], pv.var(pos[scale].cpe_kernel))?
            } else {
                state[scale]
            };
            let mat = seq_to_matrix(g, &x1)?;
            let y = g.layer_norm(
                mat,
                pv.var(step.att[scale].norm_gamma),
                pv.var(step.att[scale].norm_beta),
                LAYER_NORM_EPS,
            )?;
            qkv.push(project_qkv(g, y, &step.att[scale], pv)?);
            encoded.push(x1);
            mats.push(mat);
        }

        let mut attended = Vec::with_capacity(3);
        for scale in 0..3 {
            let (q, k, v) = qkv[scale];
            let (h, w) = (encoded[scale].h, encoded[scale].w);
            let mut core = attention_core(g, q, k, v, pos[scale], &att_cfg, pv, h, w)?;
            for other in 0..3 {
                if other == scale {
                    continue;
                }
                let (_, ko, vo) = qkv[other];
                let (oh, ow) = (encoded[other].h, encoded[other].w);
                // Image rows of the other scale's keys/values, resized to
                // this scale's grid.
                let k_img = resize_tokens(g, ko, oh, ow, h, w, c)?;
                let v_img = resize_tokens(g, vo, oh, ow, h, w, c)?;
                let cross_factor = factor_heads(g, q, k_img, v_img, att_cfg.heads)?;
                core = g.add(core, cross_factor)?;
                if att_cfg.use_crpe {
                    let zero = g.constant(Tensor::zeros(&[1, c]));
                    let v_full = g.concat(&[zero, v_img], 0)?;
                    let cross_rel = crpe_core(g, q, v_full, pos[scale], &att_cfg, pv, h, w)?;
                    core = g.add(core, cross_rel)?;
                }
            }
            let projected = g.matmul(core, pv.var(step.att[scale].wo))?;
            let out_mat = g.add(mats[scale], projected)?;
            attended.push(matrix_to_seq(g, out_mat, h, w)?);
        }
        state = shared_ffn_per_scale(g, [attended[0], attended[1], attended[2]], step, pv)?;
    }
    Ok(state)
}

/// Slice the image-token rows of an NxC matrix, reshape to the source grid,
/// bilinearly resize to the target grid, and flatten back to rows.
fn resize_tokens<T: Scalar>(
    g: &mut Graph<T>,
    mat: Var,
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    c: usize,
) -> Result<Var> {
    let rows = g.slice_axis(mat, 0, 1, src_h * src_w)?;
    let grid = g.reshape(rows, &[src_h, src_w, c])?;
    let resized = g.bilinear_resize(grid, dst_h, dst_w)?;
    g.reshape(resized, &[dst_h * dst_w, c])
}

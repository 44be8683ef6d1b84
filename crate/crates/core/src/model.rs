//! Model assembly: the serial-only and serial-plus-parallel variants, the
//! classification heads, deterministic initialization, parameter and FLOP
//! accounting against the published budgets, and parameter dump/load.

use std::fmt;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::attention::{ConvAttConfig, PosEncParams, SeqVar};
use crate::autograd::{Graph, Var};
use crate::blocks::{
    parallel_group_cross_attn, parallel_group_interp, serial_block, ParallelGroupConfig,
    ParallelGroupParams, ParallelStrategy, SerialBlockConfig, SerialBlockParams,
};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const NUM_SCALES: usize = 4;
const HEADS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelName {
    CoatLiteTiny,
    CoatLiteMini,
    CoatLiteSmall,
    CoatLiteMedium,
    CoatTiny,
    CoatMini,
    CoatSmall,
}

pub const ALL_MODELS: [ModelName; 7] = [
    ModelName::CoatLiteTiny,
    ModelName::CoatLiteMini,
    ModelName::CoatLiteSmall,
    ModelName::CoatLiteMedium,
    ModelName::CoatTiny,
    ModelName::CoatMini,
    ModelName::CoatSmall,
];

impl ModelName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelName::CoatLiteTiny => "coat_lite_tiny",
            ModelName::CoatLiteMini => "coat_lite_mini",
            ModelName::CoatLiteSmall => "coat_lite_small",
            ModelName::CoatLiteMedium => "coat_lite_medium",
            ModelName::CoatTiny => "coat_tiny",
            ModelName::CoatMini => "coat_mini",
            ModelName::CoatSmall => "coat_small",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_MODELS
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ALL_MODELS.iter().map(|m| m.as_str()).collect();
                Error::Config(format!(
                    "unknown model '{s}'; valid names: {}",
                    names.join(", ")
                ))
            })
    }

    /// Published parameter budget, in millions.
    pub fn published_params_m(self) -> f64 {
        match self {
            ModelName::CoatLiteTiny => 5.7,
            ModelName::CoatLiteMini => 11.0,
            ModelName::CoatLiteSmall => 20.0,
            ModelName::CoatLiteMedium => 45.0,
            ModelName::CoatTiny => 5.5,
            ModelName::CoatMini => 10.0,
            ModelName::CoatSmall => 22.0,
        }
    }

    /// Published compute budget (multiply-accumulates, in billions) at the
    /// given square input size, where reported.
    pub fn published_gflops(self, input: usize) -> Option<f64> {
        match (self, input) {
            (ModelName::CoatLiteTiny, 224) => Some(1.6),
            (ModelName::CoatLiteMini, 224) => Some(2.0),
            (ModelName::CoatLiteSmall, 224) => Some(4.0),
            (ModelName::CoatLiteMedium, 224) => Some(9.8),
            (ModelName::CoatLiteMedium, 384) => Some(28.7),
            (ModelName::CoatTiny, 224) => Some(4.4),
            (ModelName::CoatMini, 224) => Some(6.8),
            (ModelName::CoatSmall, 224) => Some(12.6),
            _ => None,
        }
    }
}

impl fmt::Display for ModelName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the classifier consumes class tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierKind {
    /// Final norm on the last serial block's class token, then linear.
    LastCls,
    /// Per-scale norms on the three post-parallel class tokens, learned
    /// weighted sum, then one linear head.
    AggregatedCls,
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: ModelName,
    pub serial: [SerialBlockConfig; NUM_SCALES],
    pub parallel: Option<ParallelGroupConfig>,
    pub classifier: ClassifierKind,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn for_name(name: ModelName) -> Self {
        let (channels, depths, ratios, parallel_c): ([usize; 4], [usize; 4], [usize; 4], Option<usize>) =
            match name {
                ModelName::CoatLiteTiny => ([64, 128, 256, 320], [2, 2, 2, 2], [8, 8, 4, 4], None),
                ModelName::CoatLiteMini => ([64, 128, 320, 512], [2, 2, 2, 2], [8, 8, 4, 4], None),
                ModelName::CoatLiteSmall => ([64, 128, 320, 512], [3, 4, 6, 3], [8, 8, 4, 4], None),
                ModelName::CoatLiteMedium => {
                    ([128, 256, 320, 512], [3, 6, 10, 8], [4, 4, 4, 4], None)
                }
                ModelName::CoatTiny => ([152, 152, 152, 152], [2, 2, 2, 2], [4, 4, 4, 4], Some(152)),
                ModelName::CoatMini => ([152, 216, 216, 216], [2, 2, 2, 2], [4, 4, 4, 4], Some(216)),
                ModelName::CoatSmall => ([152, 320, 320, 320], [2, 2, 2, 2], [4, 4, 4, 4], Some(320)),
            };
        let serial = std::array::from_fn(|i| SerialBlockConfig {
            in_channels: if i == 0 { 3 } else { channels[i - 1] },
            channels: channels[i],
            depth: depths[i],
            heads: HEADS,
            ffn_ratio: ratios[i],
            downsample: if i == 0 { 4 } else { 2 },
        });
        let parallel = parallel_c.map(|c| ParallelGroupConfig {
            channels: c,
            heads: HEADS,
            ffn_ratio: 4,
            repeat: 6,
            strategy: ParallelStrategy::Interp,
        });
        let classifier = if parallel.is_some() {
            ClassifierKind::AggregatedCls
        } else {
            ClassifierKind::LastCls
        };
        ModelSpec {
            name,
            serial,
            parallel,
            classifier,
            num_classes: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, cfg) in self.serial.iter().enumerate() {
            cfg.validate()?;
            if i > 0 && cfg.in_channels != self.serial[i - 1].channels {
                return Err(Error::Config(format!(
                    "serial chain broken: block {} expects {} input channels, block {} emits {}",
                    i,
                    cfg.in_channels,
                    i - 1,
                    self.serial[i - 1].channels
                )));
            }
        }
        if let Some(pg) = &self.parallel {
            for i in 1..NUM_SCALES {
                if self.serial[i].channels != pg.channels {
                    return Err(Error::Config(format!(
                        "parallel group width {} must equal serial block {} width {}",
                        pg.channels,
                        i + 1,
                        self.serial[i].channels
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Classification head parameters.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// One (gamma, beta) pair per consumed class token.
    pub norms: Vec<(ParamId, ParamId)>,
    /// Per-scale aggregation weights, [3]; aggregated head only.
    pub agg_weights: Option<ParamId>,
    /// Classifier matrix, [C, num_classes].
    pub linear: ParamId,
}

pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub store: ParamStore<T>,
    pub serial: [SerialBlockParams; NUM_SCALES],
    /// One set of position-encoding kernels per scale, shared by the serial
    /// block and any parallel modules at that scale.
    pub pos: [PosEncParams; NUM_SCALES],
    pub parallel: Option<ParallelGroupParams>,
    pub head: HeadParams,
}

/// Build a named model with deterministic initialization from the seed.
pub fn build_model<T: Scalar>(name: ModelName, seed: u64) -> Result<Model<T>> {
    build_from_spec(ModelSpec::for_name(name), seed)
}

pub fn build_from_spec<T: Scalar>(spec: ModelSpec, seed: u64) -> Result<Model<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    let mut rng = SplitMix64::new(seed);

    let serial: [SerialBlockParams; NUM_SCALES] = std::array::from_fn(|i| {
        SerialBlockParams::init(&mut store, &format!("s{}", i + 1), &spec.serial[i], &mut rng)
    });
    let pos: [PosEncParams; NUM_SCALES] = std::array::from_fn(|i| {
        let att_cfg = spec.serial[i].att_config().expect("validated config");
        PosEncParams::init(&mut store, &format!("pos{}", i + 1), &att_cfg, &mut rng)
    });
    let parallel = spec
        .parallel
        .as_ref()
        .map(|cfg| ParallelGroupParams::init(&mut store, "parallel", cfg, &mut rng));

    let head = match spec.classifier {
        ClassifierKind::LastCls => {
            let c = spec.serial[NUM_SCALES - 1].channels;
            let norms = vec![(
                store.add("head.norm.gamma", Tensor::filled(&[c], T::one())),
                store.add("head.norm.beta", Tensor::zeros(&[c])),
            )];
            let linear = store.add(
                "head.linear",
                Tensor::rand_trunc_normal(&[c, spec.num_classes], crate::attention::INIT_STD, &mut rng),
            );
            HeadParams {
                norms,
                agg_weights: None,
                linear,
            }
        }
        ClassifierKind::AggregatedCls => {
            let c = spec.serial[NUM_SCALES - 1].channels;
            let norms = (0..3)
                .map(|i| {
                    (
                        store.add(format!("head.norm{i}.gamma"), Tensor::filled(&[c], T::one())),
                        store.add(format!("head.norm{i}.beta"), Tensor::zeros(&[c])),
                    )
                })
                .collect();
            let agg_weights = Some(store.add(
                "head.aggregate",
                Tensor::rand_trunc_normal(&[3], crate::attention::INIT_STD, &mut rng),
            ));
            let linear = store.add(
                "head.linear",
                Tensor::rand_trunc_normal(&[c, spec.num_classes], crate::attention::INIT_STD, &mut rng),
            );
            HeadParams {
                norms,
                agg_weights,
                linear,
            }
        }
    };

    Ok(Model {
        spec,
        store,
        serial,
        pos,
        parallel,
        head,
    })
}

impl<T: Scalar> Model<T> {
    /// Record the full forward pass on a tape and return the logits node.
    pub fn record_forward(
        &self,
        g: &mut Graph<T>,
        pv: &ParamVars,
        image: &Tensor<T>,
    ) -> Result<Var> {
        let (h, w, _) = image.dims3("forward")?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::dimension(
                "forward",
                format!("input {}x{} must be divisible by 32", h, w),
            ));
        }
        let mut maps: Vec<Var> = Vec::with_capacity(NUM_SCALES);
        let mut cls_tokens: Vec<Var> = Vec::with_capacity(NUM_SCALES);
        let mut current = g.constant(image.clone());
        for i in 0..NUM_SCALES {
            let (map, cls) = serial_block(
                g,
                current,
                &self.serial[i],
                &self.spec.serial[i],
                &self.pos[i],
                pv,
            )?;
            maps.push(map);
            cls_tokens.push(cls);
            current = map;
        }

        let logits_row = match self.spec.classifier {
            ClassifierKind::LastCls => {
                let (gamma, beta) = self.head.norms[0];
                let normed = g.layer_norm(
                    cls_tokens[NUM_SCALES - 1],
                    pv.var(gamma),
                    pv.var(beta),
                    crate::attention::LAYER_NORM_EPS,
                )?;
                g.matmul(normed, pv.var(self.head.linear))?
            }
            ClassifierKind::AggregatedCls => {
                let pg_cfg = self
                    .spec
                    .parallel
                    .as_ref()
                    .ok_or_else(|| Error::Config("aggregated head needs a parallel group".into()))?;
                let pg_params = self
                    .parallel
                    .as_ref()
                    .ok_or_else(|| Error::Config("parallel parameters missing".into()))?;
                let inputs: [SeqVar; 3] = std::array::from_fn(|i| {
                    let scale = i + 1;
                    let shape = g.shape(maps[scale]);
                    SeqVar {
                        cls: cls_tokens[scale],
                        img: maps[scale],
                        h: shape[0],
                        w: shape[1],
                    }
                });
                let pos_refs = [&self.pos[1], &self.pos[2], &self.pos[3]];
                let outs = match pg_cfg.strategy {
                    ParallelStrategy::Interp => {
                        parallel_group_interp(g, inputs, pg_params, pg_cfg, pos_refs, pv)?
                    }
                    ParallelStrategy::CrossAttn => {
                        parallel_group_cross_attn(g, inputs, pg_params, pg_cfg, pos_refs, pv)?
                    }
                };
                let agg_id = self
                    .head
                    .agg_weights
                    .expect("aggregated head has weights");
                let mut acc: Option<Var> = None;
                for (i, out) in outs.iter().enumerate() {
                    let (gamma, beta) = self.head.norms[i];
                    let normed = g.layer_norm(
                        out.cls,
                        pv.var(gamma),
                        pv.var(beta),
                        crate::attention::LAYER_NORM_EPS,
                    )?;
                    let weights = pv.var(agg_id);
                    let wi = g.slice_axis(weights, 0, i, 1)?;
                    let scaled = g.mul_scalar_var(normed, wi)?;
                    acc = Some(match acc {
                        None => scaled,
                        Some(a) => g.add(a, scaled)?,
                    });
                }
                g.matmul(acc.expect("three scales"), pv.var(self.head.linear))?
            }
        };
        g.reshape(logits_row, &[self.spec.num_classes])
    }

    /// Run the forward pass and return the logits.
    pub fn forward(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let pv = ParamVars::bind_all(&mut g, &self.store);
        let logits = self.record_forward(&mut g, &pv, image)?;
        Ok(g.value(logits).clone())
    }

    /// Exact count of learned scalars.
    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Scalar counts grouped by top-level parameter prefix, in first-seen
    /// order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut rows: Vec<(String, usize)> = Vec::new();
        for id in self.store.ids() {
            let name = self.store.name(id);
            let group = name.split('.').next().unwrap_or(name).to_string();
            match rows.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += self.store.get(id).len(),
                None => rows.push((group, self.store.get(id).len())),
            }
        }
        rows
    }

    /// Write every parameter to `<dir>/params.bin` (tensor containers
    /// back to back, registry order) plus a text manifest, one
    /// `name shape` line per parameter.
    pub fn save_params(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        let mut bin = BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
        for id in self.store.ids() {
            let t = self.store.get(id);
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {}\n", self.store.name(id), dims.join("x")));
            write_tensor(&mut bin, t)?;
        }
        bin.flush()?;
        std::fs::write(dir.join("manifest.txt"), manifest)?;
        Ok(())
    }

    /// Load parameters written by [`save_params`]; names and shapes must
    /// match this model exactly.
    pub fn load_params(&mut self, dir: &Path) -> Result<()> {
        let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
        let lines: Vec<&str> = manifest.lines().collect();
        if lines.len() != self.store.len() {
            return Err(Error::Contract(format!(
                "manifest has {} parameters, model has {}",
                lines.len(),
                self.store.len()
            )));
        }
        let mut bin = BufReader::new(std::fs::File::open(dir.join("params.bin"))?);
        for (id, line) in self.store.ids().collect::<Vec<_>>().into_iter().zip(lines) {
            let expect_name = self.store.name(id).to_string();
            let got_name = line.split_whitespace().next().unwrap_or("");
            if got_name != expect_name {
                return Err(Error::Contract(format!(
                    "manifest entry '{got_name}' does not match parameter '{expect_name}'"
                )));
            }
            let tensor: Tensor<T> = read_tensor(&mut bin)?;
            if tensor.shape() != self.store.get(id).shape() {
                return Err(Error::Contract(format!(
                    "parameter '{expect_name}' shape {:?} does not match stored {:?}",
                    self.store.get(id).shape(),
                    tensor.shape()
                )));
            }
            *self.store.get_mut(id) = tensor;
        }
        // The container stream must be fully consumed.
        let mut probe = [0u8; 1];
        if bin.read(&mut probe)? != 0 {
            return Err(Error::Contract("trailing bytes after last parameter".into()));
        }
        Ok(())
    }
}

/// Stable 64-bit FNV-1a over the little-endian bytes of the values; used to
/// pin forward outputs across runs.
pub fn logits_checksum<T: Scalar>(t: &Tensor<T>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let mut bytes = Vec::with_capacity(t.len() * T::BYTE_WIDTH);
    for &x in t.data() {
        x.write_le(&mut bytes);
    }
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Analytic multiply-accumulate count for one forward pass at the given
/// input size (one multiply-add = one operation). Covers projections,
/// attention contractions, depthwise convolutions, patch embeddings,
/// bilinear resizes, and the head; normalizations and softmax
/// exponentials are not counted, matching the reporting convention of the
/// published budgets.
pub fn count_flops(spec: &ModelSpec, in_h: usize, in_w: usize) -> Result<u64> {
    spec.validate()?;
    if in_h % 32 != 0 || in_w % 32 != 0 {
        return Err(Error::dimension(
            "count_flops",
            format!("input {}x{} must be divisible by 32", in_h, in_w),
        ));
    }
    let mut total: u64 = 0;
    let mut grids = [(0usize, 0usize); NUM_SCALES];
    let (mut h, mut w) = (in_h, in_w);
    for i in 0..NUM_SCALES {
        let cfg = &spec.serial[i];
        h /= cfg.downsample;
        w /= cfg.downsample;
        grids[i] = (h, w);
        let att_cfg = cfg.att_config()?;
        // Patch embedding: one projection per output token.
        total += (h * w * cfg.downsample * cfg.downsample * cfg.in_channels * cfg.channels) as u64;
        total += cfg.depth as u64 * conv_att_layer_flops(&att_cfg, h, w)
            + cfg.depth as u64 * ffn_flops(cfg.channels, cfg.ffn_ratio, h * w + 1);
    }

    if let Some(pg) = &spec.parallel {
        let att_cfg = pg.att_config()?;
        let c = pg.channels;
        let scales = [grids[1], grids[2], grids[3]];
        for _ in 0..pg.repeat {
            for &(sh, sw) in &scales {
                total += conv_att_layer_flops(&att_cfg, sh, sw);
                total += ffn_flops(c, pg.ffn_ratio, sh * sw + 1);
            }
            match pg.strategy {
                ParallelStrategy::Interp => {
                    // Each scale's map resized to the two other grids; four
                    // taps per output element.
                    for (s, _) in scales.iter().enumerate() {
                        for (t, &(th, tw)) in scales.iter().enumerate() {
                            if s != t {
                                total += (4 * th * tw * c) as u64;
                            }
                        }
                    }
                }
                ParallelStrategy::CrossAttn => {
                    for (s, &(sh, sw)) in scales.iter().enumerate() {
                        let n_img = sh * sw;
                        let n = n_img + 1;
                        for (t, _) in scales.iter().enumerate() {
                            if s == t {
                                continue;
                            }
                            // Resize the other scale's keys and values to
                            // this grid, then one factorized contraction and
                            // one relative-position term at this resolution.
                            total += (2 * 4 * n_img * c) as u64;
                            total += factor_flops(c, att_cfg.heads, n_img, n);
                            total += crpe_flops(&att_cfg, n_img);
                        }
                    }
                }
            }
        }
    }

    let c_last = spec.serial[NUM_SCALES - 1].channels;
    total += match spec.classifier {
        ClassifierKind::LastCls => (c_last * spec.num_classes) as u64,
        ClassifierKind::AggregatedCls => (3 * c_last + c_last * spec.num_classes) as u64,
    };
    Ok(total)
}

/// One conv-attentional module at an h x w grid.
fn conv_att_layer_flops(cfg: &ConvAttConfig, h: usize, w: usize) -> u64 {
    let c = cfg.channels;
    let n_img = h * w;
    let n = n_img + 1;
    let cpe = (cfg.cpe_kernel * cfg.cpe_kernel * n_img * c) as u64;
    let qkvo = (4 * n * c * c) as u64;
    cpe + qkvo + factor_flops(c, cfg.heads, n, n) + crpe_flops(cfg, n_img)
}

/// Factorized attention over `n_kv` keys/values and `n_q` queries: the
/// per-head contraction table plus the query application.
fn factor_flops(c: usize, heads: usize, n_kv: usize, n_q: usize) -> u64 {
    let d = c / heads;
    ((n_kv + n_q) * c * d) as u64
}

/// Depthwise relative-position convolution plus the query gating.
fn crpe_flops(cfg: &ConvAttConfig, n_img: usize) -> u64 {
    let d = cfg.head_dim();
    let conv: usize = cfg
        .crpe_windows
        .iter()
        .map(|&(m, heads)| m * m * heads * d * n_img)
        .sum();
    (conv + n_img * cfg.channels) as u64
}

fn ffn_flops(c: usize, ratio: usize, n: usize) -> u64 {
    (2 * n * c * (c * ratio)) as u64
}

/// Per-component FLOP rows for display: (component, multiply-accumulates).
pub fn flop_breakdown(spec: &ModelSpec, in_h: usize, in_w: usize) -> Result<Vec<(String, u64)>> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut lite = spec.clone();
    lite.parallel = None;
    lite.classifier = ClassifierKind::LastCls;
    let serial_and_head = count_flops(&lite, in_h, in_w)?;
    rows.push(("serial blocks + head".to_string(), serial_and_head));
    if spec.parallel.is_some() {
        let full = count_flops(spec, in_h, in_w)?;
        rows.push(("parallel group".to_string(), full - serial_and_head));
    }
    Ok(rows)
}

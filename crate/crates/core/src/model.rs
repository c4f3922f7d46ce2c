//! LRFormer assembly: variant registry, parameter store, initialization and
//! the encoder, decoder and classification head forward passes.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::attention::{self, AttentionConfig, AttentionParams, Linear, PyramidSource, Scheme};
use crate::flops::Category;
use crate::rng::Stream;
use crate::{Error, Real, Result, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const LAYER_SCALE_INIT: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Segmentation => "seg",
            Task::Classification => "cls",
        }
    }
}

impl core::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seg" | "segmentation" => Ok(Task::Segmentation),
            "cls" | "classification" => Ok(Task::Classification),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected seg or cls)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub channels: usize,
    pub head_dim: usize,
    pub ffn_ratio: usize,
    pub depth: usize,
}

const fn stage(channels: usize, head_dim: usize, ffn_ratio: usize, depth: usize) -> StageSpec {
    StageSpec {
        channels,
        head_dim,
        ffn_ratio,
        depth,
    }
}

/// Encoder settings per registered variant plus the plain-decoder width.
const REGISTRY: [(&str, [StageSpec; 4], usize); 5] = [
    (
        "T",
        [stage(48, 24, 8, 2), stage(96, 24, 8, 2), stage(240, 24, 4, 6), stage(384, 24, 4, 3)],
        256,
    ),
    (
        "S",
        [stage(64, 32, 8, 3), stage(128, 32, 8, 3), stage(320, 32, 4, 12), stage(512, 32, 4, 3)],
        384,
    ),
    (
        "B",
        [stage(80, 40, 8, 4), stage(160, 40, 8, 4), stage(400, 40, 4, 15), stage(512, 32, 4, 8)],
        512,
    ),
    (
        "L",
        [stage(96, 48, 8, 4), stage(192, 48, 8, 6), stage(480, 48, 4, 18), stage(640, 40, 4, 8)],
        640,
    ),
    (
        "XL",
        [stage(128, 64, 8, 4), stage(256, 64, 8, 8), stage(640, 64, 4, 22), stage(768, 48, 4, 8)],
        768,
    ),
];

/// Full architecture description of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariantSpec {
    pub name: String,
    pub stages: [StageSpec; 4],
    pub decoder_width: usize,
    pub decoder_head_dim: usize,
    pub decoder_ffn_ratio: usize,
    /// Side of the fixed pooled grid (16 for segmentation, 7 for classification).
    pub pooled_grid: usize,
    pub kv_pyramid: bool,
    pub pyramid_grids: Vec<usize>,
    pub pyramid_source: PyramidSource,
    pub task: Task,
    pub num_classes: usize,
    /// Width of the hidden layer before the classifier, if any.
    pub head_hidden: Option<usize>,
    /// Depthwise conv with residual ahead of attention.
    pub cpe: bool,
    /// Depthwise conv with residual inside the FFN.
    pub ffn_dwconv: bool,
    pub layer_scale: bool,
}

impl VariantSpec {
    /// Registered variant `T`, `S`, `B`, `L`, `XL` or `micro`.
    pub fn registered(name: &str, task: Task, num_classes: usize) -> Result<Self> {
        if name == "micro" {
            let st = |c, n| stage(c, 16, 4, n);
            return Self::custom(
                "micro",
                [st(16, 1), st(32, 1), st(64, 2), st(96, 1)],
                64,
                16,
                4,
                task,
                num_classes,
            );
        }
        let (_, stages, width) = REGISTRY
            .iter()
            .find(|(n, _, _)| n.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}` (expected T, S, B, L, XL or micro)")))?;
        let grid = match task {
            Task::Segmentation => 16,
            Task::Classification => 7,
        };
        let mut spec = Self::custom(&name.to_ascii_uppercase(), *stages, *width, 32, 4, task, num_classes)?;
        spec.set_pooled_grid(grid);
        Ok(spec)
    }

    /// Names accepted by [`VariantSpec::registered`].
    pub fn registered_names() -> [&'static str; 6] {
        ["T", "S", "B", "L", "XL", "micro"]
    }

    /// Custom spec; the `micro` variant uses a 4×4 pooled grid so that pooling
    /// is exercised at toy input sizes.
    pub fn custom(
        name: &str,
        stages: [StageSpec; 4],
        decoder_width: usize,
        decoder_head_dim: usize,
        decoder_ffn_ratio: usize,
        task: Task,
        num_classes: usize,
    ) -> Result<Self> {
        let mut spec = Self {
            name: name.to_string(),
            stages,
            decoder_width,
            decoder_head_dim,
            decoder_ffn_ratio,
            pooled_grid: 4,
            kv_pyramid: true,
            pyramid_grids: Vec::new(),
            pyramid_source: PyramidSource::Input,
            task,
            num_classes,
            head_hidden: match task {
                Task::Classification => Some(1280),
                Task::Segmentation => None,
            },
            cpe: true,
            ffn_dwconv: true,
            layer_scale: false,
        };
        spec.set_pooled_grid(4);
        spec.validate()?;
        Ok(spec)
    }

    /// Sets the pooled grid and the default key/value pyramid `[g, 2, 1]`.
    pub fn set_pooled_grid(&mut self, grid: usize) {
        self.pooled_grid = grid;
        self.pyramid_grids = default_pyramid(grid);
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.ffn_ratio == 0 || s.head_dim == 0 || s.channels % s.head_dim != 0 {
                return Err(Error::Config(format!(
                    "stage {}: {} channels / head width {} / depth {} / ratio {} is not a valid setting",
                    i + 1,
                    s.channels,
                    s.head_dim,
                    s.depth,
                    s.ffn_ratio
                )));
            }
        }
        if self.decoder_head_dim == 0 || !self.decoder_width.is_multiple_of(self.decoder_head_dim) {
            return Err(Error::Config(format!(
                "decoder width {} not divisible by head width {}",
                self.decoder_width, self.decoder_head_dim
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be >= 1".into()));
        }
        self.attention(self.stages[0].channels, self.stages[0].head_dim).validate()
    }

    pub fn total_depth(&self) -> usize {
        self.stages.iter().map(|s| s.depth).sum()
    }

    pub fn attention(&self, channels: usize, head_dim: usize) -> AttentionConfig {
        AttentionConfig {
            channels,
            head_dim,
            scheme: Scheme::Lrsa,
            pooled_grid: self.pooled_grid,
            kv_pyramid: self.kv_pyramid,
            pyramid_grids: self.pyramid_grids.clone(),
            pyramid_source: self.pyramid_source,
        }
    }

    pub(crate) fn stage_block(&self, i: usize) -> BlockConfig {
        let s = self.stages[i];
        self.block(s.channels, s.head_dim, s.ffn_ratio)
    }

    pub(crate) fn decoder_block(&self) -> BlockConfig {
        self.block(self.decoder_width, self.decoder_head_dim, self.decoder_ffn_ratio)
    }

    fn block(&self, channels: usize, head_dim: usize, ffn_ratio: usize) -> BlockConfig {
        BlockConfig {
            attn: self.attention(channels, head_dim),
            ffn_ratio,
            cpe: self.cpe,
            ffn_dwconv: self.ffn_dwconv,
            layer_scale: self.layer_scale,
        }
    }

    /// Checks that an input of `h×w` can run through the network.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(Error::Data(format!(
                "input {h}x{w} must have extents divisible by 32"
            )));
        }
        Ok(())
    }
}

fn default_pyramid(grid: usize) -> Vec<usize> {
    let mut g = vec![grid];
    for s in [2, 1] {
        if s < *g.last().unwrap() {
            g.push(s);
        }
    }
    g
}

/// Settings for one basic block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub attn: AttentionConfig,
    pub ffn_ratio: usize,
    pub cpe: bool,
    pub ffn_dwconv: bool,
    pub layer_scale: bool,
}

/// How a parameter is initialized; inferred from its name and shape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Constant(f64),
    /// Truncated normal, std 0.02, cut at ±2 std.
    TruncNormal,
    /// Normal with std `√(2 / fan_out)`.
    FanOut(usize),
}

impl Init {
    pub fn for_param(name: &str, shape: &[usize]) -> Self {
        if name.ends_with(".gamma") {
            Init::Ones
        } else if name.ends_with(".beta") || name.ends_with(".bias") {
            Init::Zeros
        } else if name.ends_with(".scale") {
            Init::Constant(LAYER_SCALE_INIT)
        } else if let [c_out, c_in_g, kh, kw] = *shape {
            if kh * kw == 1 {
                Init::TruncNormal
            } else {
                // depthwise kernels have one input channel per group
                let groups = if c_in_g == 1 { c_out } else { 1 };
                Init::FanOut(kh * kw * c_out / groups)
            }
        } else {
            Init::TruncNormal
        }
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks that `self` has exactly the names and shapes of `reference`,
    /// in the same order.
    pub fn check_layout<U: Real>(&self, reference: &ParamStore<U>) -> Result<()> {
        for (name, want) in reference.iter() {
            let got = self.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
            if got.shape() != want.shape() {
                return Err(Error::ParamShape {
                    name: name.to_string(),
                    expected: want.shape().to_vec(),
                    actual: got.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| reference.get(n).is_none()) {
            return Err(Error::Data(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Parameter names and shapes of a model, in store order.
pub fn param_layout(spec: &VariantSpec) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
    let c = |i: usize| spec.stages[i].channels;

    push("stem.conv.weight".into(), vec![c(0), 3, 7, 7]);
    push("stem.conv.bias".into(), vec![c(0)]);
    push("stem.norm.gamma".into(), vec![c(0)]);
    push("stem.norm.beta".into(), vec![c(0)]);
    for i in 0..4 {
        if i > 0 {
            let p = format!("embed{}", i + 1);
            push(format!("{p}.conv.weight"), vec![c(i), c(i - 1), 3, 3]);
            push(format!("{p}.conv.bias"), vec![c(i)]);
            push(format!("{p}.norm.gamma"), vec![c(i)]);
            push(format!("{p}.norm.beta"), vec![c(i)]);
        }
        let cfg = spec.stage_block(i);
        for j in 0..spec.stages[i].depth {
            block_layout(&format!("stage{}.block{}", i + 1, j + 1), &cfg, &mut push);
        }
    }
    match spec.task {
        Task::Segmentation => {
            let d = spec.decoder_width;
            let cfg = spec.decoder_block();
            push("decoder.squeeze.weight".into(), vec![d, c(1) + c(2) + c(3), 1, 1]);
            push("decoder.squeeze.bias".into(), vec![d]);
            block_layout("decoder.block1", &cfg, &mut push);
            push("decoder.fuse.weight".into(), vec![d, d + c(3), 1, 1]);
            push("decoder.fuse.bias".into(), vec![d]);
            block_layout("decoder.block2", &cfg, &mut push);
            push("decoder.cls.weight".into(), vec![spec.num_classes, d, 1, 1]);
            push("decoder.cls.bias".into(), vec![spec.num_classes]);
        }
        Task::Classification => {
            let mut width = c(3);
            push("head.norm.gamma".into(), vec![width]);
            push("head.norm.beta".into(), vec![width]);
            if let Some(h) = spec.head_hidden {
                push("head.pre.weight".into(), vec![width, h]);
                push("head.pre.bias".into(), vec![h]);
                width = h;
            }
            push("head.fc.weight".into(), vec![width, spec.num_classes]);
            push("head.fc.bias".into(), vec![spec.num_classes]);
        }
    }
    out
}

fn block_layout(prefix: &str, cfg: &BlockConfig, push: &mut impl FnMut(String, Vec<usize>)) {
    let c = cfg.attn.channels;
    let hidden = c * cfg.ffn_ratio;
    if cfg.cpe {
        push(format!("{prefix}.cpe.weight"), vec![c, 1, 3, 3]);
        push(format!("{prefix}.cpe.bias"), vec![c]);
    }
    push(format!("{prefix}.attn.norm.gamma"), vec![c]);
    push(format!("{prefix}.attn.norm.beta"), vec![c]);
    for proj in ["q", "k", "v", "o"] {
        push(format!("{prefix}.attn.{proj}.weight"), vec![c, c]);
        push(format!("{prefix}.attn.{proj}.bias"), vec![c]);
    }
    if cfg.layer_scale {
        push(format!("{prefix}.attn.scale"), vec![c]);
    }
    push(format!("{prefix}.ffn.norm.gamma"), vec![c]);
    push(format!("{prefix}.ffn.norm.beta"), vec![c]);
    push(format!("{prefix}.ffn.fc1.weight"), vec![c, hidden]);
    push(format!("{prefix}.ffn.fc1.bias"), vec![hidden]);
    if cfg.ffn_dwconv {
        push(format!("{prefix}.ffn.dw.weight"), vec![hidden, 1, 3, 3]);
        push(format!("{prefix}.ffn.dw.bias"), vec![hidden]);
    }
    push(format!("{prefix}.ffn.fc2.weight"), vec![hidden, c]);
    push(format!("{prefix}.ffn.fc2.bias"), vec![c]);
    if cfg.layer_scale {
        push(format!("{prefix}.ffn.scale"), vec![c]);
    }
}

/// Re-initializes every parameter from `seed`; each tensor's values depend
/// only on the seed and its name.
pub fn init_params<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    for (name, t) in store.iter_mut() {
        let init = Init::for_param(name, t.shape());
        let mut rng = Stream::new(seed, name);
        for v in t.data_mut() {
            *v = T::from_f64(match init {
                Init::Zeros => 0.0,
                Init::Ones => 1.0,
                Init::Constant(c) => c,
                Init::TruncNormal => rng.truncated_normal(0.02),
                Init::FanOut(fan_out) => rng.normal() * libm::sqrt(2.0 / fan_out as f64),
            });
        }
    }
}

/// Allocates and initializes the parameters of `spec`.
pub fn build<T: Real>(spec: &VariantSpec, seed: u64) -> Result<ParamStore<T>> {
    spec.validate()?;
    let mut store = ParamStore::new();
    for (name, shape) in param_layout(spec) {
        store.insert(name, Tensor::zeros(shape))?;
    }
    init_params(&mut store, seed);
    Ok(store)
}

/// Registered variant by name, with its initialized parameters.
pub fn build_variant<T: Real>(
    name: &str,
    task: Task,
    num_classes: usize,
    seed: u64,
) -> Result<(ParamStore<T>, VariantSpec)> {
    let spec = VariantSpec::registered(name, task, num_classes)?;
    Ok((build(&spec, seed)?, spec))
}

/// Parameters of a [`ParamStore`] placed on a tape.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Adds every parameter as a tape leaf.
    pub fn new<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, requires_grad: bool) -> Self {
        let vars = store
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn scope(&self, prefix: impl Into<String>) -> Scope<'_> {
        Scope {
            bound: self,
            prefix: prefix.into(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Name prefix into a [`Bound`] set.
#[derive(Clone)]
pub struct Scope<'a> {
    bound: &'a Bound,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn get(&self, leaf: &str) -> Result<Var> {
        self.bound.var(&format!("{}.{leaf}", self.prefix))
    }

    pub fn has(&self, leaf: &str) -> bool {
        self.get(leaf).is_ok()
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    fn linear(&self, name: &str) -> Result<Linear> {
        let s = self.sub(name);
        Ok(Linear {
            weight: s.get("weight")?,
            bias: Some(s.get("bias")?),
        })
    }

    pub fn attention_params(&self) -> Result<AttentionParams> {
        Ok(AttentionParams {
            q: self.linear("q")?,
            k: self.linear("k")?,
            v: self.linear("v")?,
            o: self.linear("o")?,
        })
    }
}

fn conv<T: Real>(tape: &mut Tape<T>, x: Var, s: &Scope<'_>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
    tape.conv2d(x, s.get("weight")?, Some(s.get("bias")?), stride, pad, groups)
}

fn norm<T: Real>(tape: &mut Tape<T>, x: Var, s: &Scope<'_>) -> Result<Var> {
    tape.channel_norm(x, s.get("gamma")?, s.get("beta")?, LAYER_NORM_EPS)
}

/// `x + DWConv3×3(x)`
fn dw_residual<T: Real>(tape: &mut Tape<T>, x: Var, s: &Scope<'_>) -> Result<Var> {
    let c = tape.shape(x)[1];
    let y = conv(tape, x, s, 1, 1, c)?;
    tape.add(x, y)
}

/// Residual add, with an optional per-channel gain on the branch.
fn residual<T: Real>(tape: &mut Tape<T>, x: Var, branch: Var, gain: Option<Var>) -> Result<Var> {
    let branch = match gain {
        Some(g) => {
            let [_, _, h, w] = tape.nchw("residual", branch)?;
            let t = tape.to_tokens(branch)?;
            let t = tape.mul_last(t, g)?;
            tape.from_tokens(t, h, w)?
        }
        None => branch,
    };
    tape.add(x, branch)
}

/// Pointwise `C→E·C`, depthwise 3×3 with residual, GELU, pointwise `E·C→C`
/// on a `[B,C,H,W]` map.
pub fn ffn_forward<T: Real>(tape: &mut Tape<T>, x: Var, s: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    let [_, _, h, w] = tape.nchw("ffn", x)?;
    let prev = tape.set_category(Category::Linear);
    let t = tape.to_tokens(x)?;
    let hid = s.linear("fc1")?.forward(tape, t)?;
    let mut hid = tape.from_tokens(hid, h, w)?;
    if cfg.ffn_dwconv {
        hid = dw_residual(tape, hid, &s.sub("dw"))?;
    }
    let hid = tape.gelu(hid)?;
    let t = tape.to_tokens(hid)?;
    let out = s.linear("fc2")?.forward(tape, t)?;
    tape.set_category(prev);
    tape.from_tokens(out, h, w)
}

/// One basic block on a `[B,C,H,W]` map:
///
/// ```text
/// x'  = x + DWConv(x)
/// x'' = x' + LRSA(LayerNorm(x'))
/// out = x'' + FFN(LayerNorm(x''))
/// ```
pub fn basic_block_forward<T: Real>(tape: &mut Tape<T>, x: Var, s: &Scope<'_>, cfg: &BlockConfig) -> Result<Var> {
    let c = tape.nchw("basic_block", x)?[1];
    if c != cfg.attn.channels {
        return Err(Error::Config(format!(
            "block expects {} channels, input has {c}",
            cfg.attn.channels
        )));
    }
    let x = if cfg.cpe { dw_residual(tape, x, &s.sub("cpe"))? } else { x };
    let a = s.sub("attn");
    let n = norm(tape, x, &a.sub("norm"))?;
    let att = attention::attend(tape, n, &a.attention_params()?, &cfg.attn)?;
    let gain = if cfg.layer_scale { Some(a.get("scale")?) } else { None };
    let x = residual(tape, x, att, gain)?;
    let f = s.sub("ffn");
    let n = norm(tape, x, &f.sub("norm"))?;
    let y = ffn_forward(tape, n, &f, cfg)?;
    let gain = if cfg.layer_scale { Some(f.get("scale")?) } else { None };
    residual(tape, x, y, gain)
}

/// Overlapped 7×7 stride-4 convolution followed by channel LayerNorm.
pub fn stem_forward<T: Real>(tape: &mut Tape<T>, image: Var, p: &Bound) -> Result<Var> {
    let s = p.scope("stem");
    let x = conv(tape, image, &s.sub("conv"), 4, 3, 1)?;
    norm(tape, x, &s.sub("norm"))
}

/// 3×3 stride-2 convolution into stage `stage` (2..=4), then LayerNorm.
pub fn patch_embed_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &Bound, stage: usize) -> Result<Var> {
    let s = p.scope(format!("embed{stage}"));
    let x = conv(tape, x, &s.sub("conv"), 2, 1, 1)?;
    norm(tape, x, &s.sub("norm"))
}

/// Stride-4/8/16/32 feature maps `F1..F4`.
pub fn encoder_forward<T: Real>(tape: &mut Tape<T>, image: Var, p: &Bound, spec: &VariantSpec) -> Result<[Var; 4]> {
    let [_, c, h, w] = tape.nchw("encoder", image)?;
    if c != 3 {
        return Err(Error::Data(format!("expected a 3-channel image, got {c} channels")));
    }
    spec.check_input(h, w)?;
    let mut x = stem_forward(tape, image, p)?;
    let mut feats = [x; 4];
    for i in 0..4 {
        if i > 0 {
            x = patch_embed_forward(tape, x, p, i + 1)?;
        }
        let cfg = spec.stage_block(i);
        for j in 0..spec.stages[i].depth {
            x = basic_block_forward(tape, x, &p.scope(format!("stage{}.block{}", i + 1, j + 1)), &cfg)?;
        }
        feats[i] = x;
    }
    Ok(feats)
}

/// Segmentation head over `F2..F4`; logits at the `F2` grid.
pub fn decoder_forward<T: Real>(
    tape: &mut Tape<T>,
    [f2, f3, f4]: [Var; 3],
    p: &Bound,
    spec: &VariantSpec,
) -> Result<Var> {
    let [b2, _, h, w] = tape.nchw("decoder", f2)?;
    let [b3, _, h3, w3] = tape.nchw("decoder", f3)?;
    let [b4, _, h4, w4] = tape.nchw("decoder", f4)?;
    if b2 != b3 || b2 != b4 || h3 * 2 != h || w3 * 2 != w || h4 * 4 != h || w4 * 4 != w {
        return Err(Error::Usage(format!(
            "decoder features do not come from one encoder pass: {h}x{w}, {h3}x{w3}, {h4}x{w4}"
        )));
    }
    let s = p.scope("decoder");
    let cfg = spec.decoder_block();
    let prev = tape.set_category(Category::Interp);
    let f3u = tape.bilinear_resize(f3, h, w)?;
    let f4u = tape.bilinear_resize(f4, h, w)?;
    tape.set_category(prev);
    let cat = tape.concat(&[f2, f3u, f4u], 1)?;
    let x = conv(tape, cat, &s.sub("squeeze"), 1, 0, 1)?;
    let x = basic_block_forward(tape, x, &s.sub("block1"), &cfg)?;
    let cat = tape.concat(&[x, f4u], 1)?;
    let x = conv(tape, cat, &s.sub("fuse"), 1, 0, 1)?;
    let x = basic_block_forward(tape, x, &s.sub("block2"), &cfg)?;
    conv(tape, x, &s.sub("cls"), 1, 0, 1)
}

/// Stride-8 segmentation logits `[B,K,H/8,W/8]`.
pub fn segment_logits<T: Real>(tape: &mut Tape<T>, image: Var, p: &Bound, spec: &VariantSpec) -> Result<Var> {
    if spec.task != Task::Segmentation {
        return Err(Error::Usage(format!("variant `{}` is not a segmentation model", spec.name)));
    }
    let [_, f2, f3, f4] = encoder_forward(tape, image, p, spec)?;
    decoder_forward(tape, [f2, f3, f4], p, spec)
}

/// Segmentation logits bilinearly upsampled to the input grid.
pub fn segment_forward<T: Real>(tape: &mut Tape<T>, image: Var, p: &Bound, spec: &VariantSpec) -> Result<Var> {
    let [_, _, h, w] = tape.nchw("segment", image)?;
    let logits = segment_logits(tape, image, p, spec)?;
    let prev = tape.set_category(Category::Interp);
    let out = tape.bilinear_resize(logits, h, w);
    tape.set_category(prev);
    out
}

/// Image-level logits `[B,K]`: global average of `F4`, LayerNorm, optional
/// GELU hidden layer, linear classifier.
pub fn classifier_forward<T: Real>(tape: &mut Tape<T>, image: Var, p: &Bound, spec: &VariantSpec) -> Result<Var> {
    if spec.task != Task::Classification {
        return Err(Error::Usage(format!("variant `{}` is not a classifier", spec.name)));
    }
    let [.., f4] = encoder_forward(tape, image, p, spec)?;
    let [b, c, _, _] = tape.nchw("classifier", f4)?;
    let pooled = tape.adaptive_avg_pool2d(f4, 1, 1)?;
    let x = tape.reshape(pooled, &[b, c])?;
    let s = p.scope("head");
    let x = tape.layer_norm(x, s.get("norm.gamma")?, s.get("norm.beta")?, LAYER_NORM_EPS)?;
    let prev = tape.set_category(Category::Linear);
    let x = if spec.head_hidden.is_some() {
        let h = s.linear("pre")?.forward(tape, x)?;
        tape.gelu(h)?
    } else {
        x
    };
    let out = s.linear("fc")?.forward(tape, x);
    tape.set_category(prev);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(task: Task) -> VariantSpec {
        VariantSpec::registered("micro", task, 3).unwrap()
    }

    #[test]
    fn registered_encoders() {
        let rows: [(&str, [(usize, usize, usize, usize); 4], usize); 5] = [
            ("T", [(48, 24, 8, 2), (96, 24, 8, 2), (240, 24, 4, 6), (384, 24, 4, 3)], 256),
            ("S", [(64, 32, 8, 3), (128, 32, 8, 3), (320, 32, 4, 12), (512, 32, 4, 3)], 384),
            ("B", [(80, 40, 8, 4), (160, 40, 8, 4), (400, 40, 4, 15), (512, 32, 4, 8)], 512),
            ("L", [(96, 48, 8, 4), (192, 48, 8, 6), (480, 48, 4, 18), (640, 40, 4, 8)], 640),
            ("XL", [(128, 64, 8, 4), (256, 64, 8, 8), (640, 64, 4, 22), (768, 48, 4, 8)], 768),
        ];
        for (name, stages, width) in rows {
            let spec = VariantSpec::registered(name, Task::Segmentation, 150).unwrap();
            for (s, (c, ch, e, n)) in spec.stages.iter().zip(stages) {
                assert_eq!((s.channels, s.head_dim, s.ffn_ratio, s.depth), (c, ch, e, n), "{name}");
            }
            assert_eq!(spec.decoder_width, width);
            assert_eq!(spec.pooled_grid, 16);
        }
        let s = VariantSpec::registered("s", Task::Classification, 1000).unwrap();
        assert_eq!((s.name.as_str(), s.pooled_grid, s.total_depth()), ("S", 7, 21));
        assert!(matches!(VariantSpec::registered("Q", Task::Segmentation, 2), Err(Error::Config(_))));
    }

    #[test]
    fn task_names() {
        assert_eq!("seg".parse::<Task>().unwrap(), Task::Segmentation);
        assert_eq!("cls".parse::<Task>().unwrap(), Task::Classification);
        assert!("detect".parse::<Task>().is_err());
    }

    #[test]
    fn stem_parameter_count() {
        let spec = VariantSpec::registered("S", Task::Segmentation, 150).unwrap();
        let stem: usize = param_layout(&spec)
            .iter()
            .filter(|(n, _)| n.starts_with("stem."))
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        // 3·64·49 weights + 64 bias + 2·64 norm
        assert_eq!(stem, 9_408 + 64 + 128);
    }

    #[test]
    fn decoder_squeeze_width() {
        let spec = VariantSpec::registered("S", Task::Segmentation, 150).unwrap();
        let layout = param_layout(&spec);
        let squeeze = layout.iter().find(|(n, _)| n == "decoder.squeeze.weight").unwrap();
        assert_eq!(squeeze.1, vec![384, 960, 1, 1]);
    }

    #[test]
    fn ffn_hidden_width_follows_ratio() {
        let spec = VariantSpec::registered("S", Task::Segmentation, 150).unwrap();
        let layout = param_layout(&spec);
        let shape = |n: &str| layout.iter().find(|(name, _)| name == n).unwrap().1.clone();
        assert_eq!(shape("stage1.block1.ffn.fc1.weight"), vec![64, 512]);
        assert_eq!(shape("stage2.block3.ffn.fc1.weight"), vec![128, 1024]);
        assert_eq!(shape("stage3.block12.ffn.fc1.weight"), vec![320, 1280]);
        assert_eq!(shape("stage4.block1.ffn.dw.weight"), vec![2048, 1, 3, 3]);
    }

    #[test]
    fn dwconv_flags_change_count_by_closed_form() {
        let base = VariantSpec::registered("T", Task::Segmentation, 150).unwrap();
        let mut plain = base.clone();
        plain.cpe = false;
        plain.ffn_dwconv = false;
        let count = |s: &VariantSpec| param_layout(s).iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>();
        let mut expected = 0;
        let dw = |c: usize| 9 * c + c;
        for s in &base.stages {
            expected += s.depth * (dw(s.channels) + dw(s.channels * s.ffn_ratio));
        }
        expected += 2 * (dw(base.decoder_width) + dw(base.decoder_width * base.decoder_ffn_ratio));
        assert_eq!(count(&base) - count(&plain), expected);
    }

    #[test]
    fn init_policy() {
        let store = build::<f32>(&micro(Task::Segmentation), 5).unwrap();
        for (name, t) in store.iter() {
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            } else if name.ends_with(".beta") || name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else if t.rank() == 2 {
                assert!(t.data().iter().all(|&v| v.abs() <= 0.04), "{name}");
            }
        }
        assert_eq!(store, build::<f32>(&micro(Task::Segmentation), 5).unwrap());
        assert_ne!(store, build::<f32>(&micro(Task::Segmentation), 6).unwrap());
        assert_eq!(Init::for_param("x.cpe.weight", &[16, 1, 3, 3]), Init::FanOut(9));
        assert_eq!(Init::for_param("stem.conv.weight", &[16, 3, 7, 7]), Init::FanOut(49 * 16));
    }

    #[test]
    fn layer_scale_adds_small_gains() {
        let mut spec = micro(Task::Segmentation);
        spec.layer_scale = true;
        let store = build::<f32>(&spec, 0).unwrap();
        let gain = store.get("stage1.block1.attn.scale").unwrap();
        assert!(gain.data().iter().all(|&v| (v - 1e-6).abs() < 1e-12));
    }

    #[test]
    fn store_rejects_duplicates_and_checks_layout() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros([2])).unwrap();
        assert!(matches!(s.insert("a", Tensor::zeros([2])), Err(Error::DuplicateParam(_))));
        let micro_store = build::<f32>(&micro(Task::Segmentation), 0).unwrap();
        let mut other = micro(Task::Segmentation);
        other.decoder_width = 32;
        let other_store = build::<f32>(&other, 0).unwrap();
        assert!(other_store.check_layout(&micro_store).is_err());
        assert!(micro_store.check_layout(&micro_store).is_ok());
    }

    fn run_block(store: &ParamStore<f64>, cfg: &BlockConfig, x: Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, store, false);
        let xv = tape.constant(x.clone());
        let y = basic_block_forward(&mut tape, xv, &bound.scope("stage1.block1"), cfg).unwrap();
        (x, tape.value(y).clone())
    }

    #[test]
    fn block_with_zero_branch_outputs_is_identity() {
        let spec = micro(Task::Segmentation);
        let mut store = build::<f64>(&spec, 1).unwrap();
        for name in ["cpe.weight", "attn.o.weight", "ffn.fc2.weight"] {
            let t = store.get_mut(&format!("stage1.block1.{name}")).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = Stream::new(0, "x");
        let x = Tensor::from_fn([2, 16, 9, 7], |_| rng.normal());
        let (x, y) = run_block(&store, &spec.stage_block(0), x);
        assert_eq!(x, y);
    }

    #[test]
    fn block_preserves_shape() {
        let spec = micro(Task::Segmentation);
        let store = build::<f64>(&spec, 1).unwrap();
        for (h, w) in [(3, 3), (8, 8), (5, 11)] {
            let (x, y) = run_block(&store, &spec.stage_block(0), Tensor::full([1, 16, h, w], 0.5));
            assert_eq!(x.shape(), y.shape());
        }
    }

    #[test]
    fn ffn_matches_manual_composition() {
        let spec = micro(Task::Segmentation);
        let mut store = build::<f64>(&spec, 2).unwrap();
        let mut rng = Stream::new(2, "perturb");
        for (_, t) in store.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        }
        let cfg = spec.stage_block(0);
        let x = Tensor::from_fn([1, 16, 3, 3], |_| rng.normal());
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let xv = tape.constant(x);
        let s = bound.scope("stage1.block1.ffn");
        let y = ffn_forward(&mut tape, xv, &s, &cfg).unwrap();
        let got = tape.value(y).clone();

        // same chain spelled out as individual conv/gelu ops
        let (w1, b1) = (s.get("fc1.weight").unwrap(), s.get("fc1.bias").unwrap());
        let (w2, b2) = (s.get("fc2.weight").unwrap(), s.get("fc2.bias").unwrap());
        let as_conv = |tape: &mut Tape<f64>, w: Var| {
            let t = tape.transpose(w).unwrap();
            let [o, i] = [tape.shape(t)[0], tape.shape(t)[1]];
            tape.reshape(t, &[o, i, 1, 1]).unwrap()
        };
        let k1 = as_conv(&mut tape, w1);
        let k2 = as_conv(&mut tape, w2);
        let h = tape.conv2d(xv, k1, Some(b1), 1, 0, 1).unwrap();
        assert_eq!(tape.shape(h)[1], 16 * 4);
        let d = tape.conv2d(h, s.get("dw.weight").unwrap(), Some(s.get("dw.bias").unwrap()), 1, 1, 64).unwrap();
        let h = tape.add(h, d).unwrap();
        let h = tape.gelu(h).unwrap();
        let want = tape.conv2d(h, k2, Some(b2), 1, 0, 1).unwrap();
        assert!(got.max_abs_diff(tape.value(want)).unwrap() < 1e-12);

        store.get_mut("stage1.block1.ffn.fc2.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("stage1.block1.ffn.fc2.bias").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let xv = tape.constant(Tensor::full([1, 16, 3, 3], 1.0));
        let y = ffn_forward(&mut tape, xv, &bound.scope("stage1.block1.ffn"), &cfg).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_strides() {
        let spec = micro(Task::Segmentation);
        let store = build::<f32>(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let img = tape.constant(Tensor::full([1, 3, 96, 64], 0.5));
        let feats = encoder_forward(&mut tape, img, &bound, &spec).unwrap();
        let grids: Vec<_> = feats.iter().map(|&f| tape.shape(f).to_vec()).collect();
        assert_eq!(grids, vec![vec![1, 16, 24, 16], vec![1, 32, 12, 8], vec![1, 64, 6, 4], vec![1, 96, 3, 2]]);
        let bad = tape.constant(Tensor::full([1, 3, 48, 64], 0.5));
        assert!(matches!(encoder_forward(&mut tape, bad, &bound, &spec), Err(Error::Data(_))));
    }

    #[test]
    fn patch_embed_halves_odd_extents_by_ceiling() {
        let spec = micro(Task::Segmentation);
        let store = build::<f32>(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let x = tape.constant(Tensor::full([1, 16, 7, 7], 0.5));
        let y = patch_embed_forward(&mut tape, x, &bound, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 32, 4, 4]);
    }

    #[test]
    fn segmentation_output_and_decoder_scores() {
        let mut spec = micro(Task::Segmentation);
        spec.set_pooled_grid(16);
        spec.kv_pyramid = false;
        let store = build::<f32>(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let img = tape.constant(Tensor::full([1, 3, 256, 256], 0.3));
        let logits = segment_logits(&mut tape, img, &bound, &spec).unwrap();
        assert_eq!(tape.shape(logits), &[1, 3, 32, 32]);
        // the two decoder blocks attend at the fixed 16×16 grid
        let scores = tape.score_shapes();
        assert_eq!(&scores[scores.len() - 2..], &[[256, 256], [256, 256]]);
        let full = segment_forward(&mut tape, img, &bound, &spec).unwrap();
        assert_eq!(tape.shape(full), &[1, 3, 256, 256]);
    }

    #[test]
    fn decoder_rejects_foreign_features() {
        let spec = micro(Task::Segmentation);
        let store = build::<f32>(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let f2 = tape.constant(Tensor::zeros([1, 32, 8, 8]));
        let f3 = tape.constant(Tensor::zeros([1, 64, 4, 4]));
        let f4 = tape.constant(Tensor::zeros([1, 96, 4, 4]));
        assert!(matches!(decoder_forward(&mut tape, [f2, f3, f4], &bound, &spec), Err(Error::Usage(_))));
    }

    #[test]
    fn classifier_logits() {
        let spec = micro(Task::Classification);
        let store = build::<f32>(&spec, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, false);
        let img = tape.constant(Tensor::full([2, 3, 64, 64], 0.2));
        let logits = classifier_forward(&mut tape, img, &bound, &spec).unwrap();
        assert_eq!(tape.shape(logits), &[2, 3]);
        assert!(segment_forward(&mut tape, img, &bound, &spec).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = micro(Task::Segmentation);
        let run = || {
            let store = build::<f32>(&spec, 9).unwrap();
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &store, false);
            let img = tape.constant(Tensor::from_fn([1, 3, 64, 64], |i| (i % 13) as f32 / 13.0));
            let y = segment_forward(&mut tape, img, &bound, &spec).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}

//! Parameter and MAC accounting.
//!
//! [`count_flops`] walks the architecture graph of a [`VariantSpec`] without
//! executing it. Its per-category totals use exactly the conventions of the
//! counting hook in [`Tape`](crate::Tape), so the two can be compared
//! directly. Headline figures report one MAC as one FLOP and leave out
//! pooling, normalization and activation work.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write};
use core::str::FromStr;

use crate::attention::{attend, AttentionConfig, AttentionParams, Linear, PyramidSource, Scheme};
use crate::flops::{Category, MacCounts};
use crate::model::{self, BlockConfig, ParamStore, Task, VariantSpec};
use crate::{Error, Real, Result, Tape, Tensor};

/// Σ product(shape) over all parameters.
pub fn count_params<T: Real>(store: &ParamStore<T>) -> usize {
    store.num_scalars()
}

/// Parameter count of `spec` from its layout alone, without allocating.
pub fn count_params_spec(spec: &VariantSpec) -> usize {
    model::param_layout(spec)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub name: String,
    pub category: Category,
    pub macs: u64,
}

/// Per-layer MAC counts of one forward pass at batch size 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsReport {
    pub records: Vec<LayerRecord>,
    totals: MacCounts,
}

impl FlopsReport {
    fn push(&mut self, name: impl Into<String>, category: Category, macs: u64) {
        self.totals.add(category, macs);
        self.records.push(LayerRecord {
            name: name.into(),
            category,
            macs,
        });
    }

    pub fn totals(&self) -> &MacCounts {
        &self.totals
    }

    pub fn category_total(&self, cat: Category) -> u64 {
        self.totals.get(cat)
    }

    /// Headline FLOPs: every category except pooling and norm/activation.
    pub fn headline(&self) -> u64 {
        self.totals.headline()
    }
}

/// Attention products plus the upsampling that follows low-resolution
/// attention. Token projections are not included.
pub fn attention_flops(report: &FlopsReport) -> u64 {
    report.totals.attention()
}

struct Counter {
    report: FlopsReport,
}

impl Counter {
    fn add(&mut self, name: String, cat: Category, macs: usize) {
        self.report.push(name, cat, macs as u64);
    }

    /// Returns the output extents.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        (h, w): (usize, usize),
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> (usize, usize) {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        self.add(name, Category::Conv, oh * ow * c_out * (c_in / groups) * k * k);
        (oh, ow)
    }

    fn lrsa(&mut self, p: &str, cfg: &AttentionConfig, (h, w): (usize, usize)) {
        let c = cfg.channels;
        let n = h * w;
        let (nq, nkv) = cfg.token_counts(h, w);
        let bypass = cfg.bypasses_pooling(h, w);
        if !bypass {
            self.add(format!("{p}.pool"), Category::Pool, n * c);
            if cfg.kv_pyramid {
                let src = match cfg.pyramid_source {
                    PyramidSource::Input => n,
                    PyramidSource::Pooled => nq,
                };
                for (i, _) in cfg.pyramid_extents(h, w).iter().enumerate() {
                    self.add(format!("{p}.pyramid{i}"), Category::Pool, src * c);
                }
            }
        }
        self.add(format!("{p}.q"), Category::AttnProj, nq * c * c);
        self.add(format!("{p}.k"), Category::AttnProj, nkv * c * c);
        self.add(format!("{p}.v"), Category::AttnProj, nkv * c * c);
        self.add(format!("{p}.scores"), Category::AttnCore, nq * nkv * c);
        self.add(format!("{p}.softmax"), Category::NormAct, cfg.heads() * nq * nkv);
        self.add(format!("{p}.aggregate"), Category::AttnCore, nq * nkv * c);
        self.add(format!("{p}.o"), Category::AttnProj, nq * c * c);
        if !bypass {
            self.add(format!("{p}.upsample"), Category::AttnInterp, 4 * n * c);
        }
    }

    fn block(&mut self, p: &str, cfg: &BlockConfig, hw: (usize, usize)) {
        let c = cfg.attn.channels;
        let n = hw.0 * hw.1;
        let hidden = c * cfg.ffn_ratio;
        if cfg.cpe {
            self.conv(format!("{p}.cpe"), hw, c, c, 3, 1, 1, c);
        }
        self.add(format!("{p}.attn.norm"), Category::NormAct, n * c);
        self.lrsa(&format!("{p}.attn"), &cfg.attn, hw);
        self.add(format!("{p}.ffn.norm"), Category::NormAct, n * c);
        self.add(format!("{p}.ffn.fc1"), Category::Linear, n * c * hidden);
        if cfg.ffn_dwconv {
            self.conv(format!("{p}.ffn.dw"), hw, hidden, hidden, 3, 1, 1, hidden);
        }
        self.add(format!("{p}.ffn.gelu"), Category::NormAct, n * hidden);
        self.add(format!("{p}.ffn.fc2"), Category::Linear, n * hidden * c);
    }
}

/// Analytic MAC counts of one `h×w` image through `spec`.
pub fn count_flops(spec: &VariantSpec, h: usize, w: usize) -> Result<FlopsReport> {
    spec.validate()?;
    spec.check_input(h, w)?;
    let mut ct = Counter {
        report: FlopsReport::default(),
    };
    let ch = |i: usize| spec.stages[i].channels;
    let mut hw = ct.conv("stem.conv".into(), (h, w), 3, ch(0), 7, 4, 3, 1);
    ct.add("stem.norm".into(), Category::NormAct, hw.0 * hw.1 * ch(0));
    let mut grids = [hw; 4];
    for i in 0..4 {
        if i > 0 {
            hw = ct.conv(format!("embed{}.conv", i + 1), hw, ch(i - 1), ch(i), 3, 2, 1, 1);
            ct.add(format!("embed{}.norm", i + 1), Category::NormAct, hw.0 * hw.1 * ch(i));
        }
        let cfg = spec.stage_block(i);
        for j in 0..spec.stages[i].depth {
            ct.block(&format!("stage{}.block{}", i + 1, j + 1), &cfg, hw);
        }
        grids[i] = hw;
    }
    match spec.task {
        Task::Segmentation => {
            let g2 = grids[1];
            let n2 = g2.0 * g2.1;
            let d = spec.decoder_width;
            let k = spec.num_classes;
            for (i, name) in [(2, "decoder.resize3"), (3, "decoder.resize4")] {
                if grids[i] != g2 {
                    ct.add(name.into(), Category::Interp, 4 * n2 * ch(i));
                }
            }
            ct.conv("decoder.squeeze".into(), g2, ch(1) + ch(2) + ch(3), d, 1, 1, 0, 1);
            let cfg = spec.decoder_block();
            ct.block("decoder.block1", &cfg, g2);
            ct.conv("decoder.fuse".into(), g2, d + ch(3), d, 1, 1, 0, 1);
            ct.block("decoder.block2", &cfg, g2);
            ct.conv("decoder.cls".into(), g2, d, k, 1, 1, 0, 1);
            if g2 != (h, w) {
                ct.add("decoder.upsample".into(), Category::Interp, 4 * h * w * k);
            }
        }
        Task::Classification => {
            let g4 = grids[3];
            let c4 = ch(3);
            ct.add("head.pool".into(), Category::Pool, g4.0 * g4.1 * c4);
            ct.add("head.norm".into(), Category::NormAct, c4);
            let mut width = c4;
            if let Some(hidden) = spec.head_hidden {
                ct.add("head.pre".into(), Category::Linear, width * hidden);
                ct.add("head.gelu".into(), Category::NormAct, hidden);
                width = hidden;
            }
            ct.add("head.fc".into(), Category::Linear, width * spec.num_classes);
        }
    }
    Ok(ct.report)
}

/// Attention schemes with a closed-form cost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostScheme {
    Vanilla,
    Downsampled,
    Lrsa,
    Window,
    Factorized,
}

impl CostScheme {
    pub const ALL: [CostScheme; 5] = [
        CostScheme::Window,
        CostScheme::Factorized,
        CostScheme::Downsampled,
        CostScheme::Vanilla,
        CostScheme::Lrsa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CostScheme::Vanilla => "vanilla",
            CostScheme::Downsampled => "downsampled",
            CostScheme::Lrsa => "lrsa",
            CostScheme::Window => "window",
            CostScheme::Factorized => "factorized",
        }
    }

    /// Asymptotic class as usually quoted.
    pub fn complexity(self) -> &'static str {
        match self {
            CostScheme::Vanilla => "O(N^2C+NC^2)",
            CostScheme::Downsampled => "O(N^2C+NC^2)",
            CostScheme::Lrsa => "O(NC+C^2)",
            CostScheme::Window | CostScheme::Factorized => "O(NC^2)",
        }
    }
}

impl FromStr for CostScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CostScheme::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown attention scheme `{s}` (expected vanilla, downsampled, lrsa, window or factorized)"
                ))
            })
    }
}

impl fmt::Display for CostScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Values substituted into a cost polynomial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostParams {
    /// Token count `N`.
    pub tokens: f64,
    /// Channels `C`.
    pub channels: f64,
    /// Pooled token count `m` (LRSA).
    pub pooled: f64,
    /// Downsampling ratio `s_r`.
    pub ratio: f64,
    /// Window side `w`.
    pub window: f64,
}

impl CostParams {
    pub fn new(tokens: usize, channels: usize) -> Self {
        Self {
            tokens: tokens as f64,
            channels: channels as f64,
            pooled: 256.0,
            ratio: 8.0,
            window: 7.0,
        }
    }
}

/// `coeff · N^n · C^c · m^m · s_r^sr · w^w`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Term {
    pub coeff: u32,
    pub n: i32,
    pub c: i32,
    pub m: i32,
    pub sr: i32,
    pub w: i32,
}

const fn term(coeff: u32, n: i32, c: i32, m: i32, sr: i32, w: i32) -> Term {
    Term { coeff, n, c, m, sr, w }
}

impl Term {
    pub fn eval(&self, p: &CostParams) -> f64 {
        self.coeff as f64
            * libm::pow(p.tokens, self.n as f64)
            * libm::pow(p.channels, self.c as f64)
            * libm::pow(p.pooled, self.m as f64)
            * libm::pow(p.ratio, self.sr as f64)
            * libm::pow(p.window, self.w as f64)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn power(f: &mut fmt::Formatter<'_>, sym: &str, e: i32) -> fmt::Result {
            match e {
                0 => Ok(()),
                1 => write!(f, "·{sym}"),
                _ => write!(f, "·{sym}^{e}"),
            }
        }
        write!(f, "{}", self.coeff)?;
        power(f, "N", self.n)?;
        power(f, "C", self.c)?;
        power(f, "m", self.m)?;
        power(f, "w", self.w)?;
        if self.sr < 0 {
            write!(f, "/s_r")?;
            if self.sr < -1 {
                write!(f, "^{}", -self.sr)?;
            }
        } else {
            power(f, "s_r", self.sr)?;
        }
        Ok(())
    }
}

/// MAC polynomial of one attention layer (projections, attention products,
/// and for pooled schemes the pooling adds and upsampling).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub scheme: CostScheme,
    pub terms: Vec<Term>,
}

impl CostModel {
    pub fn for_scheme(scheme: CostScheme) -> Self {
        let terms = match scheme {
            // 4 projections on N tokens, scores + aggregation over N×N
            CostScheme::Vanilla => alloc::vec![term(4, 1, 2, 0, 0, 0), term(2, 2, 1, 0, 0, 0)],
            // q/o on N tokens, k/v on N/s_r² pooled tokens, N×N/s_r² scores, pooling adds
            CostScheme::Downsampled => alloc::vec![
                term(2, 1, 2, 0, 0, 0),
                term(2, 1, 2, 0, -2, 0),
                term(2, 2, 1, 0, -2, 0),
                term(1, 1, 1, 0, 0, 0),
            ],
            // pool + upsample over N, 4 projections on m tokens, m×m scores
            CostScheme::Lrsa => alloc::vec![
                term(5, 1, 1, 0, 0, 0),
                term(4, 0, 2, 1, 0, 0),
                term(2, 0, 1, 2, 0, 0)
            ],
            // 4 projections, each token attends within its w×w window
            CostScheme::Window => alloc::vec![term(4, 1, 2, 0, 0, 0), term(2, 1, 1, 0, 0, 2)],
            // 4 projections, C×C context from N tokens and its application
            CostScheme::Factorized => alloc::vec![term(4, 1, 2, 0, 0, 0), term(2, 1, 2, 0, 0, 0)],
        };
        Self { scheme, terms }
    }

    pub fn eval(&self, p: &CostParams) -> f64 {
        self.terms.iter().map(|t| t.eval(p)).sum()
    }
}

impl fmt::Display for CostModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                f.write_str(" + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeCost {
    pub model: CostModel,
    pub macs: f64,
}

/// Evaluates the closed-form cost of `scheme` at `params`.
pub fn scheme_cost(scheme: &str, params: &CostParams) -> Result<SchemeCost> {
    let scheme: CostScheme = scheme.parse()?;
    let p = params;
    if [p.tokens, p.channels, p.pooled, p.ratio, p.window]
        .iter()
        .any(|v| v.is_nan() || *v <= 0.0)
    {
        return Err(Error::Config(format!("cost parameters must be positive: {p:?}")));
    }
    let model = CostModel::for_scheme(scheme);
    let macs = model.eval(params);
    Ok(SchemeCost { model, macs })
}

/// Attention-product MACs of a downsampling-attention backbone: every stage
/// `(channels, depth, ratio)` at stride 4/8/16/32 of an `h×w` input, scores
/// plus aggregation against keys pooled by the stage ratio.
pub fn downsampled_backbone_attention(stages: &[(usize, usize, usize)], h: usize, w: usize) -> u64 {
    let mut total = 0u64;
    let (mut sh, mut sw) = (h / 4, w / 4);
    for &(c, depth, ratio) in stages {
        let n = (sh * sw) as u64;
        let nkv = (sh.div_ceil(ratio) * sw.div_ceil(ratio)) as u64;
        total += depth as u64 * 2 * n * nkv * c as u64;
        sh = sh.div_ceil(2);
        sw = sw.div_ceil(2);
    }
    total
}

/// Largest score matrix (entries per head and batch) [`measure_scheme`] will
/// materialize.
pub const MEASURE_SCORE_LIMIT: usize = 1 << 26;

/// MACs of one instrumented attention layer on an `h×w` map, excluding
/// normalization and activation work, for comparison with [`scheme_cost`].
///
/// Only the schemes with a runnable layer (vanilla, downsampled, lrsa) can
/// be measured. The LRSA layer uses a single `√m × √m` key/value grid.
pub fn measure_scheme(scheme: CostScheme, h: usize, w: usize, p: &CostParams, head_dim: usize) -> Result<u64> {
    let c = p.channels as usize;
    let scheme_cfg = match scheme {
        CostScheme::Vanilla => Scheme::Vanilla,
        CostScheme::Downsampled => {
            let ratio = p.ratio as usize;
            if ratio == 0 || ratio as f64 != p.ratio {
                return Err(Error::Config(format!("downsampling ratio {} must be a positive integer", p.ratio)));
            }
            Scheme::Downsampled { ratio }
        }
        CostScheme::Lrsa => Scheme::Lrsa,
        CostScheme::Window | CostScheme::Factorized => {
            return Err(Error::Usage(format!("no instrumented layer for `{scheme}`")));
        }
    };
    let grid = libm::round(libm::sqrt(p.pooled)) as usize;
    if grid == 0 || (grid * grid) as f64 != p.pooled {
        return Err(Error::Config(format!("pooled size {} is not a square grid", p.pooled)));
    }
    let cfg = AttentionConfig {
        scheme: scheme_cfg,
        ..AttentionConfig::lrsa(c, head_dim, grid)
    };
    cfg.validate()?;
    let (q, kv) = cfg.token_counts(h, w);
    if q.saturating_mul(kv) > MEASURE_SCORE_LIMIT {
        return Err(Error::Usage(format!(
            "{q}×{kv} score matrix is too large to measure (limit {MEASURE_SCORE_LIMIT} entries)"
        )));
    }
    let mut tape = Tape::<f32>::new();
    let mut lin = || Linear {
        weight: tape.constant(Tensor::full([c, c], 0.01)),
        bias: Some(tape.constant(Tensor::zeros([c]))),
    };
    let params = AttentionParams {
        q: lin(),
        k: lin(),
        v: lin(),
        o: lin(),
    };
    let x = tape.constant(Tensor::full([1, c, h, w], 0.5));
    attend(&mut tape, x, &params, &cfg)?;
    let m = tape.macs();
    Ok(m.total() - m.get(Category::NormAct))
}

/// Per-stage reduction ratios of the common downsampling-attention backbones.
pub const DOWNSAMPLE_RATIOS: [usize; 4] = [8, 4, 2, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Csv,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(TableFormat::Text),
            "csv" => Ok(TableFormat::Csv),
            _ => Err(Error::Config(format!("unknown format `{s}` (expected text or csv)"))),
        }
    }
}

pub const CSV_HEADER: &str = "variant,input,params,flops_mac,att_flops_mac";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComparisonRow {
    pub variant: String,
    pub input: (usize, usize),
    pub params: usize,
    pub flops: u64,
    pub att_flops: u64,
}

pub fn comparison_rows(variants: &[VariantSpec], sizes: &[(usize, usize)]) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::new();
    for spec in variants {
        let params = count_params_spec(spec);
        for &(h, w) in sizes {
            let report = count_flops(spec, h, w)?;
            rows.push(ComparisonRow {
                variant: spec.name.clone(),
                input: (h, w),
                params,
                flops: report.headline(),
                att_flops: attention_flops(&report),
            });
        }
    }
    Ok(rows)
}

/// Human-readable magnitude with one decimal: `4.7G`, `30.1M`.
pub fn si(v: f64) -> String {
    let (scaled, unit) = if v >= 1e9 {
        (v / 1e9, "G")
    } else if v >= 1e6 {
        (v / 1e6, "M")
    } else if v >= 1e3 {
        (v / 1e3, "K")
    } else {
        (v, "")
    };
    format!("{scaled:.1}{unit}")
}

/// `{variant, input, params, flops, att_flops}` table for every variant and
/// input size, as CSV with a fixed header or as aligned text.
pub fn emit_comparison_table(
    variants: &[VariantSpec],
    sizes: &[(usize, usize)],
    format: TableFormat,
) -> Result<String> {
    let rows = comparison_rows(variants, sizes)?;
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str(CSV_HEADER);
            out.push('\n');
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{},{}x{},{},{},{}",
                    r.variant, r.input.0, r.input.1, r.params, r.flops, r.att_flops
                );
            }
        }
        TableFormat::Text => {
            let _ = writeln!(
                out,
                "{:<8} {:>11} {:>9} {:>9} {:>10}",
                "variant", "input", "params", "flops", "att_flops"
            );
            for r in &rows {
                let _ = writeln!(
                    out,
                    "{:<8} {:>11} {:>9} {:>9} {:>10}",
                    r.variant,
                    format!("{}x{}", r.input.0, r.input.1),
                    si(r.params as f64),
                    si(r.flops as f64),
                    si(r.att_flops as f64)
                );
            }
        }
    }
    Ok(out)
}

impl fmt::Display for FlopsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for cat in Category::ALL {
            writeln!(f, "{:<12} {:>16}", cat.as_str(), self.category_total(cat))?;
        }
        writeln!(f, "{:<12} {:>16}", "headline", self.headline())
    }
}

/// The `n` layers with the most headline MACs, largest first.
pub fn top_layers(report: &FlopsReport, n: usize) -> Vec<(String, u64)> {
    let mut v: Vec<_> = report
        .records
        .iter()
        .filter(|r| r.category.in_headline())
        .map(|r| (r.name.to_string(), r.macs))
        .collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.truncate(n);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn single_linear_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        store.insert("fc.weight", Tensor::zeros([4, 3])).unwrap();
        store.insert("fc.bias", Tensor::zeros([3])).unwrap();
        assert_eq!(count_params(&store), 15);
    }

    #[test]
    fn pointwise_conv_macs() {
        let mut ct = Counter {
            report: FlopsReport::default(),
        };
        let out = ct.conv("pw".into(), (128, 128), 64, 64, 1, 1, 0, 1);
        assert_eq!(out, (128, 128));
        assert_eq!(ct.report.headline(), 67_108_864);
        assert_eq!(ct.report.records.len(), 1);
    }

    #[test]
    fn layout_count_matches_built_store() {
        let spec = VariantSpec::registered("micro", Task::Segmentation, 2).unwrap();
        let store = model::build::<f32>(&spec, 0).unwrap();
        assert_eq!(count_params(&store), count_params_spec(&spec));
    }

    #[test]
    fn lrsa_cost_matches_instrumented_layer() {
        let (c, side) = (64, 128);
        let p = CostParams::new(side * side, c);
        let instrumented = measure_scheme(CostScheme::Lrsa, side, side, &p, 32).unwrap();
        let model = scheme_cost("lrsa", &p).unwrap();
        let rel = (model.macs - instrumented as f64).abs() / instrumented as f64;
        assert!(rel < 0.01, "{} vs {instrumented}", model.macs);
    }

    #[test]
    fn quadratic_costs_match_instrumented_layers() {
        let (c, side) = (32, 32);
        let p = CostParams::new(side * side, c);
        for scheme in [CostScheme::Vanilla, CostScheme::Downsampled] {
            let measured = measure_scheme(scheme, side, side, &p, 16).unwrap() as f64;
            let model = scheme_cost(scheme.as_str(), &p).unwrap().macs;
            assert!((model - measured).abs() / measured < 0.01, "{scheme}: {model} vs {measured}");
        }
        assert!(matches!(measure_scheme(CostScheme::Window, 8, 8, &p, 16), Err(Error::Usage(_))));
        assert!(matches!(measure_scheme(CostScheme::Vanilla, 128, 128, &p, 16), Err(Error::Usage(_))));
    }

    #[test]
    fn scheme_growth() {
        let at = |s: &str, n: usize| scheme_cost(s, &CostParams::new(n, 64)).unwrap().macs;
        let n = 1 << 16;
        assert!(at("lrsa", 2 * n) / at("lrsa", n) < 2.05);
        let r = at("vanilla", 2 * n) / at("vanilla", n);
        assert!((r - 4.0).abs() < 0.05, "{r}");
        assert!(at("window", 2 * n) / at("window", n) <= 2.0 + 1e-12);
    }

    #[test]
    fn scheme_errors() {
        assert!(matches!(scheme_cost("swin", &CostParams::new(4, 4)), Err(Error::Config(_))));
        let mut p = CostParams::new(4, 4);
        p.ratio = 0.0;
        assert!(scheme_cost("downsampled", &p).is_err());
        assert!(matches!("tsv".parse::<TableFormat>(), Err(Error::Config(_))));
    }

    #[test]
    fn cost_model_rendering() {
        let lrsa = CostModel::for_scheme(CostScheme::Lrsa).to_string();
        assert_eq!(lrsa, "5·N·C + 4·C^2·m + 2·C·m^2");
        let ds = CostModel::for_scheme(CostScheme::Downsampled).to_string();
        assert_eq!(ds, "2·N·C^2 + 2·N·C^2/s_r^2 + 2·N^2·C/s_r^2 + 1·N·C");
    }

    #[test]
    fn csv_table_shape() {
        let spec = VariantSpec::registered("micro", Task::Segmentation, 2).unwrap();
        let csv = emit_comparison_table(core::slice::from_ref(&spec), &[(64, 64), (128, 96)], TableFormat::Csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("micro,128x96,"));
        assert_eq!(csv, emit_comparison_table(&[spec], &[(64, 64), (128, 96)], TableFormat::Csv).unwrap());
    }

    #[test]
    fn flops_grow_with_input_and_params_do_not() {
        let spec = VariantSpec::registered("micro", Task::Segmentation, 2).unwrap();
        let small = count_flops(&spec, 64, 64).unwrap();
        let large = count_flops(&spec, 128, 128).unwrap();
        assert!(large.headline() > small.headline());
        assert!(attention_flops(&large) < 2 * attention_flops(&small) * 4);
        assert!(matches!(count_flops(&spec, 64, 48), Err(Error::Data(_))));
        let total: u64 = large.records.iter().map(|r| r.macs).sum();
        assert_eq!(total, large.totals().total());
    }

    #[test]
    fn top_layers_are_sorted() {
        let spec = VariantSpec::registered("micro", Task::Segmentation, 2).unwrap();
        let r = count_flops(&spec, 64, 64).unwrap();
        let top = top_layers(&r, 5);
        assert_eq!(top.len(), 5);
        assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
    }

    #[test]
    fn si_units() {
        assert_eq!(si(4.7e9), "4.7G");
        assert_eq!(si(30_123_456.0), "30.1M");
        assert_eq!(si(999.0), "999.0");
    }
}

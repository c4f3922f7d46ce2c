//! Finite-difference verification of the tape's gradients.
//!
//! Every check runs in `f64`. Inputs live in a [`ParamStore`] so operators,
//! blocks and whole models are verified the same way: the analytic gradient
//! from one backward pass is compared against central differences over all
//! (or a sample of) coordinates.
//!
//! The error of a check is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over the checked
//! coordinates, so coordinates with vanishing gradients cannot dominate it.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::attention::{self, AttentionConfig, PyramidSource, Scheme};
use crate::model::{self, Bound, ParamStore, Task, VariantSpec};
use crate::rng::Stream;
use crate::{Result, Tape, Tensor, Var};

/// Central-difference step.
pub const STEP: f64 = 1e-4;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-3;

/// `∂f/∂xᵢ ≈ (f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], eps: f64) -> Result<Vec<f64>> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x)?;
        x[i] = orig - eps;
        let minus = f(&x)?;
        x[i] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| libm::sqrt(v.map(|x| x * x).sum::<f64>());
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub coords: usize,
    pub rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_err < tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckReport> {
        self.checks.iter().filter(|c| !c.passed(self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let verdict = if c.passed(self.tolerance) { "ok" } else { "FAIL" };
            writeln!(f, "{:<28} {:>6} coords  rel_err {:.3e}  {verdict}", c.name, c.coords, c.rel_err)?;
        }
        Ok(())
    }
}

/// Picks up to `limit` distinct coordinates of a tensor, or all of them.
fn sample_coords(seed: u64, name: &str, numel: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < numel => {
            let mut rng = Stream::new(seed, &format!("gradcheck/{name}"));
            let mut picked = BTreeSet::new();
            while picked.len() < k {
                picked.insert(rng.int(0, numel - 1));
            }
            picked.into_iter().collect()
        }
        _ => (0..numel).collect(),
    }
}

/// Compares the tape gradient of `loss` with central differences for every
/// tensor in `inputs`, checking at most `per_tensor` coordinates of each.
pub fn check<F>(name: &str, mut inputs: ParamStore<f64>, per_tensor: Option<usize>, seed: u64, loss: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &inputs, true);
    let out = loss(&mut tape, &bound)?;
    let vars: Vec<(String, Var)> = bound.iter().map(|(n, v)| (n.to_string(), v)).collect();
    let grads = tape.backward(out)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, store, false);
        let out = loss(&mut tape, &bound)?;
        tape.value(out).item()
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (pname, var) in vars {
        let grad = grads.get(var).map(|g| g.data().to_vec()).unwrap_or_default();
        let numel = inputs.get(&pname).map_or(0, Tensor::numel);
        for i in sample_coords(seed, &pname, numel, per_tensor) {
            let mut at = |delta: f64| -> Result<f64> {
                let orig = inputs.get(&pname).map_or(0.0, |t| t.data()[i]);
                if let Some(t) = inputs.get_mut(&pname) {
                    t.data_mut()[i] = orig + delta;
                }
                let v = eval(&inputs);
                if let Some(t) = inputs.get_mut(&pname) {
                    t.data_mut()[i] = orig;
                }
                v
            };
            let plus = at(STEP)?;
            let minus = at(-STEP)?;
            numeric.push((plus - minus) / (2.0 * STEP));
            analytic.push(grad.get(i).copied().unwrap_or(0.0));
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        coords: analytic.len(),
        rel_err: relative_error(&analytic, &numeric),
    })
}

/// Store of standard-normal tensors scaled by `std`.
fn random_inputs(seed: u64, std: f64, entries: &[(&str, &[usize])]) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    for &(name, shape) in entries {
        let mut rng = Stream::new(seed, name);
        store.insert(name, Tensor::from_fn(shape.to_vec(), |_| rng.normal() * std))?;
    }
    Ok(store)
}

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`, so every output element
/// contributes to the gradient with a distinct weight.
pub fn probe(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let n = tape.value(out).numel();
    let mut rng = Stream::new(seed, "gradcheck/probe");
    let weights = tape.constant(Tensor::from_fn(vec![n, 1], |_| rng.normal()));
    let flat = tape.reshape(out, &[1, n])?;
    let dot = tape.matmul(flat, weights)?;
    tape.sum(dot)
}

fn attention_store(seed: u64, c: usize, extra: &[(&str, &[usize])]) -> Result<ParamStore<f64>> {
    let w = [c, c];
    let b = [c];
    let mut entries: Vec<(&str, &[usize])> = vec![
        ("attn.q.weight", &w),
        ("attn.q.bias", &b),
        ("attn.k.weight", &w),
        ("attn.k.bias", &b),
        ("attn.v.weight", &w),
        ("attn.v.bias", &b),
        ("attn.o.weight", &w),
        ("attn.o.bias", &b),
    ];
    entries.extend_from_slice(extra);
    random_inputs(seed, 0.5, &entries)
}

/// Sampled coordinates per parameter tensor in the whole-model check.
pub const MODEL_COORDS_PER_TENSOR: usize = 6;

/// Runs the full gradient suite: every tape operator, each attention scheme,
/// one basic block and the `micro` segmentation model at 64×64.
pub fn run_suite(seed: u64, tolerance: f64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    let s = seed;
    let x234: &[usize] = &[2, 3, 4];

    macro_rules! op {
        ($name:expr, $entries:expr, |$tape:ident, $p:ident| $body:expr) => {
            checks.push(check($name, random_inputs(s, 1.0, $entries)?, None, s, |$tape, $p| {
                let out = $body;
                probe($tape, out, s)
            })?);
        };
    }

    op!("add", &[("x", x234), ("y", x234)], |t, p| t.add(p.var("x")?, p.var("y")?)?);
    op!("scale", &[("x", x234)], |t, p| t.scale(p.var("x")?, -1.5)?);
    op!("add_bias", &[("x", x234), ("b", &[4])], |t, p| t.add_bias(p.var("x")?, p.var("b")?)?);
    op!("mul_last", &[("x", x234), ("g", &[4])], |t, p| t.mul_last(p.var("x")?, p.var("g")?)?);
    op!("matmul", &[("a", x234), ("b", &[2, 4, 5])], |t, p| t.matmul(p.var("a")?, p.var("b")?)?);
    op!("matmul_shared", &[("a", x234), ("b", &[4, 5])], |t, p| t.matmul(p.var("a")?, p.var("b")?)?);
    op!("linear", &[("x", x234), ("w", &[4, 5]), ("b", &[5])], |t, p| {
        t.linear(p.var("x")?, p.var("w")?, Some(p.var("b")?))?
    });
    op!("permute", &[("x", x234)], |t, p| t.permute(p.var("x")?, &[2, 0, 1])?);
    op!("transpose", &[("x", x234)], |t, p| t.transpose(p.var("x")?)?);
    op!("reshape", &[("x", x234)], |t, p| t.reshape(p.var("x")?, &[4, 6])?);
    op!("to_tokens", &[("x", &[2, 3, 2, 3])], |t, p| t.to_tokens(p.var("x")?)?);
    op!("from_tokens", &[("x", &[2, 6, 3])], |t, p| t.from_tokens(p.var("x")?, 2, 3)?);
    op!("softmax_mid", &[("x", x234)], |t, p| t.softmax(p.var("x")?, 1)?);
    op!("softmax_last", &[("x", x234)], |t, p| t.softmax(p.var("x")?, 2)?);
    op!("layer_norm", &[("x", x234), ("g", &[4]), ("b", &[4])], |t, p| {
        t.layer_norm(p.var("x")?, p.var("g")?, p.var("b")?, 1e-6)?
    });
    op!("channel_norm", &[("x", &[2, 3, 2, 3]), ("g", &[3]), ("b", &[3])], |t, p| {
        t.channel_norm(p.var("x")?, p.var("g")?, p.var("b")?, 1e-6)?
    });
    op!("gelu", &[("x", x234)], |t, p| t.gelu(p.var("x")?)?);
    op!("conv_strided", &[("x", &[2, 3, 7, 6]), ("w", &[4, 3, 3, 3]), ("b", &[4])], |t, p| {
        t.conv2d(p.var("x")?, p.var("w")?, Some(p.var("b")?), 2, 1, 1)?
    });
    op!("conv_stem", &[("x", &[1, 3, 9, 8]), ("w", &[2, 3, 7, 7])], |t, p| {
        t.conv2d(p.var("x")?, p.var("w")?, None, 4, 3, 1)?
    });
    op!("conv_depthwise", &[("x", &[1, 4, 5, 5]), ("w", &[4, 1, 3, 3]), ("b", &[4])], |t, p| {
        t.conv2d(p.var("x")?, p.var("w")?, Some(p.var("b")?), 1, 1, 4)?
    });
    op!("conv_grouped", &[("x", &[1, 4, 4, 5]), ("w", &[6, 2, 3, 3])], |t, p| {
        t.conv2d(p.var("x")?, p.var("w")?, None, 1, 1, 2)?
    });
    op!("conv_pointwise", &[("x", &[2, 3, 3, 4]), ("w", &[5, 3, 1, 1]), ("b", &[5])], |t, p| {
        t.conv2d(p.var("x")?, p.var("w")?, Some(p.var("b")?), 1, 0, 1)?
    });
    op!("adaptive_avg_pool", &[("x", &[2, 2, 5, 7])], |t, p| t.adaptive_avg_pool2d(p.var("x")?, 2, 3)?);
    op!("bilinear_up", &[("x", &[1, 2, 3, 4])], |t, p| t.bilinear_resize(p.var("x")?, 7, 9)?);
    op!("bilinear_down", &[("x", &[1, 2, 8, 6])], |t, p| t.bilinear_resize(p.var("x")?, 3, 4)?);
    op!("concat", &[("a", &[2, 1, 3]), ("b", &[2, 2, 3])], |t, p| t.concat(&[p.var("a")?, p.var("b")?], 1)?);
    op!("sum", &[("x", x234)], |t, p| t.sum(p.var("x")?)?);
    op!("mean", &[("x", x234)], |t, p| t.mean(p.var("x")?)?);

    let mut rng = Stream::new(s, "gradcheck/labels");
    let labels: Vec<u32> = (0..2 * 3 * 2).map(|_| rng.int(0, 2) as u32).collect();
    checks.push(check("cross_entropy", random_inputs(s, 1.0, &[("x", &[2, 3, 2, 3])])?, None, s, |t, p| {
        t.cross_entropy(p.var("x")?, &labels)
    })?);

    let qkv: &[usize] = &[1, 5, 8];
    checks.push(check(
        "mhsa_core",
        random_inputs(s, 1.0, &[("q", qkv), ("k", &[1, 3, 8]), ("v", &[1, 3, 8])])?,
        None,
        s,
        |t, p| {
            let out = attention::mhsa_core(t, p.var("q")?, p.var("k")?, p.var("v")?, 2)?;
            probe(t, out, s)
        },
    )?);

    let c = 8;
    let tokens: &[usize] = &[1, 16, c];
    checks.push(check("attend_vanilla", attention_store(s, c, &[("x", tokens)])?, None, s, |t, p| {
        let ap = p.scope("attn").attention_params()?;
        let out = attention::attend_vanilla(t, p.var("x")?, &ap, 2)?;
        probe(t, out, s)
    })?);
    checks.push(check("attend_downsampled", attention_store(s, c, &[("x", tokens)])?, None, s, |t, p| {
        let ap = p.scope("attn").attention_params()?;
        let out = attention::attend_downsampled(t, p.var("x")?, (4, 4), &ap, 2, 2)?;
        probe(t, out, s)
    })?);

    let map: &[usize] = &[1, c, 6, 5];
    let lrsa_cases = [
        ("attend_lrsa", true, PyramidSource::Input),
        ("attend_lrsa_pooled_pyramid", true, PyramidSource::Pooled),
        ("attend_lrsa_no_pyramid", false, PyramidSource::Input),
    ];
    for (name, pyramid, source) in lrsa_cases {
        let mut cfg = AttentionConfig::lrsa(c, 4, 3).with_pyramid(vec![3, 2, 1]);
        cfg.kv_pyramid = pyramid;
        cfg.pyramid_source = source;
        checks.push(check(name, attention_store(s, c, &[("x", map)])?, None, s, |t, p| {
            let ap = p.scope("attn").attention_params()?;
            let out = attention::attend_lrsa(t, p.var("x")?, &ap, &cfg)?;
            probe(t, out, s)
        })?);
    }
    let cfg = AttentionConfig::lrsa(c, 4, 4);
    checks.push(check("attend_lrsa_bypass", attention_store(s, c, &[("x", &[1, c, 3, 4])])?, None, s, |t, p| {
        let ap = p.scope("attn").attention_params()?;
        let out = attention::attend_lrsa(t, p.var("x")?, &ap, &cfg)?;
        probe(t, out, s)
    })?);
    let mut cfg = AttentionConfig::lrsa(c, 4, 4);
    cfg.scheme = Scheme::Downsampled { ratio: 3 };
    checks.push(check("attend_dispatch", attention_store(s, c, &[("x", map)])?, None, s, |t, p| {
        let ap = p.scope("attn").attention_params()?;
        let out = attention::attend(t, p.var("x")?, &ap, &cfg)?;
        probe(t, out, s)
    })?);

    let spec = VariantSpec::registered("micro", Task::Segmentation, 2)?;
    checks.push(block_check(&spec, s)?);
    checks.push(micro_check(&spec, s)?);

    Ok(SuiteReport { checks, tolerance })
}

/// First block of stage 1 on an 8×8 map, so pooling and the pyramid are live.
fn block_check(spec: &VariantSpec, seed: u64) -> Result<CheckReport> {
    let full = model::build::<f64>(spec, seed)?;
    let cfg = spec.stage_block(0);
    let c = cfg.attn.channels;
    let mut store = random_inputs(seed, 1.0, &[("x", &[1, c, 8, 8])])?;
    let mut rng = Stream::new(seed, "gradcheck/block");
    for (name, t) in full.iter().filter(|(n, _)| n.starts_with("stage1.block1.")) {
        // perturb so biases and gains are not at their special initial values
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
        store.insert(name, t)?;
    }
    check("basic_block", store, None, seed, |t, p| {
        let out = model::basic_block_forward(t, p.var("x")?, &p.scope("stage1.block1"), &cfg)?;
        probe(t, out, seed)
    })
}

/// Whole `micro` segmentation model at 64×64 with cross-entropy on random
/// labels, sampling a few coordinates of every parameter tensor.
fn micro_check(spec: &VariantSpec, seed: u64) -> Result<CheckReport> {
    let store = model::build::<f64>(spec, seed)?;
    let size = 64;
    let mut rng = Stream::new(seed, "gradcheck/micro");
    let image = Tensor::from_fn(vec![1, 3, size, size], |_| rng.uniform());
    let labels: Vec<u32> = (0..size * size).map(|_| rng.int(0, 1) as u32).collect();
    check("micro_segmentation", store, Some(MODEL_COORDS_PER_TENSOR), seed, |t, p| {
        let img = t.constant(image.clone());
        let logits = model::segment_forward(t, img, p, spec)?;
        t.cross_entropy(logits, &labels)
    })
}

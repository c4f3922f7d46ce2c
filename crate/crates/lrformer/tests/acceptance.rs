//! Acceptance run: one verdict line per criterion, details indented below.
//! Exits non-zero if any gated criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lrformer_core::analyzer::{self, CostParams};
use lrformer_core::attention::{self, AttentionConfig, AttentionParams, Linear};
use lrformer_core::gradcheck;
use lrformer_core::model::{self, Bound, Task, VariantSpec};
use lrformer_core::rng::Stream;
use lrformer_core::{Real, Tape, Tensor};

struct Verdict {
    pass: bool,
    details: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self {
            pass: true,
            details: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.pass &= ok;
        self.details.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }
}

fn within(actual: f64, target: f64, tol: f64) -> (bool, f64) {
    let rel = actual / target - 1.0;
    (rel.abs() <= tol, rel)
}

fn spec(name: &str, task: Task) -> VariantSpec {
    let classes = match task {
        Task::Segmentation => 150,
        Task::Classification => 1000,
    };
    VariantSpec::registered(name, task, classes).unwrap()
}

fn parameter_counts() -> Verdict {
    let mut v = Verdict::new();
    let targets = [
        ("T", Task::Segmentation, 13e6),
        ("S", Task::Segmentation, 32e6),
        ("B", Task::Segmentation, 69e6),
        ("L", Task::Segmentation, 113e6),
        ("T", Task::Classification, 13e6),
        ("S", Task::Classification, 30e6),
        ("B", Task::Classification, 62e6),
        ("L", Task::Classification, 101e6),
    ];
    for (name, task, target) in targets {
        let start = Instant::now();
        let s = spec(name, task);
        let p = analyzer::count_params_spec(&s) as f64;
        let took = start.elapsed();
        let (ok, rel) = within(p, target, 0.10);
        v.check(
            ok && took < Duration::from_secs(1),
            format!("{name} {}: {:.2}M vs {:.0}M ({:+.1}%), {:.1} ms", task.as_str(), p / 1e6, target / 1e6, rel * 100.0, took.as_secs_f64() * 1e3),
        );
    }
    v
}

fn flops_counts() -> Verdict {
    let mut v = Verdict::new();
    let targets = [
        ("S", Task::Classification, 224, 4.7e9),
        ("S", Task::Segmentation, 512, 40e9),
        ("S", Task::Segmentation, 1024, 145e9),
        ("S", Task::Segmentation, 1536, 319e9),
        ("T", Task::Segmentation, 512, 17e9),
    ];
    for (name, task, side, target) in targets {
        let f = analyzer::count_flops(&spec(name, task), side, side).unwrap().headline() as f64;
        let (ok, rel) = within(f, target, 0.15);
        v.check(ok, format!("{name} {} @{side}²: {:.1}G vs {:.1}G ({:+.1}%)", task.as_str(), f / 1e9, target / 1e9, rel * 100.0));
    }
    v
}

fn attention_scaling() -> Verdict {
    let mut v = Verdict::new();
    let s = spec("S", Task::Segmentation);
    let mut att = Vec::new();
    for (side, target) in [(512, 0.8e9), (1024, 0.9e9), (1536, 1.1e9)] {
        let a = analyzer::attention_flops(&analyzer::count_flops(&s, side, side).unwrap()) as f64;
        let (ok, rel) = within(a, target, 0.25);
        v.check(ok, format!("LRSA attention @{side}²: {:.2}G vs {:.1}G ({:+.1}%)", a / 1e9, target / 1e9, rel * 100.0));
        att.push(a);
    }
    let growth = att[2] / att[0];
    v.check(growth <= 1.5, format!("LRSA growth 512²→1536²: {growth:.2}× (limit 1.5×)"));
    let stages: Vec<_> = s
        .stages
        .iter()
        .zip(analyzer::DOWNSAMPLE_RATIOS)
        .map(|(st, r)| (st.channels, st.depth, r))
        .collect();
    let lo = analyzer::downsampled_backbone_attention(&stages, 512, 512) as f64;
    let hi = analyzer::downsampled_backbone_attention(&stages, 1536, 1536) as f64;
    v.check(
        hi / lo >= 50.0,
        format!("downsampling backbone 512²→1536²: {:.1}G → {:.1}G, {:.1}× (need ≥ 50×)", lo / 1e9, hi / 1e9, hi / lo),
    );
    let layer = |n: usize| analyzer::scheme_cost("downsampled", &CostParams::new(n, 64)).unwrap().macs;
    let (a, b) = (layer(128 * 128), layer(384 * 384));
    v.check(b / a >= 50.0, format!("single downsampled layer, stride-4 map: {:.1}×", b / a));
    v
}

fn random_attention(tape: &mut Tape<f64>, seed: u64, c: usize) -> AttentionParams {
    let mut rng = Stream::new(seed, "acceptance/attention");
    let mut lin = |tape: &mut Tape<f64>| Linear {
        weight: tape.constant(Tensor::from_fn([c, c], |_| rng.normal() * 0.3)),
        bias: Some(tape.constant(Tensor::from_fn([c], |_| rng.normal() * 0.1))),
    };
    AttentionParams {
        q: lin(tape),
        k: lin(tape),
        v: lin(tape),
        o: lin(tape),
    }
}

fn oracle_equivalence() -> Verdict {
    let mut v = Verdict::new();
    let c = 32;
    let cfg = AttentionConfig::lrsa(c, 8, 16);
    let sizes = [(16, 16), (8, 8), (10, 20), (3, 7)];
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let (h, w) = sizes[seed as usize % sizes.len()];
        let mut tape = Tape::<f64>::new();
        let p = random_attention(&mut tape, seed, c);
        let mut rng = Stream::new(seed, "acceptance/map");
        let x = tape.constant(Tensor::from_fn([1, c, h, w], |_| rng.normal()));
        let lrsa = attention::attend_lrsa(&mut tape, x, &p, &cfg).unwrap();
        let tokens = tape.to_tokens(x).unwrap();
        let van = attention::attend_vanilla(&mut tape, tokens, &p, cfg.heads()).unwrap();
        let van = tape.from_tokens(van, h, w).unwrap();
        worst = worst.max(tape.value(lrsa).max_abs_diff(tape.value(van)).unwrap());
    }
    v.check(worst < 1e-5, format!("20 seeds, H·W ≤ 256, pyramid off: max |LRSA − vanilla| = {worst:.2e}"));
    v
}

fn gradient_suite() -> Verdict {
    let mut v = Verdict::new();
    let start = Instant::now();
    let report = gradcheck::run_suite(0, gradcheck::TOLERANCE).unwrap();
    let took = start.elapsed();
    for f in report.failures() {
        v.check(false, format!("{}: rel err {:.2e}", f.name, f.rel_err));
    }
    v.check(
        report.passed(),
        format!("{} checks, worst relative error {:.2e} (tolerance {:e})", report.checks.len(), report.worst(), gradcheck::TOLERANCE),
    );
    v.check(took < Duration::from_secs(300), format!("runtime {:.1}s (limit 300s)", took.as_secs_f64()));
    v
}

fn fixed_score_matrix() -> Verdict {
    let mut v = Verdict::new();
    let s = spec("S", Task::Segmentation);
    let cfg = s.attention(64, 32);
    let mut shapes = Vec::new();
    for side in [64, 128, 256] {
        let mut tape = Tape::<f64>::new();
        let p = random_attention(&mut tape, 0, 64);
        let x = tape.constant(Tensor::full([1, 64, side, side], 0.25));
        attention::attend_lrsa(&mut tape, x, &p, &cfg).unwrap();
        let sh = tape.score_shapes().to_vec();
        v.check(sh.len() == 1 && sh[0][0] == 256, format!("{side}²: score matrix {:?}", sh));
        shapes.extend(sh);
    }
    v.check(shapes.windows(2).all(|w| w[0] == w[1]), "score matrix shape constant across inputs".into());
    v
}

fn lrformer(args: &[&str]) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_lrformer")).args(args).output().unwrap();
    (o.status.code().unwrap_or(-1), String::from_utf8(o.stdout).unwrap())
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.split_whitespace().next()))
        .and_then(|v| v.parse().ok())
        .unwrap_or(f64::NAN)
}

fn train(dir: &Path, seed: u64, tag: &str) -> (String, Vec<u8>, Duration) {
    let out = dir.join(format!("seed{seed}{tag}.lrw"));
    let start = Instant::now();
    let seed = seed.to_string();
    let (code, text) = lrformer(&[
        "train-toy", "--variant", "micro", "--steps", "200", "--batch", "4", "--size", "64", "--seed", &seed, "--out",
        out.to_str().unwrap(),
    ]);
    let took = start.elapsed();
    assert_eq!(code, 0, "train-toy failed");
    (text, std::fs::read(out).unwrap(), took)
}

fn trainability(dir: &Path) -> (Verdict, Vec<(String, Vec<u8>)>) {
    let mut v = Verdict::new();
    let mut runs = Vec::new();
    let mut total = Duration::ZERO;
    for seed in 0..3 {
        let (text, bytes, took) = train(dir, seed, "");
        total += took;
        let acc = field(&text, "pixel_accuracy");
        let miou = field(&text, "miou");
        v.check(
            acc >= 0.90 && miou >= 0.75,
            format!("seed {seed}: held-out pixel accuracy {acc:.3}, mIoU {miou:.3}, final loss {:.4}, {:.1}s", field(&text, "final_loss"), took.as_secs_f64()),
        );
        runs.push((text, bytes));
    }
    v.check(total < Duration::from_secs(600), format!("total training time {:.1}s (limit 600s)", total.as_secs_f64()));
    (v, runs)
}

fn determinism(dir: &Path, first: &(String, Vec<u8>)) -> Verdict {
    let mut v = Verdict::new();
    let (text, bytes, _) = train(dir, 0, "-again");
    v.check(bytes == first.1, format!("checkpoint bytes identical across runs ({} bytes)", bytes.len()));
    v.check(text == first.0, "train-toy metrics identical across runs".into());
    let w = dir.join("seed0.lrw");
    let eval = || lrformer(&["eval-toy", "--weights", w.to_str().unwrap(), "--seed", "3"]).1;
    v.check(eval() == eval(), "eval-toy metrics identical across runs".into());
    let csv = || lrformer(&["flops", "--variant", "T,S", "--input", "512", "1024", "--format", "csv"]).1;
    let cmp = || lrformer(&["compare-attention", "--format", "csv", "--measure", "--sizes", "16,32"]).1;
    v.check(csv() == csv() && cmp() == cmp(), "CSV outputs identical across runs".into());
    v
}

fn counted_forward<T: Real>(spec: &VariantSpec, side: usize) -> Verdict {
    let mut v = Verdict::new();
    let store = model::build::<T>(spec, 0).unwrap();
    let mut tape = Tape::<T>::new();
    let bound = Bound::new(&mut tape, &store, false);
    let x = tape.constant(Tensor::full([1, 3, side, side], T::from_f64(0.5)));
    model::segment_forward(&mut tape, x, &bound, spec).unwrap();
    let report = analyzer::count_flops(spec, side, side).unwrap();
    let same = tape.macs() == report.totals();
    v.check(same, format!("{} @{side}²: tape {} MACs, analytic {}", spec.name, tape.macs().total(), report.totals().total()));
    v
}

fn report(label: &str, v: &Verdict) {
    println!("{label} ... {}", if v.pass { "PASS" } else { "FAIL" });
    for d in &v.details {
        println!("    {d}");
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut gated = Vec::new();
    let mut run = |label: &str, v: Verdict| {
        report(label, &v);
        gated.push(v.pass);
    };
    run("criterion 1: parameter counts", parameter_counts());
    run("criterion 2: FLOPs", flops_counts());
    run("criterion 3: attention FLOPs scaling", attention_scaling());
    run("criterion 4: LRSA equals vanilla below the pooled size", oracle_equivalence());
    run("criterion 5: gradient suite", gradient_suite());
    run("criterion 6: fixed score matrix", fixed_score_matrix());
    let (v7, runs) = trainability(dir.path());
    run("criterion 7: toy trainability", v7);
    run("criterion 8: determinism", determinism(dir.path(), &runs[0]));
    println!("criterion 9: full-scale accuracy and memory figures ... N/A (not acceptance targets)");

    let mut extra = counted_forward::<f64>(&VariantSpec::registered("micro", Task::Segmentation, 2).unwrap(), 64);
    let s = counted_forward::<f32>(&spec("S", Task::Segmentation), 128);
    extra.pass &= s.pass;
    extra.details.extend(s.details);
    report("extra: instrumented MACs equal analytic counts", &extra);

    let passed = gated.iter().filter(|p| **p).count();
    println!("\n{passed}/{} gated criteria passed", gated.len());
    if passed != gated.len() || !extra.pass {
        std::process::exit(1);
    }
}

//! The `lrformer` command line.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use lrformer_core::analyzer::{self, CostParams, CostScheme, TableFormat};
use lrformer_core::model::{self, ParamStore, Task, VariantSpec};
use lrformer_core::toyseg::{self, Metrics, TrainConfig};
use lrformer_core::{gradcheck, Error as CoreError};

use crate::error::{exit, CommandError};
use crate::netpbm::{self, Mask};
use crate::weights;

type Result<T, E = CommandError> = std::result::Result<T, E>;

#[derive(Parser, Debug)]
#[command(name = "lrformer", version, about = "LRFormer analysis, gradient checks and toy segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter and MAC summary of one variant at one input size
    Info(InfoArgs),
    /// Parameter/MAC comparison table over variants and input sizes
    Flops(FlopsArgs),
    /// Analytic cost of attention schemes at several token counts
    CompareAttention(CompareArgs),
    /// Finite-difference check of every operator and the micro model (64-bit)
    Gradcheck(GradcheckArgs),
    /// Train a variant on synthetic shapes and report held-out metrics
    TrainToy(TrainArgs),
    /// Evaluate saved weights on held-out synthetic shapes
    EvalToy(EvalArgs),
    /// Predict a label mask for one PPM image
    Segment(SegmentArgs),
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_format(s: &str) -> Result<TableFormat, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_scheme(s: &str) -> Result<CostScheme, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

/// `512` (square) or `512x1024` (height × width).
fn parse_extent(s: &str) -> Result<(usize, usize), String> {
    let side = |v: &str| match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("`{s}` is not a positive size (use N or HxW)")),
    };
    match s.split_once('x') {
        Some((h, w)) => Ok((side(h)?, side(w)?)),
        None => side(s).map(|n| (n, n)),
    }
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// T, S, B, L, XL or micro
    #[arg(long)]
    variant: String,
    /// seg or cls
    #[arg(long, default_value = "seg", value_parser = parse_task)]
    task: Task,
    /// Output classes [default: 150 for seg, 1000 for cls]
    #[arg(long)]
    classes: Option<usize>,
}

impl ModelArgs {
    fn spec(&self) -> Result<VariantSpec> {
        let classes = self.classes.unwrap_or(match self.task {
            Task::Segmentation => 150,
            Task::Classification => 1000,
        });
        Ok(VariantSpec::registered(&self.variant, self.task, classes)?)
    }
}

#[derive(Args, Debug)]
struct InfoArgs {
    #[arg(long, default_value = "S")]
    variant: String,
    #[arg(long, default_value = "seg", value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    classes: Option<usize>,
    /// Input height and optional width [default: 512 for seg, 224 for cls]
    #[arg(long, num_args = 1..=2, value_names = ["H", "W"])]
    input: Vec<usize>,
    /// Number of most expensive layers to list
    #[arg(long, default_value_t = 5)]
    top: usize,
}

#[derive(Args, Debug)]
struct FlopsArgs {
    /// Comma-separated variants
    #[arg(long, value_delimiter = ',', default_value = "S")]
    variant: Vec<String>,
    #[arg(long, default_value = "seg", value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    classes: Option<usize>,
    /// Input sizes, each N or HxW
    #[arg(long, num_args = 1.., value_parser = parse_extent, default_values = ["512", "1024", "1536"])]
    input: Vec<(usize, usize)>,
    /// text or csv
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: TableFormat,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme, default_value = "vanilla,downsampled,lrsa")]
    schemes: Vec<CostScheme>,
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Feature map sizes, each N or HxW
    #[arg(long, num_args = 1.., value_delimiter = ',', value_parser = parse_extent, default_values = ["32", "64", "128"])]
    sizes: Vec<(usize, usize)>,
    /// Pooled token count m for LRSA
    #[arg(long, default_value_t = 256)]
    pooled: usize,
    /// Key/value reduction ratio for downsampled attention
    #[arg(long, default_value_t = 8)]
    ratio: usize,
    /// Window side for window attention
    #[arg(long, default_value_t = 7)]
    window: usize,
    /// Per-head width used by --measure
    #[arg(long, default_value_t = 32)]
    head_dim: usize,
    /// Also run one instrumented layer per row and report its MACs
    #[arg(long)]
    measure: bool,
    #[arg(long, default_value = "text", value_parser = parse_format)]
    format: TableFormat,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = gradcheck::TOLERANCE)]
    tol: f64,
}

#[derive(Args, Debug)]
struct ToyModelArgs {
    #[arg(long, default_value = "micro")]
    variant: String,
    #[arg(long, default_value_t = 2)]
    classes: usize,
}

impl ToyModelArgs {
    fn spec(&self) -> Result<VariantSpec> {
        Ok(VariantSpec::registered(&self.variant, Task::Segmentation, self.classes)?)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ToyModelArgs,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Square image side, a multiple of 32
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Peak learning rate (polynomial decay to zero)
    #[arg(long, default_value_t = 3e-4)]
    lr: f64,
    /// Held-out images used for the reported metrics
    #[arg(long, default_value_t = 16)]
    eval_count: usize,
    /// Where to write the trained weights
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ToyModelArgs,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 16)]
    count: usize,
}

#[derive(Args, Debug)]
struct SegmentArgs {
    #[command(flatten)]
    model: ToyModelArgs,
    #[arg(long)]
    weights: PathBuf,
    /// Binary PPM input
    #[arg(long)]
    image: PathBuf,
    /// Binary PGM output, same extents as the image
    #[arg(long)]
    out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    exit::OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render().ansi());
                    exit::USAGE
                }
            };
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut buf = String::new();
    match command {
        Command::Info(a) => info(&a, &mut buf)?,
        Command::Flops(a) => flops(&a, &mut buf)?,
        Command::CompareAttention(a) => compare_attention(&a, &mut buf)?,
        Command::Gradcheck(a) => {
            // the report is wanted on stdout even when the check fails
            let res = gradcheck_cmd(&a, &mut buf, err);
            emit(out, &buf)?;
            return res;
        }
        Command::TrainToy(a) => train_toy(&a, &mut buf, err)?,
        Command::EvalToy(a) => eval_toy(&a, &mut buf)?,
        Command::Segment(a) => segment(&a, &mut buf)?,
    }
    emit(out, &buf)
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|source| CommandError::Output {
            path: "<stdout>".into(),
            source,
        })
}

fn info(a: &InfoArgs, out: &mut String) -> Result<()> {
    use std::fmt::Write;
    let spec = ModelArgs {
        variant: a.variant.clone(),
        task: a.task,
        classes: a.classes,
    }
    .spec()?;
    let (h, w) = match a.input[..] {
        [] => match a.task {
            Task::Segmentation => (512, 512),
            Task::Classification => (224, 224),
        },
        [s] => (s, s),
        [h, w, ..] => (h, w),
    };
    let params = analyzer::count_params_spec(&spec);
    let report = analyzer::count_flops(&spec, h, w)?;
    let att = analyzer::attention_flops(&report);
    let g = spec.pooled_grid;
    let _ = writeln!(out, "variant    {} ({}, {} classes)", spec.name, spec.task.as_str(), spec.num_classes);
    let _ = writeln!(out, "input      {h}x{w}");
    let _ = writeln!(out, "pooled     {g}x{g}");
    let _ = writeln!(out, "params     {params} ({})", analyzer::si(params as f64));
    let _ = writeln!(out, "flops      {} ({})", report.headline(), analyzer::si(report.headline() as f64));
    let _ = writeln!(out, "attention  {att} ({})", analyzer::si(att as f64));
    let _ = writeln!(out, "\nMACs by category");
    let _ = write!(out, "{report}");
    if a.top > 0 {
        let _ = writeln!(out, "\nlargest layers");
        for (name, macs) in analyzer::top_layers(&report, a.top) {
            let _ = writeln!(out, "{name:<40} {:>9}", analyzer::si(macs as f64));
        }
    }
    Ok(())
}

fn flops(a: &FlopsArgs, out: &mut String) -> Result<()> {
    let specs = a
        .variant
        .iter()
        .map(|v| {
            ModelArgs {
                variant: v.clone(),
                task: a.task,
                classes: a.classes,
            }
            .spec()
        })
        .collect::<Result<Vec<_>>>()?;
    out.push_str(&analyzer::emit_comparison_table(&specs, &a.input, a.format)?);
    Ok(())
}

pub const COMPARE_CSV_HEADER: &str = "scheme,input,tokens,channels,model_macs,measured_macs";

fn compare_attention(a: &CompareArgs, out: &mut String) -> Result<()> {
    use std::fmt::Write;
    if a.channels == 0 || a.pooled == 0 || a.ratio == 0 || a.window == 0 {
        return Err(CommandError::Usage("--channels, --pooled, --ratio and --window must be positive".into()));
    }
    let mut rows = Vec::new();
    for &scheme in &a.schemes {
        for &(h, w) in &a.sizes {
            let p = CostParams {
                pooled: a.pooled as f64,
                ratio: a.ratio as f64,
                window: a.window as f64,
                ..CostParams::new(h * w, a.channels)
            };
            let cost = analyzer::scheme_cost(scheme.as_str(), &p)?;
            let measured = match a.measure {
                true if !matches!(scheme, CostScheme::Window | CostScheme::Factorized) => {
                    Some(analyzer::measure_scheme(scheme, h, w, &p, a.head_dim)?)
                }
                _ => None,
            };
            rows.push((scheme, (h, w), cost.macs, measured));
        }
    }
    match a.format {
        TableFormat::Csv => {
            let _ = writeln!(out, "{COMPARE_CSV_HEADER}");
            for (scheme, (h, w), macs, measured) in &rows {
                let m = measured.map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{scheme},{h}x{w},{},{},{macs:.0},{m}", h * w, a.channels);
            }
        }
        TableFormat::Text => {
            let _ = writeln!(out, "{:<12} {:>11} {:>9} {:>10} {:>10}", "scheme", "input", "tokens", "macs", "measured");
            for (scheme, (h, w), macs, measured) in &rows {
                let m = measured.map_or("-".into(), |v| analyzer::si(v as f64));
                let _ = writeln!(
                    out,
                    "{:<12} {:>11} {:>9} {:>10} {m:>10}",
                    scheme.as_str(),
                    format!("{h}x{w}"),
                    h * w,
                    analyzer::si(*macs)
                );
            }
            let _ = writeln!(out);
            for &scheme in &a.schemes {
                let model = analyzer::CostModel::for_scheme(scheme);
                let _ = writeln!(out, "{:<12} {:<14} {model}", scheme.as_str(), scheme.complexity());
            }
        }
    }
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs, out: &mut String, err: &mut dyn Write) -> Result<()> {
    use std::fmt::Write;
    if a.tol.is_nan() || a.tol <= 0.0 {
        return Err(CommandError::Usage("--tol must be positive".into()));
    }
    let start = Instant::now();
    let report = gradcheck::run_suite(a.seed, a.tol)?;
    let _ = writeln!(err, "gradient suite finished in {:.1}s", start.elapsed().as_secs_f64());
    let _ = write!(out, "{report}");
    let failed = report.failures().count();
    let _ = writeln!(
        out,
        "{} checks, {failed} failed, worst relative error {:.3e} (tolerance {:e})",
        report.checks.len(),
        report.worst(),
        a.tol
    );
    if failed > 0 {
        return Err(CommandError::GradientCheck {
            failed,
            total: report.checks.len(),
            tolerance: a.tol,
        });
    }
    Ok(())
}

fn write_metrics(out: &mut String, m: &Metrics) {
    use std::fmt::Write;
    let _ = writeln!(out, "pixel_accuracy {:.6}", m.pixel_accuracy);
    let _ = writeln!(out, "miou {:.6}", m.miou);
    for (k, iou) in m.iou.iter().enumerate() {
        let _ = writeln!(out, "iou[{k}] {iou:.6}");
    }
}

fn train_toy(a: &TrainArgs, out: &mut String, err: &mut dyn Write) -> Result<()> {
    use std::fmt::Write;
    let spec = a.model.spec()?;
    if a.eval_count == 0 {
        return Err(CommandError::Usage("--eval-count must be at least 1".into()));
    }
    let mut cfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        batch: a.batch,
        size: a.size,
        classes: a.model.classes,
        ..TrainConfig::default()
    };
    cfg.optimizer.lr = a.lr;
    let start = Instant::now();
    let outcome = toyseg::train_toy(&spec, &cfg)?;
    let _ = writeln!(err, "trained {} steps in {:.1}s", a.steps, start.elapsed().as_secs_f64());
    if let Some(path) = &a.out {
        weights::save_weights(&outcome.store, path)?;
    }
    let heldout = toyseg::generate_heldout(a.seed, a.eval_count, a.size, a.model.classes)?;
    let metrics = toyseg::evaluate(&outcome.store, &spec, &heldout)?;
    let _ = writeln!(out, "final_loss {:.6}", outcome.final_loss);
    write_metrics(out, &metrics);
    Ok(())
}

fn load_for(spec: &VariantSpec, path: &Path) -> Result<ParamStore<f32>> {
    let store = weights::load_weights(path)?;
    let reference = model::build::<f32>(spec, 0)?;
    store.check_layout(&reference)?;
    Ok(store)
}

fn eval_toy(a: &EvalArgs, out: &mut String) -> Result<()> {
    let spec = a.model.spec()?;
    let store = load_for(&spec, &a.weights)?;
    if a.count == 0 {
        return Err(CommandError::Usage("--count must be at least 1".into()));
    }
    let heldout = toyseg::generate_heldout(a.seed, a.count, a.size, a.model.classes)?;
    write_metrics(out, &toyseg::evaluate(&store, &spec, &heldout)?);
    Ok(())
}

fn segment(a: &SegmentArgs, out: &mut String) -> Result<()> {
    use std::fmt::Write;
    let spec = a.model.spec()?;
    let store = load_for(&spec, &a.weights)?;
    let image = netpbm::read_image(&a.image)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let labels = toyseg::predict(&store, &spec, &image)?;
    let mut counts = vec![0usize; spec.num_classes];
    for &l in &labels {
        counts[l as usize] += 1;
    }
    netpbm::write_mask(&a.out, &Mask {
        height: h,
        width: w,
        labels,
    })?;
    let _ = writeln!(out, "mask {h}x{w}");
    for (k, n) in counts.iter().enumerate() {
        let _ = writeln!(out, "class[{k}] {n}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extents_parse() {
        assert_eq!(parse_extent("512"), Ok((512, 512)));
        assert_eq!(parse_extent("96x64"), Ok((96, 64)));
        assert!(parse_extent("0").is_err());
        assert!(parse_extent("12x").is_err());
    }

    #[test]
    fn command_tree_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_follow_the_contract() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        assert_eq!(run(["lrformer", "info", "--bogus"], &mut out, &mut err), exit::USAGE);
        assert_eq!(run(["lrformer", "info", "--variant", "Q"], &mut out, &mut err), exit::USAGE);
        assert_eq!(run(["lrformer", "info", "--help"], &mut out, &mut err), exit::OK);
        assert_eq!(run(["lrformer"], &mut out, &mut err), exit::USAGE);
    }
}

//! Synthetic two-class segmentation: data, training loop and metrics.
//!
//! Samples are random rectangles and ellipses on a noisy background. The
//! loop trains a model end to end with pixel cross-entropy and AdamW under a
//! poly learning-rate schedule; everything is a pure function of the seeds.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{self, Bound, ParamStore, VariantSpec};
use crate::rng::Stream;
use crate::{Error, Gradients, Real, Result, Tape, Tensor, Var};

/// An RGB image in `[0, 1]` with its per-pixel labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3, H, W]`
    pub image: Tensor<f32>,
    /// Row-major `H×W` labels.
    pub mask: Vec<u32>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Fraction of pixels with a non-zero label.
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.iter().filter(|&&l| l != 0).count() as f64 / self.mask.len() as f64
    }
}

/// Accepted foreground fraction of a generated sample.
pub const FOREGROUND_RANGE: (f64, f64) = (0.05, 0.60);

const NOISE_STD: f64 = 0.06;

enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn random(rng: &mut Stream, size: f64) -> Self {
        let h = rng.range(size / 8.0, size / 2.0);
        let w = rng.range(size / 8.0, size / 2.0);
        let y0 = rng.range(0.0, size - h);
        let x0 = rng.range(0.0, size - w);
        if rng.uniform() < 0.5 {
            Shape::Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
            }
        } else {
            Shape::Ellipse {
                cy: y0 + h / 2.0,
                cx: x0 + w / 2.0,
                ry: h / 2.0,
                rx: w / 2.0,
            }
        }
    }
}

fn check_dataset_args(size: usize, classes: usize) -> Result<()> {
    if size == 0 || !size.is_multiple_of(32) {
        return Err(Error::Config(format!("sample size {size} must be a positive multiple of 32")));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    Ok(())
}

/// Sample `index` of the family keyed by `seed`.
///
/// Draws 1–3 shapes; a draw whose foreground fraction falls outside
/// [`FOREGROUND_RANGE`] is discarded and redrawn from the same stream.
pub fn generate_sample(seed: u64, index: u64, size: usize, classes: usize) -> Result<Sample> {
    draw_sample(Stream::indexed(seed, "toyseg/sample", index), size, classes)
}

/// Like [`generate_sample`] but from a stream disjoint from every training
/// family, so evaluation never sees a training image whatever the seeds.
pub fn generate_heldout_sample(seed: u64, index: u64, size: usize, classes: usize) -> Result<Sample> {
    draw_sample(Stream::indexed(seed, "toyseg/heldout", index), size, classes)
}

fn draw_sample(mut rng: Stream, size: usize, classes: usize) -> Result<Sample> {
    check_dataset_args(size, classes)?;
    let n = size * size;
    let mut mask = vec![0u32; n];
    loop {
        mask.iter_mut().for_each(|l| *l = 0);
        let count = rng.int(1, 3);
        for _ in 0..count {
            let shape = Shape::random(&mut rng, size as f64);
            let label = rng.int(1, classes - 1) as u32;
            for y in 0..size {
                for x in 0..size {
                    if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                        mask[y * size + x] = label;
                    }
                }
            }
        }
        let fg = mask.iter().filter(|&&l| l != 0).count() as f64 / n as f64;
        if (FOREGROUND_RANGE.0..=FOREGROUND_RANGE.1).contains(&fg) {
            break;
        }
    }
    // background darker than every foreground class, per-sample tint
    let mut palette = vec![[0.0f64; 3]; classes];
    for (k, colour) in palette.iter_mut().enumerate() {
        let (lo, hi) = if k == 0 { (0.05, 0.45) } else { (0.55, 0.95) };
        for ch in colour.iter_mut() {
            *ch = rng.range(lo, hi);
        }
    }
    let mut image = Tensor::zeros(vec![3, size, size]);
    let data = image.data_mut();
    for (p, &label) in mask.iter().enumerate() {
        for ch in 0..3 {
            let v = palette[label as usize][ch] + NOISE_STD * rng.normal();
            data[ch * n + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Sample { image, mask })
}

/// `count` samples of the family keyed by `seed`.
pub fn generate_dataset(seed: u64, count: usize, size: usize, classes: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    (0..count as u64).map(|i| generate_sample(seed, i, size, classes)).collect()
}

/// `count` held-out samples keyed by `seed`.
pub fn generate_heldout(seed: u64, count: usize, size: usize, classes: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    (0..count as u64).map(|i| generate_heldout_sample(seed, i, size, classes)).collect()
}

/// Stacks samples into a `[B,3,H,W]` batch and the matching `[B,H,W]` labels.
pub fn stack<T: Real>(samples: &[Sample]) -> Result<(Tensor<T>, Vec<u32>)> {
    let first = samples.first().ok_or_else(|| Error::Usage("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.image.shape() != first.image.shape() || s.mask.len() != h * w {
            return Err(Error::Shape {
                op: "stack",
                lhs: first.image.shape().to_vec(),
                rhs: s.image.shape().to_vec(),
            });
        }
        data.extend(s.image.data().iter().map(|&v| T::from_f64(v as f64)));
        labels.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(vec![samples.len(), 3, h, w], data)?, labels))
}

/// Mean pixel cross-entropy of `[B,K,H,W]` logits against row-major masks.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, masks: &[u32]) -> Result<Var> {
    tape.cross_entropy(logits, masks)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Normalization gains and shifts are never decayed.
pub fn is_decayed(name: &str) -> bool {
    !(name.ends_with(".gamma") || name.ends_with(".beta"))
}

/// Moment buffers of AdamW, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Real = f32> {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Tensor<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor<T>] {
        &self.second
    }
}

/// One decoupled-weight-decay Adam update at learning rate `lr`.
///
/// `grads` must have the same names and shapes as `store`.
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    grads.check_layout(store)?;
    if state.first.len() != store.len() {
        return Err(Error::Usage(format!(
            "optimizer tracks {} tensors, store has {}",
            state.first.len(),
            store.len()
        )));
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - libm::pow(c.beta1, t as f64);
    let bias2 = 1.0 - libm::pow(c.beta2, t as f64);
    for (i, (name, param)) in store.iter_mut().enumerate() {
        let grad = grads.get(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        let decay = if is_decayed(name) { c.weight_decay } else { 0.0 };
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (j, p) in param.data_mut().iter_mut().enumerate() {
            let g = grad.data()[j].to_f64();
            let mj = c.beta1 * m[j].to_f64() + (1.0 - c.beta1) * g;
            let vj = c.beta2 * v[j].to_f64() + (1.0 - c.beta2) * g * g;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let mut x = p.to_f64();
            x -= lr * decay * x;
            x -= lr * (mj / bias1) / (libm::sqrt(vj / bias2) + c.eps);
            *p = T::from_f64(x);
        }
    }
    Ok(())
}

/// `base · (1 − step/total)^power`
pub fn poly_lr(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    base * libm::pow(1.0 - step as f64 / total as f64, power)
}

/// Gradients of every bound parameter, in store order.
pub fn collect_gradients<T: Real>(store: &ParamStore<T>, bound: &Bound, grads: &mut Gradients<T>) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let g = grads
            .take(bound.var(name)?)
            .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        out.insert(name, g)?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub batch: usize,
    pub size: usize,
    pub classes: usize,
    pub optimizer: AdamWConfig,
    pub poly_power: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            seed: 0,
            batch: 4,
            size: 64,
            classes: 2,
            optimizer: AdamWConfig::default(),
            poly_power: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    /// Loss of each step's batch before its update.
    pub history: Vec<f64>,
    /// Loss of the trained model on the batch after the last step.
    pub final_loss: f64,
}

fn training_batch(cfg: &TrainConfig, step: usize) -> Result<Vec<Sample>> {
    (0..cfg.batch)
        .map(|i| generate_sample(cfg.seed, (step * cfg.batch + i) as u64, cfg.size, cfg.classes))
        .collect()
}

fn batch_loss(tape: &mut Tape<f32>, bound: &Bound, spec: &VariantSpec, samples: &[Sample]) -> Result<Var> {
    let (images, labels) = stack::<f32>(samples)?;
    let x = tape.constant(images);
    let logits = model::segment_forward(tape, x, bound, spec)?;
    cross_entropy(tape, logits, &labels)
}

/// Trains `spec` from the initialization keyed by `cfg.seed` on freshly
/// generated batches; step `t` uses samples `t·B .. (t+1)·B`.
pub fn train_toy(spec: &VariantSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if spec.num_classes != cfg.classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, data has {}",
            spec.num_classes, cfg.classes
        )));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut store = model::build::<f32>(spec, cfg.seed)?;
    let mut state = OptimizerState::new(&store, cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let samples = training_batch(cfg, step)?;
        let mut tape = Tape::new();
        let bound = Bound::new(&mut tape, &store, true);
        let loss = batch_loss(&mut tape, &bound, spec, &samples)?;
        history.push(tape.value(loss).item()?.to_f64());
        let mut grads = tape.backward(loss)?;
        let grads = collect_gradients(&store, &bound, &mut grads)?;
        let lr = poly_lr(cfg.optimizer.lr, step, cfg.steps, cfg.poly_power);
        adamw_step(&mut store, &grads, &mut state, lr)?;
    }
    let samples = training_batch(cfg, cfg.steps)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &store, false);
    let loss = batch_loss(&mut tape, &bound, spec, &samples)?;
    let final_loss = tape.value(loss).item()?.to_f64();
    Ok(TrainOutcome {
        store,
        history,
        final_loss,
    })
}

/// Per-pixel argmax of `[1,K,H,W]` or `[K,H,W]` scores.
pub fn argmax_labels<T: Real>(scores: &Tensor<T>) -> Result<Vec<u32>> {
    let s = scores.shape();
    let (k, plane) = match *s {
        [1, k, h, w] | [k, h, w] => (k, h * w),
        _ => {
            return Err(Error::Shape {
                op: "argmax_labels",
                lhs: s.to_vec(),
                rhs: vec![1, 0, 0, 0],
            })
        }
    };
    let d = scores.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * plane + p] > d[best * plane + p] {
                    best = c;
                }
            }
            best as u32
        })
        .collect())
}

/// Label map of one `[3,H,W]` image. Inputs whose extents are not multiples
/// of 32 are zero-padded at the bottom and right, and the prediction is
/// cropped back.
pub fn predict(store: &ParamStore<f32>, spec: &VariantSpec, image: &Tensor<f32>) -> Result<Vec<u32>> {
    let [c, h, w] = *image.shape() else {
        return Err(Error::Data(format!("expected a [3,H,W] image, got {:?}", image.shape())));
    };
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::Data(format!("expected a [3,H,W] image, got {:?}", image.shape())));
    }
    let (ph, pw) = (h.next_multiple_of(32), w.next_multiple_of(32));
    let src = image.data();
    let padded = Tensor::from_fn(vec![1, 3, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), i / pw % ph, i % pw);
        if y < h && x < w {
            src[ch * h * w + y * w + x]
        } else {
            0.0
        }
    });
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, store, false);
    let x = tape.constant(padded);
    let logits = model::segment_forward(&mut tape, x, &bound, spec)?;
    let full = argmax_labels(tape.value(logits))?;
    Ok((0..h * w).map(|i| full[(i / w) * pw + i % w]).collect())
}

/// Row-major `classes × classes` counts, indexed `[truth][prediction]`.
pub fn confusion_matrix(pred: &[u32], truth: &[u32], classes: usize) -> Result<Vec<u64>> {
    if pred.len() != truth.len() {
        return Err(Error::Length {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let mut m = vec![0u64; classes * classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p as usize >= classes || t as usize >= classes {
            return Err(Error::Data(format!("label {} out of range for {classes} classes", p.max(t))));
        }
        m[t as usize * classes + p as usize] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    /// NaN for classes absent from both prediction and ground truth.
    pub iou: Vec<f64>,
    /// Mean IoU over classes with a defined IoU.
    pub miou: f64,
}

impl Metrics {
    pub fn from_confusion(m: &[u64], classes: usize) -> Self {
        let total: u64 = m.iter().sum();
        let correct: u64 = (0..classes).map(|k| m[k * classes + k]).sum();
        let iou: Vec<f64> = (0..classes)
            .map(|k| {
                let tp = m[k * classes + k];
                let truth: u64 = (0..classes).map(|p| m[k * classes + p]).sum();
                let pred: u64 = (0..classes).map(|t| m[t * classes + k]).sum();
                let union = truth + pred - tp;
                if union == 0 {
                    f64::NAN
                } else {
                    tp as f64 / union as f64
                }
            })
            .collect();
        let defined: Vec<f64> = iou.iter().copied().filter(|v| !v.is_nan()).collect();
        let miou = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Self {
            pixel_accuracy: if total == 0 { f64::NAN } else { correct as f64 / total as f64 },
            iou,
            miou,
        }
    }
}

/// Pixel accuracy and IoU of `store` over `dataset`, pooled over all pixels.
pub fn evaluate(store: &ParamStore<f32>, spec: &VariantSpec, dataset: &[Sample]) -> Result<Metrics> {
    let k = spec.num_classes;
    let mut total = vec![0u64; k * k];
    for s in dataset {
        let pred = predict(store, spec, &s.image)?;
        let m = confusion_matrix(&pred, &s.mask, k)?;
        total.iter_mut().zip(&m).for_each(|(a, b)| *a += b);
    }
    Ok(Metrics::from_confusion(&total, k))
}

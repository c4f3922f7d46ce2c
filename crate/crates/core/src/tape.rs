//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and the inputs it was
//! computed from, so node order is a topological order. [`Tape::backward`]
//! walks the nodes once in reverse and returns the gradients of all nodes that
//! require them; the tape is consumed in the process.
//!
//! The tape also counts multiply-accumulates per [`Category`] as operations
//! execute. The analyzer's closed-form counts are checked against it.

use alloc::vec;
use alloc::vec::Vec;

use crate::flops::{Category, MacCounts};
use crate::kernels::{self, ConvGeom};
use crate::{Error, Real, Result, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulLast(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        n: usize,
        k: usize,
        p: usize,
        shared_b: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    Gelu(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AdaptivePool(Var),
    Bilinear(Var),
    Concat(Vec<Var>, usize),
    Sum(Var),
    CrossEntropy(Var, Vec<u32>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records operations and their values for one forward pass.
#[derive(Clone, Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    category: Category,
    macs: MacCounts,
    score_shapes: Vec<[usize; 2]>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            category: Category::Linear,
            macs: MacCounts::default(),
            score_shapes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Input with an explicit gradient flag.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Category that subsequent products are attributed to.
    pub fn category(&self) -> Category {
        self.category
    }

    /// Sets the MAC category and returns the previous one.
    pub fn set_category(&mut self, cat: Category) -> Category {
        core::mem::replace(&mut self.category, cat)
    }

    /// MACs counted so far.
    pub fn macs(&self) -> &MacCounts {
        &self.macs
    }

    /// `[queries, keys]` extents of every attention score matrix computed so
    /// far, in execution order.
    pub fn score_shapes(&self) -> &[[usize; 2]] {
        &self.score_shapes
    }

    pub(crate) fn note_scores(&mut self, queries: usize, keys: usize) {
        self.score_shapes.push([queries, keys]);
    }

    fn count(&mut self, cat: Category, macs: u64) {
        self.macs.add(cat, macs);
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out = self.value(x).map(|v| v * f);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    /// `x[.., C] + b[C]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.last_extent_matching("add_bias", x, b)?;
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(&bias).for_each(|(o, &bv)| *o += bv);
        }
        self.push("add_bias", out, Op::AddBias(x, b), &[x, b])
    }

    /// `x[.., C] ⊙ g[C]`
    pub fn mul_last(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.last_extent_matching("mul_last", x, g)?;
        let gain = self.value(g).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(&gain).for_each(|(o, &gv)| *o *= gv);
        }
        self.push("mul_last", out, Op::MulLast(x, g), &[x, g])
    }

    fn last_extent_matching(&self, op: &'static str, x: Var, v: Var) -> Result<usize> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        match (xs.last(), vs) {
            (Some(&c), [len]) if c == *len && c > 0 => Ok(c),
            _ => Err(self.shape_err(op, x, v)),
        }
    }

    /// Batched matrix product `a[.., n, k] · b[.., k, p]`.
    ///
    /// `b` either has the same leading extents as `a` or is a plain matrix
    /// shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let shared_b = lead_b.is_empty();
        if k != kb || !(shared_b || lead_a == lead_b) {
            return Err(self.shape_err("matmul", a, b));
        }
        let batch: usize = lead_a.iter().product();
        let mut shape = lead_a.to_vec();
        shape.extend([n, p]);
        let mut out = Tensor::zeros(shape);
        {
            let da = self.value(a).data();
            let db = self.value(b).data();
            let o = out.data_mut();
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * p };
                kernels::matmul_acc(
                    &da[bi * n * k..(bi + 1) * n * k],
                    &db[b_off..b_off + k * p],
                    &mut o[bi * n * p..(bi + 1) * n * p],
                    n,
                    k,
                    p,
                );
            }
        }
        self.count(self.category, (batch * n * k * p) as u64);
        let op = Op::MatMul {
            a,
            b,
            batch,
            n,
            k,
            p,
            shared_b,
        };
        self.push("matmul", out, op, &[a, b])
    }

    /// Token-wise affine map `x[.., C_in] · w[C_in, C_out] + b[C_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::Usage(alloc::format!(
                "permute: {perm:?} is not a permutation of {} axes",
                shape.len()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = Tensor::zeros(out_shape);
        kernels::permute(self.value(x).data(), &shape, perm, out.data_mut(), false);
        self.push("permute", out, Op::Permute(x, perm.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Usage("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// `[B,C,H,W]` → `[B,H·W,C]`
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.nchw("to_tokens", x)?;
        let flat = self.reshape(x, &[b, c, h * w])?;
        self.permute(flat, &[0, 2, 1])
    }

    /// `[B,H·W,C]` → `[B,C,H,W]`
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w {
            return Err(Error::Usage(alloc::format!(
                "from_tokens: {s:?} is not a token map of {h}x{w}"
            )));
        }
        let t = self.permute(x, &[0, 2, 1])?;
        self.reshape(t, &[s[0], s[2], h, w])
    }

    pub(crate) fn nchw(&self, op: &'static str, x: Var) -> Result<[usize; 4]> {
        match *self.shape(x) {
            [b, c, h, w] => Ok([b, c, h, w]),
            ref s => Err(Error::Usage(alloc::format!("{op}: expected [B,C,H,W], got {s:?}"))),
        }
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Usage(alloc::format!(
                "softmax: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = kernels::axis_split(&shape, axis);
        let mut out = Tensor::zeros(shape);
        kernels::softmax(self.value(x).data(), out.data_mut(), outer, len, inner);
        self.count(Category::NormAct, out.numel() as u64);
        self.push("softmax", out, Op::Softmax(x, axis), &[x])
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.last_extent_matching("layer_norm", x, gamma)?;
        if self.shape(beta) != self.shape(gamma) {
            return Err(self.shape_err("layer_norm", gamma, beta));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::Config(alloc::format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut out = Tensor::zeros(self.shape(x).to_vec());
        kernels::layer_norm(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64(eps),
            out.data_mut(),
            c,
        );
        self.count(Category::NormAct, out.numel() as u64);
        self.push("layer_norm", out, Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta])
    }

    /// Layer norm over the channel axis of a `[B,C,H,W]` map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let [_, _, h, w] = self.nchw("channel_norm", x)?;
        let t = self.to_tokens(x)?;
        let n = self.layer_norm(t, gamma, beta, eps)?;
        self.from_tokens(n, h, w)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::gelu);
        self.count(Category::NormAct, out.numel() as u64);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Zero-padded 2-D cross-correlation over `[B,C_in,H,W]` with weights
    /// `[C_out, C_in/groups, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let [batch, c_in, h, wd] = self.nchw("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        let [c_out, cin_g, kh, kw] = match ws[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => return Err(self.shape_err("conv2d", x, w)),
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Config(alloc::format!(
                "conv2d: channels {c_in}->{c_out} not divisible by groups {groups}"
            )));
        }
        if stride == 0 || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Config(alloc::format!(
                "conv2d: kernel {kh}x{kw} must be odd and stride {stride} positive"
            )));
        }
        if cin_g != c_in / groups || h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(self.shape_err("conv2d", x, w));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(self.shape_err("conv2d", w, b));
            }
        }
        let geom = ConvGeom {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            groups,
        };
        let mut out = Tensor::zeros([batch, c_out, geom.out_h(), geom.out_w()]);
        kernels::conv2d(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        self.count(Category::Conv, geom.macs());
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x, w, b, geom }, &inputs)
    }

    /// Averages `[B,C,H,W]` into an `out_h × out_w` grid of bins that
    /// partition the input.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = self.nchw("adaptive_avg_pool2d", x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("adaptive_avg_pool2d: zero output extent".into()));
        }
        if out_h > h || out_w > w {
            return Err(Error::Config(alloc::format!(
                "adaptive_avg_pool2d: cannot pool {h}x{w} up to {out_h}x{out_w}"
            )));
        }
        let mut out = Tensor::zeros([b, c, out_h, out_w]);
        kernels::adaptive_avg_pool2d(
            self.value(x).data(),
            out.data_mut(),
            b * c,
            (h, w),
            (out_h, out_w),
        );
        self.count(Category::Pool, (b * c * h * w) as u64);
        self.push("adaptive_avg_pool2d", out, Op::AdaptivePool(x), &[x])
    }

    /// Half-pixel bilinear resize; same-size requests return `x` itself.
    ///
    /// Products are attributed to [`Category::AttnInterp`] while the tape is
    /// in an attention category and to [`Category::Interp`] otherwise.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, c, h, w] = self.nchw("bilinear_resize", x)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("bilinear_resize: zero output extent".into()));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let mut out = Tensor::zeros([b, c, out_h, out_w]);
        kernels::bilinear_resize(
            self.value(x).data(),
            out.data_mut(),
            b * c,
            (h, w),
            (out_h, out_w),
        );
        let cat = match self.category {
            Category::AttnCore | Category::AttnProj | Category::AttnInterp => Category::AttnInterp,
            _ => Category::Interp,
        };
        self.count(cat, 4 * out.numel() as u64);
        self.push("bilinear_resize", out, Op::Bilinear(x), &[x])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Usage("concat of nothing".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Usage(alloc::format!("concat: axis {axis} out of range")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(self.shape_err("concat", first, v));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_split(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(xs.to_vec(), axis), xs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean pixel cross-entropy of `[B,K,H,W]` logits against `[B,H,W]` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u32]) -> Result<Var> {
        let [b, k, h, w] = self.nchw("cross_entropy", logits)?;
        if labels.len() != b * h * w {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Data(alloc::format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let loss = kernels::cross_entropy(self.value(logits).data(), labels, b, k, h * w, None);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy(logits, labels.to_vec()),
            &[logits],
        )
    }

    /// Propagates d`loss`/d(node) back to every node that requires a gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        if !nodes[loss.0].requires_grad {
            return Ok(Gradients::finish(&nodes, grads));
        }
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), T::ONE));
        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backward_node(&nodes, &mut grads, i, &g);
        }
        Ok(Gradients::finish(&nodes, grads))
    }
}

/// Gradient buffer for `v`, created zeroed on first use; `None` when `v`
/// does not require a gradient.
fn slot<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape().to_vec()))
            .data_mut(),
    )
}

fn backward_node<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], i: usize, g: &Tensor<T>) {
    let gy = g.data();
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(s) = slot(nodes, grads, v) {
                    s.iter_mut().zip(gy).for_each(|(o, &d)| *o += d);
                }
            }
        }
        Op::Scale(x, f) => {
            let f = T::from_f64(*f);
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(gy).for_each(|(o, &d)| *o += f * d);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(gy).for_each(|(o, &d)| *o += d);
            }
            let c = nodes[b.0].value.numel();
            if let Some(s) = slot(nodes, grads, *b) {
                for row in gy.chunks_exact(c) {
                    s.iter_mut().zip(row).for_each(|(o, &d)| *o += d);
                }
            }
        }
        Op::MulLast(x, gain) => {
            let c = nodes[gain.0].value.numel();
            let gv = val(*gain).to_vec();
            if let Some(s) = slot(nodes, grads, *x) {
                for (srow, grow) in s.chunks_exact_mut(c).zip(gy.chunks_exact(c)) {
                    for j in 0..c {
                        srow[j] += grow[j] * gv[j];
                    }
                }
            }
            let xv = val(*x);
            if let Some(s) = slot(nodes, grads, *gain) {
                for (xrow, grow) in xv.chunks_exact(c).zip(gy.chunks_exact(c)) {
                    for j in 0..c {
                        s[j] += grow[j] * xrow[j];
                    }
                }
            }
        }
        Op::MatMul {
            a,
            b,
            batch,
            n,
            k,
            p,
            shared_b,
        } => {
            let (batch, n, k, p) = (*batch, *n, *k, *p);
            let b_off = |bi: usize| if *shared_b { 0 } else { bi * k * p };
            let bv = val(*b);
            if let Some(s) = slot(nodes, grads, *a) {
                for bi in 0..batch {
                    kernels::matmul_bt_acc(
                        &gy[bi * n * p..(bi + 1) * n * p],
                        &bv[b_off(bi)..b_off(bi) + k * p],
                        &mut s[bi * n * k..(bi + 1) * n * k],
                        n,
                        k,
                        p,
                    );
                }
            }
            let av = val(*a);
            if let Some(s) = slot(nodes, grads, *b) {
                for bi in 0..batch {
                    let off = b_off(bi);
                    kernels::matmul_at_acc(
                        &av[bi * n * k..(bi + 1) * n * k],
                        &gy[bi * n * p..(bi + 1) * n * p],
                        &mut s[off..off + k * p],
                        n,
                        k,
                        p,
                    );
                }
            }
        }
        Op::Permute(x, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let out_shape = nodes[i].value.shape().to_vec();
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::permute(gy, &out_shape, &inv, s, true);
            }
        }
        Op::Reshape(x) => {
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().zip(gy).for_each(|(o, &d)| *o += d);
            }
        }
        Op::Softmax(x, axis) => {
            let (outer, len, inner) = kernels::axis_split(nodes[i].value.shape(), *axis);
            let y = nodes[i].value.data();
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::softmax_backward(y, gy, s, outer, len, inner);
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let c = nodes[gamma.0].value.numel();
            let xv = val(*x).to_vec();
            let gv = val(*gamma).to_vec();
            let mut gx = nodes[x.0].requires_grad.then(|| vec![T::ZERO; xv.len()]);
            let mut gg = nodes[gamma.0].requires_grad.then(|| vec![T::ZERO; c]);
            let mut gb = nodes[beta.0].requires_grad.then(|| vec![T::ZERO; c]);
            kernels::layer_norm_backward(
                &xv,
                &gv,
                T::from_f64(*eps),
                gy,
                gx.as_deref_mut(),
                gg.as_deref_mut(),
                gb.as_deref_mut(),
                c,
            );
            for (v, buf) in [(*x, gx), (*gamma, gg), (*beta, gb)] {
                if let (Some(s), Some(buf)) = (slot(nodes, grads, v), buf) {
                    s.iter_mut().zip(&buf).for_each(|(o, &d)| *o += d);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x).to_vec();
            if let Some(s) = slot(nodes, grads, *x) {
                for ((o, &xi), &d) in s.iter_mut().zip(&xv).zip(gy) {
                    *o += kernels::gelu_grad(xi) * d;
                }
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let xv = val(*x).to_vec();
            let wv = val(*w).to_vec();
            let mut gx = nodes[x.0].requires_grad.then(|| vec![T::ZERO; xv.len()]);
            let mut gw = nodes[w.0].requires_grad.then(|| vec![T::ZERO; wv.len()]);
            let mut gb = b
                .filter(|b| nodes[b.0].requires_grad)
                .map(|_| vec![T::ZERO; geom.c_out]);
            kernels::conv2d_backward(
                geom,
                &xv,
                &wv,
                gy,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                gb.as_deref_mut(),
            );
            let mut pairs = vec![(*x, gx), (*w, gw)];
            if let Some(b) = b {
                pairs.push((*b, gb));
            }
            for (v, buf) in pairs {
                if let (Some(s), Some(buf)) = (slot(nodes, grads, v), buf) {
                    s.iter_mut().zip(&buf).for_each(|(o, &d)| *o += d);
                }
            }
        }
        Op::AdaptivePool(x) => {
            let xs = nodes[x.0].value.shape();
            let ys = nodes[i].value.shape();
            let (planes, hw, ohw) = (xs[0] * xs[1], (xs[2], xs[3]), (ys[2], ys[3]));
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::adaptive_avg_pool2d_backward(gy, s, planes, hw, ohw);
            }
        }
        Op::Bilinear(x) => {
            let xs = nodes[x.0].value.shape();
            let ys = nodes[i].value.shape();
            let (planes, hw, ohw) = (xs[0] * xs[1], (xs[2], xs[3]), (ys[2], ys[3]));
            if let Some(s) = slot(nodes, grads, *x) {
                kernels::bilinear_resize_backward(gy, s, planes, hw, ohw);
            }
        }
        Op::Concat(xs, axis) => {
            let (outer, total, inner) = kernels::axis_split(nodes[i].value.shape(), *axis);
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].value.shape()[*axis];
                if let Some(s) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &gy[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        let dst = &mut s[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                    }
                }
                offset += len;
            }
        }
        Op::Sum(x) => {
            let d = gy[0];
            if let Some(s) = slot(nodes, grads, *x) {
                s.iter_mut().for_each(|o| *o += d);
            }
        }
        Op::CrossEntropy(logits, labels) => {
            let shape = nodes[logits.0].value.shape().to_vec();
            let lv = val(*logits).to_vec();
            let scale = gy[0];
            if let Some(s) = slot(nodes, grads, *logits) {
                let mut buf = vec![T::ZERO; lv.len()];
                kernels::cross_entropy(&lv, labels, shape[0], shape[1], shape[2] * shape[3], Some(&mut buf));
                s.iter_mut().zip(&buf).for_each(|(o, &d)| *o += scale * d);
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Every leaf that requires a gradient has an entry (zeros when the loss does
/// not depend on it); intermediate nodes have none.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    fn finish(nodes: &[Node<T>], mut grads: Vec<Option<Tensor<T>>>) -> Self {
        for (node, g) in nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Self { grads }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

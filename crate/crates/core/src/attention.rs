//! Vanilla, downsampling-based, and low-resolution self-attention.
//!
//! All three schemes share [`mhsa_core`] and the same four projections; they
//! differ only in which token sets the projections are applied to:
//!
//! * vanilla: queries, keys and values all come from the full-resolution map;
//! * downsampled: queries are full resolution, keys/values come from the map
//!   average-pooled by a fixed ratio;
//! * LRSA: the map is average-pooled to a fixed `g×g` grid, attention runs
//!   entirely on that grid, and the result is bilinearly upsampled back.
//!   Keys/values can optionally be taken from a pyramid of pooled grids.

use alloc::vec::Vec;

use crate::flops::Category;
use crate::{Error, Real, Result, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Vanilla,
    /// Keys/values pooled to `⌈H/ratio⌉ × ⌈W/ratio⌉`.
    Downsampled { ratio: usize },
    Lrsa,
}

/// Where LRSA takes its key/value pyramid from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidSource {
    /// Pool the full-resolution input to every pyramid grid.
    Input,
    /// Pool the already pooled `g×g` map further.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub head_dim: usize,
    pub scheme: Scheme,
    /// Side `g` of the fixed pooled grid; the pooled size is `m = g²` tokens.
    pub pooled_grid: usize,
    pub kv_pyramid: bool,
    /// Pyramid grid sides, strictly decreasing, first equal to `pooled_grid`.
    pub pyramid_grids: Vec<usize>,
    pub pyramid_source: PyramidSource,
}

impl AttentionConfig {
    /// LRSA with a single-grid key/value set.
    pub fn lrsa(channels: usize, head_dim: usize, pooled_grid: usize) -> Self {
        Self {
            channels,
            head_dim,
            scheme: Scheme::Lrsa,
            pooled_grid,
            kv_pyramid: false,
            pyramid_grids: alloc::vec![pooled_grid],
            pyramid_source: PyramidSource::Input,
        }
    }

    pub fn with_pyramid(mut self, grids: Vec<usize>) -> Self {
        self.kv_pyramid = true;
        self.pyramid_grids = grids;
        self
    }

    pub fn heads(&self) -> usize {
        self.channels / self.head_dim
    }

    /// Pooled token count `m`.
    pub fn pooled_tokens(&self) -> usize {
        self.pooled_grid * self.pooled_grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.head_dim) {
            return Err(Error::Config(alloc::format!(
                "{} channels not divisible by head width {}",
                self.channels, self.head_dim
            )));
        }
        if self.pooled_grid == 0 {
            return Err(Error::Config("pooled grid must be at least 1x1".into()));
        }
        if let Scheme::Downsampled { ratio: 0 } = self.scheme {
            return Err(Error::Config("downsample ratio must be >= 1".into()));
        }
        if self.kv_pyramid {
            let g = &self.pyramid_grids;
            if g.first() != Some(&self.pooled_grid) {
                return Err(Error::Config(alloc::format!(
                    "pyramid {g:?} must start at the pooled grid {}",
                    self.pooled_grid
                )));
            }
            if g.windows(2).any(|w| w[1] >= w[0]) || g.contains(&0) {
                return Err(Error::Config(alloc::format!(
                    "pyramid grids {g:?} must be strictly decreasing and positive"
                )));
            }
        }
        Ok(())
    }

    /// `(query tokens, key/value tokens)` entering [`mhsa_core`] for an
    /// `h×w` input.
    pub fn token_counts(&self, h: usize, w: usize) -> (usize, usize) {
        let n = h * w;
        match self.scheme {
            Scheme::Vanilla => (n, n),
            Scheme::Downsampled { ratio } => (n, h.div_ceil(ratio) * w.div_ceil(ratio)),
            Scheme::Lrsa => {
                if self.bypasses_pooling(h, w) {
                    (n, n)
                } else {
                    let (gh, gw) = self.pooled_extent(h, w);
                    let kv = if self.kv_pyramid {
                        self.pyramid_extents(h, w).iter().map(|(a, b)| a * b).sum()
                    } else {
                        gh * gw
                    };
                    (gh * gw, kv)
                }
            }
        }
    }

    /// LRSA skips pooling when the map already has at most `m` tokens.
    pub fn bypasses_pooling(&self, h: usize, w: usize) -> bool {
        h * w <= self.pooled_tokens()
    }

    pub(crate) fn pooled_extent(&self, h: usize, w: usize) -> (usize, usize) {
        (self.pooled_grid.min(h), self.pooled_grid.min(w))
    }

    pub(crate) fn pyramid_extents(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        let (sh, sw) = match self.pyramid_source {
            PyramidSource::Input => (h, w),
            PyramidSource::Pooled => self.pooled_extent(h, w),
        };
        self.pyramid_grids.iter().map(|&g| (g.min(sh), g.min(sw))).collect()
    }
}

/// Affine token map with weight `[C_in, C_out]` and bias `[C_out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.weight, self.bias)
    }
}

/// The four `C×C` projections.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

/// Runs `f` with the tape's MAC category set to `cat`.
fn in_category<T: Real, R>(tape: &mut Tape<T>, cat: Category, f: impl FnOnce(&mut Tape<T>) -> R) -> R {
    let prev = tape.set_category(cat);
    let out = f(tape);
    tape.set_category(prev);
    out
}

/// `[B,N,C]` → `[B,heads,N,C/heads]`
fn split_heads<T: Real>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let r = tape.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

/// Multi-head scaled dot-product attention without output projection.
///
/// Scores use `1/√d` with `d = C/heads`; head outputs are concatenated back
/// to `[B,N_q,C]`.
pub fn mhsa_core<T: Real>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let qs = tape.shape(q).to_vec();
    let ks = tape.shape(k).to_vec();
    if qs.len() != 3 || ks.len() != 3 || tape.shape(v) != ks.as_slice() || qs[0] != ks[0] || qs[2] != ks[2] {
        return Err(Error::Shape {
            op: "mhsa_core",
            lhs: qs,
            rhs: ks,
        });
    }
    let (b, nq, c) = (qs[0], qs[1], qs[2]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(alloc::format!(
            "{c} channels not divisible into {heads} heads"
        )));
    }
    if nq == 0 || ks[1] == 0 {
        return Err(Error::Usage("attention over an empty token set".into()));
    }
    let d = c / heads;
    in_category(tape, Category::AttnCore, |tape| {
        let qh = split_heads(tape, q, heads)?;
        let kh = split_heads(tape, k, heads)?;
        let vh = split_heads(tape, v, heads)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        tape.note_scores(nq, ks[1]);
        let scores = tape.scale(scores, 1.0 / libm::sqrt(d as f64))?;
        let attn = tape.softmax(scores, 3)?;
        let out = tape.matmul(attn, vh)?;
        let out = tape.permute(out, &[0, 2, 1, 3])?;
        tape.reshape(out, &[b, nq, c])
    })
}

fn project_and_attend<T: Real>(
    tape: &mut Tape<T>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let (q, k, v) = in_category(tape, Category::AttnProj, |tape| {
        Ok::<_, Error>((
            p.q.forward(tape, q_src)?,
            p.k.forward(tape, kv_src)?,
            p.v.forward(tape, kv_src)?,
        ))
    })?;
    let out = mhsa_core(tape, q, k, v, heads)?;
    in_category(tape, Category::AttnProj, |tape| p.o.forward(tape, out))
}

/// Full-resolution attention over `[B,N,C]` tokens.
pub fn attend_vanilla<T: Real>(tape: &mut Tape<T>, tokens: Var, p: &AttentionParams, heads: usize) -> Result<Var> {
    project_and_attend(tape, tokens, tokens, p, heads)
}

/// Full-resolution queries against keys/values average-pooled by `ratio`.
///
/// `tokens` is `[B,H·W,C]` laid out from an `h×w` map.
pub fn attend_downsampled<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    (h, w): (usize, usize),
    p: &AttentionParams,
    heads: usize,
    ratio: usize,
) -> Result<Var> {
    if ratio == 0 {
        return Err(Error::Config("downsample ratio must be >= 1".into()));
    }
    let map = tape.from_tokens(tokens, h, w)?;
    let pooled = tape.adaptive_avg_pool2d(map, h.div_ceil(ratio), w.div_ceil(ratio))?;
    let kv = tape.to_tokens(pooled)?;
    project_and_attend(tape, tokens, kv, p, heads)
}

/// Pools `[B,C,H,W]` to each grid and concatenates the flattened tokens
/// into `[B, Σ gᵢ², C]`.
pub fn pyramid_pool_tokens<T: Real>(tape: &mut Tape<T>, x: Var, grids: &[(usize, usize)]) -> Result<Var> {
    if grids.is_empty() {
        return Err(Error::Config("pyramid pooling needs at least one grid".into()));
    }
    let mut parts = Vec::with_capacity(grids.len());
    for &(gh, gw) in grids {
        let pooled = tape.adaptive_avg_pool2d(x, gh, gw)?;
        parts.push(tape.to_tokens(pooled)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 1)
}

/// Low-resolution self-attention on a `[B,C,H,W]` map.
///
/// Maps with at most `m` tokens are attended at full resolution (pooling and
/// the key/value pyramid are skipped). Otherwise the map is pooled to the
/// fixed grid, attended there and bilinearly resized back to `H×W`.
pub fn attend_lrsa<T: Real>(tape: &mut Tape<T>, x: Var, p: &AttentionParams, cfg: &AttentionConfig) -> Result<Var> {
    cfg.validate()?;
    let [_, c, h, w] = tape.nchw("attend_lrsa", x)?;
    if c != cfg.channels {
        return Err(Error::Config(alloc::format!(
            "attention configured for {} channels, input has {c}",
            cfg.channels
        )));
    }
    let heads = cfg.heads();
    if cfg.bypasses_pooling(h, w) {
        let tokens = tape.to_tokens(x)?;
        let out = attend_vanilla(tape, tokens, p, heads)?;
        return tape.from_tokens(out, h, w);
    }
    let (gh, gw) = cfg.pooled_extent(h, w);
    let pooled = tape.adaptive_avg_pool2d(x, gh, gw)?;
    let q_src = tape.to_tokens(pooled)?;
    let kv_src = if cfg.kv_pyramid {
        let src = match cfg.pyramid_source {
            PyramidSource::Input => x,
            PyramidSource::Pooled => pooled,
        };
        pyramid_pool_tokens(tape, src, &cfg.pyramid_extents(h, w))?
    } else {
        q_src
    };
    let out = project_and_attend(tape, q_src, kv_src, p, heads)?;
    let low = tape.from_tokens(out, gh, gw)?;
    in_category(tape, Category::AttnInterp, |tape| tape.bilinear_resize(low, h, w))
}

/// Dispatches on `cfg.scheme` for a `[B,C,H,W]` map.
pub fn attend<T: Real>(tape: &mut Tape<T>, x: Var, p: &AttentionParams, cfg: &AttentionConfig) -> Result<Var> {
    cfg.validate()?;
    match cfg.scheme {
        Scheme::Lrsa => attend_lrsa(tape, x, p, cfg),
        Scheme::Vanilla | Scheme::Downsampled { .. } => {
            let [_, _, h, w] = tape.nchw("attend", x)?;
            let tokens = tape.to_tokens(x)?;
            let out = match cfg.scheme {
                Scheme::Downsampled { ratio } => attend_downsampled(tape, tokens, (h, w), p, cfg.heads(), ratio)?,
                _ => attend_vanilla(tape, tokens, p, cfg.heads())?,
            };
            tape.from_tokens(out, h, w)
        }
    }
}

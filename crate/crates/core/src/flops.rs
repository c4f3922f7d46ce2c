//! Multiply-accumulate accounting shared by the instrumented tape and the
//! analytic counter.
//!
//! One MAC is reported as one FLOP. Pooling adds and norm/activation element
//! counts are tracked but left out of the headline total.

use core::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Category {
    /// Score (`QKᵀ`) and aggregation (`AV`) products inside attention.
    AttnCore,
    /// Query/key/value/output projections.
    AttnProj,
    /// Bilinear upsampling that returns low-resolution attention output to the
    /// input grid.
    AttnInterp,
    /// Convolutions, including 1×1 convolutions in the decoder.
    Conv,
    /// Token-wise linear layers outside attention (FFN, classifier head).
    Linear,
    /// Bilinear resizes outside attention (decoder feature alignment).
    Interp,
    /// Average pooling, one add per input element.
    Pool,
    /// Normalizations, activations and softmax, one unit per element.
    NormAct,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::AttnCore,
        Category::AttnProj,
        Category::AttnInterp,
        Category::Conv,
        Category::Linear,
        Category::Interp,
        Category::Pool,
        Category::NormAct,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::AttnCore => "attn_core",
            Category::AttnProj => "attn_proj",
            Category::AttnInterp => "attn_interp",
            Category::Conv => "conv",
            Category::Linear => "linear",
            Category::Interp => "interp",
            Category::Pool => "pool",
            Category::NormAct => "norm_act",
        }
    }

    /// Whether the category contributes to the headline FLOPs figure.
    pub fn in_headline(self) -> bool {
        !matches!(self, Category::Pool | Category::NormAct)
    }

    /// Whether the category counts toward attention FLOPs (attention products
    /// plus the upsampling that follows low-resolution attention).
    pub fn in_attention(self) -> bool {
        matches!(self, Category::AttnCore | Category::AttnInterp)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-category MAC totals.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounts([u64; 8]);

impl MacCounts {
    pub fn add(&mut self, cat: Category, macs: u64) {
        self.0[cat.index()] += macs;
    }

    pub fn get(&self, cat: Category) -> u64 {
        self.0[cat.index()]
    }

    pub fn headline(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.in_headline())
            .map(|&c| self.get(c))
            .sum()
    }

    pub fn attention(&self) -> u64 {
        Category::ALL
            .iter()
            .filter(|c| c.in_attention())
            .map(|&c| self.get(c))
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }
}

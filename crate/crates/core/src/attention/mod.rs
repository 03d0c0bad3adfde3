//! Global and local self-attention, unary-pairwise attention, and the
//! residual blocks that host them.

mod block;
mod sa;
mod upa;

pub use block::{attention_block, AttentionBlock, BlockConfig, BlockCore};
pub use sa::{self_attention_global, self_attention_local, SaParams};
pub use upa::{
    gated_fuse, pairwise_scores, positional_scores, relation_pairwise, relation_unary, unary_scores,
    upa_attend, upa_forward,
    PositionalParams, PositionalTerm, UpaMode, UpaOutput, UpaParams,
};

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::AttentionMap;
use crate::error::{Error, Result};
use crate::geometry::NeighborIndex;
use crate::tensor::{Tape, Var};

/// What an attention block computes over each neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Dot-product self-attention over all points.
    GlobalSa,
    /// Dot-product self-attention restricted to the kNN neighborhood.
    LocalSa,
    /// Unary and pairwise attention in parallel, `z = u + e + x`.
    UpaPlain,
    /// Plain UPA plus the positional-encoding branch.
    UpaPositional,
    /// UPA with a per-point sigmoid gate between the two branches.
    UpaGated,
    /// Unary branch only (used to chain sequential arrangements).
    UpaUnary,
    /// Pairwise branch only.
    UpaPairwise,
    /// Mean of the transformed neighbor features.
    MeanPool,
    /// Max of the transformed neighbor features.
    MaxPool,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::GlobalSa,
        Variant::LocalSa,
        Variant::UpaPlain,
        Variant::UpaPositional,
        Variant::UpaGated,
        Variant::UpaUnary,
        Variant::UpaPairwise,
        Variant::MeanPool,
        Variant::MaxPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GlobalSa => "global-sa",
            Variant::LocalSa => "local-sa",
            Variant::UpaPlain => "upa-plain",
            Variant::UpaPositional => "upa-positional",
            Variant::UpaGated => "upa-gated",
            Variant::UpaUnary => "upa-unary",
            Variant::UpaPairwise => "upa-pairwise",
            Variant::MeanPool => "mean-pool",
            Variant::MaxPool => "max-pool",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(alloc::format!("unknown attention variant `{s}`")))
    }

    /// Whether the variant reads a kNN neighborhood.
    pub fn is_local(self) -> bool {
        self != Variant::GlobalSa
    }

    pub fn is_upa(self) -> bool {
        matches!(
            self,
            Variant::UpaPlain
                | Variant::UpaPositional
                | Variant::UpaGated
                | Variant::UpaUnary
                | Variant::UpaPairwise
        )
    }
}

/// Which attention produced a captured map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    SelfAttention,
    Unary,
    Pairwise,
    Positional,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::SelfAttention => "sa",
            Branch::Unary => "unary",
            Branch::Pairwise => "pairwise",
            Branch::Positional => "positional",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapturedMap {
    pub branch: Branch,
    pub map: AttentionMap,
}

/// Block or operator output plus any attention maps captured on the way.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub features: Var,
    pub maps: Vec<CapturedMap>,
}

/// `d × h` matrix with ones where feature column `c` belongs to head `t`.
/// Multiplying an elementwise product by it sums each head's slice exactly.
pub(crate) fn head_indicator(d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let mut m = vec![0.0; d * heads];
    for c in 0..d {
        m[c * heads + c / dh] = 1.0;
    }
    m
}

/// Converts `M × k × h` softmax weights into a sparse head-major map.
pub(crate) fn local_map(
    tape: &Tape,
    weights: Var,
    nbr: &NeighborIndex,
    keys: usize,
) -> Result<AttentionMap> {
    let s = tape.shape(weights);
    let (m, k, h) = (s[0], s[1], s[2]);
    let w = tape.value(weights);
    let mut probs = vec![0.0; h * m * k];
    for i in 0..m {
        for j in 0..k {
            for t in 0..h {
                probs[(t * m + i) * k + j] = w[(i * k + j) * h + t];
            }
        }
    }
    AttentionMap::sparse(0, h, keys, k, nbr.indices().to_vec(), probs)
}

pub(crate) fn check_heads(d: usize, heads: usize) -> Result<()> {
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(alloc::format!(
            "{heads} heads do not divide feature width {d}"
        )));
    }
    Ok(())
}

pub(crate) fn check_nbr(nbr: &NeighborIndex, n: usize) -> Result<()> {
    if nbr.queries() != n {
        return Err(Error::dims("neighborhood", &[nbr.queries(), nbr.k()], &[n]));
    }
    Ok(())
}

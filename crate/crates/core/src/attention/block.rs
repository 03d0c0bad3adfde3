use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_heads, check_nbr, self_attention_global, self_attention_local, upa_forward,
    AttentionOutput, SaParams, UpaMode, UpaParams, Variant,
};
use crate::error::{Error, Result};
use crate::geometry::{group_features, NeighborIndex, Point};
use crate::tensor::{Linear, Mlp, ParamStore, Tape, Var};

fn default_k() -> usize {
    16
}

fn default_heads() -> usize {
    1
}

/// Declarative description of one attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub variant: Variant,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Neighborhood size for local variants.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Optional clamp on raw attention scores; off by default.
    #[serde(default)]
    pub score_clamp: Option<f64>,
}

impl BlockConfig {
    pub fn new(variant: Variant, heads: usize, k: usize) -> Self {
        BlockConfig {
            variant,
            heads,
            k,
            score_clamp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BlockCore {
    SelfAttention { params: SaParams, out: Mlp },
    Upa(UpaParams),
    Pool { g: Linear, out: Mlp, max: bool },
}

/// Reduce MLP → attention layer → output MLP(s) → residual.
///
/// Features of width `d_raw` are reduced to `d_raw / 2`, attended, mapped
/// back to `d_raw`, and added to the block input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlock {
    pub variant: Variant,
    pub d_raw: usize,
    pub d_in: usize,
    pub k: usize,
    pub reduce: Mlp,
    pub core: BlockCore,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_raw: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let d_in = d_raw / 2;
        if d_in == 0 {
            return Err(Error::config(alloc::format!(
                "feature width {d_raw} is too narrow for an attention block"
            )));
        }
        check_heads(d_in, cfg.heads)?;
        if cfg.variant.is_local() && cfg.k == 0 {
            return Err(Error::config("neighborhood size k must be positive"));
        }
        let f = |s: &str| alloc::format!("{name}.{s}");
        let reduce = Mlp::new(store, &f("reduce"), &[d_raw, d_in], true, rng)?;
        let out_mlp = |store: &mut ParamStore, rng: &mut R| {
            Mlp::new(store, &f("alpha"), &[d_in, d_in, d_raw], false, rng)
        };
        let core = match cfg.variant {
            Variant::GlobalSa | Variant::LocalSa => {
                let mut params = SaParams::new(store, &f("sa"), d_in, d_in, cfg.heads, rng)?;
                params.score_clamp = cfg.score_clamp;
                BlockCore::SelfAttention {
                    params,
                    out: out_mlp(store, rng)?,
                }
            }
            Variant::MeanPool | Variant::MaxPool => BlockCore::Pool {
                g: Linear::new(store, &f("g"), d_in, d_in, false, rng)?,
                out: out_mlp(store, rng)?,
                max: cfg.variant == Variant::MaxPool,
            },
            v => {
                let mode = match v {
                    Variant::UpaPlain => UpaMode::Plain,
                    Variant::UpaPositional => UpaMode::Positional,
                    Variant::UpaGated => UpaMode::Gated,
                    Variant::UpaUnary => UpaMode::UnaryOnly,
                    _ => UpaMode::PairwiseOnly,
                };
                let mut p = UpaParams::new(store, &f("upa"), mode, d_in, d_raw, cfg.heads, rng)?;
                p.score_clamp = cfg.score_clamp;
                BlockCore::Upa(p)
            }
        };
        Ok(AttentionBlock {
            variant: cfg.variant,
            d_raw,
            d_in,
            k: cfg.k,
            reduce,
            core,
        })
    }

    /// Output MLPs whose final layer decides the residual branch; zeroing
    /// them turns the block into the identity.
    pub fn output_mlps(&self) -> alloc::vec::Vec<&Mlp> {
        match &self.core {
            BlockCore::SelfAttention { out, .. } | BlockCore::Pool { out, .. } => alloc::vec![out],
            BlockCore::Upa(p) => p.alpha.iter().chain(p.beta.iter()).collect(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_raw: Var,
        positions: Option<&[Point]>,
        nbr: Option<&NeighborIndex>,
        capture: bool,
    ) -> Result<AttentionOutput> {
        let s = tape.shape(x_raw);
        if s.len() != 2 || s[1] != self.d_raw {
            return Err(Error::dims("attention block input", s, &[self.d_raw]));
        }
        let n = s[0];
        let need_nbr = || {
            nbr.ok_or_else(|| Error::config("local attention needs a neighbor index"))
                .and_then(|nb| check_nbr(nb, n).map(|_| nb))
        };
        let x = self.reduce.forward(tape, store, x_raw)?;
        match &self.core {
            BlockCore::SelfAttention { params, out } => {
                let att = if self.variant == Variant::GlobalSa {
                    self_attention_global(tape, store, x, params, capture)?
                } else {
                    self_attention_local(tape, store, x, need_nbr()?, params, capture)?
                };
                let y = out.forward(tape, store, att.features)?;
                let features = tape.add(y, x_raw)?;
                Ok(AttentionOutput {
                    features,
                    maps: att.maps,
                })
            }
            BlockCore::Pool { g, out, max } => {
                let gx = g.forward(tape, store, x)?;
                let grouped = group_features(tape, gx, need_nbr()?)?;
                let pooled = if *max {
                    tape.max_reduce(grouped, 1)?
                } else {
                    tape.mean_reduce(grouped, 1)?
                };
                let y = out.forward(tape, store, pooled)?;
                let features = tape.add(y, x_raw)?;
                Ok(AttentionOutput {
                    features,
                    maps: alloc::vec::Vec::new(),
                })
            }
            BlockCore::Upa(p) => {
                let o = upa_forward(tape, store, x, positions, need_nbr()?, p, capture)?;
                let with_pos = |tape: &mut Tape, y: Var| match &o.positional {
                    Some(term) => tape.add(y, term.encoding),
                    None => Ok(y),
                };
                let u = match (o.unary, &p.alpha) {
                    (Some(y), Some(alpha)) => {
                        let y = with_pos(tape, y)?;
                        Some(alpha.forward(tape, store, y)?)
                    }
                    _ => None,
                };
                let e = match (o.pairwise, &p.beta) {
                    (Some(y), Some(beta)) => {
                        let y = with_pos(tape, y)?;
                        Some(beta.forward(tape, store, y)?)
                    }
                    _ => None,
                };
                let features = match (p.mode, u, e) {
                    (UpaMode::Gated, Some(u), Some(e)) => {
                        let gate = p.gate.as_ref().expect("gated mode owns a gate");
                        let s = gate.forward(tape, store, x)?;
                        super::gated_fuse(tape, u, e, x_raw, s)?
                    }
                    (_, Some(u), Some(e)) => {
                        let ue = tape.add(u, e)?;
                        tape.add(ue, x_raw)?
                    }
                    (_, Some(b), None) | (_, None, Some(b)) => tape.add(b, x_raw)?,
                    (_, None, None) => unreachable!("every UPA mode has a branch"),
                };
                Ok(AttentionOutput {
                    features,
                    maps: o.maps,
                })
            }
        }
    }
}

/// Runs `block` on `x_raw` (see [`AttentionBlock::forward`]).
pub fn attention_block(
    tape: &mut Tape,
    store: &ParamStore,
    block: &AttentionBlock,
    x_raw: Var,
    positions: Option<&[Point]>,
    nbr: Option<&NeighborIndex>,
    capture: bool,
) -> Result<AttentionOutput> {
    block.forward(tape, store, x_raw, positions, nbr, capture)
}

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_heads, check_nbr, local_map, Branch, CapturedMap};
use crate::error::{Error, Result};
use crate::geometry::{group_features, NeighborIndex, Point};
use crate::tensor::{Linear, Mlp, ParamId, ParamStore, Tape, Var};

/// Which UPA components a block evaluates and how they are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpaMode {
    /// `z = u + e + x`
    Plain,
    /// Plain fusion with the positional encoding added to both branches.
    Positional,
    /// `z = σ(s)·u + (1 − σ(s))·e + x`
    Gated,
    /// `z = u + x`
    UnaryOnly,
    /// `z = e + x`
    PairwiseOnly,
}

impl UpaMode {
    fn has_unary(self) -> bool {
        self != UpaMode::PairwiseOnly
    }

    fn has_pairwise(self) -> bool {
        self != UpaMode::UnaryOnly
    }
}

/// Positional branch: an MLP `δ: R³ → R^d` over relative coordinates, then
/// unary attention over the resulting features with its own score and value
/// projections.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalParams {
    pub delta: Mlp,
    pub w_u: ParamId,
    pub g: Linear,
}

/// Learned state of one unary-pairwise attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UpaParams {
    pub mode: UpaMode,
    pub heads: usize,
    pub d_in: usize,
    pub d_out: usize,
    /// `d_in × h` unary score projection (bias-free).
    pub w_u: Option<ParamId>,
    /// `d_in × h` pairwise score projection (bias-free).
    pub w_e: Option<ParamId>,
    /// Value transform shared by the unary and pairwise branches.
    pub g: Linear,
    pub alpha: Option<Mlp>,
    pub beta: Option<Mlp>,
    /// Per-point gate score `s_i`, only in gated mode.
    pub gate: Option<Linear>,
    pub positional: Option<PositionalParams>,
    pub score_clamp: Option<f64>,
}

fn score_projection<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    heads: usize,
    rng: &mut R,
) -> Result<ParamId> {
    Ok(Linear::new(store, name, d_in, heads, false, rng)?.weight)
}

impl UpaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mode: UpaMode,
        d_in: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_in, heads)?;
        let f = |s: &str| alloc::format!("{name}.{s}");
        let g = Linear::new(store, &f("g"), d_in, d_in, false, rng)?;
        let (w_u, alpha) = if mode.has_unary() {
            (
                Some(score_projection(store, &f("w_u"), d_in, heads, rng)?),
                Some(Mlp::new(
                    store,
                    &f("alpha"),
                    &[d_in, d_in, d_out],
                    false,
                    rng,
                )?),
            )
        } else {
            (None, None)
        };
        let (w_e, beta) = if mode.has_pairwise() {
            (
                Some(score_projection(store, &f("w_e"), d_in, heads, rng)?),
                Some(Mlp::new(
                    store,
                    &f("beta"),
                    &[d_in, d_in, d_out],
                    false,
                    rng,
                )?),
            )
        } else {
            (None, None)
        };
        let gate = (mode == UpaMode::Gated)
            .then(|| Linear::new(store, &f("gate"), d_in, 1, true, rng))
            .transpose()?;
        let positional = if mode == UpaMode::Positional {
            Some(PositionalParams {
                delta: Mlp::new(store, &f("delta"), &[3, d_in, d_in], false, rng)?,
                w_u: score_projection(store, &f("pos_w_u"), d_in, heads, rng)?,
                g: Linear::new(store, &f("pos_g"), d_in, d_in, false, rng)?,
            })
        } else {
            None
        };
        Ok(UpaParams {
            mode,
            heads,
            d_in,
            d_out,
            w_u,
            w_e,
            g,
            alpha,
            beta,
            gate,
            positional,
            score_clamp: None,
        })
    }
}

/// Unary scores `W_u x_j` for grouped neighbor features `M × k × d`; the
/// result (`M × k × h`) never depends on the query.
pub fn relation_unary(tape: &mut Tape, store: &ParamStore, xg: Var, w_u: ParamId) -> Result<Var> {
    let w = tape.param(store, w_u);
    tape.matmul(xg, w)
}

/// Pairwise scores `W_e (x_j − x_i)` for grouped neighbors `M × k × d` and
/// their queries `M × d`.
pub fn relation_pairwise(
    tape: &mut Tape,
    store: &ParamStore,
    xg: Var,
    xq: Var,
    w_e: ParamId,
) -> Result<Var> {
    let sg = tape.shape(xg).to_vec();
    let sq = tape.shape(xq);
    if sg.len() != 3 || sq.len() != 2 || sq[0] != sg[0] || sq[1] != sg[2] {
        return Err(Error::dims("relation_pairwise", &sg, sq));
    }
    let (m, k) = (sg[0], sg[1]);
    let rows: Vec<usize> = (0..m).flat_map(|i| core::iter::repeat(i).take(k)).collect();
    let xe = tape.gather_rows(xq, &rows)?;
    let xe = tape.reshape(xe, sg)?;
    let rel = tape.sub(xg, xe)?;
    let w = tape.param(store, w_e);
    tape.matmul(rel, w)
}

/// [`relation_unary`] over the neighborhoods of `nbr`, projecting each point
/// once before grouping.
pub fn unary_scores(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    nbr: &NeighborIndex,
    w_u: ParamId,
) -> Result<Var> {
    let w = tape.param(store, w_u);
    let proj = tape.matmul(x, w)?;
    group_features(tape, proj, nbr)
}

/// [`relation_pairwise`] over the neighborhoods of `nbr`, using
/// `W_e (x_j − x_i) = W_e x_j − W_e x_i` so only `M × k × h` is grouped.
pub fn pairwise_scores(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    nbr: &NeighborIndex,
    w_e: ParamId,
) -> Result<Var> {
    let w = tape.param(store, w_e);
    let proj = tape.matmul(x, w)?;
    let h = tape.shape(proj)[1];
    let grouped = group_features(tape, proj, nbr)?;
    let rows = nbr.query_rows();
    let own = tape.gather_rows(proj, &rows)?;
    let own = tape.reshape(own, vec![nbr.queries(), nbr.k(), h])?;
    tape.sub(grouped, own)
}

/// Multi-head aggregation: for each head, a softmax over the `k` neighbor
/// scores weights that head's slice of the values; slices are concatenated.
///
/// Returns the `M × d` output and the `M × k × h` weights.
pub fn upa_attend(
    tape: &mut Tape,
    scores: Var,
    values: Var,
    heads: usize,
    score_clamp: Option<f64>,
) -> Result<(Var, Var)> {
    let ss = tape.shape(scores);
    let sv = tape.shape(values);
    if ss.len() != 3 || ss[2] != heads {
        return Err(Error::dims("upa_attend scores", ss, &[heads]));
    }
    if sv.len() != 3 {
        return Err(Error::dims("upa_attend values", sv, ss));
    }
    check_heads(sv[2], heads)?;
    let scores = match score_clamp {
        Some(c) => tape.clamp(scores, -c, c),
        None => scores,
    };
    let w = tape.softmax_axis(scores, 1)?;
    let y = tape.attend_heads(w, values)?;
    Ok((y, w))
}

/// Output of the positional branch.
#[derive(Debug, Clone, Copy)]
pub struct PositionalTerm {
    /// `M × k × h` scores computed from the positional features.
    pub scores: Var,
    /// `M × k × h` softmax weights.
    pub weights: Var,
    /// `M × d_in` attended positional encoding.
    pub encoding: Var,
}

/// Positional features `δ(p_j − p_i)` fed through unary attention.
pub fn positional_scores(
    tape: &mut Tape,
    store: &ParamStore,
    positions: &[Point],
    nbr: &NeighborIndex,
    pp: &PositionalParams,
    heads: usize,
    score_clamp: Option<f64>,
) -> Result<PositionalTerm> {
    let (m, k) = (nbr.queries(), nbr.k());
    let mut rel = Vec::with_capacity(m * k * 3);
    for i in 0..m {
        let pi = positions.get(i).ok_or(Error::Index {
            op: "positional_scores",
            index: i,
            len: positions.len(),
        })?;
        for &j in nbr.row(i) {
            let pj = positions.get(j).ok_or(Error::Index {
                op: "positional_scores",
                index: j,
                len: positions.len(),
            })?;
            rel.extend((0..3).map(|a| pj[a] - pi[a]));
        }
    }
    let rel = tape.constant(vec![m, k, 3], rel)?;
    let xpos = pp.delta.forward(tape, store, rel)?;
    let scores = relation_unary(tape, store, xpos, pp.w_u)?;
    let values = pp.g.forward(tape, store, xpos)?;
    let (encoding, weights) = upa_attend(tape, scores, values, heads, score_clamp)?;
    Ok(PositionalTerm {
        scores,
        weights,
        encoding,
    })
}

/// `z_i = σ(s_i)·u_i + (1 − σ(s_i))·e_i + x_i`.
pub fn gated_fuse(tape: &mut Tape, u: Var, e: Var, x_res: Var, s: Var) -> Result<Var> {
    let su = tape.shape(u).to_vec();
    if tape.shape(e) != su.as_slice() || tape.shape(x_res) != su.as_slice() {
        return Err(Error::dims("gated_fuse", &su, tape.shape(e)));
    }
    let rows = tape.value(u).len() / su.last().copied().unwrap_or(1);
    if tape.value(s).len() != rows {
        return Err(Error::dims("gated_fuse gate", tape.shape(s), &su));
    }
    let sig = tape.sigmoid(s);
    let neg = tape.mul_scalar(sig, -1.0);
    let rest = tape.add_scalar(neg, 1.0);
    let a = tape.mul_rows(sig, u)?;
    let b = tape.mul_rows(rest, e)?;
    let ab = tape.add(a, b)?;
    tape.add(ab, x_res)
}

/// Raw attention outputs of a UPA layer, before the α/β transforms.
#[derive(Debug, Clone)]
pub struct UpaOutput {
    pub unary: Option<Var>,
    pub pairwise: Option<Var>,
    pub positional: Option<PositionalTerm>,
    pub maps: Vec<CapturedMap>,
}

/// Unary and pairwise attention of every point over its neighborhood
/// (`x: N × d_in`). The value transform `g` is shared by both branches.
pub fn upa_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    positions: Option<&[Point]>,
    nbr: &NeighborIndex,
    p: &UpaParams,
    capture: bool,
) -> Result<UpaOutput> {
    let s = tape.shape(x);
    if s.len() != 2 || s[1] != p.d_in {
        return Err(Error::dims("upa input", s, &[p.d_in]));
    }
    let n = s[0];
    check_nbr(nbr, n)?;
    let gx = p.g.forward(tape, store, x)?;
    let values = group_features(tape, gx, nbr)?;
    let mut maps = Vec::new();

    let mut unary = None;
    if let Some(w_u) = p.w_u {
        let scores = unary_scores(tape, store, x, nbr, w_u)?;
        let (y, w) = upa_attend(tape, scores, values, p.heads, p.score_clamp)?;
        if capture {
            maps.push(CapturedMap {
                branch: Branch::Unary,
                map: local_map(tape, w, nbr, n)?,
            });
        }
        unary = Some(y);
    }
    let mut pairwise = None;
    if let Some(w_e) = p.w_e {
        let scores = pairwise_scores(tape, store, x, nbr, w_e)?;
        let (y, w) = upa_attend(tape, scores, values, p.heads, p.score_clamp)?;
        if capture {
            maps.push(CapturedMap {
                branch: Branch::Pairwise,
                map: local_map(tape, w, nbr, n)?,
            });
        }
        pairwise = Some(y);
    }
    let positional = match &p.positional {
        Some(pp) => {
            let pos = positions
                .ok_or_else(|| Error::config("the positional branch needs point coordinates"))?;
            if pos.len() != n {
                return Err(Error::dims("positions", &[pos.len()], &[n]));
            }
            let term = positional_scores(tape, store, pos, nbr, pp, p.heads, p.score_clamp)?;
            if capture {
                maps.push(CapturedMap {
                    branch: Branch::Positional,
                    map: local_map(tape, term.weights, nbr, n)?,
                });
            }
            Some(term)
        }
        None => None,
    };
    Ok(UpaOutput {
        unary,
        pairwise,
        positional,
        maps,
    })
}

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{
    check_heads, check_nbr, head_indicator, local_map, AttentionOutput, Branch, CapturedMap,
};
use crate::analysis::AttentionMap;
use crate::error::{Error, Result};
use crate::geometry::{group_features, NeighborIndex};
use crate::tensor::{Linear, ParamStore, Tape, Var};

/// Query, key, and value projections of dot-product self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct SaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub heads: usize,
    /// Clamp raw scores into `[-c, c]` before the softmax.
    pub score_clamp: Option<f64>,
}

impl SaParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_heads(d_out, heads)?;
        Ok(SaParams {
            wq: Linear::new(store, &alloc::format!("{name}.wq"), d_in, d_out, false, rng)?,
            wk: Linear::new(store, &alloc::format!("{name}.wk"), d_in, d_out, false, rng)?,
            wv: Linear::new(store, &alloc::format!("{name}.wv"), d_in, d_out, false, rng)?,
            heads,
            score_clamp: None,
        })
    }

    pub fn d_out(&self) -> usize {
        self.wv.d_out
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Var, Var)> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.wq.d_in {
            return Err(Error::dims("self-attention input", s, &[self.wq.d_in]));
        }
        let q = self.wq.forward(tape, store, x)?;
        let k = self.wk.forward(tape, store, x)?;
        let v = self.wv.forward(tape, store, x)?;
        Ok((q, k, v))
    }
}

/// `y_i = Σ_j softmax_j(q_i·k_j) v_j` over every point, per head.
pub fn self_attention_global(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &SaParams,
    capture: bool,
) -> Result<AttentionOutput> {
    let (q, k, v) = p.project(tape, store, x)?;
    let n = tape.shape(x)[0];
    let d = p.d_out();
    let dh = d / p.heads;
    let mut heads = Vec::with_capacity(p.heads);
    let mut probs = Vec::new();
    for t in 0..p.heads {
        let qh = tape.slice_lastdim(q, t * dh, dh)?;
        let kh = tape.slice_lastdim(k, t * dh, dh)?;
        let vh = tape.slice_lastdim(v, t * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        if let Some(c) = p.score_clamp {
            scores = tape.clamp(scores, -c, c);
        }
        let att = tape.softmax_lastdim(scores)?;
        if capture {
            probs.extend_from_slice(tape.value(att));
        }
        heads.push(tape.matmul(att, vh)?);
    }
    let features = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_lastdim(&heads)?
    };
    let maps = if capture {
        vec![CapturedMap {
            branch: Branch::SelfAttention,
            map: AttentionMap::dense(0, p.heads, n, n, probs)?,
        }]
    } else {
        Vec::new()
    };
    Ok(AttentionOutput { features, maps })
}

/// Dot-product self-attention where query `i` only sees its neighbors.
pub fn self_attention_local(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    nbr: &NeighborIndex,
    p: &SaParams,
    capture: bool,
) -> Result<AttentionOutput> {
    let (q, k, v) = p.project(tape, store, x)?;
    let n = tape.shape(x)[0];
    check_nbr(nbr, n)?;
    let d = p.d_out();
    let kg = group_features(tape, k, nbr)?;
    let vg = group_features(tape, v, nbr)?;
    let qe = tape.gather_rows(q, &nbr.query_rows())?;
    let qe = tape.reshape(qe, vec![n, nbr.k(), d])?;
    let prod = tape.mul(qe, kg)?;
    let ind = tape.constant(vec![d, p.heads], head_indicator(d, p.heads))?;
    let mut scores = tape.matmul(prod, ind)?;
    if let Some(c) = p.score_clamp {
        scores = tape.clamp(scores, -c, c);
    }
    let att = tape.softmax_axis(scores, 1)?;
    let features = tape.attend_heads(att, vg)?;
    let maps = if capture {
        vec![CapturedMap {
            branch: Branch::SelfAttention,
            map: local_map(tape, att, nbr, n)?,
        }]
    } else {
        Vec::new()
    };
    Ok(AttentionOutput { features, maps })
}

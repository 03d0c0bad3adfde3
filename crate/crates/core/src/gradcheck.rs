//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates the forward closure, so it is an
//! oracle independent of every backward rule on the tape.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Var};

/// Relative error with an absolute floor so vanishing gradients do not blow
/// up the ratio: `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Default step and floor.
pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;

/// Compares tape gradients of the scalar produced by `f` against central
/// differences for every entry of every parameter in `params`.
///
/// `f` must be a pure function of the store contents.
pub fn check_params<F>(store: &mut ParamStore, params: &[ParamId], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| {
            store
                .get(id)
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_default()
        })
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.value(l)[0])
    };

    let mut out = GradCheck {
        max_rel_err: 0.0,
        checked: 0,
    };
    for (&id, grads) in params.iter().zip(&analytic) {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + STEP;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - STEP;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = grads.get(i).copied().unwrap_or(0.0);
            out.max_rel_err = out.max_rel_err.max(relative_error(a, numeric, FLOOR));
            out.checked += 1;
        }
    }
    store.zero_grad();
    Ok(out)
}

/// Gradient check over every parameter in the store.
pub fn check_all<F>(store: &mut ParamStore, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    check_params(store, &ids, f)
}

/// Overwrites every parameter with draws from `U[-1, 1]`.
///
/// Fresh layers have zero biases, which can park ReLU inputs exactly on the
/// kink (e.g. a zero relative offset); random values move them off it.
pub fn randomize<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
}

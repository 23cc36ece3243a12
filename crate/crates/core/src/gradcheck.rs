//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Gradients;
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};

/// One checked scalar parameter entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub kind: ParamKind,
    pub index: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`check_gradients`]; differences closer than
/// this to zero are judged on their absolute size.
pub const REL_FLOOR: f64 = 1e-7;

/// Anything that owns a parameter store.
pub trait HasParams {
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
}

impl HasParams for ParamStore<f64> {
    fn store(&self) -> &ParamStore<f64> {
        self
    }

    fn store_mut(&mut self) -> &mut ParamStore<f64> {
        self
    }
}

/// Compares `loss`'s analytic gradient against the fourth-order central
/// difference `(8 (f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h` on up to `per_kind` randomly chosen entries of each parameter
/// kind. Only entries of parameters the loss actually touches are drawn.
pub fn check_gradients<M, F>(model: &mut M, per_kind: usize, h: f64, seed: u64, mut loss: F) -> Result<Vec<GradSample>>
where
    M: HasParams,
    F: FnMut(&M, bool) -> Result<(f64, Gradients<f64>)>,
{
    let (_, grads) = loss(model, true)?;
    let mut by_kind: BTreeMap<&'static str, Vec<(ParamId, usize, usize)>> = BTreeMap::new();
    for (id, p) in model.store().iter() {
        if grads.get(id).is_none() {
            continue;
        }
        let (r, c) = p.value.dim();
        let entries = by_kind.entry(p.kind.as_str()).or_default();
        for i in 0..r {
            for j in 0..c {
                entries.push((id, i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mut entries) in by_kind {
        entries.shuffle(&mut rng);
        entries.truncate(per_kind);
        for (id, i, j) in entries {
            let orig = model.store().value(id)[[i, j]];
            let mut at = |model: &mut M, x: f64| -> Result<f64> {
                model.store_mut().value_mut(id)[[i, j]] = x;
                Ok(loss(model, false)?.0)
            };
            let (p1, m1) = (at(model, orig + h)?, at(model, orig - h)?);
            let (p2, m2) = (at(model, orig + 2.0 * h)?, at(model, orig - 2.0 * h)?);
            model.store_mut().value_mut(id)[[i, j]] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let analytic = grads.get(id).expect("touched")[[i, j]];
            let p = model.store().get(id);
            out.push(GradSample {
                param: p.name.clone(),
                kind: p.kind,
                index: (i, j),
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, REL_FLOOR),
            });
        }
    }
    Ok(out)
}

/// Number of samples and worst relative error per parameter kind.
pub fn summarize(samples: &[GradSample]) -> BTreeMap<&'static str, (usize, f64)> {
    let mut out: BTreeMap<&'static str, (usize, f64)> = BTreeMap::new();
    for s in samples {
        let e = out.entry(s.kind.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 = e.1.max(s.rel_error);
    }
    out
}

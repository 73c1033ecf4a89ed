use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRecord {
    pub param_name: String,
    pub max_rel_err: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub analytic: f64,
    pub numeric: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub records: Vec<GradCheckRecord>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.records.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }

    pub fn worst(&self) -> Option<&GradCheckRecord> {
        self.records.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Derivative magnitude under which errors are measured absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

fn evaluate<F>(store: &ParamStore, f: &F, pinned: &[Vec<f64>]) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var> + Sync,
{
    let mut tape = Tape::with_pinned_detaches(pinned.to_vec());
    let loss = f(store, &mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("checked function returned {v}")));
    }
    Ok(v)
}

/// Compares backward-pass gradients of `f` with central differences
/// `(f(p+eps) - f(p-eps)) / 2eps`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, floor)`
/// with `floor = GRAD_FLOOR * max(1, |f|)`. Round-off in a central
/// difference grows with `|f|`, so derivatives below the floor are compared
/// on an absolute scale.
///
/// Detached values are pinned to their unperturbed values, so the numeric
/// derivative treats stop-gradient branches as constants, as backward does.
/// `ids` restricts the check to some parameters; `None` checks all of them.
pub fn finite_diff_check<F>(store: &ParamStore, ids: Option<&[ParamId]>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var> + Sync,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::NonFinite("checked function".into()));
    }
    let analytic = tape.backward(loss)?;
    compare_gradients(store, &analytic, ids, eps, f)
}

/// Same as [`finite_diff_check`] but against caller-supplied gradients.
pub fn compare_gradients<F>(
    store: &ParamStore,
    analytic: &Gradients,
    ids: Option<&[ParamId]>,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var> + Sync,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Invalid(format!("finite-difference eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut base = Tape::new();
    let base_loss = f(store, &mut base)?;
    let floor = GRAD_FLOOR * base.scalar(base_loss).abs().max(1.0);
    let pinned = base.detached_values().to_vec();
    let all: Vec<ParamId> = store.ids().collect();
    let ids = ids.unwrap_or(&all);
    // one working copy per parameter so parameters can be checked in parallel
    let records = ids
        .par_iter()
        .map(|&id| {
            let mut work = store.clone();
            let a = analytic.get(id, store);
            let (mut worst, mut at) = (0.0f64, (0.0, 0.0));
            for k in 0..a.len() {
                let orig = work.get(id).data()[k];
                work.get_mut(id).data_mut()[k] = orig + eps;
                let up = evaluate(&work, &f, &pinned)?;
                work.get_mut(id).data_mut()[k] = orig - eps;
                let down = evaluate(&work, &f, &pinned)?;
                work.get_mut(id).data_mut()[k] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let av = a.data()[k];
                let denom = av.abs().max(numeric.abs()).max(floor);
                let rel = (av - numeric).abs() / denom;
                if rel > worst || k == 0 {
                    worst = worst.max(rel);
                    at = (av, numeric);
                }
            }
            Ok(GradCheckRecord { param_name: store.name(id).to_string(), max_rel_err: worst, analytic: at.0, numeric: at.1, eps })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = GradCheckReport { records };
    Ok(report)
}

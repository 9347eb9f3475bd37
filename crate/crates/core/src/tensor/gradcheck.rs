//! Central finite-difference verification of analytic gradients.

use super::param::{GradMap, ParamId, ParamStore};
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient entry.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct FdEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    pub max_rel_err: f64,
    /// False when `f` returned different values for identical inputs.
    pub reliable: bool,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.reliable && self.max_rel_err <= tol
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `analytic` against central differences of `f` for every entry
/// of the parameters in `ids`.
pub fn finite_difference_check<F>(
    store: &ParamStore,
    analytic: &GradMap,
    ids: &[ParamId],
    step: f64,
    mut f: F,
) -> Result<FdReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    let base_a = f(store)?;
    let base_b = f(store)?;
    let reliable = base_a.to_bits() == base_b.to_bits();

    let mut probe = store.clone();
    let mut entries = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).numel();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..n {
            let orig = store.value(id).data()[k];
            probe.get_mut(id).value.data_mut()[k] = orig + step;
            let plus = f(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig - step;
            let minus = f(&probe)?;
            probe.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).data()[k];
            max_rel = max_rel.max(rel_err(a, numeric));
            max_abs = max_abs.max((a - numeric).abs());
        }
        entries.push(FdEntry {
            name: store.get(id).name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    let max_rel_err = entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        entries,
        max_rel_err,
        reliable,
    })
}

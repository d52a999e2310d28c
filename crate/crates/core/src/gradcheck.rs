//! Central finite-difference checks of reverse-mode gradients.
//!
//! The numeric side only evaluates forward values, so it stays independent of
//! every backward rule it is used to verify.

use crate::error::Result;
use crate::graph::{Graph, ParamStore, Var};

/// Outcome of a gradient check over every element of every trainable
/// parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.worst_rel_error <= tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor for [`relative_error`]; gradients whose magnitude is
/// below it are compared in absolute terms scaled by the floor.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Compares `backward` against central differences with step `step`.
///
/// `loss` builds the scalar loss on a graph bound to `store`; it must be a
/// deterministic function of the stored values.
pub fn check<F>(store: &mut ParamStore<f64>, step: f64, loss: F) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<Var>,
{
    let analytic: Vec<Option<Vec<f64>>> = {
        let mut g = Graph::with_params(&*store);
        let l = loss(&mut g)?;
        let grads = g.backward(l)?;
        store
            .ids()
            .map(|id| grads.get(store, id).map(|t| t.data().to_vec()))
            .collect()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(store);
        let l = loss(&mut g)?;
        Ok(g.value(l).data()[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let n = store.get(id).len();
        for i in 0..n {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()].as_ref().map_or(0.0, |g| g[i]);
            let rel = relative_error(a, numeric, DEFAULT_FLOOR);
            report.checked += 1;
            if rel > report.worst_rel_error || report.checked == 1 {
                report.worst_rel_error = rel;
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

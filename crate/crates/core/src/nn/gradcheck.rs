//! Central-difference verification of analytic parameter gradients.

use crate::error::Result;
use crate::nn::{Graph, ParamStore, Var};

/// Worst disagreement found by [`check_gradients`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Number of scalar parameters perturbed.
    pub checked: usize,
    pub worst_rel_error: f64,
    /// `name[index]` of the worst coordinate.
    pub worst_param: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares `d loss / d p` from [`Graph::backward`] with
/// `(loss(p + h) - loss(p - h)) / 2h` for every scalar of every parameter.
///
/// The relative error is `|a - n| / max(|a|, |n|, floor)`; `floor` keeps
/// coordinates whose true gradient is zero from dividing noise by noise.
pub fn check_gradients(
    store: &mut ParamStore,
    h: f64,
    floor: f64,
    build: impl Fn(&mut Graph) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(store);
        let loss = build(&mut g)?;
        g.backward(loss)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    };
    let mut report = GradCheckReport {
        checked: 0,
        worst_rel_error: 0.0,
        worst_param: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |t| t.data()[i]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            if rel > report.worst_rel_error || report.worst_param.is_empty() {
                report.worst_rel_error = rel;
                report.worst_param = format!("{}[{i}]", store.name(id));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

//! Central finite-difference verification of tape gradients.

use crate::error::Result;
use crate::params::{Graph, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

fn loss_value<S: Scalar>(store: &ParamStore<S>, loss_fn: &impl Fn(&Graph<'_, S>) -> Result<Var>) -> Result<f64> {
    let g = Graph::frozen(store);
    let l = loss_fn(&g)?;
    let v = g.tape().value(l).get(0, 0).to_f64_lossy();
    Ok(v)
}

/// Compares analytic gradients against `(f(x+eps) - f(x-eps)) / 2eps` for
/// every coordinate of every parameter accepted by `trainable`.
pub fn check_gradients<S: Scalar>(
    store: &ParamStore<S>,
    trainable: impl Fn(&str) -> bool,
    eps: f64,
    loss_fn: impl Fn(&Graph<'_, S>) -> Result<Var>,
) -> Result<GradCheckReport> {
    let analytic = {
        let g = Graph::with_filter(store, &trainable);
        let l = loss_fn(&g)?;
        g.backward(l)?
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().filter(|n| trainable(n)).map(str::to_string).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for name in names {
        let n = store.get(&name)?.len();
        for i in 0..n {
            let orig = store.get(&name)?.data()[i];
            probe.get_mut(&name)?.data_mut()[i] = orig + S::lit(eps);
            let up = loss_value(&probe, &loss_fn)?;
            probe.get_mut(&name)?.data_mut()[i] = orig - S::lit(eps);
            let down = loss_value(&probe, &loss_fn)?;
            probe.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic
                .get(&name)
                .map_or(0.0, |g| g.data()[i].to_f64_lossy());
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}

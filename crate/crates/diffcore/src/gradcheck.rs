//! Central finite-difference checker for recorded graphs.

use crate::error::DiffError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Perturbation size `h` of the central difference.
    pub step: f64,
    /// Denominator floor: errors are relative for gradients above this
    /// magnitude and absolute (scaled by it) below.
    pub floor: f64,
    /// Upper bound on probed elements per parameter, evenly spaced.
    pub max_elems: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            max_elems: 64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares `backward` gradients of the scalar built by `build` with central
/// differences for every non-frozen parameter in `store`.
pub fn check_gradients<E, F>(
    store: &ParamStore<f64>,
    cfg: GradCheckConfig,
    mut build: F,
) -> Result<GradCheckReport, E>
where
    E: From<DiffError>,
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;

    let mut eval = |s: &ParamStore<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let v = build(&mut g, s)?;
        Ok(g.scalar(v))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut probe = store.clone();
    let names: Vec<String> = store.names().filter(|n| !store.is_frozen(n)).cloned().collect();
    for name in names {
        let analytic = grads
            .get(&name)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(&name).map(|t| t.numel()).unwrap_or(0)]);
        let n = analytic.len();
        let stride = n.div_ceil(cfg.max_elems).max(1);
        for idx in (0..n).step_by(stride) {
            let orig = probe.get(&name)?.data()[idx];
            probe.get_mut(&name)?.data_mut()[idx] = orig + cfg.step;
            let plus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig - cfg.step;
            let minus = eval(&probe)?;
            probe.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = idx;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

//! Central-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Graph, Var};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead of amplified noise.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    Ok(g.value(out).data()[0])
}

/// Checks every coordinate of every trainable parameter.
pub fn grad_check<F>(f: F, store: &ParamStore, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(f, store, h, tol, usize::MAX)
}

/// Like [`grad_check`], but visits at most `max_per_param` evenly strided
/// coordinates of each parameter.
pub fn grad_check_sampled<F>(
    f: F,
    store: &ParamStore,
    h: f64,
    tol: f64,
    max_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: None, coords_checked: 0, tol };
    let mut probe = store.clone();
    for (name, entry) in store.iter() {
        if !entry.trainable {
            continue;
        }
        let n = entry.value.len();
        let stride = if n > max_per_param { n.div_ceil(max_per_param) } else { 1 };
        let analytic = grads.get(name);
        for i in (0..n).step_by(stride) {
            let orig = entry.value.data()[i];
            probe.value_mut(name)?.data_mut()[i] = orig + h;
            let plus = eval(&f, &probe)?;
            probe.value_mut(name)?.data_mut()[i] = orig - h;
            let minus = eval(&f, &probe)?;
            probe.value_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |t| t.data()[i]);
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err >= report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}

//! Central-difference gradient verification in 64-bit mode.
//!
//! Any differentiable path in the crate can be checked by wrapping it in a
//! closure `params -> (loss, grads)` and calling [`check_gradients`]. The
//! tolerance is a relative error against `max(1, |fd|, |analytic|)`, which
//! behaves like a relative test for large gradients and an absolute test
//! near zero.

use super::param::{GradStore, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients with central differences of step `h` on every
/// trainable parameter element. `run` must be a pure function of the
/// parameter values.
pub fn check_gradients<F>(params: &mut ParamSet<f64>, run: F, h: f64) -> GradCheckReport
where
    F: Fn(&ParamSet<f64>) -> (f64, GradStore<f64>),
{
    let (_, analytic) = run(params);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
    };

    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.get(id).trainable {
            continue;
        }
        let n = params.get(id).value.numel();
        let zero = Tensor::zeros(params.get(id).value.rows, params.get(id).value.cols);
        for i in 0..n {
            let orig = params.get(id).value.data[i];
            params.get_mut(id).value.data[i] = orig + h;
            let (f_plus, _) = run(params);
            params.get_mut(id).value.data[i] = orig - h;
            let (f_minus, _) = run(params);
            params.get_mut(id).value.data[i] = orig;

            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic.get(id).unwrap_or(&zero).data[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}

/// Default step and tolerance used by the verification suites.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-3;

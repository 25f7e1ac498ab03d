use serde::Serialize;
use thiserror::Error;

use super::ParamRegistry;

/// Denominator floor for relative error, so near-zero gradients are judged
/// on an absolute scale instead of amplifying rounding noise.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("objective is non-finite ({value}) at the unperturbed point")]
    NonFiniteBase { value: f64 },
    #[error("objective became non-finite ({value}) while perturbing `{param}`[{index}]")]
    NonFinite { param: String, index: usize, value: f64 },
    #[error("step size must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients against central differences.
///
/// `objective` must evaluate the scalar at the registry's current values and
/// accumulate its gradient into the registry's gradient buffers; it is called
/// once for the analytic pass and twice per scalar parameter. Gradient
/// buffers are zeroed before each call and on return.
pub fn grad_check<F>(
    reg: &mut ParamRegistry,
    mut objective: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradCheckError>
where
    F: FnMut(&mut ParamRegistry) -> f64,
{
    if !(h > 0.0) {
        return Err(GradCheckError::BadStep(h));
    }
    reg.zero_grads();
    let base = objective(reg);
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteBase { value: base });
    }
    let analytic: Vec<Vec<f64>> = reg.ids().map(|id| reg.grad(id).data().to_vec()).collect();

    let ids: Vec<_> = reg.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let name = reg.name(id).to_string();
        let mut check = ParamCheck {
            name: name.clone(),
            entries: reg.value(id).len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        #[allow(clippy::needless_range_loop)]
        for k in 0..check.entries {
            let original = reg.value(id).data()[k];
            let mut eval = |reg: &mut ParamRegistry, at: f64| {
                reg.value_mut(id).data_mut()[k] = at;
                reg.zero_grads();
                objective(reg)
            };
            let plus = eval(reg, original + h);
            let minus = eval(reg, original - h);
            reg.value_mut(id).data_mut()[k] = original;
            for value in [plus, minus] {
                if !value.is_finite() {
                    reg.zero_grads();
                    return Err(GradCheckError::NonFinite {
                        param: name,
                        index: k,
                        value,
                    });
                }
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[id.index()][k];
            let rel = relative_error(a, numeric);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = k;
            }
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
        }
        params.push(check);
    }
    reg.zero_grads();
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        tol,
        max_rel_err,
        passed: max_rel_err <= tol,
    })
}

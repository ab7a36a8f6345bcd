use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares `analytic` against central finite differences of `loss_fn`
/// for every scalar in `params`.
///
/// Relative error per element is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut loss_fn: F, analytic: &ParamSet, params: &ParamSet, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::config("grad_check eps must be positive"));
    }
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::dim(format!("no analytic gradient for {name}")))?;
        grad.ensure_same_shape(&params[name], name)?;
        for i in 0..params[name].len() {
            let orig = params[name][i];
            work.slot(name)[i] = orig + eps;
            let plus = loss_fn(&work)?;
            work.slot(name)[i] = orig - eps;
            let minus = loss_fn(&work)?;
            work.slot(name)[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

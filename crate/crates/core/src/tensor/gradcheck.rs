//! Central finite-difference checks of analytic gradients.

use super::{Graph, ParamStore, Result, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor of `1e-6` in the denominator, so that
/// entries whose true gradient is essentially zero are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the gradient of the scalar built by `f` against central differences
/// with step `h`, perturbing at most `per_param` evenly spaced entries of every
/// parameter (all entries when `None`). `f` is always evaluated in eval mode.
pub fn check_gradients<F>(
    params: &mut ParamStore,
    h: f64,
    per_param: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let analytic = {
        let mut g = Graph::eval(params);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |p: &ParamStore| -> Result<f64> {
        let mut g = Graph::eval(p);
        let loss = f(&mut g)?;
        Ok(g.value(loss).item())
    };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for id in ids {
        let n = params.value(id).numel();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = params.value(id).data()[idx];
            params.get_mut(id).value.data_mut()[idx] = orig + h;
            let plus = eval(params)?;
            params.get_mut(id).value.data_mut()[idx] = orig - h;
            let minus = eval(params)?;
            params.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[idx]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((params.get(id).name.clone(), idx));
            }
        }
    }
    Ok(report)
}

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares analytic gradients with central differences.
///
/// `f` returns the loss and its analytic gradients at the given parameters.
/// `names` restricts the check to a subset; `None` checks every parameter.
/// Returns the maximum over all checked entries of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(
    params: &mut ParamStore,
    names: Option<&[&str]>,
    step: f64,
    mut f: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, Grads)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::numeric("grad_check: loss is not finite"));
    }
    let selected: Vec<String> = match names {
        Some(ns) => ns.iter().map(|s| s.to_string()).collect(),
        None => params.names().cloned().collect(),
    };

    let mut worst: f64 = 0.0;
    for name in &selected {
        let n = params.get(name)?.len();
        for i in 0..n {
            let original = params.get(name)?.data()[i];
            params.get_mut(name)?.data_mut()[i] = original + step;
            let plus = f(params)?.0;
            params.get_mut(name)?.data_mut()[i] = original - step;
            let minus = f(params)?.0;
            params.get_mut(name)?.data_mut()[i] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "grad_check: non-finite loss perturbing {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

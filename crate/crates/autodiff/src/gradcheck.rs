use crate::double::F64x2;
use crate::error::Result;

use crate::param::{Gradients, ParamId, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Central-difference step `h`.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub entries_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// The parameter holding the largest error, if any entry was checked.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_relative_error.total_cmp(&b.max_relative_error))
    }
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, entry by entry.
///
/// `f` must be deterministic: it is re-run twice per checked entry on a fresh
/// tape over a perturbed copy of `params`.
pub fn finite_difference_check<F>(
    params: &ParamStore<f64>,
    config: &GradCheckConfig,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let grads = gradients(params, &mut f)?;
    let mut work = params.clone();
    let h = config.step;
    compare(params, &grads, config, |id, i| {
        let original = work.get(id).value.data()[i];
        work.get_mut(id).value.data_mut()[i] = original + h;
        let plus = evaluate(&work, &mut f);
        work.get_mut(id).value.data_mut()[i] = original - h;
        let minus = evaluate(&work, &mut f);
        work.get_mut(id).value.data_mut()[i] = original;
        Ok((plus? - minus?) / (2.0 * h))
    })
}

/// [`finite_difference_check`] with the central differences taken on
/// `numeric`, the same scalar rebuilt in double-double precision.
///
/// In `f64` a difference quotient carries rounding noise of roughly
/// `ulp(f) / h`, about 1e-11 for an O(1) loss, which exceeds the tolerance on
/// gradient entries near 1e-8. The double-double rebuild pushes that noise
/// below 1e-25 while the analytic side stays in `f64`.
pub fn finite_difference_check_extended<F, G>(
    params: &ParamStore<f64>,
    config: &GradCheckConfig,
    mut analytic: F,
    mut numeric: G,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
    G: FnMut(&mut Tape<'_, F64x2>) -> Result<Var>,
{
    let grads = gradients(params, &mut analytic)?;
    let mut wide = params.cast::<F64x2>();
    let h = F64x2::from(config.step);
    compare(params, &grads, config, |id, i| {
        let original = wide.get(id).value.data()[i];
        wide.get_mut(id).value.data_mut()[i] = original + h;
        let plus = evaluate(&wide, &mut numeric);
        wide.get_mut(id).value.data_mut()[i] = original - h;
        let minus = evaluate(&wide, &mut numeric);
        wide.get_mut(id).value.data_mut()[i] = original;
        Ok(((plus? - minus?) / (h + h)).hi())
    })
}

fn gradients<F>(params: &ParamStore<f64>, f: &mut F) -> Result<Gradients<f64>>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    tape.backward(loss)
}

fn evaluate<T: Real, F>(params: &ParamStore<T>, f: &mut F) -> Result<T>
where
    F: FnMut(&mut Tape<'_, T>) -> Result<Var>,
{
    let mut tape = Tape::new(params);
    let loss = f(&mut tape)?;
    Ok(tape.value(loss).item())
}

fn compare(
    params: &ParamStore<f64>,
    grads: &Gradients<f64>,
    config: &GradCheckConfig,
    mut numeric: impl FnMut(ParamId, usize) -> Result<f64>,
) -> Result<GradCheckReport> {
    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    let mut checks = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = grads.get(id, params);
        let n = analytic.len();
        let entries: Vec<usize> = match config.max_entries_per_param {
            Some(limit) if limit < n => (0..limit).map(|k| k * n / limit).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: params.get(id).name.clone(),
            entries_checked: entries.len(),
            max_relative_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in entries {
            let n = numeric(id, i)?;
            let a = analytic.data()[i];
            let err = relative_error(a, n);
            if err > check.max_relative_error || err.is_nan() {
                check.max_relative_error = err;
                check.worst_entry = i;
                check.analytic = a;
                check.numeric = n;
            }
        }
        checks.push(check);
    }
    let max_relative_error = checks
        .iter()
        .map(|c| c.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        entries_checked: checks.iter().map(|c| c.entries_checked).sum(),
        tolerance: config.tolerance,
        passed: max_relative_error <= config.tolerance,
        params: checks,
    })
}

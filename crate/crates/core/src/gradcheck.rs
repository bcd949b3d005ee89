//! Independent finite-difference gradient oracle.
//!
//! Central differences with step `h = ε^{1/3} · (|v| + 1)` (ε the machine
//! epsilon of the active precision), the standard choice balancing rounding
//! against second-order truncation error. These checks are only reliable at
//! 64-bit; 32-bit runs need the looser tolerances.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{ParamId, ParamSet};

/// Outcome for a single parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Worst guarded relative error over all elements.
    pub worst_rel_err: f64,
    /// Worst absolute error over all elements.
    pub worst_abs_err: f64,
    /// Element index of the worst relative error.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub all_passed: bool,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for p in &self.params {
            s.push_str(&format!(
                "{}: rel {:.3e} abs {:.3e} at [{}] {}\n",
                p.name,
                p.worst_rel_err,
                p.worst_abs_err,
                p.worst_index,
                if p.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

fn step_for<T: Scalar>(v: f64) -> f64 {
    let eps = T::epsilon().as_f64();
    eps.cbrt() * (v.abs() + 1.0)
}

/// Central-difference derivative of `f` w.r.t. one parameter element.
pub fn central_difference<T: Scalar, F>(
    f: &mut F,
    params: &mut ParamSet<T>,
    id: ParamId,
    element: usize,
) -> Result<f64>
where
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    let orig = params.get(id).value.data()[element];
    let h = step_for::<T>(orig.as_f64());
    params.get_mut(id).value.data_mut()[element] = T::from_f64(orig.as_f64() + h);
    let up = f(params)?.as_f64();
    params.get_mut(id).value.data_mut()[element] = T::from_f64(orig.as_f64() - h);
    let down = f(params)?.as_f64();
    params.get_mut(id).value.data_mut()[element] = orig;
    Ok((up - down) / (2.0 * h))
}

/// Compare the analytic gradients already stored in `params` against central
/// differences of `f`, element by element.
///
/// `f` must be a deterministic pure function of the parameter values; this
/// is verified by evaluating it twice at the base point and comparing bits.
/// An element passes when `|ad − fd| ≤ abs_tol + rel_tol · max(|ad|, |fd|)`.
pub fn finite_diff_check<T: Scalar, F>(
    mut f: F,
    params: &mut ParamSet<T>,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet<T>) -> Result<T>,
{
    let base_a = f(params)?.as_f64();
    let base_b = f(params)?.as_f64();
    if base_a.to_bits() != base_b.to_bits() {
        return Err(Error::NonDeterministic { a: base_a, b: base_b });
    }

    let ids: Vec<ParamId> = params.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    let mut all_passed = true;
    let mut max_rel = 0.0f64;
    for id in ids {
        let name = params.get(id).name.clone();
        let n = params.get(id).value.numel();
        let mut worst_rel = 0.0f64;
        let mut worst_abs = 0.0f64;
        let mut worst_index = 0usize;
        let mut passed = true;
        for e in 0..n {
            let ad = params.get(id).grad.data()[e].as_f64();
            let fd = central_difference(&mut f, params, id, e)?;
            let abs_err = (ad - fd).abs();
            let denom = ad.abs().max(fd.abs());
            let rel_err = if denom <= abs_tol { 0.0 } else { abs_err / denom };
            if rel_err > worst_rel {
                worst_rel = rel_err;
                worst_index = e;
            }
            worst_abs = worst_abs.max(abs_err);
            if abs_err > abs_tol + rel_tol * denom {
                passed = false;
            }
        }
        max_rel = max_rel.max(worst_rel);
        all_passed &= passed;
        out.push(ParamCheck { name, worst_rel_err: worst_rel, worst_abs_err: worst_abs, worst_index, passed });
    }
    Ok(GradCheckReport { params: out, all_passed, max_rel_err: max_rel })
}

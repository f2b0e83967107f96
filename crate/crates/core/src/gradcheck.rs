//! Central finite-difference checks of tape gradients.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose relative error is below the tolerance.
    pub passed: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            return 1.0;
        }
        self.passed as f64 / self.checked as f64
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic parameter gradients of the scalar `loss` against
/// central differences at `samples` random coordinates.
pub fn check_params<T, F, R>(
    params: &ParamStore<T>,
    loss: F,
    samples: usize,
    step: f64,
    tol: f64,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<'_, T>) -> Result<Var>,
    R: Rng + ?Sized,
{
    let analytic = {
        let mut tape = Tape::with_params(params);
        let l = loss(&mut tape)?;
        let v = tape.value(l).data()[0].as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss {v}")));
        }
        let g = tape.backward(l);
        tape.param_grads(&g)
    };
    let sizes: Vec<usize> = params.ids().map(|id| params.get(id).numel()).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample(rng, total, samples.min(total));
    let eval = |p: &ParamStore<T>| -> Result<f64> {
        let mut tape = Tape::inference(p);
        let l = loss(&mut tape)?;
        let v = tape.value(l).data()[0].as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(alloc::format!("perturbed loss {v}")));
        }
        Ok(v)
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        checked: 0,
        passed: 0,
        max_rel_err: 0.0,
    };
    let ids: Vec<_> = params.ids().collect();
    for flat in picks.iter() {
        let (mut pi, mut off) = (0, flat);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let id = ids[pi];
        let orig = work.get(id).data()[off];
        work.get_mut(id).data_mut()[off] = orig + T::of(step);
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[off] = orig - T::of(step);
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[off] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[pi]
            .as_ref()
            .map(|g| g.data()[off].as_f64())
            .unwrap_or(0.0);
        let err = relative_error(a, numeric, 1e-6);
        report.checked += 1;
        if err < tol {
            report.passed += 1;
        }
        report.max_rel_err = report.max_rel_err.max(err);
    }
    Ok(report)
}

//! Central finite-difference gradient checking.
//!
//! The checker re-evaluates the loss closure at coordinate-wise perturbed
//! parameters and compares against the analytic reverse-mode gradients.
//! Coordinates whose perturbation lands on or crosses a ReLU kink are skipped
//! and reported rather than checked; the subgradient there is arbitrary.

use super::tape::GradMap;
use super::NumError;

/// Default half-width of the kink exclusion band around zero pre-activations.
pub const KINK_TOL: f64 = 1e-6;

/// Denominator floor for relative error: gradient coordinates below this
/// magnitude sit at the finite-difference noise floor and are compared
/// absolutely against `tol * REL_FLOOR`.
pub const REL_FLOOR: f64 = 1e-4;

/// One loss evaluation. `grads` is populated only when requested; the ReLU
/// pre-activations let the checker detect kink proximity.
pub struct Evaluation {
    pub loss: f64,
    pub grads: Option<GradMap>,
    pub relu_preacts: Vec<f64>,
}

/// A coordinate whose analytic and finite-difference gradients disagree.
#[derive(Debug, Clone)]
pub struct CoordFailure {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CoordFailure>,
    pub skipped_coords: Vec<(String, usize)>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn rel_err(a: f64, fd: f64) -> f64 {
    (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR)
}

fn kink_hit(preacts: &[f64], kink_tol: f64) -> bool {
    preacts.iter().any(|p| p.abs() <= kink_tol)
}

fn kink_crossed(plus: &[f64], minus: &[f64]) -> bool {
    plus.len() != minus.len()
        || plus.iter().zip(minus).any(|(p, m)| (*p > 0.0) != (*m > 0.0))
}

/// Compares analytic gradients of `f` against central finite differences for
/// every coordinate of every parameter in `params`.
///
/// `f` is called once with `want_grads = true` at the nominal point and twice
/// per coordinate (±`step`) without gradients.
pub fn grad_check<F>(
    params: &GradMap,
    f: F,
    step: f64,
    tol: f64,
    kink_tol: f64,
) -> Result<GradCheckReport, NumError>
where
    F: Fn(&GradMap, bool) -> Result<Evaluation, NumError>,
{
    let nominal = f(params, true)?;
    if !nominal.loss.is_finite() {
        return Err(NumError::Eval(format!("non-finite loss {} at nominal point", nominal.loss)));
    }
    let grads = nominal
        .grads
        .ok_or_else(|| NumError::Contract("grad_check closure returned no gradients".into()))?;

    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for (name, tensor) in params {
        let analytic = grads
            .get(name)
            .ok_or_else(|| NumError::Contract(format!("no gradient for parameter {name:?}")))?
            .clone();
        for i in 0..tensor.numel() {
            let orig = tensor.data()[i];

            work.get_mut(name).expect("param present").data_mut()[i] = orig + step;
            let plus = f(&work, false)?;
            work.get_mut(name).expect("param present").data_mut()[i] = orig - step;
            let minus = f(&work, false)?;
            work.get_mut(name).expect("param present").data_mut()[i] = orig;

            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(NumError::Eval(format!("non-finite loss while perturbing {name}[{i}]")));
            }
            if kink_hit(&plus.relu_preacts, kink_tol)
                || kink_hit(&minus.relu_preacts, kink_tol)
                || kink_crossed(&plus.relu_preacts, &minus.relu_preacts)
            {
                report.skipped += 1;
                report.skipped_coords.push((name.clone(), i));
                continue;
            }

            let fd = (plus.loss - minus.loss) / (2.0 * step);
            let a = analytic.data()[i];
            let err = rel_err(a, fd);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(err);
            if err > tol {
                report.failures.push(CoordFailure {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    fd,
                    rel_err: err,
                });
            }
        }
    }
    Ok(report)
}

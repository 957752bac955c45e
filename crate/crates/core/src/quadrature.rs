//! Adaptive Simpson quadrature on a finite interval.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuadratureError {
    #[error("tolerance {tol:e} not reached within {budget} integrand evaluations (estimate {estimate})")]
    BudgetExhausted { tol: f64, budget: usize, estimate: f64 },
    #[error("integrand returned a non-finite value at x = {x}")]
    NonFinite { x: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadSettings {
    /// Absolute tolerance for the whole interval.
    pub tol: f64,
    /// Maximum number of integrand evaluations.
    pub max_evals: usize,
    pub max_depth: u32,
}

impl Default for QuadSettings {
    fn default() -> Self {
        Self { tol: 1e-8, max_evals: 2_000_000, max_depth: 48 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuadResult {
    pub value: f64,
    /// Sum of the local |S2 − S1|/15 error indicators.
    pub error: f64,
    pub evals: usize,
}

struct State<'f, F> {
    f: &'f F,
    evals: usize,
    settings: QuadSettings,
    error: f64,
}

impl<F: Fn(f64) -> f64> State<'_, F> {
    fn eval(&mut self, x: f64) -> Result<f64, QuadratureError> {
        self.evals += 1;
        if self.evals > self.settings.max_evals {
            return Err(QuadratureError::BudgetExhausted {
                tol: self.settings.tol,
                budget: self.settings.max_evals,
                estimate: f64::NAN,
            });
        }
        let y = (self.f)(x);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(QuadratureError::NonFinite { x })
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        &mut self,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> Result<f64, QuadratureError> {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = self.eval(lm)?;
        let frm = self.eval(rm)?;
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth >= self.settings.max_depth || delta.abs() <= 15.0 * tol {
            self.error += delta.abs() / 15.0;
            return Ok(left + right + delta / 15.0);
        }
        let l = self.recurse(a, m, fa, flm, fm, left, 0.5 * tol, depth + 1)?;
        let r = self.recurse(m, b, fm, frm, fb, right, 0.5 * tol, depth + 1)?;
        Ok(l + r)
    }
}

/// Integrates `f` over `[a, b]` to absolute tolerance `settings.tol`.
///
/// The interval is first split into four panels so that integrands with
/// structure away from the endpoints and the midpoint are not missed.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    settings: QuadSettings,
) -> Result<QuadResult, QuadratureError> {
    let mut state = State { f, evals: 0, settings, error: 0.0 };
    let panels = 4;
    let width = (b - a) / panels as f64;
    let mut value = 0.0;
    let mut x0 = a;
    let mut f0 = state.eval(x0)?;
    for p in 0..panels {
        let x1 = if p + 1 == panels { b } else { a + width * (p + 1) as f64 };
        let xm = 0.5 * (x0 + x1);
        let fm = state.eval(xm)?;
        let f1 = state.eval(x1)?;
        let whole = (x1 - x0) / 6.0 * (f0 + 4.0 * fm + f1);
        value += state
            .recurse(x0, x1, f0, fm, f1, whole, settings.tol / panels as f64, 0)
            .map_err(|e| match e {
                QuadratureError::BudgetExhausted { tol, budget, .. } => {
                    QuadratureError::BudgetExhausted { tol, budget, estimate: value }
                }
                other => other,
            })?;
        x0 = x1;
        f0 = f1;
    }
    Ok(QuadResult { value, error: state.error, evals: state.evals })
}

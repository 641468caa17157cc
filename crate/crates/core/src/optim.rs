//! Damped Newton-Raphson for the concave log-likelihoods used by the
//! working models.

use nalgebra::{DMatrix, DVector};

pub(crate) const GRADIENT_TOL: f64 = 1e-8;
pub(crate) const STEP_TOL: f64 = 1e-4;
pub(crate) const MAX_ITER: usize = 100;
/// Coefficients beyond this bound on the standardized scale signal a
/// likelihood that is maximized at infinity.
pub(crate) const DIVERGENCE_BOUND: f64 = 30.0;

/// Value, gradient and negative Hessian of a concave objective.
pub(crate) struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub information: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Termination {
    Converged,
    MaxIterations,
    Diverged,
    Singular,
}

pub(crate) struct NewtonOutcome {
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}


/// Maximizes `objective` starting from `start`.
pub(crate) fn maximize_from<F>(start: DVector<f64>, mut objective: F) -> NewtonOutcome
where
    F: FnMut(&DVector<f64>) -> Evaluation,
{
    let mut beta = start;
    let mut current = objective(&beta);
    for iter in 1..=MAX_ITER {
        let step = match current.information.clone().cholesky() {
            Some(chol) => chol.solve(&current.gradient),
            None => {
                let termination = if max_abs(&beta) > DIVERGENCE_BOUND / 6.0 {
                    Termination::Diverged
                } else {
                    Termination::Singular
                };
                return NewtonOutcome {
                    coef: beta.iter().copied().collect(),
                    iterations: iter,
                    termination,
                };
            }
        };
        let grad_norm = max_abs(&current.gradient);
        let step_norm = max_abs(&step);
        if grad_norm <= GRADIENT_TOL && step_norm <= STEP_TOL {
            beta += &step;
            return NewtonOutcome {
                coef: beta.iter().copied().collect(),
                iterations: iter,
                termination: Termination::Converged,
            };
        }

        // step-halving until the objective does not decrease
        let mut scale = 1.0;
        let mut candidate = &beta + &step;
        let mut next = objective(&candidate);
        let mut halvings = 0;
        while !(next.value.is_finite() && next.value >= current.value - 1e-12 * current.value.abs().max(1.0))
            && halvings < 40
        {
            scale *= 0.5;
            candidate = &beta + &step * scale;
            next = objective(&candidate);
            halvings += 1;
        }
        beta = candidate;
        current = next;

        if max_abs(&beta) > DIVERGENCE_BOUND {
            return NewtonOutcome {
                coef: beta.iter().copied().collect(),
                iterations: iter,
                termination: Termination::Diverged,
            };
        }
    }
    NewtonOutcome {
        coef: beta.iter().copied().collect(),
        iterations: MAX_ITER,
        termination: Termination::MaxIterations,
    }
}

/// Column means and population standard deviations of `rows[.][cols]`.
pub(crate) fn column_moments(rows: &[Vec<f64>], skip_first: bool) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let start = usize::from(skip_first);
    let mut mean = vec![0.0; d];
    let mut sd = vec![1.0; d];
    for j in start..d {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
        mean[j] = m;
        sd[j] = v.sqrt();
    }
    (mean, sd)
}

//! Logistic working models: the assignment propensity `pi(X)` and the
//! receipt probabilities `p_z(X) = P(S = 1 | Z = z, X)`.
//!
//! Fitting is plain maximum likelihood by Newton-Raphson with step halving,
//! carried out on standardized covariates and reported on the original scale.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::error::{PsceError, Result};
use crate::optim::{self, Evaluation, Termination};

/// Predictions are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct FittedLogistic {
    /// Intercept first, then one coefficient per entry of `columns`.
    pub coef: Vec<f64>,
    /// Dataset covariate indices used by the model.
    pub columns: Vec<usize>,
    pub converged: bool,
    pub iterations: usize,
}

/// Which binary column is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Response {
    Assignment,
    Receipt,
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Fits `response ~ 1 + X[columns]`, optionally restricted to subjects
/// with `Z = assigned`.
pub fn fit_logistic(
    ds: &Dataset,
    response: Response,
    assigned: Option<bool>,
    columns: &[usize],
) -> Result<FittedLogistic> {
    fit_logistic_from(ds, response, assigned, columns, None)
}

/// [`fit_logistic`] with Newton started at raw-scale coefficients `start`,
/// typically the fit on the original data when refitting a resample.
pub fn fit_logistic_from(
    ds: &Dataset,
    response: Response,
    assigned: Option<bool>,
    columns: &[usize],
    start: Option<&[f64]>,
) -> Result<FittedLogistic> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (i, rec) in ds.records().iter().enumerate() {
        if assigned.is_some_and(|z| rec.z != z) {
            continue;
        }
        rows.push(ds.design_row(i, columns));
        y.push(match response {
            Response::Assignment => rec.zf(),
            Response::Receipt => rec.sf(),
        });
    }
    let label = match response {
        Response::Assignment => "Z",
        Response::Receipt => "S",
    };
    let (coef, converged, iterations) = fit_rows_from(&rows, &y, true, start).map_err(|e| match e {
        PsceError::DegenerateResponse(_) => PsceError::DegenerateResponse(label.into()),
        other => other,
    })?;
    Ok(FittedLogistic {
        coef,
        columns: columns.to_vec(),
        converged,
        iterations,
    })
}

/// Maximum likelihood on explicit design rows (intercept in column 0).
/// Returns `(coef, converged, iterations)` on the original scale.
pub fn fit_rows(rows: &[Vec<f64>], y: &[f64], standardize: bool) -> Result<(Vec<f64>, bool, usize)> {
    fit_rows_from(rows, y, standardize, None)
}

pub fn fit_rows_from(
    rows: &[Vec<f64>],
    y: &[f64],
    standardize: bool,
    start: Option<&[f64]>,
) -> Result<(Vec<f64>, bool, usize)> {
    if rows.is_empty() {
        return Err(PsceError::InvalidArgument("no observations".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) || y.len() != rows.len() {
        return Err(PsceError::DimensionMismatch {
            expected: d,
            found: rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(y.len()),
        });
    }
    if y.iter().all(|&v| v == y[0]) {
        return Err(PsceError::DegenerateResponse("response".into()));
    }

    let (mean, sd) = if standardize {
        optim::column_moments(rows, true)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    if sd.iter().skip(1).any(|&s| s == 0.0) {
        return Err(PsceError::Singular("constant covariate column".into()));
    }
    let xm = DMatrix::from_fn(rows.len(), d, |i, j| {
        if j == 0 {
            rows[i][0]
        } else {
            (rows[i][j] - mean[j]) / sd[j]
        }
    });
    let yv = DVector::from_column_slice(y);
    let n = rows.len() as f64;

    let init = match start {
        Some(c) if c.len() == d => {
            let mut b = DVector::zeros(d);
            b[0] = c[0];
            for j in 1..d {
                b[j] = c[j] * sd[j];
                b[0] += c[j] * mean[j];
            }
            b
        }
        _ => DVector::zeros(d),
    };
    let outcome = optim::maximize_from(init, |beta| {
        let eta = &xm * beta;
        let mut value = 0.0;
        let mut resid = DVector::zeros(eta.len());
        let mut weight = DVector::zeros(eta.len());
        for (i, (&e, &yi)) in eta.iter().zip(yv.iter()).enumerate() {
            // one exponential serves both the probability and the log-partition
            let q = (-e.abs()).exp();
            let p = if e >= 0.0 { 1.0 / (1.0 + q) } else { q / (1.0 + q) };
            value += yi * e - (e.max(0.0) + q.ln_1p());
            resid[i] = yi - p;
            weight[i] = p * (1.0 - p);
        }
        let mut xw = xm.clone();
        for mut col in xw.column_iter_mut() {
            col.component_mul_assign(&weight);
        }
        Evaluation {
            value: value / n,
            gradient: xm.tr_mul(&resid) / n,
            information: xm.tr_mul(&xw) / n,
        }
    });

    match outcome.termination {
        Termination::Diverged => return Err(PsceError::Separation),
        Termination::Singular => return Err(PsceError::Singular("logistic information".into())),
        _ => {}
    }
    let converged = outcome.termination == Termination::Converged;
    let mut coef = vec![0.0; d];
    coef[0] = outcome.coef[0];
    for j in 1..d {
        coef[j] = outcome.coef[j] / sd[j];
        coef[0] -= coef[j] * mean[j];
    }
    Ok((coef, converged, outcome.iterations))
}

impl FittedLogistic {
    /// Clamped probability for a design row `(1, x...)`.
    pub fn predict_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.coef.len() {
            return Err(PsceError::DimensionMismatch {
                expected: self.coef.len(),
                found: x.len(),
            });
        }
        let eta: f64 = self.coef.iter().zip(x).map(|(b, v)| b * v).sum();
        Ok(logistic(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
    }

    /// Prediction for subject `i` of `ds`.
    pub fn predict_subject(&self, ds: &Dataset, i: usize) -> f64 {
        let rec = &ds.records()[i];
        let eta = self.coef[0]
            + self
                .columns
                .iter()
                .zip(&self.coef[1..])
                .map(|(&j, b)| b * rec.covariates[j])
                .sum::<f64>();
        logistic(eta).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    }

    /// Predictions for every subject of `ds`.
    pub fn predict_all(&self, ds: &Dataset) -> Vec<f64> {
        (0..ds.n()).map(|i| self.predict_subject(ds, i)).collect()
    }
}

/// Free-function form of [`FittedLogistic::predict_prob`].
pub fn predict_prob(m: &FittedLogistic, x: &[f64]) -> Result<f64> {
    m.predict_prob(x)
}

//! Sensitivity analysis for violations of principal ignorability and of
//! monotonicity.
//!
//! Principal ignorability is relaxed through the ratio functions
//! `eps_z(t, X) = exp(xi_z (t / t_max)^eta_z)` comparing complier survival
//! with the survival of the other stratum sharing the complier's cell.
//! Monotonicity is relaxed through a constant defier-to-complier ratio `zeta`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{PsceError, Result};
use crate::principal_strata::{build_scores, needs_truncation, raw_strata, PrincipalScores, Stratum};
use crate::psce_estimators::{check_grid, pi_weights_at, Evaluator, Method, NuisanceBundle, PsceEstimate, StratumCurve};

/// Share of subjects a positive `zeta` may push onto the truncation floor.
pub const MAX_TRUNCATED_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiSensitivitySpec {
    pub xi1: f64,
    pub xi0: f64,
    pub eta1: f64,
    pub eta0: f64,
    pub t_max: f64,
}

impl PiSensitivitySpec {
    pub fn new(xi1: f64, xi0: f64, eta1: f64, eta0: f64, t_max: f64) -> Result<Self> {
        let spec = PiSensitivitySpec {
            xi1,
            xi0,
            eta1,
            eta0,
            t_max,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Principal ignorability holds: both ratio functions are one.
    pub fn ignorable(t_max: f64) -> Self {
        PiSensitivitySpec {
            xi1: 0.0,
            xi0: 0.0,
            eta1: 1.0,
            eta0: 1.0,
            t_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 > 0.0 && self.eta0 > 0.0) {
            return Err(PsceError::InvalidArgument("curvature parameters must be positive".into()));
        }
        if !(self.t_max > 0.0) {
            return Err(PsceError::InvalidArgument("t_max must be positive".into()));
        }
        if !(self.xi1.is_finite() && self.xi0.is_finite()) {
            return Err(PsceError::InvalidArgument("extremum parameters must be finite".into()));
        }
        Ok(())
    }

    /// `(eps0(t), eps1(t))`.
    pub fn eps_pair(&self, t: f64) -> (f64, f64) {
        (eps_function(self, false, t), eps_function(self, true, t))
    }
}

/// `eps_z(t) = exp(xi_z (t / t_max)^eta_z)` for arm `z`.
pub fn eps_function(spec: &PiSensitivitySpec, arm: bool, t: f64) -> f64 {
    let (xi, eta) = if arm { (spec.xi1, spec.eta1) } else { (spec.xi0, spec.eta0) };
    (xi * (t / spec.t_max).powf(eta)).exp()
}

/// Per-subject `(w_{1,c}, w_{0,c}, w_{0,n}, w_{1,a})` at time `t`.
pub fn pi_weights(ps: &PrincipalScores, spec: &PiSensitivitySpec, t: f64) -> Vec<[f64; 4]> {
    let eps = spec.eps_pair(t);
    (0..ps.n())
        .map(|i| pi_weights_at(ps.e_a[i], ps.e_c[i], ps.e_n[i], eps))
        .collect()
}

/// Bias-corrected estimator `(S_{1,g}, S_{0,g}, Delta_g)` at `u`.
pub fn mr_estimate_pi(nb: &NuisanceBundle, ds: &Dataset, spec: &PiSensitivitySpec, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    let est = pi_curve(nb, ds, &[u], Method::Mr, spec, &[g])?;
    let c = &est.curves[0];
    Ok((c.s1[0], c.s0[0], c.delta[0]))
}

/// Bias-corrected curves for `sr1`, `sr2` or `mr`.
pub fn pi_curve(
    nb: &NuisanceBundle,
    ds: &Dataset,
    grid: &[f64],
    method: Method,
    spec: &PiSensitivitySpec,
    strata: &[Stratum],
) -> Result<PsceEstimate> {
    if method == Method::Sr3 {
        return Err(PsceError::InvalidArgument("no bias-corrected form of sr3".into()));
    }
    spec.validate()?;
    check_grid(grid)?;
    let eps: Vec<(f64, f64)> = grid.iter().map(|&u| spec.eps_pair(u)).collect();
    let curves = nb.curves(ds, grid);
    let ev = Evaluator::new(ds, &nb.pi, &nb.ps, &curves);
    let mut out = Vec::with_capacity(strata.len());
    for &g in strata {
        let s1 = ev.terms(method, true, g, Some(&eps))?.iter().map(|t| t.estimate()).collect();
        let s0 = ev.terms(method, false, g, Some(&eps))?.iter().map(|t| t.estimate()).collect();
        out.push(StratumCurve::new(g, s1, s0));
    }
    Ok(PsceEstimate {
        method,
        grid: grid.to_vec(),
        curves: out,
        bands: None,
    })
}

/// Principal scores `(e_a, e_c, e_n, e_d)` at defier ratio `zeta`:
/// `e_c = (p1 - p0) / (1 - zeta)`, `e_d = zeta e_c`, `e_a = p0 - e_d`,
/// `e_n = 1 - p1 - e_d`.
pub fn strata_under_zeta(p0x: &[f64], p1x: &[f64], zeta: f64) -> Result<PrincipalScores> {
    if !(0.0..1.0).contains(&zeta) {
        return Err(PsceError::InadmissibleZeta {
            zeta,
            reason: "must lie in [0, 1)".into(),
        });
    }
    let ps = build_scores(p0x, p1x, zeta);
    // subjects already truncated at zeta = 0 (fitted p1 below p0) do not count
    let induced = p0x
        .iter()
        .zip(p1x)
        .filter(|&(&p0, &p1)| {
            !needs_truncation(&raw_strata(p0, p1, 0.0)[..3]) && needs_truncation(&raw_strata(p0, p1, zeta))
        })
        .count();
    if zeta > 0.0 && induced as f64 > MAX_TRUNCATED_SHARE * ps.n() as f64 {
        return Err(PsceError::InadmissibleZeta {
            zeta,
            reason: format!("{induced} of {} subjects have a negative stratum probability", ps.n()),
        });
    }
    Ok(ps)
}

/// Admissible interval `[0, 1 - (p1_hat - p0_hat) / min(p1_hat, 1 - p0_hat)]`.
pub fn zeta_range(p0_hat: f64, p1_hat: f64) -> Result<(f64, f64)> {
    let share = p1_hat - p0_hat;
    if !(share > 0.0) {
        return Err(PsceError::NonPositiveComplierShare(share));
    }
    Ok((0.0, 1.0 - share / p1_hat.min(1.0 - p0_hat)))
}

/// Principal scores of `nb` recomputed at defier ratio `zeta`.
pub fn zeta_scores(nb: &NuisanceBundle, zeta: f64) -> Result<PrincipalScores> {
    let (_, upper) = zeta_range(nb.ps.p0_hat, nb.ps.p1_hat)?;
    if zeta > upper {
        return Err(PsceError::InadmissibleZeta {
            zeta,
            reason: format!("admissible interval is [0, {upper:.4}]"),
        });
    }
    Ok(strata_under_zeta(&nb.ps.p0x, &nb.ps.p1x, zeta)?.with_marginals(nb.ps.p0_hat, nb.ps.p1_hat))
}

/// Multiply robust estimator at `u` allowing a defier share `zeta`.
pub fn mr_estimate_zeta(nb: &NuisanceBundle, ds: &Dataset, zeta: f64, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    let est = zeta_curve(nb, ds, &[u], zeta, &[g])?;
    let c = &est.curves[0];
    Ok((c.s1[0], c.s0[0], c.delta[0]))
}

/// Multiply robust curves at defier ratio `zeta`.
pub fn zeta_curve(nb: &NuisanceBundle, ds: &Dataset, grid: &[f64], zeta: f64, strata: &[Stratum]) -> Result<PsceEstimate> {
    check_grid(grid)?;
    let ps = zeta_scores(nb, zeta)?;
    let curves = nb.curves(ds, grid);
    let ev = Evaluator::new(ds, &nb.pi, &ps, &curves);
    let mut out = Vec::with_capacity(strata.len());
    for &g in strata {
        let (s1, s0) = ev.contrast(Method::Mr, g)?;
        out.push(StratumCurve::new(g, s1, s0));
    }
    Ok(PsceEstimate {
        method: Method::Mr,
        grid: grid.to_vec(),
        curves: out,
        bands: None,
    })
}

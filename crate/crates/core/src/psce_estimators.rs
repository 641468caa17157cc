//! Singly and multiply robust estimators of the principal survival
//! functions `S_{z,g}(u)` and their contrasts `Delta_g(u) = S_{1,g}(u) - S_{0,g}(u)`.
//!
//! Every estimator is an empirical average of per-subject contributions
//! divided by the marginal stratum share. The multiply robust contribution
//! for `(z, g)` with observed cell `(z, s)` is `A + B + C` where
//!
//! * `A` is the inverse-weighted, censoring-augmented survival status of the
//!   subjects observed in the cell,
//! * `B` corrects for estimating the receipt probabilities, and
//! * `C` corrects for estimating the assignment propensity.

use std::cell::OnceCell;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cox_survival::{fit_cox_from, fit_cox, CoxTarget, FittedCox, MartingaleIntegrator};
use crate::dataset::{Cell, Dataset};
use crate::error::{PsceError, Result};
use crate::glm_logistic::{fit_logistic, FittedLogistic, Response};
use crate::principal_strata::{dr_marginals, principal_scores, PrincipalScores, Stratum, EPS_TRUNC, WEIGHT_FLOOR};

/// Floor for the censoring survival used in inverse weights.
pub const CENSORING_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Propensity, principal score and censoring weighting.
    Sr1,
    /// Principal score and outcome regression.
    Sr2,
    /// Propensity and outcome regression.
    Sr3,
    /// Multiply robust combination.
    Mr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sr1, Method::Sr2, Method::Sr3, Method::Mr];

    pub fn label(self) -> &'static str {
        match self {
            Method::Sr1 => "sr1",
            Method::Sr2 => "sr2",
            Method::Sr3 => "sr3",
            Method::Mr => "mr",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.label() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Covariate indices used by each working model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub propensity: Vec<usize>,
    pub receipt: Vec<usize>,
    pub outcome: Vec<usize>,
    pub censoring: Vec<usize>,
}

impl ModelSpec {
    /// Every model uses the same covariates.
    pub fn uniform(columns: Vec<usize>) -> Self {
        ModelSpec {
            propensity: columns.clone(),
            receipt: columns.clone(),
            outcome: columns.clone(),
            censoring: columns,
        }
    }

    pub fn all_covariates(ds: &Dataset) -> Self {
        Self::uniform((0..ds.n_covariates()).collect())
    }
}

/// Censoring model for a cell. A cell without censoring events gets a
/// model with no jumps, so its censoring survival is identically one.
pub fn fit_censoring(ds: &Dataset, cell: Cell, columns: &[usize]) -> Result<FittedCox> {
    fit_censoring_from(ds, cell, columns, None)
}

/// [`fit_censoring`] with a Newton starting point.
pub fn fit_censoring_from(ds: &Dataset, cell: Cell, columns: &[usize], start: Option<&[f64]>) -> Result<FittedCox> {
    match fit_cox_from(ds, cell, CoxTarget::Censoring, columns, start) {
        Err(PsceError::NoEvents { .. }) => Ok(FittedCox::from_parts(
            vec![0.0; columns.len()],
            columns.to_vec(),
            Vec::new(),
            Vec::new(),
            cell,
            CoxTarget::Censoring,
            true,
            0,
        )),
        other => other,
    }
}

/// All fitted working models for one dataset.
#[derive(Debug, Clone)]
pub struct NuisanceBundle {
    pub prop: FittedLogistic,
    pub receipt0: FittedLogistic,
    pub receipt1: FittedLogistic,
    /// Outcome models indexed by [`Cell::index`].
    pub outcome: [FittedCox; 4],
    /// Censoring models indexed by [`Cell::index`].
    pub censor: [FittedCox; 4],
    /// Fitted propensity for every subject.
    pub pi: Vec<f64>,
    pub ps: PrincipalScores,
}

impl NuisanceBundle {
    pub fn fit(ds: &Dataset, spec: &ModelSpec) -> Result<NuisanceBundle> {
        ds.require_all_cells()?;
        let prop = fit_logistic(ds, Response::Assignment, None, &spec.propensity)?;
        let receipt0 = fit_logistic(ds, Response::Receipt, Some(false), &spec.receipt)?;
        let receipt1 = fit_logistic(ds, Response::Receipt, Some(true), &spec.receipt)?;
        let outcome = fit_cells(|c| fit_cox(ds, c, CoxTarget::Outcome, &spec.outcome))?;
        let censor = fit_cells(|c| fit_censoring(ds, c, &spec.censoring))?;
        let pi = prop.predict_all(ds);
        let ps = scores_from_models(ds, &pi, &receipt0, &receipt1);
        Ok(NuisanceBundle {
            prop,
            receipt0,
            receipt1,
            outcome,
            censor,
            pi,
            ps,
        })
    }

    /// Curve cache over `grid` for this bundle's survival models.
    pub fn curves<'a>(&'a self, ds: &'a Dataset, grid: &'a [f64]) -> CurveSet<'a> {
        CurveSet::new(ds, grid, self.outcome.each_ref().map(Some), self.censor.each_ref().map(Some))
    }
}

/// Fits one model per cell in [`Cell::ALL`] order.
pub fn fit_cells<F>(mut fit: F) -> Result<[FittedCox; 4]>
where
    F: FnMut(Cell) -> Result<FittedCox>,
{
    let [a, b, c, d] = Cell::ALL;
    Ok([fit(a)?, fit(b)?, fit(c)?, fit(d)?])
}

/// Principal scores with doubly robust marginals.
pub fn scores_from_models(ds: &Dataset, pi: &[f64], receipt0: &FittedLogistic, receipt1: &FittedLogistic) -> PrincipalScores {
    let p0x = receipt0.predict_all(ds);
    let p1x = receipt1.predict_all(ds);
    let (p0_hat, p1_hat) = dr_marginals(ds, pi, &p0x, &p1x);
    principal_scores(&p0x, &p1x).with_marginals(p0_hat, p1_hat)
}

/// Survival quantities of one cell evaluated on a time grid. All vectors
/// are subject-major with `grid.len()` entries per subject.
#[derive(Debug, Clone)]
pub struct CellCurves {
    pub cell: Cell,
    m: usize,
    /// `S_{zs}(u | X_i)` for every subject.
    pub surv: Vec<f64>,
    /// `1{U_i >= u} / S^C_{zs}(u | X_i)` for subjects in the cell, else 0.
    pub ipcw: Vec<f64>,
    /// `S_{zs}(u | X_i)` times the censoring martingale integral, for
    /// subjects in the cell, else 0.
    pub augmentation: Vec<f64>,
}

impl CellCurves {
    pub fn compute(ds: &Dataset, outcome: &FittedCox, censor: &FittedCox, grid: &[f64]) -> CellCurves {
        let m = grid.len();
        let n = ds.n();
        let cell = outcome.cell;
        let lam_t: Vec<f64> = grid.iter().map(|&u| outcome.cumulative_hazard(u)).collect();
        let lam_c: Vec<f64> = grid.iter().map(|&u| censor.cumulative_hazard(u)).collect();
        let mut surv = vec![0.0; n * m];
        let mut ipcw = vec![0.0; n * m];
        let mut augmentation = vec![0.0; n * m];
        let integrator = MartingaleIntegrator::new(censor, outcome);
        let mut integral = vec![0.0; m];
        for (i, rec) in ds.records().iter().enumerate() {
            let rt = outcome.risk_score_record(rec);
            let row = i * m..(i + 1) * m;
            for (slot, l) in surv[row.clone()].iter_mut().zip(&lam_t) {
                *slot = (-l * rt).exp();
            }
            if !rec.in_cell(cell) {
                continue;
            }
            let rc = censor.risk_score_record(rec);
            integrator.integrals(rec, grid, &mut integral);
            for k in 0..m {
                let at_risk = rec.u >= grid[k];
                let sc = (-lam_c[k] * rc).exp().max(CENSORING_FLOOR);
                ipcw[i * m + k] = if at_risk { 1.0 / sc } else { 0.0 };
                augmentation[i * m + k] = surv[i * m + k] * integral[k];
            }
        }
        CellCurves {
            cell,
            m,
            surv,
            ipcw,
            augmentation,
        }
    }

    fn row(&self, i: usize) -> std::ops::Range<usize> {
        i * self.m..(i + 1) * self.m
    }
}

/// Lazily computed [`CellCurves`] for the four cells. A cell whose models
/// are absent can not be evaluated.
pub struct CurveSet<'a> {
    ds: &'a Dataset,
    grid: &'a [f64],
    outcome: [Option<&'a FittedCox>; 4],
    censor: [Option<&'a FittedCox>; 4],
    cells: [OnceCell<CellCurves>; 4],
}

impl<'a> CurveSet<'a> {
    pub fn new(
        ds: &'a Dataset,
        grid: &'a [f64],
        outcome: [Option<&'a FittedCox>; 4],
        censor: [Option<&'a FittedCox>; 4],
    ) -> Self {
        CurveSet {
            ds,
            grid,
            outcome,
            censor,
            cells: Default::default(),
        }
    }

    pub fn cell(&self, cell: Cell) -> Result<&CellCurves> {
        let k = cell.index();
        match (self.outcome[k], self.censor[k]) {
            (Some(t), Some(c)) => Ok(self.cells[k].get_or_init(|| CellCurves::compute(self.ds, t, c, self.grid))),
            _ => Err(PsceError::InvalidArgument(format!("no survival models for cell {cell}"))),
        }
    }

    pub fn grid(&self) -> &'a [f64] {
        self.grid
    }
}

/// Empirical means of the three contributions at one grid point, and the
/// stratum share they are divided by.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermMeans {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub share: f64,
}

impl TermMeans {
    pub fn estimate(&self) -> f64 {
        (self.a + self.b + self.c) / self.share
    }
}

/// Sensitivity values `(eps0(u), eps1(u))` at each grid point.
pub type Tilt<'t> = Option<&'t [(f64, f64)]>;

/// Evaluates estimators from propensity predictions, principal scores and a
/// curve cache, which may come from different model fits.
pub struct Evaluator<'a> {
    pub ds: &'a Dataset,
    pub pi: &'a [f64],
    pub ps: &'a PrincipalScores,
    pub curves: &'a CurveSet<'a>,
}

impl<'a> Evaluator<'a> {
    pub fn new(ds: &'a Dataset, pi: &'a [f64], ps: &'a PrincipalScores, curves: &'a CurveSet<'a>) -> Self {
        Evaluator { ds, pi, ps, curves }
    }

    /// `S_{z,g}(u)` for every grid point.
    pub fn survival(&self, method: Method, z: bool, g: Stratum) -> Result<Vec<f64>> {
        Ok(self.terms(method, z, g, None)?.iter().map(TermMeans::estimate).collect())
    }

    /// `(S_{1,g}, S_{0,g})` on the grid.
    pub fn contrast(&self, method: Method, g: Stratum) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.survival(method, true, g)?, self.survival(method, false, g)?))
    }

    pub fn terms(&self, method: Method, z: bool, g: Stratum, tilt: Tilt<'_>) -> Result<Vec<TermMeans>> {
        let ps = self.ps;
        let zeta = ps.zeta;
        if g == Stratum::D && ps.e_d.is_none() {
            return Err(PsceError::InvalidArgument("defier stratum requires a positive defier ratio".into()));
        }
        if tilt.is_some() && zeta > 0.0 {
            return Err(PsceError::InvalidArgument(
                "principal ignorability and monotonicity sensitivity cannot be combined".into(),
            ));
        }
        if method == Method::Sr3 && zeta > 0.0 {
            return Err(PsceError::InvalidArgument("sr3 is defined under monotonicity only".into()));
        }
        let share = ps.share(g);
        if share <= EPS_TRUNC {
            return Err(PsceError::DegenerateDenominator(share_label(g, zeta).into()));
        }

        let cell = g.cell(z);
        let s = cell.s;
        let curves = self.curves.cell(cell)?;
        let m = self.curves.grid().len();
        let pure = zeta == 0.0 && ((z && g == Stratum::N) || (!z && g == Stratum::A));
        let (d0, d1) = g.score_gradient(zeta);
        let sigma = if s { 1.0 } else { -1.0 };
        let e = ps.scores(g);
        let mut sum_a = vec![0.0; m];
        let mut sum_b = vec![0.0; m];
        let mut sum_c = vec![0.0; m];

        for (i, rec) in self.ds.records().iter().enumerate() {
            let pi = self.pi[i].clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR);
            let (p0, p1) = (ps.p0x[i], ps.p1x[i]);
            let pz = if z { p1 } else { p0 };
            let p_cell = (if s { pz } else { 1.0 - pz }).max(WEIGHT_FLOOR);
            let p_assign = if z { pi } else { 1.0 - pi };
            let assigned = rec.z == z;
            let in_cell = rec.in_cell(cell);
            let eg = e[i];
            let factor = if pure { 1.0 } else { eg / p_cell };
            let r1 = if rec.z { (rec.sf() - p1) / pi } else { 0.0 };
            let r0 = if rec.z { 0.0 } else { (rec.sf() - p0) / (1.0 - pi) };
            let rz = if z { r1 } else { r0 };
            let receipt_residual = if pure {
                0.0
            } else {
                d1 * r1 + d0 * r0 - sigma * (eg / p_cell) * rz
            };
            let assign_residual = 1.0 - if assigned { 1.0 / p_assign } else { 0.0 };
            let pseudo = match (method, g) {
                (Method::Sr3, Stratum::C) => {
                    let t1 = if rec.z { rec.sf() / pi } else { 0.0 };
                    let t0 = if rec.z { 0.0 } else { rec.sf() / (1.0 - pi) };
                    t1 - t0
                }
                (Method::Sr3, Stratum::N) => 1.0 - if rec.z { rec.sf() / pi } else { 0.0 },
                (Method::Sr3, Stratum::A) => {
                    if rec.z {
                        0.0
                    } else {
                        rec.sf() / (1.0 - pi)
                    }
                }
                _ => 0.0,
            };

            let row = curves.row(i);
            let surv = &curves.surv[row.clone()];
            let ipcw = &curves.ipcw[row.clone()];
            let aug = &curves.augmentation[row];
            for k in 0..m {
                let (w, wb) = match tilt {
                    Some(eps) if !pure => pi_weight_pair(ps, i, z, g, eps[k]),
                    _ => (1.0, 1.0),
                };
                match method {
                    Method::Sr1 => {
                        if in_cell {
                            sum_a[k] += w * (factor / p_assign * ipcw[k]);
                        }
                    }
                    Method::Sr2 => sum_a[k] += w * (eg * surv[k]),
                    Method::Sr3 => sum_a[k] += pseudo * surv[k],
                    Method::Mr => {
                        if in_cell {
                            sum_a[k] += w * (factor / p_assign * (ipcw[k] + aug[k]));
                        }
                        sum_b[k] += wb * (surv[k] * receipt_residual);
                        sum_c[k] += w * (eg * assign_residual * surv[k]);
                    }
                }
            }
        }
        let n = self.ds.n() as f64;
        Ok((0..m)
            .map(|k| TermMeans {
                a: sum_a[k] / n,
                b: sum_b[k] / n,
                c: sum_c[k] / n,
                share,
            })
            .collect())
    }
}

/// Weights `(w, w_B)` for subject `i` under the principal ignorability
/// sensitivity functions `(eps0, eps1)`: `w` multiplies the weighting and
/// propensity terms, `w_B` the receipt term.
pub fn pi_weight_pair(ps: &PrincipalScores, i: usize, z: bool, g: Stratum, eps: (f64, f64)) -> (f64, f64) {
    let [w1c, w0c, w0n, w1a] = pi_weights_at(ps.e_a[i], ps.e_c[i], ps.e_n[i], eps);
    match (z, g) {
        (true, Stratum::C) => (w1c, w1c * w1a),
        (true, Stratum::A) => (w1a, w1c * w1a),
        (false, Stratum::C) => (w0c, w0c * w0n),
        (false, Stratum::N) => (w0n, w0c * w0n),
        _ => (1.0, 1.0),
    }
}

/// `(w_{1,c}, w_{0,c}, w_{0,n}, w_{1,a})` for one subject.
pub fn pi_weights_at(e_a: f64, e_c: f64, e_n: f64, (eps0, eps1): (f64, f64)) -> [f64; 4] {
    let d1 = eps1 * e_c + e_a;
    let d0 = eps0 * e_c + e_n;
    [
        (eps1 * e_c + eps1 * e_a) / d1,
        (eps0 * e_c + eps0 * e_n) / d0,
        (e_c + e_n) / d0,
        (e_c + e_a) / d1,
    ]
}

fn share_label(g: Stratum, zeta: f64) -> &'static str {
    match (g, zeta > 0.0) {
        (Stratum::C, false) => "p1_hat - p0_hat",
        (Stratum::A, false) => "p0_hat",
        (Stratum::N, false) => "1 - p1_hat",
        (Stratum::C, true) => "e_c share",
        (Stratum::A, true) => "e_a share",
        (Stratum::N, true) => "e_n share",
        (Stratum::D, _) => "e_d share",
    }
}

fn scalar(nb: &NuisanceBundle, ds: &Dataset, method: Method, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    let grid = [u];
    let curves = nb.curves(ds, &grid);
    let ev = Evaluator::new(ds, &nb.pi, &nb.ps, &curves);
    let (s1, s0) = ev.contrast(method, g)?;
    Ok((s1[0], s0[0], s1[0] - s0[0]))
}

/// Weighting estimator `(S_{1,g}, S_{0,g}, Delta_g)` at `u`.
pub fn sr_weighting(nb: &NuisanceBundle, ds: &Dataset, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    scalar(nb, ds, Method::Sr1, g, u)
}

/// Principal score and outcome regression estimator at `u`.
pub fn sr_outcome(nb: &NuisanceBundle, ds: &Dataset, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    scalar(nb, ds, Method::Sr2, g, u)
}

/// Propensity and outcome regression estimator at `u`.
pub fn sr_hybrid(nb: &NuisanceBundle, ds: &Dataset, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    scalar(nb, ds, Method::Sr3, g, u)
}

/// Multiply robust estimator at `u`.
pub fn mr_estimate(nb: &NuisanceBundle, ds: &Dataset, g: Stratum, u: f64) -> Result<(f64, f64, f64)> {
    scalar(nb, ds, Method::Mr, g, u)
}

/// Survival curves of one stratum on a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumCurve {
    pub stratum: Stratum,
    pub s1: Vec<f64>,
    pub s0: Vec<f64>,
    pub delta: Vec<f64>,
}

impl StratumCurve {
    pub fn new(stratum: Stratum, s1: Vec<f64>, s0: Vec<f64>) -> Self {
        let delta = s1.iter().zip(&s0).map(|(a, b)| a - b).collect();
        StratumCurve { stratum, s1, s0, delta }
    }
}

/// Pointwise percentile band for `Delta_g` on the grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsceEstimate {
    pub method: Method,
    pub grid: Vec<f64>,
    pub curves: Vec<StratumCurve>,
    /// One band per entry of `curves` when bootstrap inference was run.
    pub bands: Option<Vec<Band>>,
}

impl PsceEstimate {
    pub fn curve(&self, g: Stratum) -> Option<&StratumCurve> {
        self.curves.iter().find(|c| c.stratum == g)
    }

    /// Long-format CSV rows: `method,stratum,u,S1,S0,delta,se,ci_lo,ci_hi,flags`.
    pub fn write_rows<W: Write>(&self, out: &mut csv::Writer<W>) -> Result<()> {
        for (j, c) in self.curves.iter().enumerate() {
            for (k, &u) in self.grid.iter().enumerate() {
                let out_of_range = !(0.0..=1.0).contains(&c.s1[k]) || !(0.0..=1.0).contains(&c.s0[k]);
                let band = self.bands.as_ref().map(|b| &b[j]);
                let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                out.write_record([
                    self.method.label().to_string(),
                    c.stratum.label().to_string(),
                    u.to_string(),
                    c.s1[k].to_string(),
                    c.s0[k].to_string(),
                    c.delta[k].to_string(),
                    fmt(band.map(|b| b.se[k])),
                    fmt(band.map(|b| b.lo[k])),
                    fmt(band.map(|b| b.hi[k])),
                    if out_of_range { "out_of_range".into() } else { String::new() },
                ])?;
            }
        }
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 10] =
        ["method", "stratum", "u", "S1", "S0", "delta", "se", "ci_lo", "ci_hi", "flags"];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        self.write_rows(&mut w)?;
        let bytes = w.into_inner().map_err(|e| PsceError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Applies `method` to every point of `grid` for stratum `g`.
pub fn psce_curve(nb: &NuisanceBundle, ds: &Dataset, grid: &[f64], method: Method, g: Stratum) -> Result<PsceEstimate> {
    psce_curves(nb, ds, grid, method, &[g])
}

/// Same as [`psce_curve`] for several strata sharing one curve cache.
pub fn psce_curves(nb: &NuisanceBundle, ds: &Dataset, grid: &[f64], method: Method, strata: &[Stratum]) -> Result<PsceEstimate> {
    check_grid(grid)?;
    let curves = nb.curves(ds, grid);
    let ev = Evaluator::new(ds, &nb.pi, &nb.ps, &curves);
    let mut out = Vec::with_capacity(strata.len());
    for &g in strata {
        let (s1, s0) = ev.contrast(method, g)?;
        out.push(StratumCurve::new(g, s1, s0));
    }
    Ok(PsceEstimate {
        method,
        grid: grid.to_vec(),
        curves: out,
        bands: None,
    })
}

pub fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid[0] <= 0.0 || grid.windows(2).any(|w| w[0] >= w[1]) || grid.iter().any(|u| !u.is_finite()) {
        return Err(PsceError::InvalidArgument("time grid must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// `points` equally spaced times on `(0, t_max]`, ending at `t_max`.
pub fn default_grid(t_max: f64, points: usize) -> Vec<f64> {
    (1..=points).map(|k| t_max * k as f64 / points as f64).collect()
}

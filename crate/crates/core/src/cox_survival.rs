//! Cell-specific Cox proportional hazards models for the failure time and
//! the censoring time, with Breslow baselines.
//!
//! Sign convention: `S(u | x) = exp(-Lambda0(u) * exp(coef' x))`, i.e. a
//! positive coefficient raises the hazard.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Cell, Dataset, SubjectRecord};
use crate::error::{PsceError, Result};
use crate::optim::{self, Evaluation, Termination};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoxTarget {
    /// Failure time; `delta = 1` is the event.
    Outcome,
    /// Censoring time; `delta = 0` is the event.
    Censoring,
}

impl CoxTarget {
    fn is_event(self, rec: &SubjectRecord) -> bool {
        match self {
            CoxTarget::Outcome => rec.delta,
            CoxTarget::Censoring => !rec.delta,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedCox {
    pub coef: Vec<f64>,
    pub columns: Vec<usize>,
    /// Distinct event times, strictly increasing.
    pub baseline_times: Vec<f64>,
    /// Breslow increments of the cumulative baseline hazard at `baseline_times`.
    pub baseline_increments: Vec<f64>,
    pub cell: Cell,
    pub target: CoxTarget,
    pub converged: bool,
    pub iterations: usize,
    cumulative: Vec<f64>,
}

/// Observations of a single cell in the layout the partial likelihood needs.
pub struct CoxData {
    pub times: Vec<f64>,
    pub events: Vec<bool>,
    /// Covariate rows without intercept.
    pub rows: Vec<Vec<f64>>,
}

impl CoxData {
    pub fn from_cell(ds: &Dataset, cell: Cell, target: CoxTarget, columns: &[usize]) -> CoxData {
        let mut data = CoxData {
            times: Vec::new(),
            events: Vec::new(),
            rows: Vec::new(),
        };
        for rec in ds.records().iter().filter(|r| r.in_cell(cell)) {
            data.times.push(rec.u);
            data.events.push(target.is_event(rec));
            data.rows.push(columns.iter().map(|&j| rec.covariates[j]).collect());
        }
        data
    }
}

/// Fits the Cox model for `target` within `cell` using covariates `columns`.
pub fn fit_cox(ds: &Dataset, cell: Cell, target: CoxTarget, columns: &[usize]) -> Result<FittedCox> {
    fit_cox_from(ds, cell, target, columns, None)
}

/// [`fit_cox`] with Newton started at raw-scale coefficients `start`.
pub fn fit_cox_from(
    ds: &Dataset,
    cell: Cell,
    target: CoxTarget,
    columns: &[usize],
    start: Option<&[f64]>,
) -> Result<FittedCox> {
    let data = CoxData::from_cell(ds, cell, target, columns);
    if data.times.is_empty() {
        return Err(PsceError::EmptyCell {
            z: cell.z_u8(),
            s: cell.s_u8(),
        });
    }
    if !data.events.iter().any(|&e| e) {
        return Err(PsceError::NoEvents {
            z: cell.z_u8(),
            s: cell.s_u8(),
        });
    }
    let (coef, converged, iterations) = fit_partial_likelihood_from(&data, start).map_err(|e| match e {
        PsceError::MonotoneLikelihood { .. } => PsceError::MonotoneLikelihood {
            z: cell.z_u8(),
            s: cell.s_u8(),
        },
        other => other,
    })?;
    let (baseline_times, baseline_increments) = breslow(&data, &coef);
    Ok(FittedCox::from_parts(
        coef,
        columns.to_vec(),
        baseline_times,
        baseline_increments,
        cell,
        target,
        converged,
        iterations,
    ))
}

/// Indices of `data` sorted by time, descending.
fn descending_order(times: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));
    order
}

/// Maximizes the Breslow partial likelihood. Returns raw-scale coefficients.
pub fn fit_partial_likelihood(data: &CoxData) -> Result<(Vec<f64>, bool, usize)> {
    fit_partial_likelihood_from(data, None)
}

pub fn fit_partial_likelihood_from(data: &CoxData, start: Option<&[f64]>) -> Result<(Vec<f64>, bool, usize)> {
    let d = data.rows.first().map_or(0, Vec::len);
    if d == 0 {
        return Ok((Vec::new(), true, 0));
    }
    let (mean, sd) = optim::column_moments(&data.rows, false);
    if sd.iter().any(|&s| s == 0.0) {
        return Err(PsceError::Singular("constant covariate within a Cox cell".into()));
    }
    let xs: Vec<f64> = data
        .rows
        .iter()
        .flat_map(|r| r.iter().enumerate().map(|(j, &v)| (v - mean[j]) / sd[j]))
        .collect();
    let order = descending_order(&data.times);
    let n = data.times.len() as f64;

    let init = match start {
        Some(c) if c.len() == d => DVector::from_iterator(d, c.iter().zip(&sd).map(|(b, s)| b * s)),
        _ => DVector::zeros(d),
    };
    let outcome = optim::maximize_from(init, |beta| {
        let mut value = 0.0;
        let mut gradient = vec![0.0; d];
        let mut information = vec![0.0; d * d];
        let mut s0 = 0.0;
        let mut s1 = vec![0.0; d];
        let mut s2 = vec![0.0; d * d];
        let row = |i: usize| &xs[i * d..(i + 1) * d];
        let mut k = 0;
        while k < order.len() {
            // add the whole tie group to the risk set before scoring it
            let t = data.times[order[k]];
            let mut end = k;
            while end < order.len() && data.times[order[end]] == t {
                let x = row(order[end]);
                let w = x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>().exp();
                s0 += w;
                for j in 0..d {
                    s1[j] += w * x[j];
                    let wx = w * x[j];
                    for l in j..d {
                        s2[j * d + l] += wx * x[l];
                    }
                }
                end += 1;
            }
            let mut deaths = 0.0;
            for &i in &order[k..end] {
                if data.events[i] {
                    let x = row(i);
                    deaths += 1.0;
                    value += x.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>();
                    gradient.iter_mut().zip(x).for_each(|(g, v)| *g += v);
                }
            }
            if deaths > 0.0 {
                value -= deaths * s0.ln();
                for j in 0..d {
                    let mj = s1[j] / s0;
                    gradient[j] -= deaths * mj;
                    for l in j..d {
                        information[j * d + l] += deaths * (s2[j * d + l] / s0 - mj * s1[l] / s0);
                    }
                }
            }
            k = end;
        }
        for j in 0..d {
            for l in 0..j {
                information[j * d + l] = information[l * d + j];
            }
        }
        Evaluation {
            value: value / n,
            gradient: DVector::from_vec(gradient) / n,
            information: DMatrix::from_row_slice(d, d, &information) / n,
        }
    });
    match outcome.termination {
        Termination::Diverged => return Err(PsceError::MonotoneLikelihood { z: 0, s: 0 }),
        Termination::Singular => return Err(PsceError::Singular("Cox information".into())),
        _ => {}
    }
    let coef = outcome.coef.iter().zip(&sd).map(|(b, s)| b / s).collect();
    Ok((coef, outcome.termination == Termination::Converged, outcome.iterations))
}

/// Breslow increments `d_k / sum_{j in risk(t_k)} exp(coef' x_j)`.
pub fn breslow(data: &CoxData, coef: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let order = descending_order(&data.times);
    let risk: Vec<f64> = data
        .rows
        .iter()
        .map(|r| r.iter().zip(coef).map(|(x, b)| x * b).sum::<f64>().exp())
        .collect();
    let mut times = Vec::new();
    let mut increments = Vec::new();
    let mut s0 = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = data.times[order[k]];
        let mut end = k;
        let mut deaths = 0.0;
        while end < order.len() && data.times[order[end]] == t {
            s0 += risk[order[end]];
            if data.events[order[end]] {
                deaths += 1.0;
            }
            end += 1;
        }
        if deaths > 0.0 {
            times.push(t);
            increments.push(deaths / s0);
        }
        k = end;
    }
    times.reverse();
    increments.reverse();
    (times, increments)
}

impl FittedCox {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        coef: Vec<f64>,
        columns: Vec<usize>,
        baseline_times: Vec<f64>,
        baseline_increments: Vec<f64>,
        cell: Cell,
        target: CoxTarget,
        converged: bool,
        iterations: usize,
    ) -> FittedCox {
        let cumulative = baseline_increments
            .iter()
            .scan(0.0, |acc, d| {
                *acc += d;
                Some(*acc)
            })
            .collect();
        FittedCox {
            coef,
            columns,
            baseline_times,
            baseline_increments,
            cell,
            target,
            converged,
            iterations,
            cumulative,
        }
    }

    /// `Lambda0(u)`, right-continuous, flat past the last event time.
    pub fn cumulative_hazard(&self, u: f64) -> f64 {
        let k = self.baseline_times.partition_point(|&t| t <= u);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// `Lambda0(u-)`.
    pub fn cumulative_hazard_before(&self, u: f64) -> f64 {
        let k = self.baseline_times.partition_point(|&t| t < u);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// `exp(coef' x)` for raw covariates listed in model-column order.
    pub fn risk_score(&self, x: &[f64]) -> f64 {
        self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>().exp()
    }

    pub fn risk_score_record(&self, rec: &SubjectRecord) -> f64 {
        self.columns
            .iter()
            .zip(&self.coef)
            .map(|(&j, b)| b * rec.covariates[j])
            .sum::<f64>()
            .exp()
    }

    /// `S(u | x)` with `x` in model-column order.
    pub fn survival_at(&self, u: f64, x: &[f64]) -> f64 {
        (-self.cumulative_hazard(u) * self.risk_score(x)).exp()
    }

    pub fn survival_record(&self, u: f64, rec: &SubjectRecord) -> f64 {
        (-self.cumulative_hazard(u) * self.risk_score_record(rec)).exp()
    }

    /// Partial-likelihood score (mean scale) at the stored coefficients.
    pub fn score(&self, ds: &Dataset) -> Vec<f64> {
        let data = CoxData::from_cell(ds, self.cell, self.target, &self.columns);
        partial_likelihood_score(&data, &self.coef)
    }
}

/// Free-function form of [`FittedCox::survival_at`].
pub fn survival_at(m: &FittedCox, u: f64, x: &[f64]) -> f64 {
    m.survival_at(u, x)
}

/// Raw-scale score of the Breslow partial likelihood divided by n.
pub fn partial_likelihood_score(data: &CoxData, coef: &[f64]) -> Vec<f64> {
    let d = coef.len();
    let order = descending_order(&data.times);
    let mut score = vec![0.0; d];
    let mut s0 = 0.0;
    let mut s1 = vec![0.0; d];
    let mut k = 0;
    while k < order.len() {
        let t = data.times[order[k]];
        let mut end = k;
        while end < order.len() && data.times[order[end]] == t {
            let r = &data.rows[order[end]];
            let w = r.iter().zip(coef).map(|(x, b)| x * b).sum::<f64>().exp();
            s0 += w;
            for j in 0..d {
                s1[j] += w * r[j];
            }
            end += 1;
        }
        for &i in &order[k..end] {
            if data.events[i] {
                for j in 0..d {
                    score[j] += data.rows[i][j] - s1[j] / s0;
                }
            }
        }
        k = end;
    }
    let n = data.times.len() as f64;
    score.iter().map(|s| s / n).collect()
}

/// `int_0^u dM^C(r | X) / (S(r- | X) S^C(r- | X))` for one subject, where
/// `dM^C = dN^C - 1{U >= r} dLambda^C(r | X)` and both survival factors are
/// taken as left limits at the censoring jump times.
pub fn censoring_martingale_integral(
    censoring: &FittedCox,
    outcome: &FittedCox,
    rec: &SubjectRecord,
    u: f64,
) -> f64 {
    let rc = censoring.risk_score_record(rec);
    let rt = outcome.risk_score_record(rec);
    let limit = rec.u.min(u);
    let mut integral = 0.0;
    let mut before = 0.0;
    for (k, (&t, &inc)) in censoring
        .baseline_times
        .iter()
        .zip(&censoring.baseline_increments)
        .enumerate()
    {
        if t > limit {
            break;
        }
        let lam_t = outcome.cumulative_hazard_before(t);
        integral -= inc * rc * (lam_t * rt + before * rc).exp();
        before = censoring.cumulative[k];
    }
    if !rec.delta && rec.u <= u {
        let lam_t = outcome.cumulative_hazard_before(rec.u);
        let lam_c = censoring.cumulative_hazard_before(rec.u);
        integral += (lam_t * rt + lam_c * rc).exp();
    }
    integral
}

/// Precomputed censoring-jump layout for evaluating the martingale integral
/// of many subjects of one cell over a whole time grid.
pub struct MartingaleIntegrator<'a> {
    censoring: &'a FittedCox,
    outcome: &'a FittedCox,
    /// `Lambda0^T(r_k-)` at each censoring jump.
    outcome_before: Vec<f64>,
    /// `Lambda0^C(r_k-)` at each censoring jump.
    censoring_before: Vec<f64>,
}

impl<'a> MartingaleIntegrator<'a> {
    pub fn new(censoring: &'a FittedCox, outcome: &'a FittedCox) -> Self {
        let outcome_before = censoring
            .baseline_times
            .iter()
            .map(|&t| outcome.cumulative_hazard_before(t))
            .collect();
        let censoring_before = std::iter::once(0.0)
            .chain(censoring.cumulative.iter().copied())
            .take(censoring.baseline_times.len())
            .collect();
        MartingaleIntegrator {
            censoring,
            outcome,
            outcome_before,
            censoring_before,
        }
    }

    /// Integral for every `u` of the increasing `grid`, written to `out`.
    pub fn integrals(&self, rec: &SubjectRecord, grid: &[f64], out: &mut [f64]) {
        let rc = self.censoring.risk_score_record(rec);
        let rt = self.outcome.risk_score_record(rec);
        let times = &self.censoring.baseline_times;
        let counting = if rec.delta {
            0.0
        } else {
            let lam_t = self.outcome.cumulative_hazard_before(rec.u);
            let lam_c = self.censoring.cumulative_hazard_before(rec.u);
            (lam_t * rt + lam_c * rc).exp()
        };
        let mut k = 0;
        let mut compensator = 0.0;
        for (slot, &u) in out.iter_mut().zip(grid) {
            let limit = rec.u.min(u);
            while k < times.len() && times[k] <= limit {
                compensator += self.censoring.baseline_increments[k]
                    * rc
                    * (self.outcome_before[k] * rt + self.censoring_before[k] * rc).exp();
                k += 1;
            }
            let jump = if rec.u <= u { counting } else { 0.0 };
            *slot = jump - compensator;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Design;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn rec(x: f64, u: f64, delta: bool) -> SubjectRecord {
        SubjectRecord {
            covariates: vec![x],
            z: true,
            s: true,
            u,
            delta,
        }
    }

    fn cell_ds(recs: Vec<SubjectRecord>) -> Dataset {
        Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap()
    }

    const CELL: Cell = Cell::new(true, true);

    #[test]
    fn breslow_single_event() {
        let ds = cell_ds(vec![rec(0.0, 1.0, true), rec(0.0, 2.0, false), rec(0.0, 3.0, false)]);
        let m = fit_cox(&ds, CELL, CoxTarget::Outcome, &[]).unwrap();
        assert_eq!(m.baseline_times, vec![1.0]);
        assert_abs_diff_eq!(m.baseline_increments[0], 1.0 / 3.0, epsilon = 1e-15);
        assert_eq!(m.survival_at(0.0, &[]), 1.0);
        assert_abs_diff_eq!(m.survival_at(2.0, &[]), (-1.0_f64 / 3.0).exp(), epsilon = 1e-15);
        assert_abs_diff_eq!(m.survival_at(2.0, &[]), 0.7165, epsilon = 1e-4);
    }

    #[test]
    fn perfectly_ordered_pair_is_monotone() {
        let ds = cell_ds(vec![rec(2.0, 1.0, true), rec(1.0, 2.0, true)]);
        assert_eq!(
            fit_cox(&ds, CELL, CoxTarget::Outcome, &[0]).unwrap_err(),
            PsceError::MonotoneLikelihood { z: 1, s: 1 }
        );
    }

    #[test]
    fn errors_on_empty_cell_and_no_events() {
        let ds = cell_ds(vec![rec(0.0, 1.0, true), rec(1.0, 2.0, true)]);
        assert_eq!(
            fit_cox(&ds, Cell::new(false, false), CoxTarget::Outcome, &[0]).unwrap_err(),
            PsceError::EmptyCell { z: 0, s: 0 }
        );
        assert_eq!(
            fit_cox(&ds, CELL, CoxTarget::Censoring, &[0]).unwrap_err(),
            PsceError::NoEvents { z: 1, s: 1 }
        );
    }

    #[test]
    fn censoring_target_reverses_indicator() {
        let ds = cell_ds(vec![rec(0.0, 1.0, true), rec(0.0, 2.0, false), rec(0.0, 3.0, true)]);
        let m = fit_cox(&ds, CELL, CoxTarget::Censoring, &[]).unwrap();
        assert_eq!(m.baseline_times, vec![2.0]);
        assert_abs_diff_eq!(m.baseline_increments[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ties_share_the_risk_set() {
        let ds = cell_ds(vec![rec(0.0, 1.0, true), rec(0.0, 1.0, true), rec(0.0, 2.0, true), rec(0.0, 3.0, false)]);
        let m = fit_cox(&ds, CELL, CoxTarget::Outcome, &[]).unwrap();
        assert_eq!(m.baseline_times, vec![1.0, 2.0]);
        assert_abs_diff_eq!(m.baseline_increments[0], 2.0 / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(m.baseline_increments[1], 1.0 / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn martingale_edge_cases() {
        // no censoring in the cell: integral vanishes for an event subject
        let ds = cell_ds(vec![rec(0.1, 1.0, true), rec(0.5, 2.0, true), rec(-0.3, 3.0, true)]);
        let mt = fit_cox(&ds, CELL, CoxTarget::Outcome, &[0]).unwrap();
        let empty = FittedCox::from_parts(vec![0.0], vec![0], vec![], vec![], CELL, CoxTarget::Censoring, true, 0);
        assert_eq!(censoring_martingale_integral(&empty, &mt, &ds.records()[1], 5.0), 0.0);

        // first censoring jump is the subject's own censoring time
        let ds = cell_ds(vec![rec(0.0, 1.0, true), rec(0.0, 2.0, false), rec(0.0, 3.0, true)]);
        let mt = fit_cox(&ds, CELL, CoxTarget::Outcome, &[]).unwrap();
        let mc = fit_cox(&ds, CELL, CoxTarget::Censoring, &[]).unwrap();
        let r = &ds.records()[1];
        let s_minus = (-mt.cumulative_hazard_before(2.0)).exp();
        let sc_minus = (-mc.cumulative_hazard_before(2.0)).exp();
        assert_eq!(sc_minus, 1.0);
        let expected = 1.0 / (s_minus * sc_minus) - 0.5 / (s_minus * sc_minus);
        assert_abs_diff_eq!(censoring_martingale_integral(&mc, &mt, r, 2.5), expected, epsilon = 1e-14);
        // before the jump nothing has accrued
        assert_eq!(censoring_martingale_integral(&mc, &mt, r, 1.5), 0.0);
    }

    #[test]
    fn batched_integrals_match_scalar() {
        let recs: Vec<_> = (0..25)
            .map(|i| {
                let x = ((i * 37) % 11) as f64 / 5.0 - 1.0;
                rec(x, 0.2 + ((i * 53) % 17) as f64 * 0.31, i % 3 != 0)
            })
            .collect();
        let ds = cell_ds(recs);
        let mt = fit_cox(&ds, CELL, CoxTarget::Outcome, &[0]).unwrap();
        let mc = fit_cox(&ds, CELL, CoxTarget::Censoring, &[0]).unwrap();
        let grid = [0.5, 1.0, 2.2, 3.0, 6.0];
        let integ = MartingaleIntegrator::new(&mc, &mt);
        let mut out = [0.0; 5];
        for r in ds.records() {
            integ.integrals(r, &grid, &mut out);
            for (u, v) in grid.iter().zip(out) {
                assert_abs_diff_eq!(v, censoring_martingale_integral(&mc, &mt, r, *u), epsilon = 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn cumulative_hazard_and_survival_are_monotone(
            obs in proptest::collection::vec((-2.0f64..2.0, 0.01f64..10.0, any::<bool>()), 5..40),
            x in -3.0f64..3.0,
        ) {
            let mut recs: Vec<_> = obs.iter().map(|&(x, u, d)| rec(x, u, d)).collect();
            recs[0].delta = true;
            let ds = cell_ds(recs);
            let Ok(m) = fit_cox(&ds, CELL, CoxTarget::Outcome, &[0]) else { return Ok(()); };
            prop_assert!(m.baseline_increments.iter().all(|&d| d > 0.0));
            prop_assert!(m.baseline_times.windows(2).all(|w| w[0] < w[1]));
            let mut last_h = 0.0;
            let mut last_s = 1.0;
            for k in 0..=120 {
                let u = k as f64 * 0.1;
                let h = m.cumulative_hazard(u);
                let s = m.survival_at(u, &[x]);
                prop_assert!(h >= last_h && s <= last_s && (0.0..=1.0).contains(&s));
                last_h = h;
                last_s = s;
            }
            if m.converged {
                prop_assert!(m.score(&ds).iter().all(|g| g.abs() <= 1e-6));
            }
        }
    }
}

//! Principal scores, marginal receipt probabilities and covariate balance
//! diagnostics across the observed `(Z, S)` cells.

use serde::{Deserialize, Serialize};

use crate::dataset::{Cell, Dataset};
use crate::error::{PsceError, Result};
use crate::glm_logistic::FittedLogistic;

/// Floor applied to stratum probabilities before renormalization.
pub const EPS_TRUNC: f64 = 1e-6;
/// Floor and ceiling for propensity and receipt probabilities used as weights.
pub const WEIGHT_FLOOR: f64 = 0.01;
/// SMD above which a covariate is flagged as imbalanced.
pub const BALANCE_THRESHOLD: f64 = 0.2;

/// Bounds a probability to `[WEIGHT_FLOOR, 1 - WEIGHT_FLOOR]`.
pub fn floor_prob(p: f64) -> f64 {
    p.clamp(WEIGHT_FLOOR, 1.0 - WEIGHT_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stratum {
    /// Always high-dose takers, `S(1) = S(0) = 1`.
    A,
    /// Compliers, `S(1) = 1, S(0) = 0`.
    C,
    /// Always low-dose takers, `S(1) = S(0) = 0`.
    N,
    /// Defiers, `S(1) = 0, S(0) = 1`.
    D,
}

impl Stratum {
    pub const MONOTONE: [Stratum; 3] = [Stratum::A, Stratum::C, Stratum::N];
    pub const ALL: [Stratum; 4] = [Stratum::A, Stratum::C, Stratum::N, Stratum::D];

    pub fn label(self) -> &'static str {
        match self {
            Stratum::A => "a",
            Stratum::C => "c",
            Stratum::N => "n",
            Stratum::D => "d",
        }
    }

    pub fn parse(s: &str) -> Option<Stratum> {
        match s {
            "a" => Some(Stratum::A),
            "c" => Some(Stratum::C),
            "n" => Some(Stratum::N),
            "d" => Some(Stratum::D),
            _ => None,
        }
    }

    /// Receipt `S(z)` of this stratum under assignment `z`.
    pub fn receipt(self, z: bool) -> bool {
        match self {
            Stratum::A => true,
            Stratum::N => false,
            Stratum::C => z,
            Stratum::D => !z,
        }
    }

    /// Observed cell holding this stratum's members assigned to `z`.
    pub fn cell(self, z: bool) -> Cell {
        Cell::new(z, self.receipt(z))
    }

    /// Partial derivatives `(d/dp0, d/dp1)` of the stratum probability,
    /// which is affine in `(p0(X), p1(X))` for a fixed defier ratio.
    pub fn score_gradient(self, zeta: f64) -> (f64, f64) {
        let k = 1.0 / (1.0 - zeta);
        match self {
            Stratum::C => (-k, k),
            Stratum::D => (-zeta * k, zeta * k),
            Stratum::A => (k, -zeta * k),
            Stratum::N => (zeta * k, -k),
        }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Per-subject principal scores together with the marginal strata shares.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalScores {
    pub p0x: Vec<f64>,
    pub p1x: Vec<f64>,
    pub e_a: Vec<f64>,
    pub e_c: Vec<f64>,
    pub e_n: Vec<f64>,
    /// Present only when the defier ratio is positive.
    pub e_d: Option<Vec<f64>>,
    pub p0_hat: f64,
    pub p1_hat: f64,
    pub zeta: f64,
    /// Number of subjects whose scores hit the truncation floor.
    pub truncated: usize,
}

impl PrincipalScores {
    pub fn n(&self) -> usize {
        self.e_c.len()
    }

    /// Per-subject `e_g(X)`; zero for defiers under monotonicity.
    pub fn scores(&self, g: Stratum) -> &[f64] {
        match g {
            Stratum::A => &self.e_a,
            Stratum::C => &self.e_c,
            Stratum::N => &self.e_n,
            Stratum::D => self.e_d.as_deref().unwrap_or(&[]),
        }
    }

    /// Marginal stratum share from the doubly robust `p0_hat`, `p1_hat`.
    pub fn share(&self, g: Stratum) -> f64 {
        let c = (self.p1_hat - self.p0_hat) / (1.0 - self.zeta);
        let d = self.zeta * c;
        match g {
            Stratum::C => c,
            Stratum::D => d,
            Stratum::A => self.p0_hat - d,
            Stratum::N => 1.0 - self.p1_hat - d,
        }
    }

    pub fn strata(&self) -> &'static [Stratum] {
        if self.e_d.is_some() {
            &Stratum::ALL
        } else {
            &Stratum::MONOTONE
        }
    }

    /// Stratum shares with the marginal probabilities replaced.
    pub fn with_marginals(mut self, p0_hat: f64, p1_hat: f64) -> Self {
        self.p0_hat = p0_hat;
        self.p1_hat = p1_hat;
        self
    }
}

fn clip(k: usize, x: f64) -> bool {
    x < 0.0 || (k == 1 && x < EPS_TRUNC)
}

/// Whether a stratum vector ordered `(a, c, n[, d])` hits the floor.
pub(crate) fn needs_truncation(v: &[f64]) -> bool {
    v.iter().enumerate().any(|(k, &x)| clip(k, x))
}

/// Clips the complier component when it falls below `EPS_TRUNC`, and any
/// other component when it is negative, then rescales the untouched
/// components so the vector sums to one. Returns whether anything was clipped.
fn truncate_renormalize(v: &mut [f64]) -> bool {
    if !needs_truncation(v) {
        return false;
    }
    let clipped = v.iter().enumerate().filter(|&(k, &x)| clip(k, x)).count() as f64;
    let rest: f64 = v.iter().enumerate().filter(|&(k, &x)| !clip(k, x)).map(|(_, x)| x).sum();
    let target = 1.0 - clipped * EPS_TRUNC;
    for (k, x) in v.iter_mut().enumerate() {
        *x = if clip(k, *x) { EPS_TRUNC } else { *x * target / rest };
    }
    true
}

/// Strata probabilities `(e_a, e_c, e_n, e_d)` from the receipt
/// probabilities at defier ratio `zeta`, without truncation.
pub fn raw_strata(p0: f64, p1: f64, zeta: f64) -> [f64; 4] {
    let c = (p1 - p0) / (1.0 - zeta);
    let d = zeta * c;
    [p0 - d, c, 1.0 - p1 - d, d]
}

/// Principal scores under monotonicity: `e_a = p0`, `e_c = p1 - p0`,
/// `e_n = 1 - p1`, with `e_c` truncated at `EPS_TRUNC`. The marginal
/// shares start as plain averages; see [`PrincipalScores::with_marginals`].
pub fn principal_scores(p0x: &[f64], p1x: &[f64]) -> PrincipalScores {
    build_scores(p0x, p1x, 0.0)
}

pub(crate) fn build_scores(p0x: &[f64], p1x: &[f64], zeta: f64) -> PrincipalScores {
    let n = p0x.len();
    let mut ps = PrincipalScores {
        p0x: p0x.to_vec(),
        p1x: p1x.to_vec(),
        e_a: Vec::with_capacity(n),
        e_c: Vec::with_capacity(n),
        e_n: Vec::with_capacity(n),
        e_d: (zeta > 0.0).then(|| Vec::with_capacity(n)),
        p0_hat: p0x.iter().sum::<f64>() / n as f64,
        p1_hat: p1x.iter().sum::<f64>() / n as f64,
        zeta,
        truncated: 0,
    };
    for (&p0, &p1) in p0x.iter().zip(p1x) {
        let [a, c, nn, d] = raw_strata(p0, p1, zeta);
        let clipped = if let Some(e_d) = ps.e_d.as_mut() {
            let mut v = [a, c, nn, d];
            let clipped = truncate_renormalize(&mut v);
            e_d.push(v[3]);
            ps.e_a.push(v[0]);
            ps.e_c.push(v[1]);
            ps.e_n.push(v[2]);
            clipped
        } else {
            let mut v = [a, c, nn];
            let clipped = truncate_renormalize(&mut v);
            ps.e_a.push(v[0]);
            ps.e_c.push(v[1]);
            ps.e_n.push(v[2]);
            clipped
        };
        ps.truncated += usize::from(clipped);
    }
    if ps.truncated > 0 {
        log::debug!("{} of {} principal scores truncated at {EPS_TRUNC}", ps.truncated, n);
    }
    ps
}

/// Doubly robust marginal receipt probabilities `(p0_hat, p1_hat)`.
pub fn dr_marginal_pz(ds: &Dataset, prop: &FittedLogistic, p0m: &FittedLogistic, p1m: &FittedLogistic) -> (f64, f64) {
    let pi = prop.predict_all(ds);
    let p0x = p0m.predict_all(ds);
    let p1x = p1m.predict_all(ds);
    dr_marginals(ds, &pi, &p0x, &p1x)
}

/// Same as [`dr_marginal_pz`] on precomputed per-subject predictions.
pub fn dr_marginals(ds: &Dataset, pi: &[f64], p0x: &[f64], p1x: &[f64]) -> (f64, f64) {
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    for (i, rec) in ds.records().iter().enumerate() {
        let p = floor_prob(pi[i]);
        if rec.z {
            s1 += (rec.sf() - p1x[i]) / p;
        } else {
            s0 += (rec.sf() - p0x[i]) / (1.0 - p);
        }
        s0 += p0x[i];
        s1 += p1x[i];
    }
    let n = ds.n() as f64;
    (s0 / n, s1 / n)
}

/// Absolute standardized difference `|m1 - m0| / sqrt((s1^2 + s0^2) / 2)`.
pub fn asd(m1: f64, s1: f64, m0: f64, s0: f64) -> f64 {
    let pooled = (0.5 * (s1 * s1 + s0 * s0)).sqrt();
    if pooled == 0.0 {
        0.0
    } else {
        (m1 - m0).abs() / pooled
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovariateSummary {
    pub covariate: String,
    pub strata: Vec<Stratum>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Largest pairwise absolute standardized difference across strata.
    pub max_asd: f64,
}

/// Principal-score weighted mean and sd of each covariate within each stratum.
pub fn strata_covariate_summary(ds: &Dataset, ps: &PrincipalScores) -> Result<Vec<CovariateSummary>> {
    let strata = ps.strata();
    for &g in strata {
        if ps.share(g) <= EPS_TRUNC {
            return Err(PsceError::DegenerateStratum(g.label().into()));
        }
    }
    let n = ds.n() as f64;
    let mut out = Vec::with_capacity(ds.n_covariates());
    for (j, name) in ds.covariate_names().iter().enumerate() {
        let mut mean = Vec::new();
        let mut sd = Vec::new();
        for &g in strata {
            let share = ps.share(g);
            let e = ps.scores(g);
            let m = ds
                .records()
                .iter()
                .zip(e)
                .map(|(r, w)| w / share * r.covariates[j])
                .sum::<f64>()
                / n;
            let v = ds
                .records()
                .iter()
                .zip(e)
                .map(|(r, w)| w / share * (r.covariates[j] - m).powi(2))
                .sum::<f64>()
                / n;
            mean.push(m);
            sd.push(v.sqrt());
        }
        let mut max_asd = 0.0_f64;
        for a in 0..strata.len() {
            for b in a + 1..strata.len() {
                max_asd = max_asd.max(asd(mean[a], sd[a], mean[b], sd[b]));
            }
        }
        out.push(CovariateSummary {
            covariate: name.clone(),
            strata: strata.to_vec(),
            mean,
            sd,
            max_asd,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmdRow {
    pub covariate: String,
    pub weighted: bool,
    pub smd_c: f64,
    pub smd_n: f64,
    pub smd_a: f64,
}

impl SmdRow {
    pub fn get(&self, g: Stratum) -> f64 {
        match g {
            Stratum::C => self.smd_c,
            Stratum::N => self.smd_n,
            Stratum::A => self.smd_a,
            Stratum::D => f64::NAN,
        }
    }

    pub fn flagged(&self, g: Stratum) -> bool {
        self.get(g) > BALANCE_THRESHOLD
    }
}

/// Standardized mean differences of every covariate between the observed
/// cells sharing a stratum: `(1,1)` vs `(0,0)` for compliers, `(1,0)` vs
/// `(0,0)` for never takers and `(1,1)` vs `(0,1)` for always takers.
/// With `weighted`, each cell is reweighted by its principal-score ratio.
pub fn smd_balance(ds: &Dataset, ps: &PrincipalScores, weighted: bool) -> Result<Vec<SmdRow>> {
    ds.require_all_cells()?;
    let (p0h, p1h) = (ps.p0_hat, ps.p1_hat);
    let (ea, ec, en) = (ps.share(Stratum::A), ps.share(Stratum::C), ps.share(Stratum::N));
    // weight of subject i in its role (cell, stratum)
    let weight = |i: usize, cell: Cell, g: Stratum| -> f64 {
        if !weighted {
            return 1.0;
        }
        let (p0, p1) = (ps.p0x[i], ps.p1x[i]);
        match (cell.z, g) {
            (true, Stratum::C) => (ps.e_c[i] / p1) / (ec / p1h),
            (false, Stratum::C) => (ps.e_c[i] / (1.0 - p0)) / (ec / (1.0 - p0h)),
            (false, Stratum::N) => (ps.e_n[i] / (1.0 - p0)) / (en / (1.0 - p0h)),
            (true, Stratum::A) => (ps.e_a[i] / p1) / (ea / p1h),
            _ => 1.0,
        }
    };
    let c11 = Cell::new(true, true);
    let c10 = Cell::new(true, false);
    let c01 = Cell::new(false, true);
    let c00 = Cell::new(false, false);
    let n = ds.n() as f64;
    let share = |cell: Cell| ds.records().iter().filter(|r| r.in_cell(cell)).count() as f64 / n;

    let mut out = Vec::with_capacity(ds.n_covariates());
    for (j, name) in ds.covariate_names().iter().enumerate() {
        let weighted_mean = |cell: Cell, g: Stratum| -> f64 {
            ds.records()
                .iter()
                .enumerate()
                .filter(|(_, r)| r.in_cell(cell))
                .map(|(i, r)| weight(i, cell, g) * r.covariates[j])
                .sum::<f64>()
                / n
                / share(cell)
        };
        let var = |cell: Cell| -> f64 {
            let xs: Vec<f64> = ds
                .records()
                .iter()
                .filter(|r| r.in_cell(cell))
                .map(|r| r.covariates[j])
                .collect();
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let dof = (xs.len() as f64 - 1.0).max(1.0);
            xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / dof
        };
        let smd = |a: Cell, b: Cell, g: Stratum| -> f64 {
            let s = (0.5 * (var(a) + var(b))).sqrt();
            if s == 0.0 {
                log::warn!("covariate `{name}` is constant within cells {a} and {b}; SMD set to 0");
                return 0.0;
            }
            (weighted_mean(a, g) - weighted_mean(b, g)).abs() / s
        };
        out.push(SmdRow {
            covariate: name.clone(),
            weighted,
            smd_c: smd(c11, c00, Stratum::C),
            smd_n: smd(c10, c00, Stratum::N),
            smd_a: smd(c11, c01, Stratum::A),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Design, SubjectRecord};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn scores_from_receipt_probabilities() {
        let ps = principal_scores(&[0.2], &[0.7]);
        assert_abs_diff_eq!(ps.e_a[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(ps.e_c[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(ps.e_n[0], 0.3, epsilon = 1e-15);
        assert_eq!(ps.truncated, 0);
    }

    #[test]
    fn nonpositive_complier_score_is_truncated() {
        let ps = principal_scores(&[0.4, 0.2], &[0.4, 0.7]);
        assert_eq!(ps.truncated, 1);
        assert_eq!(ps.e_c[0], EPS_TRUNC);
        assert_abs_diff_eq!(ps.e_a[0] + ps.e_c[0] + ps.e_n[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn marginal_shares() {
        let ps = principal_scores(&[0.1], &[0.5]).with_marginals(0.064, 0.620);
        assert_abs_diff_eq!(ps.share(Stratum::A), 0.064, epsilon = 1e-12);
        assert_abs_diff_eq!(ps.share(Stratum::C), 0.556, epsilon = 1e-12);
        assert_abs_diff_eq!(ps.share(Stratum::N), 0.380, epsilon = 1e-12);
    }

    #[test]
    fn asd_example() {
        let v = asd(67.00, 9.45, 66.77, 9.32);
        assert_abs_diff_eq!(v, 0.0245, epsilon = 1e-4);
        assert_eq!(format!("{v:.2}"), "0.02");
    }

    fn rec(x: f64, z: bool, s: bool) -> SubjectRecord {
        SubjectRecord {
            covariates: vec![x],
            z,
            s,
            u: 1.0,
            delta: true,
        }
    }

    #[test]
    fn constant_scores_give_sample_means() {
        let recs: Vec<_> = (0..8).map(|i| rec(i as f64, i % 2 == 0, i % 3 == 0)).collect();
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.2; 8], &[0.7; 8]).with_marginals(0.2, 0.7);
        let summary = strata_covariate_summary(&ds, &ps).unwrap();
        for m in &summary[0].mean {
            assert_abs_diff_eq!(*m, 3.5, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(summary[0].max_asd, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn two_point_weighted_mean() {
        // stratum c weights 0.6 and 0.2 with share 0.4: mean = (0.6*1 + 0.2*3) / 2 / 0.4
        let recs = vec![rec(1.0, true, true), rec(3.0, false, false)];
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.1, 0.3], &[0.7, 0.5]).with_marginals(0.2, 0.6);
        let summary = strata_covariate_summary(&ds, &ps).unwrap();
        let c = summary[0].strata.iter().position(|&g| g == Stratum::C).unwrap();
        assert_abs_diff_eq!(summary[0].mean[c], 1.5, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_stratum_is_rejected() {
        let recs = vec![rec(1.0, true, true), rec(3.0, false, false)];
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.0, 0.0], &[0.7, 0.5]).with_marginals(0.0, 0.6);
        assert_eq!(
            strata_covariate_summary(&ds, &ps).unwrap_err(),
            PsceError::DegenerateStratum("a".into())
        );
    }

    #[test]
    fn identical_cells_have_zero_smd() {
        let mut recs = Vec::new();
        for &(z, s) in &[(true, true), (true, false), (false, true), (false, false)] {
            for x in [1.0, 2.0, 4.0] {
                recs.push(rec(x, z, s));
            }
        }
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.3; 12], &[0.6; 12]).with_marginals(0.3, 0.6);
        for weighted in [false, true] {
            let row = &smd_balance(&ds, &ps, weighted).unwrap()[0];
            for g in Stratum::MONOTONE {
                assert_abs_diff_eq!(row.get(g), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_scores_leave_smd_unweighted() {
        let recs: Vec<_> = (0..24).map(|i| rec((i * i % 7) as f64, i % 2 == 0, i % 3 != 0)).collect();
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.25; 24], &[0.65; 24]).with_marginals(0.25, 0.65);
        let raw = &smd_balance(&ds, &ps, false).unwrap()[0];
        let wtd = &smd_balance(&ds, &ps, true).unwrap()[0];
        assert!(raw.smd_c > 0.0);
        for g in Stratum::MONOTONE {
            assert_abs_diff_eq!(raw.get(g), wtd.get(g), epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_covariate_smd_is_zero() {
        let recs: Vec<_> = [(true, true), (true, false), (false, true), (false, false)]
            .iter()
            .flat_map(|&(z, s)| [rec(5.0, z, s), rec(5.0, z, s)])
            .collect();
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.3; 8], &[0.6; 8]).with_marginals(0.3, 0.6);
        let row = &smd_balance(&ds, &ps, true).unwrap()[0];
        assert_eq!((row.smd_c, row.smd_n, row.smd_a), (0.0, 0.0, 0.0));
    }

    #[test]
    fn smd_requires_all_cells() {
        let recs = vec![rec(1.0, true, true), rec(3.0, false, false)];
        let ds = Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap();
        let ps = principal_scores(&[0.3; 2], &[0.6; 2]);
        assert!(matches!(smd_balance(&ds, &ps, false), Err(PsceError::EmptyCell { .. })));
    }

    proptest! {
        #[test]
        fn bijection_and_unit_sum(p0 in 1e-3f64..0.999, p1 in 1e-3f64..0.999) {
            let ps = principal_scores(&[p0], &[p1]);
            let sum = ps.e_a[0] + ps.e_c[0] + ps.e_n[0];
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(ps.e_a[0] >= 0.0 && ps.e_c[0] >= 0.0 && ps.e_n[0] >= 0.0);
            if ps.truncated == 0 {
                prop_assert_eq!(ps.e_a[0], p0);
                prop_assert!((1.0 - ps.e_n[0] - p1).abs() <= 1e-15);
            }
        }

        #[test]
        fn gradient_matches_finite_difference(p0 in 0.05f64..0.4, p1 in 0.5f64..0.95, zeta in 0.0f64..0.3) {
            let h = 1e-6;
            for (k, g) in Stratum::ALL.iter().enumerate() {
                let (d0, d1) = g.score_gradient(zeta);
                let f0 = (raw_strata(p0 + h, p1, zeta)[k] - raw_strata(p0 - h, p1, zeta)[k]) / (2.0 * h);
                let f1 = (raw_strata(p0, p1 + h, zeta)[k] - raw_strata(p0, p1 - h, zeta)[k]) / (2.0 * h);
                let idx = match g { Stratum::A => 0, Stratum::C => 1, Stratum::N => 2, Stratum::D => 3 };
                prop_assert_eq!(idx, k);
                prop_assert!((d0 - f0).abs() < 1e-6 && (d1 - f1).abs() < 1e-6);
            }
        }
    }
}

//! Nonparametric bootstrap: resample subjects with replacement, rerun the
//! whole estimation pipeline and summarize the replicate distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{PsceError, Result};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    pub b: usize,
    pub alpha: f64,
    /// Estimate on the original data, one entry per target.
    pub point: Vec<f64>,
    /// Replicate standard deviation.
    pub se: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub failed_replicates: usize,
}

/// Random number stream of replicate `b` under `seed`.
pub fn replicate_rng(seed: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b);
    rng
}

/// Subject indices of one with-replacement resample of size `n`.
pub fn resample_indices(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

/// Type 7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Sample standard deviation (divisor `n - 1`).
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 || xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Runs `estimator` on `b` resamples of `ds`. Replicate `k` draws from
/// stream `k` of `seed`, so results do not depend on scheduling.
pub fn bootstrap<F>(ds: &Dataset, estimator: F, b: usize, alpha: f64, seed: u64) -> Result<BootstrapResult>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    if b < 2 {
        return Err(PsceError::InvalidArgument("bootstrap needs at least 2 replicates".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(PsceError::InvalidArgument("alpha must lie in (0, 1)".into()));
    }
    let point = estimator(ds)?;
    let reps = replicates(ds, &estimator, b, seed);
    summarize(point, &reps, alpha)
}

/// Replicate outputs in replicate order; `None` marks a failed replicate.
pub fn replicates<F>(ds: &Dataset, estimator: &F, b: usize, seed: u64) -> Vec<Option<Vec<f64>>>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(seed, k as u64);
            let idx = resample_indices(&mut rng, ds.n());
            estimator(&ds.resample(&idx)).ok()
        })
        .collect()
}

/// Standard errors and percentile intervals from replicate outputs.
pub fn summarize(point: Vec<f64>, reps: &[Option<Vec<f64>>], alpha: f64) -> Result<BootstrapResult> {
    let b = reps.len();
    let dim = point.len();
    let ok: Vec<&Vec<f64>> = reps.iter().flatten().filter(|r| r.len() == dim).collect();
    let failed = b - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * b as f64 || ok.len() < 2 {
        return Err(PsceError::TooManyFailures { failed, total: b });
    }
    let mut se = Vec::with_capacity(dim);
    let mut lo = Vec::with_capacity(dim);
    let mut hi = Vec::with_capacity(dim);
    for j in 0..dim {
        let mut col: Vec<f64> = ok.iter().map(|r| r[j]).collect();
        se.push(sample_sd(&col));
        col.sort_by(f64::total_cmp);
        lo.push(quantile_sorted(&col, alpha / 2.0));
        hi.push(quantile_sorted(&col, 1.0 - alpha / 2.0));
    }
    Ok(BootstrapResult {
        b,
        alpha,
        point,
        se,
        lo,
        hi,
        failed_replicates: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Design, SubjectRecord};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn data(n: usize) -> Dataset {
        let recs = (0..n)
            .map(|i| SubjectRecord {
                covariates: vec![i as f64],
                z: i % 2 == 0,
                s: i % 3 == 0,
                u: 1.0 + i as f64,
                delta: true,
            })
            .collect();
        Dataset::new(recs, vec!["x".into()], Design::Observational).unwrap()
    }

    fn mean_x(ds: &Dataset) -> Result<Vec<f64>> {
        Ok(vec![ds.records().iter().map(|r| r.covariates[0]).sum::<f64>() / ds.n() as f64])
    }

    #[test]
    fn constant_estimator_has_zero_width() {
        let r = bootstrap(&data(20), |_| Ok(vec![0.3, 7.0]), 50, 0.05, 1).unwrap();
        assert_eq!(r.se, vec![0.0, 0.0]);
        assert_eq!(r.lo, r.hi);
        assert_eq!(r.lo, vec![0.3, 7.0]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let ds = data(30);
        let a = bootstrap(&ds, mean_x, 100, 0.1, 42).unwrap();
        let b = bootstrap(&ds, mean_x, 100, 0.1, 42).unwrap();
        assert_eq!(a, b);
        let c = bootstrap(&ds, mean_x, 100, 0.1, 43).unwrap();
        assert_ne!(a.se, c.se);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let ds = data(30);
        let a = bootstrap(&ds, mean_x, 64, 0.05, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| bootstrap(&ds, mean_x, 64, 0.05, 9).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mean_se_is_close_to_analytic() {
        let ds = data(200);
        let r = bootstrap(&ds, mean_x, 2000, 0.05, 5).unwrap();
        let xs: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let pop_sd = sample_sd(&xs) * (199.0_f64 / 200.0).sqrt();
        let analytic = pop_sd / 200.0_f64.sqrt();
        assert!((r.se[0] / analytic - 1.0).abs() < 0.08, "{} vs {}", r.se[0], analytic);
        assert!(r.lo[0] < r.point[0] && r.point[0] < r.hi[0]);
    }

    #[test]
    fn failures_are_counted_and_capped() {
        let ds = data(10);
        let failing = |d: &Dataset| {
            if d.records().iter().filter(|r| r.covariates[0] == 0.0).count() >= 2 {
                Err(PsceError::Separation)
            } else {
                Ok(vec![1.0])
            }
        };
        // subject 0 is drawn at least twice in about a quarter of resamples
        match bootstrap(&ds, failing, 200, 0.05, 3) {
            Err(PsceError::TooManyFailures { failed, total }) => {
                assert_eq!(total, 200);
                assert!(failed > 10);
            }
            other => panic!("unexpected {other:?}"),
        }
        let rare = |d: &Dataset| {
            if d.records().iter().all(|r| r.covariates[0] == 0.0) {
                Err(PsceError::Separation)
            } else {
                Ok(vec![1.0])
            }
        };
        assert_eq!(bootstrap(&ds, rare, 40, 0.05, 3).unwrap().failed_replicates, 0);
    }

    #[test]
    fn argument_checks() {
        assert!(bootstrap(&data(5), mean_x, 1, 0.05, 0).is_err());
        assert!(bootstrap(&data(5), mean_x, 10, 1.0, 0).is_err());
    }

    #[test]
    fn type7_quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_abs_diff_eq!(quantile_sorted(&xs, 0.5), 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(quantile_sorted(&xs, 0.25), 1.75, epsilon = 1e-15);
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
    }

    proptest! {
        #[test]
        fn interval_brackets_the_median(values in proptest::collection::vec(-10.0f64..10.0, 3..60), alpha in 0.01f64..0.5) {
            let reps: Vec<Option<Vec<f64>>> = values.iter().map(|&v| Some(vec![v])).collect();
            let r = summarize(vec![0.0], &reps, alpha).unwrap();
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let median = quantile_sorted(&sorted, 0.5);
            prop_assert!(r.lo[0] <= median && median <= r.hi[0]);
            prop_assert!(r.se[0] >= 0.0);
        }
    }
}

//! Monte Carlo laboratory: the simulation design with five covariates,
//! oracle truths, and the eight-scenario model misspecification matrix.
//!
//! Covariates: `X1 ~ Bernoulli(0.5)`, `X2, X3 ~ N(0, 1)`, `X4 = X2^2 - 1`,
//! `X5 = X3^2 - 1`. Assignment is logistic in `(X4, X5)` (observational) or
//! a fair coin (randomized); receipt is logistic in `(Z, X4, X5)`; failure
//! and censoring times are exponential with log-linear rates. Correct
//! working models use all five covariates, misspecified ones `X1..X3`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::cox_survival::{fit_cox_from, CoxTarget, FittedCox};
use crate::dataset::{Cell, Dataset, Design, SubjectRecord};
use crate::error::{PsceError, Result};
use crate::glm_logistic::{fit_logistic_from, logistic, FittedLogistic, Response};
use crate::principal_strata::{raw_strata, PrincipalScores, Stratum};
use crate::psce_estimators::{fit_censoring_from, scores_from_models, CurveSet, Evaluator, Method};
use crate::resampling_inference::{quantile_sorted, replicate_rng, resample_indices, sample_sd, MAX_FAILURE_SHARE};

pub const COVARIATE_NAMES: [&str; 5] = ["X1", "X2", "X3", "X4", "X5"];
pub const CORRECT_COLUMNS: [usize; 5] = [0, 1, 2, 3, 4];
pub const MISSPECIFIED_COLUMNS: [usize; 3] = [0, 1, 2];
pub const ORACLE_DRAWS: usize = 10_000_000;
pub const ORACLE_SEED: u64 = 20_240_601;
/// Evaluation times of the scenario matrix.
pub const REPORT_GRID: [f64; 5] = [1.0, 2.0, 3.0, 4.0, 5.0];

const RECEIPT_Z: f64 = 1.0;
const RECEIPT_INTERCEPT: f64 = -0.5;
/// Coefficients of `(X4, X5)` in the assignment and receipt models.
const CONFOUNDING: [f64; 2] = [0.5, 0.4];
/// Outcome log-rate coefficients `psi_{zs}` indexed by [`Cell::index`].
const PSI: [[f64; 5]; 4] = [
    [0.0, 0.0, 0.2, 0.4, 0.5],
    [0.0, 0.0, 0.0, 0.4, 0.2],
    [0.0, 0.0, 0.0, 0.4, -0.3],
    [0.0, 0.0, 0.0, -0.3, 0.2],
];
const CENSORING_LOG_RATE: [f64; 3] = [-2.0, 0.3, 0.2];

/// Data generating process variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TruthModel {
    /// Monotonicity and principal ignorability hold.
    Standard,
    /// Defiers present with constant ratio `P(G=d|X) / P(G=c|X) = zeta`;
    /// the observed-data law is unchanged.
    Defiers(f64),
    /// Compliers assigned to `Z = 1` have survival `eps1(t) S_{11}(t | X)`
    /// with `eps1(t) = exp(xi1 min(t, t_max) / t_max)`, `xi1 <= 0`.
    PiViolation { xi1: f64, t_max: f64 },
}

impl TruthModel {
    fn zeta(self) -> f64 {
        match self {
            TruthModel::Defiers(z) => z,
            _ => 0.0,
        }
    }
}

fn log_rate(cell: Cell, x: &[f64]) -> f64 {
    let psi = &PSI[cell.index()];
    -1.0 + 0.5 * cell.s_u8() as f64 + psi.iter().zip(x).map(|(p, v)| p * v).sum::<f64>()
}

/// True `S_{zs}(t | X)`.
pub fn true_cell_survival(cell: Cell, x: &[f64], t: f64) -> f64 {
    (-t * log_rate(cell, x).exp()).exp()
}

/// True `(p0(X), p1(X))`.
pub fn true_receipt(x: &[f64]) -> (f64, f64) {
    let lin = CONFOUNDING[0] * x[3] + CONFOUNDING[1] * x[4];
    (logistic(RECEIPT_INTERCEPT + lin), logistic(RECEIPT_INTERCEPT + RECEIPT_Z + lin))
}

/// True observational propensity `pi(X)`.
pub fn true_propensity(x: &[f64]) -> f64 {
    logistic(CONFOUNDING[0] * x[3] + CONFOUNDING[1] * x[4])
}

fn draw_covariates(rng: &mut impl Rng) -> [f64; 5] {
    let x1 = if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 };
    let x2: f64 = rng.sample(StandardNormal);
    let x3: f64 = rng.sample(StandardNormal);
    [x1, x2, x3, x2 * x2 - 1.0, x3 * x3 - 1.0]
}

/// Draws `n` subjects from the standard process.
pub fn simulate_dataset(n: usize, design: Design, seed: u64) -> Dataset {
    simulate(n, design, TruthModel::Standard, seed)
}

/// Draws `n` subjects from the chosen process variant.
pub fn simulate(n: usize, design: Design, model: TruthModel, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zeta = model.zeta();
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let x = draw_covariates(&mut rng);
        let pz = match design {
            Design::Observational => true_propensity(&x),
            Design::Randomized(p) => p,
        };
        let z = rng.gen::<f64>() < pz;
        let (p0, p1) = true_receipt(&x);
        // latent stratum from the strata probabilities
        let strata = raw_strata(p0, p1, zeta);
        let draw: f64 = rng.gen();
        let g = if draw < strata[0] {
            Stratum::A
        } else if draw < strata[0] + strata[1] {
            Stratum::C
        } else if draw < strata[0] + strata[1] + strata[2] {
            Stratum::N
        } else {
            Stratum::D
        };
        let s = g.receipt(z);
        let cell = Cell::new(z, s);
        let rate = log_rate(cell, &x).exp();
        let e: f64 = rng.sample(Exp1);
        let t = match model {
            TruthModel::PiViolation { xi1, t_max } if z && g == Stratum::C => {
                let tilted = rate - xi1 / t_max;
                if e < tilted * t_max {
                    e / tilted
                } else {
                    t_max + (e - tilted * t_max) / rate
                }
            }
            _ => e / rate,
        };
        let c_rate = (CENSORING_LOG_RATE[0] + CENSORING_LOG_RATE[1] * x[3] + CENSORING_LOG_RATE[2] * x[4]).exp();
        let c = rng.sample::<f64, _>(Exp1) / c_rate;
        records.push(SubjectRecord {
            covariates: x.to_vec(),
            z,
            s,
            u: t.min(c),
            delta: t <= c,
        });
    }
    let names = COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    Dataset::new(records, names, design).expect("simulated data are valid")
}

/// Oracle values of `S_{z,g}(u)` on a grid, from covariate draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTable {
    pub model: TruthModel,
    pub draws: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    values: BTreeMap<(Stratum, bool), Vec<f64>>,
}

impl OracleTable {
    /// `S_{z,g}` at every grid point.
    pub fn survival(&self, g: Stratum, z: bool) -> &[f64] {
        &self.values[&(g, z)]
    }

    pub fn get(&self, g: Stratum, z: bool, k: usize) -> f64 {
        self.values[&(g, z)][k]
    }

    pub fn delta(&self, g: Stratum, k: usize) -> f64 {
        self.get(g, true, k) - self.get(g, false, k)
    }

    fn header(&self) -> String {
        format!("# model={:?} draws={} seed={} grid={:?}", self.model, self.draws, self.seed, self.grid)
    }

    /// Text form of the cache file: a settings header, then one line per
    /// `(stratum, z)` pair.
    pub fn to_text(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        for ((g, z), v) in &self.values {
            let _ = write!(out, "{},{}", g.label(), u8::from(*z));
            for x in v {
                let _ = write!(out, ",{x}");
            }
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Reads a cached table, or computes and caches it when the file is
    /// missing or was produced with different settings.
    pub fn load_or_compute(path: impl AsRef<Path>, model: TruthModel, grid: &[f64], draws: usize, seed: u64) -> Result<Self> {
        let path = path.as_ref();
        let fresh = OracleTable {
            model,
            draws,
            seed,
            grid: grid.to_vec(),
            values: BTreeMap::new(),
        };
        if let Ok(text) = std::fs::read_to_string(path) {
            let mut lines = text.lines();
            if lines.next() == Some(fresh.header().as_str()) {
                let mut values = BTreeMap::new();
                for line in lines {
                    let mut parts = line.split(',');
                    let g = parts.next().and_then(Stratum::parse);
                    let z = parts.next().map(|s| s == "1");
                    let v: std::result::Result<Vec<f64>, _> = parts.map(str::parse).collect();
                    if let (Some(g), Some(z), Ok(v)) = (g, z, v) {
                        values.insert((g, z), v);
                    }
                }
                if !values.is_empty() {
                    return Ok(OracleTable { values, ..fresh });
                }
            }
        }
        let table = oracle_table(model, grid, draws, seed);
        table.save(path)?;
        Ok(table)
    }
}

const ORACLE_CHUNK: usize = 100_000;

/// `S_{z,g}(u) = E[e_g(X) S_{z,g}(u | X)] / E[e_g(X)]` by averaging over
/// `draws` covariate draws. Only `(X2, X3)` enter the integrand.
pub fn oracle_table(model: TruthModel, grid: &[f64], draws: usize, seed: u64) -> OracleTable {
    let zeta = model.zeta();
    let strata: &[Stratum] = if zeta > 0.0 { &Stratum::ALL } else { &Stratum::MONOTONE };
    let m = grid.len();
    let chunks = draws.div_ceil(ORACLE_CHUNK);
    // per chunk: numerators [stratum][z][k] and denominators [stratum]
    let partials: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = replicate_rng(seed, c as u64);
            let size = ORACLE_CHUNK.min(draws - c * ORACLE_CHUNK);
            let mut num = vec![0.0; strata.len() * 2 * m];
            let mut den = vec![0.0; strata.len()];
            let mut x = [0.0; 5];
            for _ in 0..size {
                let x2: f64 = rng.sample(StandardNormal);
                let x3: f64 = rng.sample(StandardNormal);
                x[1] = x2;
                x[2] = x3;
                x[3] = x2 * x2 - 1.0;
                x[4] = x3 * x3 - 1.0;
                accumulate(model, strata, grid, &x, &mut num, &mut den);
            }
            (num, den)
        })
        .collect();
    let mut num = vec![0.0; strata.len() * 2 * m];
    let mut den = vec![0.0; strata.len()];
    for (pn, pd) in &partials {
        num.iter_mut().zip(pn).for_each(|(a, b)| *a += b);
        den.iter_mut().zip(pd).for_each(|(a, b)| *a += b);
    }
    let mut values = BTreeMap::new();
    for (j, &g) in strata.iter().enumerate() {
        for z in [false, true] {
            let off = (j * 2 + usize::from(z)) * m;
            values.insert((g, z), num[off..off + m].iter().map(|v| v / den[j]).collect());
        }
    }
    OracleTable {
        model,
        draws,
        seed,
        grid: grid.to_vec(),
        values,
    }
}

/// Adds one covariate draw to the oracle sums.
pub fn accumulate(model: TruthModel, strata: &[Stratum], grid: &[f64], x: &[f64], num: &mut [f64], den: &mut [f64]) {
    let m = grid.len();
    let (p0, p1) = true_receipt(x);
    let e = raw_strata(p0, p1, model.zeta());
    let rates = Cell::ALL.map(|c| log_rate(c, x).exp());
    for (j, &g) in strata.iter().enumerate() {
        let eg = match g {
            Stratum::A => e[0],
            Stratum::C => e[1],
            Stratum::N => e[2],
            Stratum::D => e[3],
        };
        den[j] += eg;
        for z in [false, true] {
            let rate = rates[g.cell(z).index()];
            let off = (j * 2 + usize::from(z)) * m;
            for (k, &u) in grid.iter().enumerate() {
                let mut s = (-u * rate).exp();
                if let TruthModel::PiViolation { xi1, t_max } = model {
                    if z && g == Stratum::C {
                        s *= (xi1 * u.min(t_max) / t_max).exp();
                    }
                }
                num[off + k] += eg * s;
            }
        }
    }
}

/// Oracle `S_{z,g}(u)` of the standard process from `ORACLE_DRAWS` draws.
pub fn oracle_truth(g: Stratum, z: bool, u: f64) -> f64 {
    if u <= 0.0 {
        return 1.0;
    }
    oracle_table(TruthModel::Standard, &[u], ORACLE_DRAWS, ORACLE_SEED).get(g, z, 0)
}

/// Correctness flags `(e, pi, T, C)` of the eight scenarios.
pub const SCENARIOS: [[bool; 4]; 8] = [
    [true, true, true, true],
    [true, true, false, true],
    [false, true, true, false],
    [true, false, true, false],
    [false, true, false, true],
    [true, false, false, false],
    [false, false, true, false],
    [false, false, false, false],
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    /// Scenario number, 1 to 8.
    pub id: usize,
    pub correct_e: bool,
    pub correct_pi: bool,
    pub correct_t: bool,
    pub correct_c: bool,
}

impl ScenarioSpec {
    pub fn from_table(id: usize) -> Result<ScenarioSpec> {
        let flags = SCENARIOS
            .get(id.wrapping_sub(1))
            .ok_or_else(|| PsceError::InvalidArgument(format!("scenario {id} is not in 1..=8")))?;
        Ok(ScenarioSpec {
            id,
            correct_e: flags[0],
            correct_pi: flags[1],
            correct_t: flags[2],
            correct_c: flags[3],
        })
    }

    /// `T`/`F` flags in the order principal score, propensity, outcome, censoring.
    pub fn label(&self) -> String {
        [self.correct_e, self.correct_pi, self.correct_t, self.correct_c]
            .iter()
            .map(|&b| if b { 'T' } else { 'F' })
            .collect()
    }
}

fn columns(correct: bool) -> &'static [usize] {
    if correct {
        &CORRECT_COLUMNS
    } else {
        &MISSPECIFIED_COLUMNS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixConfig {
    pub design: Design,
    pub model: TruthModel,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub grid: Vec<f64>,
    pub scenarios: Vec<usize>,
    pub methods: Vec<Method>,
    pub strata: Vec<Stratum>,
    /// Bootstrap replicates per replication for the coverage of
    /// `S_{0,c}` by `mr`; zero skips inference.
    pub bootstrap_b: usize,
    pub alpha: f64,
    pub oracle_draws: usize,
}

impl MatrixConfig {
    pub fn new(design: Design, n: usize, reps: usize, seed: u64) -> Self {
        MatrixConfig {
            design,
            model: TruthModel::Standard,
            n,
            reps,
            seed,
            grid: REPORT_GRID.to_vec(),
            scenarios: (1..=8).collect(),
            methods: Method::ALL.to_vec(),
            strata: Stratum::MONOTONE.to_vec(),
            bootstrap_b: 0,
            alpha: 0.05,
            oracle_draws: ORACLE_DRAWS,
        }
    }
}

/// Estimand reported by the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Estimand {
    Survival { z: bool, g: Stratum },
    Delta(Stratum),
}

impl Estimand {
    pub fn label(&self) -> String {
        match self {
            Estimand::Survival { z, g } => format!("S{},{}", u8::from(*z), g.label()),
            Estimand::Delta(g) => format!("Delta_{}", g.label()),
        }
    }

    fn truth(&self, oracle: &OracleTable, k: usize) -> f64 {
        match *self {
            Estimand::Survival { z, g } => oracle.get(g, z, k),
            Estimand::Delta(g) => oracle.delta(g, k),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scenario: usize,
    pub flags: String,
    pub method: Method,
    pub estimand: Estimand,
    pub u: f64,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    /// Empirical standard deviation of the estimates across replications.
    pub mc_sd: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioReport {
    pub design: Design,
    pub reps: usize,
    pub failed_replications: usize,
    pub rows: Vec<ReportRow>,
}

impl ScenarioReport {
    pub fn row(&self, scenario: usize, method: Method, estimand: Estimand, u: f64) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.method == method && r.estimand == estimand && r.u == u)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario", "flags", "design", "method", "estimand", "u", "truth", "mean", "bias", "mc_sd", "coverage",
        ])?;
        let design = design_label(self.design);
        for r in &self.rows {
            w.write_record([
                r.scenario.to_string(),
                r.flags.clone(),
                design.clone(),
                r.method.label().to_string(),
                r.estimand.label(),
                r.u.to_string(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.bias.to_string(),
                r.mc_sd.to_string(),
                r.coverage.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| PsceError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Fixed-width table of the rows of one method and estimand.
    pub fn text_table(&self, method: Method, estimand: Estimand) -> String {
        let mut out = format!(
            "{} of {} ({} design, {} replications)\n{:<10}{:<6}{:>4}{:>9}{:>9}{:>9}{:>9}{:>10}\n",
            estimand.label(),
            method,
            design_label(self.design),
            self.reps - self.failed_replications,
            "scenario",
            "flags",
            "u",
            "truth",
            "mean",
            "bias",
            "MC SD",
            "coverage"
        );
        for r in self.rows.iter().filter(|r| r.method == method && r.estimand == estimand) {
            let cov = r.coverage.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<10}{:<6}{:>4}{:>9.3}{:>9.3}{:>9.3}{:>9.3}{:>10}",
                r.scenario, r.flags, r.u, r.truth, r.mean, r.bias, r.mc_sd, cov
            );
        }
        out
    }
}

pub fn design_label(d: Design) -> String {
    match d {
        Design::Observational => "observational".into(),
        Design::Randomized(p) => format!("randomized({p})"),
    }
}

/// Working models of both specifications fitted once per dataset.
struct VariantFits {
    prop: [FittedLogistic; 2],
    receipt0: [FittedLogistic; 2],
    receipt1: [FittedLogistic; 2],
    outcome: [[Option<FittedCox>; 4]; 2],
    censor: [[Option<FittedCox>; 4]; 2],
}

impl VariantFits {
    /// Fits both specifications, with Newton started at `start` when given.
    fn fit(ds: &Dataset, cells: &[Cell], start: Option<&VariantFits>) -> Result<VariantFits> {
        let logistic_pair = |response, assigned, prev: Option<&[FittedLogistic; 2]>| -> Result<[FittedLogistic; 2]> {
            let init = |v: usize| prev.map(|p| p[v].coef.as_slice());
            Ok([
                fit_logistic_from(ds, response, assigned, columns(false), init(0))?,
                fit_logistic_from(ds, response, assigned, columns(true), init(1))?,
            ])
        };
        let mut outcome: [[Option<FittedCox>; 4]; 2] = Default::default();
        let mut censor: [[Option<FittedCox>; 4]; 2] = Default::default();
        for v in 0..2 {
            for &cell in cells {
                let k = cell.index();
                let t0 = start.and_then(|s| s.outcome[v][k].as_ref()).map(|m| m.coef.as_slice());
                let c0 = start.and_then(|s| s.censor[v][k].as_ref()).map(|m| m.coef.as_slice());
                outcome[v][k] = Some(fit_cox_from(ds, cell, CoxTarget::Outcome, columns(v == 1), t0)?);
                censor[v][k] = Some(fit_censoring_from(ds, cell, columns(v == 1), c0)?);
            }
        }
        Ok(VariantFits {
            prop: logistic_pair(Response::Assignment, None, start.map(|s| &s.prop))?,
            receipt0: logistic_pair(Response::Receipt, Some(false), start.map(|s| &s.receipt0))?,
            receipt1: logistic_pair(Response::Receipt, Some(true), start.map(|s| &s.receipt1))?,
            outcome,
            censor,
        })
    }
}

/// Estimates of every scenario sharing the fits of one dataset.
struct Composer<'a> {
    ds: &'a Dataset,
    pis: [Vec<f64>; 2],
    /// Indexed by `2 * pi_variant + e_variant`.
    scores: Vec<PrincipalScores>,
    /// Indexed by `2 * t_variant + c_variant`.
    curves: Vec<CurveSet<'a>>,
}

impl<'a> Composer<'a> {
    fn new(ds: &'a Dataset, fits: &'a VariantFits, grid: &'a [f64]) -> Composer<'a> {
        let pis = [fits.prop[0].predict_all(ds), fits.prop[1].predict_all(ds)];
        let mut scores = Vec::with_capacity(4);
        for pi in &pis {
            for e in 0..2 {
                scores.push(scores_from_models(ds, pi, &fits.receipt0[e], &fits.receipt1[e]));
            }
        }
        let mut curves = Vec::with_capacity(4);
        for t in 0..2 {
            for c in 0..2 {
                curves.push(CurveSet::new(
                    ds,
                    grid,
                    fits.outcome[t].each_ref().map(Option::as_ref),
                    fits.censor[c].each_ref().map(Option::as_ref),
                ));
            }
        }
        Composer { ds, pis, scores, curves }
    }

    fn evaluator(&self, sc: &ScenarioSpec) -> Evaluator<'_> {
        let p = usize::from(sc.correct_pi);
        let e = usize::from(sc.correct_e);
        let t = usize::from(sc.correct_t);
        let c = usize::from(sc.correct_c);
        Evaluator::new(self.ds, &self.pis[p], &self.scores[2 * p + e], &self.curves[2 * t + c])
    }
}

/// Per-replication mixing of the master seed, so that bootstrap streams
/// of different replications do not overlap.
fn replication_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(r as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the dataset simulated in replication `r`.
pub fn dataset_seed(seed: u64, r: usize) -> u64 {
    replication_seed(seed, r)
}

struct Replication {
    /// Estimates keyed like `keys`, grid-major within each key.
    values: Vec<f64>,
    /// Coverage indicators of `S_{0,c}` by `mr`, per scenario and grid point.
    covered: Option<Vec<bool>>,
}

type Key = (usize, Method, Estimand);

fn replication(cfg: &MatrixConfig, specs: &[ScenarioSpec], keys: &[Key], oracle: &OracleTable, r: usize) -> Result<Replication> {
    let m = cfg.grid.len();
    let ds = simulate(cfg.n, cfg.design, cfg.model, dataset_seed(cfg.seed, r));
    let fits = VariantFits::fit(&ds, &Cell::ALL, None)?;
    let composer = Composer::new(&ds, &fits, &cfg.grid);
    let mut values = Vec::with_capacity(keys.len() * m);
    let mut cache: BTreeMap<(usize, Method, Stratum), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for &(sid, method, estimand) in keys {
        let sc = &specs[sid];
        let g = match estimand {
            Estimand::Survival { g, .. } | Estimand::Delta(g) => g,
        };
        if !cache.contains_key(&(sid, method, g)) {
            let pair = composer.evaluator(sc).contrast(method, g)?;
            cache.insert((sid, method, g), pair);
        }
        let (s1, s0) = &cache[&(sid, method, g)];
        for k in 0..m {
            values.push(match estimand {
                Estimand::Survival { z: true, .. } => s1[k],
                Estimand::Survival { z: false, .. } => s0[k],
                Estimand::Delta(_) => s1[k] - s0[k],
            });
        }
    }
    let covered = if cfg.bootstrap_b > 0 {
        Some(bootstrap_coverage(cfg, specs, &ds, &fits, oracle, r)?)
    } else {
        None
    };
    Ok(Replication { values, covered })
}

/// `mr` estimates of `S_{0,c}` on the grid for every scenario.
fn s0c_all_scenarios(ds: &Dataset, specs: &[ScenarioSpec], grid: &[f64], start: &VariantFits) -> Result<Vec<f64>> {
    let fits = VariantFits::fit(ds, &[Cell::new(false, false)], Some(start))?;
    let composer = Composer::new(ds, &fits, grid);
    let mut out = Vec::with_capacity(specs.len() * grid.len());
    for sc in specs {
        out.extend(composer.evaluator(sc).survival(Method::Mr, false, Stratum::C)?);
    }
    Ok(out)
}

fn bootstrap_coverage(
    cfg: &MatrixConfig,
    specs: &[ScenarioSpec],
    ds: &Dataset,
    fits: &VariantFits,
    oracle: &OracleTable,
    r: usize,
) -> Result<Vec<bool>> {
    let b = cfg.bootstrap_b;
    let boot_seed = replication_seed(cfg.seed ^ 0xB007_5EED, r);
    let reps: Vec<Option<Vec<f64>>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = replicate_rng(boot_seed, k as u64);
            let idx = resample_indices(&mut rng, ds.n());
            s0c_all_scenarios(&ds.resample(&idx), specs, &cfg.grid, fits).ok()
        })
        .collect();
    let ok: Vec<&Vec<f64>> = reps.iter().flatten().collect();
    let failed = b - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * b as f64 || ok.len() < 2 {
        return Err(PsceError::TooManyFailures { failed, total: b });
    }
    let m = cfg.grid.len();
    let mut covered = Vec::with_capacity(specs.len() * m);
    for j in 0..specs.len() * m {
        let mut col: Vec<f64> = ok.iter().map(|v| v[j]).collect();
        col.sort_by(f64::total_cmp);
        let lo = quantile_sorted(&col, cfg.alpha / 2.0);
        let hi = quantile_sorted(&col, 1.0 - cfg.alpha / 2.0);
        let truth = oracle.get(Stratum::C, false, j % m);
        covered.push(lo <= truth && truth <= hi);
    }
    Ok(covered)
}

/// Runs the configured scenarios with common random numbers: each
/// replication simulates one dataset, fits every working model in both
/// specifications once and evaluates all scenarios from those fits.
pub fn run_matrix(cfg: &MatrixConfig, oracle: &OracleTable) -> Result<ScenarioReport> {
    if cfg.reps == 0 || cfg.n == 0 {
        return Err(PsceError::InvalidArgument("replications and sample size must be positive".into()));
    }
    if oracle.grid != cfg.grid {
        return Err(PsceError::InvalidArgument("oracle grid differs from the report grid".into()));
    }
    let specs: Vec<ScenarioSpec> = cfg
        .scenarios
        .iter()
        .map(|&id| ScenarioSpec::from_table(id))
        .collect::<Result<_>>()?;
    let mut keys: Vec<Key> = Vec::new();
    for sid in 0..specs.len() {
        for &method in &cfg.methods {
            for &g in &cfg.strata {
                keys.push((sid, method, Estimand::Survival { z: true, g }));
                keys.push((sid, method, Estimand::Survival { z: false, g }));
                keys.push((sid, method, Estimand::Delta(g)));
            }
        }
    }
    let results: Vec<Result<Replication>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| replication(cfg, &specs, &keys, oracle, r))
        .collect();
    let ok: Vec<&Replication> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let failed = cfg.reps - ok.len();
    if failed as f64 > MAX_FAILURE_SHARE * cfg.reps as f64 || ok.len() < 2 {
        let first = results.into_iter().find_map(|r| r.err());
        log::error!("replication failures: {failed}; first error: {first:?}");
        return Err(PsceError::TooManyFailures {
            failed,
            total: cfg.reps,
        });
    }

    let m = cfg.grid.len();
    let mut rows = Vec::with_capacity(keys.len() * m);
    for (j, &(sid, method, estimand)) in keys.iter().enumerate() {
        for k in 0..m {
            let col: Vec<f64> = ok.iter().map(|rep| rep.values[j * m + k]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let truth = estimand.truth(oracle, k);
            let coverage = (method == Method::Mr && estimand == Estimand::Survival { z: false, g: Stratum::C })
                .then(|| {
                    let flags: Vec<bool> = ok.iter().filter_map(|rep| rep.covered.as_ref().map(|c| c[sid * m + k])).collect();
                    (!flags.is_empty()).then(|| flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64)
                })
                .flatten();
            rows.push(ReportRow {
                scenario: specs[sid].id,
                flags: specs[sid].label(),
                method,
                estimand,
                u: cfg.grid[k],
                truth,
                mean,
                bias: mean - truth,
                mc_sd: sample_sd(&col),
                coverage,
            });
        }
    }
    Ok(ScenarioReport {
        design: cfg.design,
        reps: cfg.reps,
        failed_replications: failed,
        rows,
    })
}

/// Runs a single scenario of the matrix.
pub fn run_scenario(cfg: &MatrixConfig, scenario: usize, oracle: &OracleTable) -> Result<ScenarioReport> {
    let mut one = cfg.clone();
    one.scenarios = vec![scenario];
    run_matrix(&one, oracle)
}

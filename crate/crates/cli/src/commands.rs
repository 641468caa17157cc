use psce_core::glm_logistic::{fit_logistic, Response};
use psce_core::principal_strata::{smd_balance, strata_covariate_summary};
use psce_core::psce_estimators::{psce_curves, scores_from_models, Band};
use psce_core::resampling_inference::{replicates, summarize};
use psce_core::sensitivity::{pi_curve, zeta_curve, zeta_range, PiSensitivitySpec};
use psce_core::simulation_lab::{run_matrix, Estimand, MatrixConfig, OracleTable, TruthModel, ORACLE_SEED};
use psce_core::{Dataset, Design, Method, ModelSpec, NuisanceBundle, PsceError, PsceEstimate, Stratum};

use crate::config::{RunConfig, DEFAULT_BOOTSTRAP_B, DEFAULT_SIMULATION_B};
use crate::error::CliError;
use crate::output::{csv_bytes, csv_error, opt, sha256_hex, OutputDir};

fn load(cfg: &RunConfig) -> Result<(Dataset, String), CliError> {
    let path = cfg.input()?;
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Data(PsceError::Io(format!("{}: {e}", path.display()))))?;
    let ds = Dataset::read_csv(bytes.as_slice(), &cfg.columns)?;
    log::info!("read {} subjects with {} covariates", ds.n(), ds.n_covariates());
    Ok((ds, sha256_hex(&bytes)))
}

fn curves_for(
    nb: &NuisanceBundle,
    ds: &Dataset,
    grid: &[f64],
    methods: &[Method],
    strata: &[Stratum],
) -> psce_core::Result<Vec<PsceEstimate>> {
    methods.iter().map(|&m| psce_curves(nb, ds, grid, m, strata)).collect()
}

fn flat_deltas(est: &[PsceEstimate]) -> Vec<f64> {
    est.iter()
        .flat_map(|e| e.curves.iter().flat_map(|c| c.delta.iter().copied()))
        .collect()
}

fn warn_truncation(nb: &NuisanceBundle) {
    if nb.ps.truncated > 0 {
        log::warn!(
            "{} of {} complier scores truncated at the floor",
            nb.ps.truncated,
            nb.ps.n()
        );
    }
}

pub fn estimate(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, input_hash) = load(cfg)?;
    let spec = cfg.model_spec(&ds)?;
    let grid = cfg.grid(&ds)?;
    let methods = cfg.methods()?;
    let strata = cfg.strata()?;
    let nb = NuisanceBundle::fit(&ds, &spec)?;
    warn_truncation(&nb);
    let mut estimates = curves_for(&nb, &ds, &grid, &methods, &strata)?;

    let b = cfg.bootstrap_b.unwrap_or(DEFAULT_BOOTSTRAP_B);
    if b > 0 {
        let estimator = |d: &Dataset| -> psce_core::Result<Vec<f64>> {
            let nb = NuisanceBundle::fit(d, &spec)?;
            Ok(flat_deltas(&curves_for(&nb, d, &grid, &methods, &strata)?))
        };
        let reps = replicates(&ds, &estimator, b, cfg.seed);
        let res = summarize(flat_deltas(&estimates), &reps, cfg.alpha)?;
        if res.failed_replicates > 0 {
            log::warn!("{} of {b} bootstrap replicates failed", res.failed_replicates);
        }
        let m = grid.len();
        let mut off = 0;
        for e in &mut estimates {
            let mut bands = Vec::with_capacity(e.curves.len());
            for _ in &e.curves {
                let r = off..off + m;
                bands.push(Band {
                    se: res.se[r.clone()].to_vec(),
                    lo: res.lo[r.clone()].to_vec(),
                    hi: res.hi[r].to_vec(),
                });
                off += m;
            }
            e.bands = Some(bands);
        }
    }

    let mut out = OutputDir::create(&cfg.out_dir)?;
    let est_csv = csv_bytes(&PsceEstimate::CSV_HEADER, |w| {
        for e in &estimates {
            e.write_rows(w)?;
        }
        Ok(())
    })?;
    out.write("estimates.csv", &est_csv)?;
    out.write("strata.csv", &strata_table(&ds, &nb)?)?;
    out.finish("estimate", cfg, Some(input_hash))
}

fn strata_table(ds: &Dataset, nb: &NuisanceBundle) -> Result<Vec<u8>, CliError> {
    let summary = strata_covariate_summary(ds, &nb.ps)?;
    csv_bytes(&["record", "stratum", "covariate", "share", "mean", "sd", "max_asd"], |w| {
        for &g in nb.ps.strata() {
            w.write_record(["proportion", g.label(), "", &nb.ps.share(g).to_string(), "", "", ""])
                .map_err(csv_error)?;
        }
        for row in &summary {
            for (j, g) in row.strata.iter().enumerate() {
                w.write_record([
                    "covariate",
                    g.label(),
                    &row.covariate,
                    "",
                    &row.mean[j].to_string(),
                    &row.sd[j].to_string(),
                    &row.max_asd.to_string(),
                ])
                .map_err(csv_error)?;
            }
        }
        Ok(())
    })
}

pub fn balance(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, input_hash) = load(cfg)?;
    let spec: ModelSpec = cfg.model_spec(&ds)?;
    ds.require_all_cells()?;
    let pi = fit_logistic(&ds, Response::Assignment, None, &spec.propensity)?.predict_all(&ds);
    let r0 = fit_logistic(&ds, Response::Receipt, Some(false), &spec.receipt)?;
    let r1 = fit_logistic(&ds, Response::Receipt, Some(true), &spec.receipt)?;
    let ps = scores_from_models(&ds, &pi, &r0, &r1);
    let tables = [smd_balance(&ds, &ps, false)?, smd_balance(&ds, &ps, true)?];

    let mut out = OutputDir::create(&cfg.out_dir)?;
    let bytes = csv_bytes(&["covariate", "weighting", "stratum", "smd", "flag"], |w| {
        for table in &tables {
            for row in table {
                for g in [Stratum::C, Stratum::N, Stratum::A] {
                    w.write_record([
                        row.covariate.as_str(),
                        if row.weighted { "weighted" } else { "unweighted" },
                        g.label(),
                        &row.get(g).to_string(),
                        &row.flagged(g).to_string(),
                    ])
                    .map_err(csv_error)?;
                }
            }
        }
        Ok(())
    })?;
    out.write("balance.csv", &bytes)?;
    out.finish("balance", cfg, Some(input_hash))
}

#[derive(Debug, Clone, Copy)]
enum SweepPoint {
    Pi(PiSensitivitySpec),
    Zeta(f64),
}

impl SweepPoint {
    fn evaluate(&self, nb: &NuisanceBundle, ds: &Dataset, grid: &[f64], strata: &[Stratum]) -> psce_core::Result<PsceEstimate> {
        match *self {
            SweepPoint::Pi(spec) => pi_curve(nb, ds, grid, Method::Mr, &spec, strata),
            SweepPoint::Zeta(z) if z > 0.0 => {
                let mut with_d = strata.to_vec();
                with_d.push(Stratum::D);
                zeta_curve(nb, ds, grid, z, &with_d)
            }
            SweepPoint::Zeta(z) => zeta_curve(nb, ds, grid, z, strata),
        }
    }

    fn columns(&self) -> [String; 6] {
        match self {
            SweepPoint::Pi(s) => [
                "pi".into(),
                s.xi1.to_string(),
                s.xi0.to_string(),
                s.eta1.to_string(),
                s.eta0.to_string(),
                String::new(),
            ],
            SweepPoint::Zeta(z) => [
                "zeta".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                z.to_string(),
            ],
        }
    }
}

pub fn sensitivity(cfg: &RunConfig) -> Result<(), CliError> {
    let (ds, input_hash) = load(cfg)?;
    let spec = cfg.model_spec(&ds)?;
    let grid = cfg.grid(&ds)?;
    let strata = cfg.strata()?;
    let nb = NuisanceBundle::fit(&ds, &spec)?;
    warn_truncation(&nb);
    let t_max = *grid.last().expect("grid is nonempty");

    let (zeta_lo, zeta_hi) = zeta_range(nb.ps.p0_hat, nb.ps.p1_hat)?;
    eprintln!("admissible defier ratio interval: [{zeta_lo}, {zeta_hi:.4}]");

    let s = &cfg.sensitivity;
    let mut points = Vec::new();
    for &xi1 in &s.xi1 {
        for &xi0 in &s.xi0 {
            for &eta1 in &s.eta1 {
                for &eta0 in &s.eta0 {
                    points.push(SweepPoint::Pi(PiSensitivitySpec::new(xi1, xi0, eta1, eta0, t_max)?));
                }
            }
        }
    }
    points.extend(s.zeta.iter().map(|&z| SweepPoint::Zeta(z)));

    let results: Vec<psce_core::Result<PsceEstimate>> =
        points.iter().map(|p| p.evaluate(&nb, &ds, &grid, &strata)).collect();
    for (p, r) in points.iter().zip(&results) {
        if let Err(e) = r {
            log::warn!("sweep point {p:?}: {e}");
        }
    }

    // one bootstrap shared by every admissible sweep point
    let mut bands: Vec<Option<std::result::Result<Vec<Band>, String>>> = vec![None; points.len()];
    let b = cfg.bootstrap_b.unwrap_or(DEFAULT_BOOTSTRAP_B);
    if b > 0 {
        let ok: Vec<usize> = (0..points.len()).filter(|&j| results[j].is_ok()).collect();
        let sizes: Vec<usize> = ok
            .iter()
            .map(|&j| results[j].as_ref().map(|e| e.curves.len() * grid.len()).unwrap_or(0))
            .collect();
        let estimator = |d: &Dataset| -> psce_core::Result<Vec<f64>> {
            let nb = NuisanceBundle::fit(d, &spec)?;
            let mut v = Vec::new();
            for (&j, &size) in ok.iter().zip(&sizes) {
                match points[j].evaluate(&nb, d, &grid, &strata) {
                    Ok(e) => v.extend(flat_deltas(std::slice::from_ref(&e))),
                    Err(_) => v.extend(std::iter::repeat(f64::NAN).take(size)),
                }
            }
            Ok(v)
        };
        let reps = replicates(&ds, &estimator, b, cfg.seed);
        let mut off = 0;
        for (&j, &size) in ok.iter().zip(&sizes) {
            let est = results[j].as_ref().expect("admissible point");
            let own: Vec<Option<Vec<f64>>> = reps
                .iter()
                .map(|r| {
                    r.as_ref()
                        .map(|v| v[off..off + size].to_vec())
                        .filter(|v| v.iter().all(|x| x.is_finite()))
                })
                .collect();
            off += size;
            bands[j] = Some(match summarize(flat_deltas(std::slice::from_ref(est)), &own, cfg.alpha) {
                Ok(res) => {
                    let m = grid.len();
                    Ok((0..est.curves.len())
                        .map(|c| Band {
                            se: res.se[c * m..(c + 1) * m].to_vec(),
                            lo: res.lo[c * m..(c + 1) * m].to_vec(),
                            hi: res.hi[c * m..(c + 1) * m].to_vec(),
                        })
                        .collect())
                }
                Err(e) => Err(e.to_string()),
            });
        }
    }

    let mut out = OutputDir::create(&cfg.out_dir)?;
    let range = csv_bytes(&["p0_hat", "p1_hat", "zeta_lower", "zeta_upper"], |w| {
        w.write_record([
            nb.ps.p0_hat.to_string(),
            nb.ps.p1_hat.to_string(),
            zeta_lo.to_string(),
            zeta_hi.to_string(),
        ])
        .map_err(csv_error)
    })?;
    out.write("zeta_range.csv", &range)?;

    let header = [
        "analysis", "xi1", "xi0", "eta1", "eta0", "zeta", "stratum", "u", "S1", "S0", "delta", "se", "ci_lo", "ci_hi",
        "status",
    ];
    let sweep = csv_bytes(&header, |w| {
        for (j, p) in points.iter().enumerate() {
            let lead = p.columns();
            match &results[j] {
                Err(e) => {
                    let mut row: Vec<String> = lead.to_vec();
                    row.extend(std::iter::repeat(String::new()).take(8));
                    row.push(e.to_string());
                    w.write_record(&row).map_err(csv_error)?;
                }
                Ok(est) => {
                    let (band, status) = match &bands[j] {
                        Some(Ok(b)) => (Some(b), "ok".to_string()),
                        Some(Err(msg)) => (None, format!("bootstrap failed: {msg}")),
                        None => (None, "ok".to_string()),
                    };
                    for (c, curve) in est.curves.iter().enumerate() {
                        for (k, u) in grid.iter().enumerate() {
                            let bc = band.map(|b| &b[c]);
                            let mut row: Vec<String> = lead.to_vec();
                            row.extend([
                                curve.stratum.label().to_string(),
                                u.to_string(),
                                curve.s1[k].to_string(),
                                curve.s0[k].to_string(),
                                curve.delta[k].to_string(),
                                opt(bc.map(|b| b.se[k])),
                                opt(bc.map(|b| b.lo[k])),
                                opt(bc.map(|b| b.hi[k])),
                                status.clone(),
                            ]);
                            w.write_record(&row).map_err(csv_error)?;
                        }
                    }
                }
            }
        }
        Ok(())
    })?;
    out.write("sensitivity.csv", &sweep)?;
    out.finish("sensitivity", cfg, Some(input_hash))
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let sim = &cfg.simulation;
    let design = match sim.design.as_str() {
        "observational" => Design::Observational,
        "randomized" => Design::Randomized(0.5),
        other => return Err(CliError::Config(format!("unknown design `{other}`"))),
    };
    if sim.n == 0 || sim.reps < 2 {
        return Err(CliError::Config("simulation needs n > 0 and at least 2 replications".into()));
    }
    let mut mc = MatrixConfig::new(design, sim.n, sim.reps, cfg.seed);
    mc.scenarios = sim.scenarios.clone();
    mc.methods = cfg.methods()?;
    mc.strata = cfg.strata()?;
    mc.bootstrap_b = cfg.bootstrap_b.unwrap_or(DEFAULT_SIMULATION_B);
    mc.alpha = cfg.alpha;
    mc.oracle_draws = sim.oracle_draws;

    let mut out = OutputDir::create(&cfg.out_dir)?;
    let oracle = OracleTable::load_or_compute(
        out.path("oracle.txt"),
        TruthModel::Standard,
        &mc.grid,
        sim.oracle_draws,
        ORACLE_SEED,
    )?;
    let report = run_matrix(&mc, &oracle)?;

    out.write("oracle.txt", oracle.to_text().as_bytes())?;
    out.write("simulation_report.csv", report.to_csv()?.as_bytes())?;
    let estimand = Estimand::Survival {
        z: false,
        g: Stratum::C,
    };
    let text: Vec<String> = mc.methods.iter().map(|&m| report.text_table(m, estimand)).collect();
    out.write("simulation_report.txt", text.join("\n").as_bytes())?;
    out.finish("simulate", cfg, None)
}

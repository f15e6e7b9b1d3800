use std::path::Path;

use longevity_core::annuity::{
    expected_flows, load_portfolio_csv, projector_for, reserve, simulate_lambda,
    simulate_lambda_stochastic, LiabilityDistribution, LiabilitySummary, Portfolio,
};
use longevity_core::decomposition::{
    converge, write_omega_csv, DecompositionConfig, DecompositionResult, OmegaPoint,
};
use longevity_core::leecarter::{fit, residual_matrix, LeeCarterModel};
use longevity_core::mortality_data::{load_mortality_csv, ClosedTableMeta, CsvFormat};
use longevity_core::projection::{fit_drift_to_model, DriftModel, ProjectedSurfaceMeta, Projector};
use longevity_core::rng::StreamFactory;
use longevity_core::stats::histogram;
use longevity_core::synthetic::{HistorySpec, PortfolioSpec};
use longevity_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{Mode, RunConfig};
use crate::failure::Failure;

/// Files produced by a command, written only once everything succeeded.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn json(&mut self, name: &str, value: &Value) -> Result<(), Failure> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.files.push((name.into(), bytes));
        Ok(())
    }

    /// CSV body preceded by a `# config:` comment line.
    fn csv(
        &mut self,
        name: &str,
        config: &RunConfig,
        body: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
    ) -> Result<(), Failure> {
        let mut bytes = format!("# config: {}\n", serde_json::to_string(config)?).into_bytes();
        body(&mut bytes)?;
        self.files.push((name.into(), bytes));
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<(), Failure> {
        std::fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            std::fs::write(dir.join(name), bytes)?;
        }
        Ok(())
    }
}

/// Contents of `model.json`.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    lee_carter: LeeCarterModel,
    drift: DriftModel,
    config: Value,
}

fn load_model(path: &Path) -> Result<(LeeCarterModel, DriftModel), Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let m: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    m.lee_carter.validate()?;
    m.drift.validate()?;
    Ok((m.lee_carter, m.drift))
}

fn valuation_year(config: &RunConfig, model: &LeeCarterModel) -> i32 {
    config.valuation_year.unwrap_or(model.year_max + 1)
}

fn single<T: Copy>(values: &[T], flag: &str) -> Result<T, Failure> {
    match values {
        [v] => Ok(*v),
        _ => Err(Failure::Input(format!(
            "--{flag} takes a single value here"
        ))),
    }
}

pub fn fit_cmd(config: &RunConfig) -> Result<Outputs, Failure> {
    let path = config.require(&config.mortality, "mortality")?;
    let mut surface = load_mortality_csv(path, &CsvFormat::default())?;
    if let Some((from, to)) = config.age_range {
        surface = surface.restrict_ages(from, to)?;
    }
    let model = fit(&surface)?;
    let drift = fit_drift_to_model(&model)?;
    let residuals = residual_matrix(&model, &surface)?;
    log::info!(
        "fitted ages {}-{} years {}-{}: explained {:.6}, a {:.5}, b {:.3}, sigma {:.4}",
        model.age_min,
        model.age_max,
        model.year_min,
        model.year_max,
        model.explained_variance,
        drift.a,
        drift.b,
        drift.sigma_gamma
    );

    let mut out = Outputs::default();
    out.json(
        "model.json",
        &serde_json::to_value(ModelFile {
            lee_carter: model.clone(),
            drift: drift.clone(),
            config: serde_json::to_value(config)?,
        })?,
    )?;
    out.csv("residuals.csv", config, |w| {
        use std::io::Write;
        writeln!(w, "age,year,residual")?;
        for ((i, j), r) in residuals.indexed_iter() {
            writeln!(
                w,
                "{},{},{r}",
                model.age_min + i as i32,
                model.year_min + j as i32
            )?;
        }
        Ok(())
    })?;
    out.json(
        "fit_report.json",
        &json!({
            "config": config,
            "age_min": model.age_min,
            "age_max": model.age_max,
            "year_min": model.year_min,
            "year_max": model.year_max,
            "explained_variance": model.explained_variance,
            "residual_sd": model.residual_sd,
            "degenerate": model.degenerate,
            "a": drift.a,
            "b": drift.b,
            "sigma_gamma": drift.sigma_gamma,
            "cov_ab": drift.cov_ab,
        }),
    )?;
    Ok(out)
}

pub fn project_cmd(config: &RunConfig) -> Result<Outputs, Failure> {
    let (model, drift) = load_model(config.require(&config.model, "model")?)?;
    let sigma_scale = single(&config.sigma_scales, "sigma-scale")?;
    let mut projector = Projector::new(
        model.clone(),
        drift.with_sigma_scale(sigma_scale)?,
        model.age_min,
        valuation_year(config, &model),
        config.terminal_age,
    )?;
    projector.raw_bias = config.raw_bias;
    projector.drift_uncertainty = config.drift_uncertainty;
    let (surface, seed) = match config.scenario {
        Some(n) => (
            projector.scenario_surface(&StreamFactory::new(config.seed), n)?,
            Some(config.seed),
        ),
        None => (projector.deterministic_surface()?, None),
    };
    let table = surface.close(config.terminal_age)?;
    let meta = ProjectedSurfaceMeta {
        kind: surface.kind,
        sigma_gamma: surface.sigma_gamma,
        seed,
        scenario: config.scenario,
        drift: projector.drift.clone(),
        k_path: surface.k_path.clone(),
    };
    let closure: ClosedTableMeta = table.meta();

    let mut out = Outputs::default();
    out.csv("projected_table.csv", config, |w| {
        table.write_csv(w, &CsvFormat::default())
    })?;
    out.json(
        "projection.json",
        &json!({ "config": config, "surface": meta, "closure": closure }),
    )?;
    Ok(out)
}

fn summary_json(
    config: &RunConfig,
    dist: &LiabilityDistribution,
    summary: &LiabilitySummary,
    sigma_gamma: f64,
    analytic: f64,
) -> Value {
    let se = summary.sd / (summary.n as f64).sqrt();
    json!({
        "config": config,
        "surface_kind": dist.surface_kind,
        "seed": dist.seed,
        "n_sims": summary.n,
        "discount_rate": dist.discount_rate,
        "sigma_gamma": sigma_gamma,
        "summary": summary,
        "analytic_reserve": analytic,
        "mean_se": se,
        "mean_within_3_se": (summary.mean - analytic).abs() <= 3.0 * se,
    })
}

fn load_portfolio(config: &RunConfig, model: &LeeCarterModel) -> Result<Portfolio, Failure> {
    let path = config.require(&config.portfolio, "portfolio")?;
    let p = load_portfolio_csv(path, valuation_year(config, model))?;
    Ok(p.replicate(single(&config.size_scales, "size-scale")?)?)
}

pub fn simulate_cmd(config: &RunConfig) -> Result<Outputs, Failure> {
    let (model, drift) = load_model(config.require(&config.model, "model")?)?;
    let portfolio = load_portfolio(config, &model)?;
    let drift = drift.with_sigma_scale(single(&config.sigma_scales, "sigma-scale")?)?;
    let mut projector = projector_for(&portfolio, &model, &drift, config.terminal_age)?;
    projector.raw_bias = config.raw_bias;
    projector.drift_uncertainty = config.drift_uncertainty;
    let table = projector.deterministic_table()?;
    let flows = expected_flows(&portfolio, &table)?;
    let analytic = reserve(&flows, config.discount_rate)?;
    let streams = StreamFactory::new(config.seed);

    let mut runs = Vec::new();
    if matches!(config.mode, Mode::Deterministic | Mode::Both) {
        let d = simulate_lambda(
            &portfolio,
            &table,
            config.discount_rate,
            config.sims,
            &streams,
        )?;
        runs.push(("deterministic", d, 0.0));
    }
    if matches!(config.mode, Mode::Stochastic | Mode::Both) {
        let d = simulate_lambda_stochastic(
            &portfolio,
            &projector,
            config.discount_rate,
            config.sims,
            &streams,
        )?;
        runs.push(("stochastic", d, drift.sigma_gamma));
    }

    let mut out = Outputs::default();
    out.csv("flows.csv", config, |w| {
        use std::io::Write;
        writeln!(w, "t,F_t")?;
        for (t, f) in flows.iter().enumerate() {
            writeln!(w, "{},{f}", t + 1)?;
        }
        Ok(())
    })?;
    for (label, dist, sigma) in &runs {
        let summary = dist.summarize()?;
        let hist = histogram(&dist.samples, config.bins)?;
        log::info!(
            "{label}: mean {:.2} sd {:.2} cv {:.4}% (reserve {:.2})",
            summary.mean,
            summary.sd,
            100.0 * summary.cv,
            analytic
        );
        out.csv(&format!("{label}_samples.csv"), config, |w| {
            dist.write_samples_csv(w)
        })?;
        out.json(
            &format!("{label}_summary.json"),
            &summary_json(config, dist, &summary, *sigma, analytic),
        )?;
        out.csv(&format!("{label}_histogram.csv"), config, |w| {
            use std::io::Write;
            writeln!(w, "bin_lo,bin_hi,count")?;
            for (e, c) in hist.edges.windows(2).zip(&hist.counts) {
                writeln!(w, "{},{},{c}", e[0], e[1])?;
            }
            Ok(())
        })?;
    }
    Ok(out)
}

/// Result of the decomposition grid, or the trace of the cell that failed.
pub enum DecomposeOutcome {
    Done(Outputs),
    NotConverged { outputs: Outputs, message: String },
}

#[derive(Serialize)]
struct GridCell<'a> {
    sigma_scale: f64,
    size_scale: usize,
    result: &'a DecompositionResult,
}

pub fn decompose_cmd(config: &RunConfig) -> Result<DecomposeOutcome, Failure> {
    let (model, drift) = load_model(config.require(&config.model, "model")?)?;
    let path = config.require(&config.portfolio, "portfolio")?;
    let portfolio = load_portfolio_csv(path, valuation_year(config, &model))?;
    if config.raw_bias {
        log::warn!("--raw-bias does not apply to the decomposition; corrected scenarios are used");
    }
    // Fail on coverage before any simulation.
    projector_for(&portfolio, &model, &drift, config.terminal_age)?;

    let mut results = Vec::new();
    for &sigma_scale in &config.sigma_scales {
        for &size_scale in &config.size_scales {
            let p = portfolio.replicate(size_scale)?;
            let cfg = DecompositionConfig {
                n_outer: config.outer,
                m_inner: config.inner,
                sigma_scale,
                convergence_threshold: config.convergence_threshold,
                max_rounds: config.max_rounds,
                seed: config.seed,
                drift_uncertainty: config.drift_uncertainty,
            };
            log::info!("decomposing sigma x{sigma_scale}, size x{size_scale}");
            match converge(
                &p,
                &model,
                &drift,
                config.discount_rate,
                config.terminal_age,
                &cfg,
            ) {
                Ok(r) => results.push((size_scale, r)),
                Err(e @ Error::Convergence { .. }) => {
                    let Error::Convergence { trace } = &e else {
                        unreachable!()
                    };
                    let mut outputs = Outputs::default();
                    outputs.json(
                        "convergence_trace.json",
                        &json!({
                            "config": config,
                            "sigma_scale": sigma_scale,
                            "size_scale": size_scale,
                            "trace": trace,
                        }),
                    )?;
                    return Ok(DecomposeOutcome::NotConverged {
                        outputs,
                        message: format!("sigma x{sigma_scale}, size x{size_scale}: {e}"),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    let cells: Vec<GridCell> = results
        .iter()
        .map(|(size_scale, r)| GridCell {
            sigma_scale: r.config.sigma_scale,
            size_scale: *size_scale,
            result: r,
        })
        .collect();
    let points: Vec<OmegaPoint> = results
        .iter()
        .map(|(s, r)| OmegaPoint::from_result(*s, r))
        .collect();
    let mut out = Outputs::default();
    out.json(
        "decomposition.json",
        &json!({ "config": config, "results": cells }),
    )?;
    out.csv("omega_curve.csv", config, |w| write_omega_csv(&points, w))?;
    Ok(DecomposeOutcome::Done(out))
}

pub fn synth_cmd(config: &RunConfig) -> Result<Outputs, Failure> {
    let history = HistorySpec {
        seed: config.seed.wrapping_add(1),
        ..Default::default()
    };
    let surface = history.generate()?;
    let portfolio = PortfolioSpec {
        size: config.synth_size,
        seed: config.seed.wrapping_add(2),
        ..Default::default()
    }
    .generate()?;
    let mut out = Outputs::default();
    out.csv("mortality.csv", config, |w| {
        surface.write_csv(w, &CsvFormat::default())
    })?;
    out.csv("portfolio.csv", config, |w| portfolio.write_csv(w))?;
    Ok(out)
}

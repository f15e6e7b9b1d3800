//! Time-index dynamics and projected mortality surfaces.
//!
//! The fitted time index is modelled as an affine trend in calendar year
//! plus Gaussian white noise, `k*_t = a t + b + gamma_t`. Deterministic
//! surfaces follow the trend line; stochastic surfaces draw one noise value
//! per future year. The corrected generator shifts `alpha_x` by
//! `-beta_x^2 sigma^2 / 2` so that each simulated hazard has the trend
//! hazard as its expectation.

use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leecarter::LeeCarterModel;
use crate::mortality_data::{close_table, ClosedTable, CsvFormat, MortalitySurface};
use crate::rng::{Domain, StreamFactory, Substream};

/// Affine trend of the time index with Gaussian residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftModel {
    /// Slope per calendar year.
    pub a: f64,
    /// Intercept at calendar year 0.
    pub b: f64,
    pub sigma_gamma: f64,
    /// OLS covariance of `(a, b)`, row-major.
    pub cov_ab: [[f64; 2]; 2],
    pub n_obs: usize,
    pub year_min: i32,
    pub year_max: i32,
}

impl DriftModel {
    /// Trend value `a t + b`.
    #[inline]
    pub fn trend(&self, year: i32) -> f64 {
        self.a * f64::from(year) + self.b
    }

    /// Same model with the residual volatility multiplied by `factor`.
    pub fn with_sigma_scale(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0 && factor.is_finite()) {
            return Err(Error::arg(format!(
                "sigma scale {factor} must be finite and >= 0"
            )));
        }
        Ok(Self {
            sigma_gamma: self.sigma_gamma * factor,
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.cov_ab;
        if !(self.sigma_gamma >= 0.0)
            || c[0][1] != c[1][0]
            || c[0][0] < 0.0
            || c[1][1] < 0.0
            || self.n_obs < 3
            || !self.a.is_finite()
            || !self.b.is_finite()
        {
            return Err(Error::domain("invalid drift model"));
        }
        Ok(())
    }
}

/// Ordinary least squares of `k` on calendar year.
pub fn fit_drift(k: &[f64], years: &[i32]) -> Result<DriftModel> {
    if k.len() != years.len() {
        return Err(Error::arg(format!(
            "{} time-index values for {} years",
            k.len(),
            years.len()
        )));
    }
    let n = k.len();
    if n < 3 {
        return Err(Error::arg(format!(
            "drift fit needs at least 3 points, got {n}"
        )));
    }
    let nf = n as f64;
    let t_mean = years.iter().map(|&t| f64::from(t)).sum::<f64>() / nf;
    let k_mean = k.iter().sum::<f64>() / nf;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&t, &kt) in years.iter().zip(k) {
        let dt = f64::from(t) - t_mean;
        sxx += dt * dt;
        sxy += dt * (kt - k_mean);
    }
    if sxx == 0.0 {
        return Err(Error::arg("drift fit needs at least two distinct years"));
    }
    let a = sxy / sxx;
    let b = k_mean - a * t_mean;
    let ssr: f64 = years
        .iter()
        .zip(k)
        .map(|(&t, &kt)| {
            let e = kt - (a * f64::from(t) + b);
            e * e
        })
        .sum();
    let s2 = ssr / (nf - 2.0);
    let cov_ab = [
        [s2 / sxx, -t_mean * s2 / sxx],
        [-t_mean * s2 / sxx, s2 * (1.0 / nf + t_mean * t_mean / sxx)],
    ];
    Ok(DriftModel {
        a,
        b,
        sigma_gamma: s2.sqrt(),
        cov_ab,
        n_obs: n,
        year_min: *years.iter().min().unwrap(),
        year_max: *years.iter().max().unwrap(),
    })
}

/// Drift model of a fitted Lee-Carter time index.
pub fn fit_drift_to_model(model: &LeeCarterModel) -> Result<DriftModel> {
    let years: Vec<i32> = model.years().collect();
    fit_drift(&model.k, &years)
}

fn check_future(drift: &DriftModel, years: &[i32]) -> Result<()> {
    if years.is_empty() {
        return Err(Error::arg("no projection years given"));
    }
    if let Some(&y) = years.iter().find(|&&y| y <= drift.year_max) {
        return Err(Error::arg(format!(
            "year {y} is not after the fit window ending {}",
            drift.year_max
        )));
    }
    Ok(())
}

/// Trend line `a t + b` over future years.
pub fn extrapolate_k(drift: &DriftModel, future_years: &[i32]) -> Result<Vec<f64>> {
    check_future(drift, future_years)?;
    Ok(future_years.iter().map(|&t| drift.trend(t)).collect())
}

/// One stochastic path `a t + b + gamma_t` for scenario `scenario`.
///
/// The noise for year `t` is read from the substream
/// `(TimeIndexNoise, [scenario, t])`, so any year of any scenario can be
/// regenerated independently.
pub fn sample_k_path(
    drift: &DriftModel,
    future_years: &[i32],
    streams: &StreamFactory,
    scenario: u64,
) -> Result<Vec<f64>> {
    check_future(drift, future_years)?;
    Ok(noisy_path(
        drift.a,
        drift.b,
        drift.sigma_gamma,
        future_years,
        streams,
        scenario,
    ))
}

fn noisy_path(
    a: f64,
    b: f64,
    sigma: f64,
    years: &[i32],
    streams: &StreamFactory,
    scenario: u64,
) -> Vec<f64> {
    years
        .iter()
        .map(|&t| {
            let z = streams
                .stream(Domain::TimeIndexNoise, &[scenario, t as u64])
                .standard_normal();
            (a * f64::from(t) + b) + sigma * z
        })
        .collect()
}

/// Draw `(a, b)` from the normal law of the OLS estimators.
pub fn sample_drift_params(drift: &DriftModel, stream: &mut Substream) -> Result<(f64, f64)> {
    let [[c00, c01], [c10, c11]] = drift.cov_ab;
    if c01 != c10 {
        return Err(Error::Numeric("drift covariance is not symmetric".into()));
    }
    let tol = 1e-12 * c00.abs().max(c11.abs()).max(1.0);
    if c00 < -tol {
        return Err(Error::Numeric(format!("negative variance of slope: {c00}")));
    }
    let l11 = c00.max(0.0).sqrt();
    let l21 = if l11 > 0.0 {
        c10 / l11
    } else if c10.abs() <= tol {
        0.0
    } else {
        return Err(Error::Numeric(
            "drift covariance is not positive semi-definite".into(),
        ));
    };
    let d = c11 - l21 * l21;
    if d < -tol {
        return Err(Error::Numeric(
            "drift covariance is not positive semi-definite".into(),
        ));
    }
    let l22 = d.max(0.0).sqrt();
    let z1 = stream.standard_normal();
    let z2 = stream.standard_normal();
    Ok((drift.a + l11 * z1, drift.b + (l21 * z1 + l22 * z2)))
}

/// Which generator produced a projected surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Deterministic,
    StochasticRaw,
    StochasticCorrected,
}

/// Death probabilities over ages × projection years.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedSurface {
    pub age_min: i32,
    pub year_min: i32,
    pub kind: SurfaceKind,
    /// Volatility used in the bias correction; zero for the other kinds.
    pub sigma_gamma: f64,
    pub k_path: Vec<f64>,
    pub q: Array2<f64>,
}

/// JSON sidecar written next to an exported projected surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSurfaceMeta {
    pub kind: SurfaceKind,
    pub sigma_gamma: f64,
    pub seed: Option<u64>,
    pub scenario: Option<u64>,
    pub drift: DriftModel,
    pub k_path: Vec<f64>,
}

impl ProjectedSurface {
    pub fn year_max(&self) -> i32 {
        self.year_min + self.q.ncols() as i32 - 1
    }

    pub fn age_max(&self) -> i32 {
        self.age_min + self.q.nrows() as i32 - 1
    }

    pub fn q(&self, age: i32, year: i32) -> Option<f64> {
        let i = usize::try_from(age - self.age_min).ok()?;
        let j = usize::try_from(year - self.year_min).ok()?;
        self.q.get((i, j)).copied()
    }

    pub fn to_surface(&self) -> MortalitySurface {
        MortalitySurface::new(self.age_min, self.year_min, self.q.clone())
            .expect("projected rates lie in (0, 1)")
    }

    pub fn close(&self, terminal_age: i32) -> Result<ClosedTable> {
        close_table(&self.to_surface(), terminal_age)
    }

    pub fn write_csv<W: Write>(&self, out: W, format: &CsvFormat) -> std::io::Result<()> {
        self.to_surface().write_csv(out, format)
    }
}

const Q_CEILING: f64 = 1.0 - f64::EPSILON / 2.0;

#[inline]
fn hazard_to_probability(mu: f64) -> f64 {
    (-(-mu).exp_m1()).clamp(f64::MIN_POSITIVE, Q_CEILING)
}

/// Mortality surface for ages `age_from..=model.age_max` and consecutive
/// years starting at `first_year`, one column per entry of `k_path`.
///
/// `sigma_gamma` only enters the corrected kind.
pub fn build_surface(
    model: &LeeCarterModel,
    age_from: i32,
    first_year: i32,
    k_path: &[f64],
    kind: SurfaceKind,
    sigma_gamma: f64,
) -> Result<ProjectedSurface> {
    if k_path.is_empty() {
        return Err(Error::arg("empty time-index path"));
    }
    if let Some(k) = k_path.iter().find(|k| !k.is_finite()) {
        return Err(Error::domain(format!("non-finite time index {k}")));
    }
    if age_from < model.age_min || age_from > model.age_max {
        return Err(Error::arg(format!(
            "age {age_from} outside model ages {}-{}",
            model.age_min, model.age_max
        )));
    }
    if !(sigma_gamma >= 0.0 && sigma_gamma.is_finite()) {
        return Err(Error::arg(format!("invalid volatility {sigma_gamma}")));
    }
    let skip = (age_from - model.age_min) as usize;
    let alpha = &model.alpha[skip..];
    let beta = &model.beta[skip..];
    let level: Vec<f64> = match kind {
        SurfaceKind::StochasticCorrected => {
            let s2 = sigma_gamma * sigma_gamma;
            alpha
                .iter()
                .zip(beta)
                .map(|(a, b)| a - b * b * s2 / 2.0)
                .collect()
        }
        SurfaceKind::Deterministic | SurfaceKind::StochasticRaw => alpha.to_vec(),
    };
    let q = Array2::from_shape_fn((alpha.len(), k_path.len()), |(i, j)| {
        hazard_to_probability((level[i] + beta[i] * k_path[j]).exp())
    });
    Ok(ProjectedSurface {
        age_min: age_from,
        year_min: first_year,
        kind,
        sigma_gamma: if kind == SurfaceKind::StochasticCorrected {
            sigma_gamma
        } else {
            0.0
        },
        k_path: k_path.to_vec(),
        q,
    })
}

/// Builds cohort tables spanning a valuation horizon, historical years
/// taking the fitted time index and later years the drift model.
#[derive(Debug, Clone)]
pub struct Projector {
    pub model: LeeCarterModel,
    /// Drift model with any volatility scaling already applied.
    pub drift: DriftModel,
    pub age_from: i32,
    pub first_year: i32,
    pub last_year: i32,
    pub terminal_age: i32,
    /// Use the uncorrected generator for stochastic scenarios.
    pub raw_bias: bool,
    /// Redraw `(a, b)` from their estimation law in each scenario.
    pub drift_uncertainty: bool,
}

impl Projector {
    /// Projector covering every cohort diagonal that starts at
    /// `first_year` for ages `age_from..=terminal_age`.
    pub fn new(
        model: LeeCarterModel,
        drift: DriftModel,
        age_from: i32,
        first_year: i32,
        terminal_age: i32,
    ) -> Result<Self> {
        if first_year < model.year_min {
            return Err(Error::arg(format!(
                "projection start {first_year} precedes the fit window {}",
                model.year_min
            )));
        }
        if age_from < model.age_min || age_from > model.age_max {
            return Err(Error::arg(format!(
                "age {age_from} outside model ages {}-{}",
                model.age_min, model.age_max
            )));
        }
        if terminal_age <= model.age_max {
            return Err(Error::arg(format!(
                "terminal age {terminal_age} must exceed the last modelled age {}",
                model.age_max
            )));
        }
        drift.validate()?;
        Ok(Self {
            last_year: first_year + (terminal_age - age_from),
            model,
            drift,
            age_from,
            first_year,
            terminal_age,
            raw_bias: false,
            drift_uncertainty: false,
        })
    }

    fn historical_end(&self) -> i32 {
        self.model.year_max.min(self.last_year)
    }

    fn future_years(&self) -> Vec<i32> {
        let start = self.first_year.max(self.model.year_max + 1);
        (start..=self.last_year).collect()
    }

    fn historical_k(&self) -> Vec<f64> {
        (self.first_year..=self.historical_end())
            .map(|t| self.model.k_at(t).expect("year inside fit window"))
            .collect()
    }

    /// Time-index path of the deterministic projection.
    pub fn deterministic_k_path(&self) -> Vec<f64> {
        let mut k = self.historical_k();
        k.extend(self.future_years().into_iter().map(|t| self.drift.trend(t)));
        k
    }

    /// Time-index path of scenario `scenario`.
    pub fn scenario_k_path(&self, streams: &StreamFactory, scenario: u64) -> Result<Vec<f64>> {
        let (a, b) = if self.drift_uncertainty {
            let mut s = streams.stream(Domain::DriftParams, &[scenario]);
            sample_drift_params(&self.drift, &mut s)?
        } else {
            (self.drift.a, self.drift.b)
        };
        let mut k = self.historical_k();
        k.extend(noisy_path(
            a,
            b,
            self.drift.sigma_gamma,
            &self.future_years(),
            streams,
            scenario,
        ));
        Ok(k)
    }

    pub fn deterministic_surface(&self) -> Result<ProjectedSurface> {
        build_surface(
            &self.model,
            self.age_from,
            self.first_year,
            &self.deterministic_k_path(),
            SurfaceKind::Deterministic,
            0.0,
        )
    }

    pub fn scenario_surface(
        &self,
        streams: &StreamFactory,
        scenario: u64,
    ) -> Result<ProjectedSurface> {
        let kind = if self.raw_bias {
            SurfaceKind::StochasticRaw
        } else {
            SurfaceKind::StochasticCorrected
        };
        build_surface(
            &self.model,
            self.age_from,
            self.first_year,
            &self.scenario_k_path(streams, scenario)?,
            kind,
            self.drift.sigma_gamma,
        )
    }

    pub fn deterministic_table(&self) -> Result<ClosedTable> {
        self.deterministic_surface()?.close(self.terminal_age)
    }

    pub fn scenario_table(&self, streams: &StreamFactory, scenario: u64) -> Result<ClosedTable> {
        self.scenario_surface(streams, scenario)?
            .close(self.terminal_age)
    }
}

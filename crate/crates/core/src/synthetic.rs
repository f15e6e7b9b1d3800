//! Synthetic mortality histories and annuity portfolios.
//!
//! Histories follow a Gompertz-Makeham level, an age profile of
//! improvement that fades at old ages, a linear time index with Gaussian
//! noise and a small idiosyncratic error on the log hazard. Portfolios draw
//! ages around a mean and log-normal rents.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::annuity::{Annuitant, Portfolio};
use crate::error::{Error, Result};
use crate::leecarter::LeeCarterModel;
use crate::mortality_data::MortalitySurface;
use crate::rng::{Domain, StreamFactory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistorySpec {
    pub age_min: i32,
    pub age_max: i32,
    pub year_min: i32,
    pub year_max: i32,
    /// Makeham constant, Gompertz level and slope of the reference hazard.
    pub makeham: f64,
    pub gompertz_level: f64,
    pub gompertz_slope: f64,
    /// Improvement sensitivity decays linearly from 1 at `age_min` to
    /// `beta_old_ratio` at `age_max`, before normalisation.
    pub beta_old_ratio: f64,
    /// Time index slope and intercept in calendar years.
    pub k_slope: f64,
    pub k_intercept: f64,
    pub k_noise_sd: f64,
    /// Standard deviation of the error on each log hazard.
    pub cell_noise_sd: f64,
    pub seed: u64,
}

impl Default for HistorySpec {
    fn default() -> Self {
        Self {
            age_min: 30,
            age_max: 100,
            year_min: 1946,
            year_max: 2000,
            makeham: 2e-4,
            gompertz_level: 2e-5,
            gompertz_slope: 0.1,
            beta_old_ratio: 0.1,
            k_slope: -2.05775,
            k_intercept: 4059.94439,
            k_noise_sd: 3.94,
            cell_noise_sd: 0.01,
            seed: 1,
        }
    }
}

impl HistorySpec {
    /// Exact Lee-Carter parameters of the history, normalised so that the
    /// improvement profile sums to one and the time index to zero.
    pub fn parameters(&self) -> Result<LeeCarterModel> {
        if self.age_max <= self.age_min || self.year_max - self.year_min < 2 {
            return Err(Error::arg(
                "synthetic history needs two ages and three years",
            ));
        }
        let n_ages = (self.age_max - self.age_min + 1) as usize;
        let alpha: Vec<f64> = (self.age_min..=self.age_max)
            .map(|x| {
                (self.makeham + self.gompertz_level * (self.gompertz_slope * f64::from(x)).exp())
                    .ln()
            })
            .collect();
        let beta: Vec<f64> = (0..n_ages)
            .map(|i| 1.0 + (self.beta_old_ratio - 1.0) * i as f64 / (n_ages - 1) as f64)
            .collect();
        let streams = StreamFactory::new(self.seed);
        let k: Vec<f64> = (self.year_min..=self.year_max)
            .map(|t| {
                let z = streams
                    .stream(Domain::User, &[1, t as u64])
                    .standard_normal();
                self.k_slope * f64::from(t) + self.k_intercept + self.k_noise_sd * z
            })
            .collect();
        // The trend is given for a unit-sum profile, so rescale beta first.
        let s: f64 = beta.iter().sum();
        let beta: Vec<f64> = beta.iter().map(|b| b / s).collect();
        LeeCarterModel::from_parameters(self.age_min, self.year_min, alpha, beta, k)
    }

    /// Observed death probabilities.
    pub fn generate(&self) -> Result<MortalitySurface> {
        let model = self.parameters()?;
        let streams = StreamFactory::new(self.seed);
        let log_mu = model.fitted_log_hazard();
        let q = Array2::from_shape_fn(log_mu.dim(), |(i, j)| {
            let e = streams
                .stream(Domain::User, &[2, i as u64, j as u64])
                .standard_normal();
            let mu = (log_mu[[i, j]] + self.cell_noise_sd * e).exp();
            (-(-mu).exp_m1()).min(1.0 - 1e-12)
        });
        MortalitySurface::new(self.age_min, self.year_min, q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioSpec {
    pub size: usize,
    pub mean_age: f64,
    pub age_sd: f64,
    pub min_age: i32,
    pub max_age: i32,
    /// Mean and coefficient of variation of the log-normal rents.
    pub mean_rent: f64,
    pub rent_cv: f64,
    pub valuation_year: i32,
    pub seed: u64,
}

impl Default for PortfolioSpec {
    fn default() -> Self {
        Self {
            size: 374,
            mean_age: 63.8,
            age_sd: 6.0,
            min_age: 50,
            max_age: 90,
            mean_rent: 5_500.0,
            rent_cv: 0.6,
            valuation_year: 2001,
            seed: 2,
        }
    }
}

impl PortfolioSpec {
    pub fn generate(&self) -> Result<Portfolio> {
        if self.size == 0 || self.min_age > self.max_age {
            return Err(Error::arg("invalid synthetic portfolio spec"));
        }
        if !(self.mean_rent > 0.0 && self.rent_cv >= 0.0) {
            return Err(Error::arg("invalid rent distribution"));
        }
        let streams = StreamFactory::new(self.seed);
        let s2 = (1.0 + self.rent_cv * self.rent_cv).ln();
        let m = self.mean_rent.ln() - s2 / 2.0;
        let annuitants = (0..self.size as u64)
            .map(|j| {
                let mut s = streams.stream(Domain::User, &[3, j]);
                let age = (self.mean_age + self.age_sd * s.standard_normal())
                    .round()
                    .clamp(f64::from(self.min_age), f64::from(self.max_age));
                let rent = (m + s2.sqrt() * s.standard_normal()).exp();
                Annuitant {
                    id: format!("A{:04}", j + 1),
                    age: age as i32,
                    rent: (rent * 100.0).round() / 100.0,
                }
            })
            .collect();
        Portfolio::new(self.valuation_year, annuitants)
    }
}

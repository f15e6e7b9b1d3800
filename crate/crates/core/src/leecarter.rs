//! Lee-Carter decomposition `ln mu(x, t) = alpha_x + beta_x k_t + eps(x, t)`.
//!
//! The fit takes `alpha` as the time average of the log-hazard for each age
//! and `beta, k` from the dominant singular triplet of the row-centred
//! log-hazard matrix, which is the least-squares optimum of the bilinear
//! model. Parameters are then rescaled so that `sum(beta) = 1` and
//! `sum(k) = 0`.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mortality_data::MortalitySurface;

/// Numerical settings of [`fit_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitTolerances {
    /// Stop when successive singular vectors differ by less than this
    /// (Euclidean distance between unit vectors, i.e. about the angle).
    pub angle: f64,
    pub max_iterations: usize,
    /// Relative RMS of the centred matrix below which the surface is
    /// treated as having no temporal signal.
    pub degenerate_rms: f64,
}

impl Default for FitTolerances {
    fn default() -> Self {
        Self {
            angle: 1e-12,
            max_iterations: 10_000,
            degenerate_rms: 1e-12,
        }
    }
}

/// Fitted Lee-Carter parameters for a rectangular age × year window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeeCarterModel {
    pub age_min: i32,
    pub age_max: i32,
    pub year_min: i32,
    pub year_max: i32,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub k: Vec<f64>,
    pub explained_variance: f64,
    pub residual_sd: f64,
    /// Set when the surface carried no time signal; then `k = 0` and
    /// `beta` is uniform.
    pub degenerate: bool,
    pub tolerances: FitTolerances,
}

impl LeeCarterModel {
    /// Model from explicit parameters. Checks lengths against the ranges
    /// and normalises `(alpha, beta, k)` so the constraints hold.
    pub fn from_parameters(
        age_min: i32,
        year_min: i32,
        alpha: Vec<f64>,
        beta: Vec<f64>,
        k: Vec<f64>,
    ) -> Result<Self> {
        if alpha.len() != beta.len() || alpha.is_empty() || k.is_empty() {
            return Err(Error::arg(format!(
                "parameter lengths alpha={}, beta={}, k={}",
                alpha.len(),
                beta.len(),
                k.len()
            )));
        }
        if alpha.iter().chain(&beta).chain(&k).any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite Lee-Carter parameter"));
        }
        let (alpha, beta, k) = normalize_constraints(&alpha, &beta, &k)?;
        Ok(Self {
            age_min,
            age_max: age_min + alpha.len() as i32 - 1,
            year_min,
            year_max: year_min + k.len() as i32 - 1,
            alpha,
            beta,
            k,
            // Exact by construction: the parameters define the surface.
            explained_variance: 1.0,
            residual_sd: 0.0,
            degenerate: false,
            tolerances: FitTolerances::default(),
        })
    }

    pub fn n_ages(&self) -> usize {
        self.alpha.len()
    }

    pub fn n_years(&self) -> usize {
        self.k.len()
    }

    pub fn ages(&self) -> impl Iterator<Item = i32> {
        self.age_min..=self.age_max
    }

    pub fn years(&self) -> impl Iterator<Item = i32> {
        self.year_min..=self.year_max
    }

    pub fn k_at(&self, year: i32) -> Option<f64> {
        let j = usize::try_from(year - self.year_min).ok()?;
        self.k.get(j).copied()
    }

    /// Fitted log-hazard `alpha_x + beta_x k_t` over the fit window.
    pub fn fitted_log_hazard(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.n_ages(), self.n_years()), |(i, j)| {
            self.alpha[i] + self.beta[i] * self.k[j]
        })
    }

    /// Checks internal consistency after deserialisation.
    pub fn validate(&self) -> Result<()> {
        if self.age_max - self.age_min + 1 != self.alpha.len() as i32
            || self.alpha.len() != self.beta.len()
            || self.year_max - self.year_min + 1 != self.k.len() as i32
        {
            return Err(Error::arg(
                "Lee-Carter parameter lengths do not match ranges",
            ));
        }
        if self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain(&self.k)
            .any(|v| !v.is_finite())
        {
            return Err(Error::domain("non-finite Lee-Carter parameter"));
        }
        let sb: f64 = self.beta.iter().sum();
        let sk: f64 = self.k.iter().sum();
        if (sb - 1.0).abs() > 1e-10 || sk.abs() > 1e-8 * self.k.len() as f64 {
            return Err(Error::domain(format!(
                "identifiability constraints violated: sum(beta) = {sb}, sum(k) = {sk}"
            )));
        }
        Ok(())
    }
}

/// Rescale parameters so that `sum(beta) = 1` and `sum(k) = 0` without
/// changing any fitted value `alpha_x + beta_x k_t`.
pub fn normalize_constraints(
    alpha: &[f64],
    beta: &[f64],
    k: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let c: f64 = beta.iter().sum();
    if c == 0.0 || !c.is_finite() {
        return Err(Error::Degenerate(format!(
            "sum of beta is {c}; constraints cannot be imposed"
        )));
    }
    let k_mean = k.iter().sum::<f64>() / k.len() as f64;
    let alpha = alpha
        .iter()
        .zip(beta)
        .map(|(a, b)| a + b * k_mean)
        .collect();
    let beta_n = beta.iter().map(|b| b / c).collect();
    let k = k.iter().map(|kt| c * (kt - k_mean)).collect();
    Ok((alpha, beta_n, k))
}

pub fn fit(surface: &MortalitySurface) -> Result<LeeCarterModel> {
    fit_with(surface, FitTolerances::default())
}

pub fn fit_with(surface: &MortalitySurface, tol: FitTolerances) -> Result<LeeCarterModel> {
    let (n_ages, n_years) = (surface.n_ages(), surface.n_years());
    if n_ages < 2 || n_years < 2 {
        return Err(Error::arg(format!(
            "need at least 2 ages and 2 years, got {n_ages} x {n_years}"
        )));
    }
    let y = surface.log_hazard();
    let alpha: Array1<f64> = y.mean_axis(Axis(1)).expect("non-empty rows");
    let z = &y - &alpha.view().insert_axis(Axis(1));
    let total_ss: f64 = z.iter().map(|v| v * v).sum();

    let scale = 1.0 + alpha.iter().map(|a| a.abs()).fold(0.0, f64::max);
    let rms = (total_ss / z.len() as f64).sqrt();

    let mut model = LeeCarterModel {
        age_min: surface.age_min(),
        age_max: surface.age_max(),
        year_min: surface.year_min(),
        year_max: surface.year_max(),
        alpha: alpha.to_vec(),
        beta: vec![1.0 / n_ages as f64; n_ages],
        k: vec![0.0; n_years],
        explained_variance: 0.0,
        residual_sd: 0.0,
        degenerate: true,
        tolerances: tol,
    };

    if rms > tol.degenerate_rms * scale {
        let (u, sigma, v) = dominant_triplet(&z, tol)?;
        let k: Vec<f64> = v.iter().map(|vj| sigma * vj).collect();
        let (a, b, k) = normalize_constraints(&model.alpha, u.as_slice().unwrap(), &k)?;
        model.alpha = a;
        model.beta = b;
        model.k = k;
        model.degenerate = false;
    }

    let resid = residual_matrix(&model, surface)?;
    let ssr: f64 = resid.iter().map(|r| r * r).sum();
    model.explained_variance = if model.degenerate || total_ss == 0.0 {
        0.0
    } else {
        (1.0 - ssr / total_ss).clamp(0.0, 1.0)
    };
    model.residual_sd = sample_sd(resid.iter().copied());
    log::debug!(
        "Lee-Carter fit {}x{}: explained variance {:.6}, residual sd {:.3e}",
        n_ages,
        n_years,
        model.explained_variance,
        model.residual_sd
    );
    Ok(model)
}

/// Leading singular triplet `(u, sigma, v)` of `z` by power iteration on
/// `z zᵀ`, with `u` over rows and `v` over columns, both unit length.
fn dominant_triplet(
    z: &Array2<f64>,
    tol: FitTolerances,
) -> Result<(Array1<f64>, f64, Array1<f64>)> {
    // Start from the row with the largest norm; it cannot be orthogonal to
    // the leading right singular vector unless z is zero.
    let start = z
        .outer_iter()
        .max_by(|a, b| a.dot(a).total_cmp(&b.dot(b)))
        .expect("non-empty matrix");
    let mut v = start.to_owned();
    v /= v.dot(&v).sqrt();

    for _ in 0..tol.max_iterations {
        let mut u = z.dot(&v);
        let nu = u.dot(&u).sqrt();
        u /= nu;
        let mut v_next = z.t().dot(&u);
        let sigma = v_next.dot(&v_next).sqrt();
        v_next /= sigma;
        let delta = (&v_next - &v).mapv(|d| d * d).sum().sqrt();
        v = v_next;
        if delta < tol.angle {
            let mut u = z.dot(&v);
            let sigma = u.dot(&u).sqrt();
            u /= sigma;
            return Ok((u, sigma, v));
        }
    }
    Err(Error::PowerIteration(tol.max_iterations))
}

fn sample_sd(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let (n, sum) = values
        .clone()
        .fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n < 2 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// Residuals `ln mu(x, t) - alpha_x - beta_x k_t` over the model window.
pub fn residual_matrix(model: &LeeCarterModel, surface: &MortalitySurface) -> Result<Array2<f64>> {
    if surface.age_min() != model.age_min
        || surface.age_max() != model.age_max
        || surface.year_min() != model.year_min
        || surface.year_max() != model.year_max
    {
        return Err(Error::arg(format!(
            "surface {}-{} x {}-{} does not match model {}-{} x {}-{}",
            surface.age_min(),
            surface.age_max(),
            surface.year_min(),
            surface.year_max(),
            model.age_min,
            model.age_max,
            model.year_min,
            model.year_max
        )));
    }
    Ok(surface.log_hazard() - model.fitted_log_hazard())
}

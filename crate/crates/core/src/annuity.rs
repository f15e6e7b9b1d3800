//! Annuity portfolio: expected flows, reserve, and simulation of the
//! discounted liability by inversion sampling of curtate death times.
//!
//! Rents are paid annually in arrears: a life whose curtate death time is
//! `T` (death during year `T + 1`) receives payments at `t = 1..=T`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::leecarter::LeeCarterModel;
use crate::mortality_data::ClosedTable;
use crate::projection::{DriftModel, Projector, SurfaceKind};
use crate::rng::{Domain, StreamFactory};
use crate::stats::{quantile_sorted, Moments};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annuitant {
    pub id: String,
    /// Integer age at the valuation date.
    pub age: i32,
    /// Annual rent.
    pub rent: f64,
}

/// Annuitants valued from `valuation_year`, the calendar year whose rates
/// apply to the first year of projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub valuation_year: i32,
    pub annuitants: Vec<Annuitant>,
}

impl Portfolio {
    pub fn new(valuation_year: i32, annuitants: Vec<Annuitant>) -> Result<Self> {
        if annuitants.is_empty() {
            return Err(Error::arg("portfolio has no annuitants"));
        }
        if let Some(a) = annuitants
            .iter()
            .find(|a| !(a.rent > 0.0 && a.rent.is_finite()))
        {
            return Err(Error::arg(format!(
                "annuitant {} has rent {}",
                a.id, a.rent
            )));
        }
        Ok(Self {
            valuation_year,
            annuitants,
        })
    }

    pub fn len(&self) -> usize {
        self.annuitants.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annuitants.is_empty()
    }

    pub fn youngest_age(&self) -> i32 {
        self.annuitants.iter().map(|a| a.age).min().unwrap_or(0)
    }

    pub fn total_rent(&self) -> f64 {
        self.annuitants.iter().map(|a| a.rent).sum()
    }

    /// `copies` replicas of every annuitant, ids suffixed `#r`.
    ///
    /// Death draws are keyed by position in the portfolio, so replicas
    /// never share random numbers.
    pub fn replicate(&self, copies: usize) -> Result<Self> {
        if copies == 0 {
            return Err(Error::arg("replication factor must be at least 1"));
        }
        if copies == 1 {
            return Ok(self.clone());
        }
        let annuitants = (0..copies)
            .flat_map(|r| {
                self.annuitants.iter().map(move |a| Annuitant {
                    id: format!("{}#{r}", a.id),
                    ..a.clone()
                })
            })
            .collect();
        Ok(Self {
            valuation_year: self.valuation_year,
            annuitants,
        })
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "id,age,rent")?;
        for a in &self.annuitants {
            writeln!(out, "{},{},{}", a.id, a.age, a.rent)?;
        }
        Ok(())
    }
}

/// Load an `id,age,rent` portfolio. Fractional ages are rounded to the
/// nearest integer with a warning.
pub fn load_portfolio_csv(path: impl AsRef<Path>, valuation_year: i32) -> Result<Portfolio> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_portfolio_csv(file, valuation_year, path)
}

pub fn read_portfolio_csv<R: Read>(
    reader: R,
    valuation_year: i32,
    origin: impl AsRef<Path>,
) -> Result<Portfolio> {
    #[derive(Deserialize)]
    struct Row {
        id: String,
        age: f64,
        rent: f64,
    }
    let origin = origin.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut annuitants = Vec::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        if !row.age.is_finite() || row.age < 0.0 {
            return Err(Error::arg(format!(
                "annuitant {} has age {}",
                row.id, row.age
            )));
        }
        let age = row.age.round();
        if age != row.age {
            log::warn!("annuitant {}: age {} rounded to {}", row.id, row.age, age);
        }
        annuitants.push(Annuitant {
            id: row.id,
            age: age as i32,
            rent: row.rent,
        });
    }
    Portfolio::new(valuation_year, annuitants)
}

/// Law of the curtate death time along one cohort diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalSchedule {
    /// `p[i]`: probability of dying in year `i + 1`.
    pub p: Vec<f64>,
    /// `cumulative[i] = p[0] + ... + p[i]`, computed as one minus the
    /// survival product so that the last entry is exactly 1.
    pub cumulative: Vec<f64>,
}

impl SurvivalSchedule {
    /// Schedule from successive one-year death probabilities; the last one
    /// must be 1.
    pub fn from_rates(q: &[f64]) -> Result<Self> {
        if q.last() != Some(&1.0) {
            return Err(Error::arg(
                "death probabilities must end with certain death",
            ));
        }
        if let Some(v) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::domain(format!(
                "death probability {v} outside [0, 1]"
            )));
        }
        let mut survival = 1.0;
        let mut p = Vec::with_capacity(q.len());
        let mut cumulative = Vec::with_capacity(q.len());
        for &qi in q {
            p.push(survival * qi);
            survival *= 1.0 - qi;
            cumulative.push(1.0 - survival);
        }
        Ok(Self { p, cumulative })
    }

    /// Survival probability to the start of year `t + 1`, i.e. `l_{x+t}/l_x`.
    pub fn survival(&self, t: usize) -> f64 {
        match t {
            0 => 1.0,
            t => 1.0 - self.cumulative.get(t - 1).copied().unwrap_or(1.0),
        }
    }

    /// Inversion: the smallest `j` with `cumulative[j] > u`.
    #[inline]
    pub fn sample(&self, u: f64) -> usize {
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.cumulative.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

/// Schedule of one annuitant along the cohort diagonal starting at
/// `(age, valuation_year)`.
pub fn build_schedule(
    annuitant: &Annuitant,
    table: &ClosedTable,
    valuation_year: i32,
) -> Result<SurvivalSchedule> {
    let q = table
        .diagonal(annuitant.age, valuation_year)
        .ok_or_else(|| Error::Coverage {
            ids: vec![annuitant.id.clone()],
        })?;
    SurvivalSchedule::from_rates(&q)
}

/// Projector whose tables cover every annuitant's diagonal from the
/// valuation year to the terminal age.
pub fn projector_for(
    portfolio: &Portfolio,
    model: &LeeCarterModel,
    drift: &DriftModel,
    terminal_age: i32,
) -> Result<Projector> {
    let uncovered: Vec<String> = portfolio
        .annuitants
        .iter()
        .filter(|a| a.age < model.age_min || a.age > terminal_age)
        .map(|a| a.id.clone())
        .collect();
    if !uncovered.is_empty() {
        return Err(Error::Coverage { ids: uncovered });
    }
    let age_from = portfolio.youngest_age().min(model.age_max);
    Projector::new(
        model.clone(),
        drift.clone(),
        age_from,
        portfolio.valuation_year,
        terminal_age,
    )
}

/// Inversion sampling of a curtate death time.
#[inline]
pub fn sample_death_time(schedule: &SurvivalSchedule, u: f64) -> usize {
    schedule.sample(u)
}

/// One schedule per distinct age, plus each annuitant's index into them.
struct PortfolioSchedules {
    schedules: Vec<SurvivalSchedule>,
    index: Vec<usize>,
    max_len: usize,
}

impl PortfolioSchedules {
    fn build(portfolio: &Portfolio, table: &ClosedTable) -> Result<Self> {
        let mut by_age: BTreeMap<i32, usize> = BTreeMap::new();
        let mut schedules = Vec::new();
        let mut missing = Vec::new();
        let mut index = Vec::with_capacity(portfolio.len());
        for a in &portfolio.annuitants {
            let slot = match by_age.get(&a.age) {
                Some(&slot) => slot,
                None => match table.diagonal(a.age, portfolio.valuation_year) {
                    Some(q) => {
                        schedules.push(SurvivalSchedule::from_rates(&q)?);
                        by_age.insert(a.age, schedules.len() - 1);
                        schedules.len() - 1
                    }
                    None => {
                        missing.push(a.id.clone());
                        usize::MAX
                    }
                },
            };
            index.push(slot);
        }
        if !missing.is_empty() {
            return Err(Error::Coverage { ids: missing });
        }
        let max_len = schedules
            .iter()
            .map(SurvivalSchedule::len)
            .max()
            .unwrap_or(0);
        Ok(Self {
            schedules,
            index,
            max_len,
        })
    }
}

/// Expected flows `F_t`, `t = 1, 2, ...`, until every annuitant has died
/// with certainty. Element `t - 1` holds `F_t`.
pub fn expected_flows(portfolio: &Portfolio, table: &ClosedTable) -> Result<Vec<f64>> {
    let s = PortfolioSchedules::build(portfolio, table)?;
    let horizon = s.max_len.saturating_sub(1);
    let mut flows = vec![0.0; horizon];
    for (a, &slot) in portfolio.annuitants.iter().zip(&s.index) {
        let schedule = &s.schedules[slot];
        for (t, f) in flows.iter_mut().enumerate() {
            *f += a.rent * schedule.survival(t + 1);
        }
    }
    Ok(flows)
}

fn check_rate(discount_rate: f64) -> Result<()> {
    if !(discount_rate > -1.0 && discount_rate.is_finite()) {
        return Err(Error::arg(format!(
            "discount rate {discount_rate} must exceed -1"
        )));
    }
    Ok(())
}

/// `a[T] = sum_{t=1..T} (1 + i)^-t` for `T = 0..=horizon`.
fn annuity_factors(discount_rate: f64, horizon: usize) -> Vec<f64> {
    let v = 1.0 / (1.0 + discount_rate);
    let mut out = Vec::with_capacity(horizon + 1);
    let (mut acc, mut d) = (0.0, 1.0);
    out.push(0.0);
    for _ in 0..horizon {
        d *= v;
        acc += d;
        out.push(acc);
    }
    out
}

/// Reserve `L_0 = sum_t F_t (1 + i)^-t`.
pub fn reserve(flows: &[f64], discount_rate: f64) -> Result<f64> {
    check_rate(discount_rate)?;
    if flows.iter().any(|f| !f.is_finite()) {
        return Err(Error::domain("non-finite flow"));
    }
    let v = 1.0 / (1.0 + discount_rate);
    let mut d = 1.0;
    Ok(flows
        .iter()
        .map(|f| {
            d *= v;
            f * d
        })
        .sum())
}

/// Simulated liabilities with their provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiabilityDistribution {
    pub samples: Vec<f64>,
    pub seed: u64,
    pub discount_rate: f64,
    pub surface_kind: SurfaceKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LiabilitySummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub cv: f64,
    pub q05: f64,
    pub q25: f64,
    pub q75: f64,
    pub q95: f64,
}

impl LiabilityDistribution {
    pub fn summarize(&self) -> Result<LiabilitySummary> {
        summarize(&self.samples)
    }

    pub fn write_samples_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "lambda")?;
        for s in &self.samples {
            writeln!(out, "{s}")?;
        }
        Ok(())
    }
}

/// Mean, standard deviation (`n - 1`), coefficient of variation and
/// empirical quantiles of liability samples.
pub fn summarize(samples: &[f64]) -> Result<LiabilitySummary> {
    if samples.len() < 2 {
        return Err(Error::arg("summary needs at least two samples"));
    }
    let m = Moments::from_slice(samples);
    let sd = m.sample_variance().expect("n >= 2").sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(LiabilitySummary {
        n: samples.len(),
        mean: m.mean,
        sd,
        cv: sd / m.mean,
        q05: quantile_sorted(&sorted, 0.05),
        q25: quantile_sorted(&sorted, 0.25),
        q75: quantile_sorted(&sorted, 0.75),
        q95: quantile_sorted(&sorted, 0.95),
    })
}

/// Sampling kernel: one liability for given schedules and a uniform per
/// annuitant supplied by `uniform(j)`.
struct Kernel<'a> {
    portfolio: &'a Portfolio,
    schedules: PortfolioSchedules,
    factors: Vec<f64>,
}

impl<'a> Kernel<'a> {
    fn new(portfolio: &'a Portfolio, table: &ClosedTable, discount_rate: f64) -> Result<Self> {
        let schedules = PortfolioSchedules::build(portfolio, table)?;
        let factors = annuity_factors(discount_rate, schedules.max_len);
        Ok(Self {
            portfolio,
            schedules,
            factors,
        })
    }

    #[inline]
    fn liability(&self, mut uniform: impl FnMut(u64) -> f64) -> f64 {
        let mut total = 0.0;
        for (j, (a, &slot)) in self
            .portfolio
            .annuitants
            .iter()
            .zip(&self.schedules.index)
            .enumerate()
        {
            let t = self.schedules.schedules[slot].sample(uniform(j as u64));
            total += a.rent * self.factors[t];
        }
        total
    }
}

/// `n_sims` realisations of the liability under a fixed table.
///
/// Realisation `n` draws annuitant `j`'s death time from the substream
/// `(Death, [n, j])`.
pub fn simulate_lambda(
    portfolio: &Portfolio,
    table: &ClosedTable,
    discount_rate: f64,
    n_sims: usize,
    streams: &StreamFactory,
) -> Result<LiabilityDistribution> {
    check_rate(discount_rate)?;
    if n_sims == 0 {
        return Err(Error::arg("number of simulations must be at least 1"));
    }
    let kernel = Kernel::new(portfolio, table, discount_rate)?;
    let samples = (0..n_sims as u64)
        .into_par_iter()
        .map(|n| {
            let prefix = streams.prefix(Domain::Death, &[n]);
            kernel.liability(|j| prefix.stream(j).uniform())
        })
        .collect();
    Ok(LiabilityDistribution {
        samples,
        seed: streams.seed(),
        discount_rate,
        surface_kind: SurfaceKind::Deterministic,
    })
}

/// `n_sims` realisations where each one first draws its own mortality
/// scenario from `projector`, then the death times.
///
/// Death draws use the same substreams as [`simulate_lambda`], so with zero
/// volatility both produce identical samples.
pub fn simulate_lambda_stochastic(
    portfolio: &Portfolio,
    projector: &Projector,
    discount_rate: f64,
    n_sims: usize,
    streams: &StreamFactory,
) -> Result<LiabilityDistribution> {
    check_rate(discount_rate)?;
    if n_sims == 0 {
        return Err(Error::arg("number of simulations must be at least 1"));
    }
    let samples = (0..n_sims as u64)
        .into_par_iter()
        .map(|n| {
            let table = projector.scenario_table(streams, n)?;
            let kernel = Kernel::new(portfolio, &table, discount_rate)?;
            let prefix = streams.prefix(Domain::Death, &[n]);
            Ok(kernel.liability(|j| prefix.stream(j).uniform()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(LiabilityDistribution {
        samples,
        seed: streams.seed(),
        discount_rate,
        surface_kind: if projector.raw_bias {
            SurfaceKind::StochasticRaw
        } else {
            SurfaceKind::StochasticCorrected
        },
    })
}

/// Liability samples for `m` inner runs of one outer scenario, with death
/// draws from `(NestedDeath, [outer, inner, j])`. Used by the nested
/// decomposition.
pub(crate) fn nested_row(
    portfolio: &Portfolio,
    table: &ClosedTable,
    discount_rate: f64,
    streams: &StreamFactory,
    outer: u64,
    inner: std::ops::Range<u64>,
    mut sink: impl FnMut(f64),
) -> Result<()> {
    let kernel = Kernel::new(portfolio, table, discount_rate)?;
    let row = streams.prefix(Domain::NestedDeath, &[outer]);
    for m in inner {
        let prefix = row.child(m);
        sink(kernel.liability(|j| prefix.stream(j).uniform()));
    }
    Ok(())
}

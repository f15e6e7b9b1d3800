//! Nested Monte Carlo split of the liability variance into a mutualisable
//! part, `E[V(L | surface)]`, and a systematic part, `V[E(L | surface)]`.
//!
//! Each outer draw fixes one mortality scenario; `M` inner runs then
//! simulate the portfolio under it. Only per-scenario running moments are
//! kept, so the `N x M` matrix of liabilities is never stored and the inner
//! sample of an existing scenario can be extended when `M` grows.

use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annuity::{nested_row, projector_for, Portfolio};
use crate::error::{Error, Result};
use crate::leecarter::LeeCarterModel;
use crate::mortality_data::ClosedTable;
use crate::projection::{DriftModel, Projector};
use crate::rng::{Domain, StreamFactory};
use crate::stats::Moments;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionConfig {
    pub n_outer: usize,
    pub m_inner: usize,
    /// Multiplier on the fitted residual volatility of the time index.
    pub sigma_scale: f64,
    pub convergence_threshold: f64,
    pub max_rounds: usize,
    pub seed: u64,
    /// Redraw the drift parameters in every outer scenario (experimental).
    pub drift_uncertainty: bool,
}

impl Default for DecompositionConfig {
    fn default() -> Self {
        Self {
            n_outer: 100,
            m_inner: 200,
            sigma_scale: 1.0,
            convergence_threshold: 1e-3,
            max_rounds: 8,
            seed: 0,
            drift_uncertainty: false,
        }
    }
}

impl DecompositionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_outer < 2 || self.m_inner < 2 {
            return Err(Error::arg(format!(
                "nested simulation needs at least 2 outer and 2 inner draws, got {} x {}",
                self.n_outer, self.m_inner
            )));
        }
        if !(self.convergence_threshold > 0.0) {
            return Err(Error::arg("convergence threshold must be positive"));
        }
        if self.max_rounds < 2 {
            return Err(Error::arg(
                "at least 2 rounds are needed to test convergence",
            ));
        }
        if !(self.sigma_scale >= 0.0 && self.sigma_scale.is_finite()) {
            return Err(Error::arg(format!(
                "invalid sigma scale {}",
                self.sigma_scale
            )));
        }
        Ok(())
    }
}

/// Variance components of one estimation round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Components {
    pub n_outer: usize,
    pub m_inner: usize,
    /// Mean of the within-scenario sample variances.
    pub within: f64,
    pub within_se: f64,
    /// Sample variance of the scenario means.
    pub between_raw: f64,
    /// `max(0, between_raw - within / M)`.
    pub between: f64,
    pub between_se: f64,
    pub total: f64,
    pub omega: f64,
    pub omega_se: f64,
    pub grand_mean: f64,
    pub grand_mean_se: f64,
}

/// One row of the convergence history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    #[serde(flatten)]
    pub components: Components,
    /// `|omega_r - omega_{r-1}|`; absent in the first round.
    pub omega_gap: Option<f64>,
    /// `|total_r - total_{r-1}| / total_{r-1}`; absent in the first round.
    pub total_gap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    #[serde(flatten)]
    pub components: Components,
    pub rounds: usize,
    pub stopping_rule: String,
    pub config: DecompositionConfig,
    pub trace: Vec<RoundTrace>,
}

impl DecompositionResult {
    pub fn within(&self) -> f64 {
        self.components.within
    }

    pub fn between(&self) -> f64 {
        self.components.between
    }

    pub fn total(&self) -> f64 {
        self.components.total
    }

    pub fn omega(&self) -> f64 {
        self.components.omega
    }

    pub fn grand_mean(&self) -> f64 {
        self.components.grand_mean
    }
}

/// Mean of the row sample variances of a realisation matrix.
pub fn estimate_within(rows: &[Vec<f64>]) -> Result<f64> {
    let moments = rows_to_moments(rows)?;
    within_from(&moments)
}

/// Sample variance of the row means of a realisation matrix, before any
/// finite-`M` adjustment.
pub fn estimate_between(rows: &[Vec<f64>]) -> Result<f64> {
    let moments = rows_to_moments(rows)?;
    between_from(&moments)
}

/// Share of the total variance due to the scenario, clamped to `[0, 1]`.
pub fn omega(within: f64, between: f64) -> Result<f64> {
    if !(within >= 0.0 && between >= 0.0) {
        return Err(Error::domain(format!(
            "variance components must be non-negative, got {within} and {between}"
        )));
    }
    let total = within + between;
    if total == 0.0 {
        return Err(Error::Degenerate("total variance is zero".into()));
    }
    Ok((between / total).clamp(0.0, 1.0))
}

fn rows_to_moments(rows: &[Vec<f64>]) -> Result<Vec<Moments>> {
    if rows.is_empty() {
        return Err(Error::arg("empty realisation matrix"));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::arg("realisation matrix rows differ in length"));
    }
    Ok(rows.iter().map(|r| Moments::from_slice(r)).collect())
}

fn within_from(rows: &[Moments]) -> Result<f64> {
    let mut acc = Moments::default();
    for r in rows {
        let v = r
            .sample_variance()
            .ok_or_else(|| Error::arg("within-scenario variance needs M >= 2"))?;
        acc.push(v);
    }
    Ok(acc.mean)
}

fn between_from(rows: &[Moments]) -> Result<f64> {
    if rows.len() < 2 {
        return Err(Error::arg("between-scenario variance needs N >= 2"));
    }
    let mut acc = Moments::default();
    for r in rows {
        acc.push(r.mean);
    }
    Ok(acc.sample_variance().expect("N >= 2"))
}

/// All estimates, with standard errors, from per-scenario moments sharing a
/// common inner sample size.
pub fn components(rows: &[Moments]) -> Result<Components> {
    estimate(rows, false)
}

/// As [`components`]; when every row shares one scenario the systematic
/// part is exactly zero and only `between_raw` keeps the sampled value.
fn estimate(rows: &[Moments], single_scenario: bool) -> Result<Components> {
    let within = within_from(rows)?;
    let between_raw = between_from(rows)?;
    let n = rows.len();
    let m = rows[0].n as usize;
    let nf = n as f64;

    let mut variances = Moments::default();
    let mut means = Moments::default();
    for r in rows {
        variances.push(r.sample_variance().expect("M >= 2"));
        means.push(r.mean);
    }
    let within_se = (variances.sample_variance().expect("N >= 2") / nf).sqrt();
    let mut squares = Moments::default();
    for r in rows {
        squares.push((r.mean - means.mean).powi(2));
    }
    let between_se = (squares.sample_variance().expect("N >= 2") / nf).sqrt() * nf / (nf - 1.0);

    let between = if single_scenario {
        0.0
    } else {
        (between_raw - within / m as f64).max(0.0)
    };
    let total = within + between;
    let (omega, omega_se) = if total > 0.0 {
        let w = omega(within, between)?;
        let se = (within * between_se).hypot(between * within_se) / (total * total);
        (w, se)
    } else {
        (0.0, 0.0)
    };
    Ok(Components {
        n_outer: n,
        m_inner: m,
        within,
        within_se,
        between_raw,
        between,
        between_se,
        total,
        omega,
        omega_se,
        grand_mean: means.mean,
        grand_mean_se: (between_raw / nf).sqrt(),
    })
}

/// Source of outer scenarios and of liabilities conditional on them.
pub trait ScenarioSource: Sync {
    /// Push into `row` the liabilities of inner runs `inner` under outer
    /// scenario `outer`, in index order.
    fn extend_row(
        &self,
        streams: &StreamFactory,
        outer: u64,
        inner: Range<u64>,
        row: &mut Moments,
    ) -> Result<()>;

    /// True when every outer draw yields the same scenario.
    fn single_scenario(&self) -> bool {
        false
    }
}

/// Bias-corrected projected surfaces, one per outer draw.
pub struct ProjectedScenarios<'a> {
    pub portfolio: &'a Portfolio,
    pub projector: Projector,
    pub discount_rate: f64,
}

impl<'a> ProjectedScenarios<'a> {
    /// Scenario source for `portfolio` with the time-index volatility
    /// multiplied by `sigma_scale`.
    pub fn new(
        portfolio: &'a Portfolio,
        model: &LeeCarterModel,
        drift: &DriftModel,
        discount_rate: f64,
        terminal_age: i32,
        sigma_scale: f64,
        drift_uncertainty: bool,
    ) -> Result<Self> {
        let drift = drift.with_sigma_scale(sigma_scale)?;
        let mut projector = projector_for(portfolio, model, &drift, terminal_age)?;
        projector.raw_bias = false;
        projector.drift_uncertainty = drift_uncertainty;
        Ok(Self {
            portfolio,
            projector,
            discount_rate,
        })
    }
}

impl ScenarioSource for ProjectedScenarios<'_> {
    fn extend_row(
        &self,
        streams: &StreamFactory,
        outer: u64,
        inner: Range<u64>,
        row: &mut Moments,
    ) -> Result<()> {
        let table = self.projector.scenario_table(streams, outer)?;
        nested_row(
            self.portfolio,
            &table,
            self.discount_rate,
            streams,
            outer,
            inner,
            |x| row.push(x),
        )
    }

    fn single_scenario(&self) -> bool {
        self.projector.drift.sigma_gamma == 0.0 && !self.projector.drift_uncertainty
    }
}

/// Finite set of tables drawn with given probabilities in each outer
/// scenario. Small instances have exactly computable variance components.
pub struct TableMixture<'a> {
    pub portfolio: &'a Portfolio,
    pub tables: Vec<ClosedTable>,
    cumulative: Vec<f64>,
    pub discount_rate: f64,
}

impl<'a> TableMixture<'a> {
    pub fn new(
        portfolio: &'a Portfolio,
        tables: Vec<ClosedTable>,
        weights: &[f64],
        discount_rate: f64,
    ) -> Result<Self> {
        if tables.is_empty() || tables.len() != weights.len() {
            return Err(Error::arg("need one positive weight per table"));
        }
        if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::arg("mixture weights must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut cumulative: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w / sum;
                acc
            })
            .collect();
        *cumulative.last_mut().unwrap() = 1.0;
        Ok(Self {
            portfolio,
            tables,
            cumulative,
            discount_rate,
        })
    }

    /// Index of the table selected by outer draw `outer`.
    pub fn choose(&self, streams: &StreamFactory, outer: u64) -> usize {
        let u = streams.stream(Domain::ScenarioChoice, &[outer]).uniform();
        self.cumulative
            .partition_point(|&c| c <= u)
            .min(self.tables.len() - 1)
    }
}

impl ScenarioSource for TableMixture<'_> {
    fn extend_row(
        &self,
        streams: &StreamFactory,
        outer: u64,
        inner: Range<u64>,
        row: &mut Moments,
    ) -> Result<()> {
        let table = &self.tables[self.choose(streams, outer)];
        nested_row(
            self.portfolio,
            table,
            self.discount_rate,
            streams,
            outer,
            inner,
            |x| row.push(x),
        )
    }

    fn single_scenario(&self) -> bool {
        self.tables.len() == 1
    }
}

/// Grow `rows` to `n` scenarios of `m` inner runs each.
fn grow<S: ScenarioSource>(
    source: &S,
    streams: &StreamFactory,
    rows: &mut Vec<Moments>,
    n: usize,
    m: usize,
) -> Result<()> {
    rows.resize(n.max(rows.len()), Moments::default());
    rows.par_iter_mut()
        .enumerate()
        .try_for_each(|(outer, row)| {
            let have = row.n;
            if have < m as u64 {
                source.extend_row(streams, outer as u64, have..m as u64, row)?;
            }
            Ok(())
        })
}

/// One nested estimate with `config.n_outer x config.m_inner` draws.
pub fn nested_estimate<S: ScenarioSource>(
    source: &S,
    config: &DecompositionConfig,
) -> Result<Components> {
    if config.n_outer < 2 || config.m_inner < 2 {
        return Err(Error::arg("nested simulation needs N >= 2 and M >= 2"));
    }
    let streams = StreamFactory::new(config.seed);
    let mut rows = Vec::new();
    grow(source, &streams, &mut rows, config.n_outer, config.m_inner)?;
    estimate(&rows, source.single_scenario())
}

/// Doubling schedule: both `N` and `M` double every round, keeping all
/// earlier draws, until `|omega gap| < threshold` and the relative change of
/// the total variance is below the threshold.
pub fn converge_with<S: ScenarioSource>(
    source: &S,
    config: &DecompositionConfig,
) -> Result<DecompositionResult> {
    config.validate()?;
    let streams = StreamFactory::new(config.seed);
    let thr = config.convergence_threshold;
    let mut rows = Vec::new();
    let mut trace: Vec<RoundTrace> = Vec::new();
    for round in 0..config.max_rounds {
        let n = config.n_outer << round;
        let m = config.m_inner << round;
        grow(source, &streams, &mut rows, n, m)?;
        let c = estimate(&rows, source.single_scenario())?;
        let (omega_gap, total_gap) = match trace.last() {
            Some(prev) => {
                let p = &prev.components;
                let total_gap = if p.total > 0.0 {
                    (c.total - p.total).abs() / p.total
                } else if c.total == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                (Some((c.omega - p.omega).abs()), Some(total_gap))
            }
            None => (None, None),
        };
        log::info!(
            "round {round}: N={n} M={m} omega={:.6} total={:.6e}",
            c.omega,
            c.total
        );
        trace.push(RoundTrace {
            round,
            components: c,
            omega_gap,
            total_gap,
        });
        if let (Some(dw), Some(dt)) = (omega_gap, total_gap) {
            if dw < thr && dt < thr {
                return Ok(DecompositionResult {
                    components: c,
                    rounds: round + 1,
                    stopping_rule: stopping_rule(thr),
                    config: config.clone(),
                    trace,
                });
            }
        }
    }
    Err(Error::Convergence { trace })
}

fn stopping_rule(thr: f64) -> String {
    format!("|omega_r - omega_(r-1)| < {thr} and |total_r - total_(r-1)| / total_(r-1) < {thr}")
}

/// Single round at the configured sizes for a projected portfolio.
pub fn nested_simulate(
    portfolio: &Portfolio,
    model: &LeeCarterModel,
    drift: &DriftModel,
    discount_rate: f64,
    terminal_age: i32,
    config: &DecompositionConfig,
) -> Result<DecompositionResult> {
    config.validate()?;
    let source = ProjectedScenarios::new(
        portfolio,
        model,
        drift,
        discount_rate,
        terminal_age,
        config.sigma_scale,
        config.drift_uncertainty,
    )?;
    let c = nested_estimate(&source, config)?;
    Ok(DecompositionResult {
        components: c,
        rounds: 1,
        stopping_rule: "single round".into(),
        config: config.clone(),
        trace: vec![RoundTrace {
            round: 0,
            components: c,
            omega_gap: None,
            total_gap: None,
        }],
    })
}

/// Converged decomposition for a projected portfolio.
pub fn converge(
    portfolio: &Portfolio,
    model: &LeeCarterModel,
    drift: &DriftModel,
    discount_rate: f64,
    terminal_age: i32,
    config: &DecompositionConfig,
) -> Result<DecompositionResult> {
    config.validate()?;
    let source = ProjectedScenarios::new(
        portfolio,
        model,
        drift,
        discount_rate,
        terminal_age,
        config.sigma_scale,
        config.drift_uncertainty,
    )?;
    converge_with(&source, config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaPoint {
    pub sigma_scale: f64,
    pub size_scale: usize,
    pub omega: f64,
    pub omega_se: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
    pub rounds: usize,
}

impl OmegaPoint {
    pub fn from_result(size_scale: usize, r: &DecompositionResult) -> Self {
        Self {
            sigma_scale: r.config.sigma_scale,
            size_scale,
            omega: r.omega(),
            omega_se: r.components.omega_se,
            within: r.within(),
            between: r.between(),
            total: r.total(),
            rounds: r.rounds,
        }
    }
}

/// Converged omega over a grid of volatility and portfolio-size scales,
/// sigma-major. Replicated portfolios get fresh death draws.
#[allow(clippy::too_many_arguments)]
pub fn omega_curve(
    portfolio: &Portfolio,
    model: &LeeCarterModel,
    drift: &DriftModel,
    discount_rate: f64,
    terminal_age: i32,
    config: &DecompositionConfig,
    sigma_scales: &[f64],
    size_scales: &[usize],
) -> Result<Vec<OmegaPoint>> {
    if sigma_scales.is_empty() || size_scales.is_empty() {
        return Err(Error::arg(
            "omega curve needs at least one scale of each kind",
        ));
    }
    let mut out = Vec::with_capacity(sigma_scales.len() * size_scales.len());
    for &sigma_scale in sigma_scales {
        for &size_scale in size_scales {
            let p = portfolio.replicate(size_scale)?;
            let cfg = DecompositionConfig {
                sigma_scale,
                ..config.clone()
            };
            let r = converge(&p, model, drift, discount_rate, terminal_age, &cfg)?;
            out.push(OmegaPoint::from_result(size_scale, &r));
        }
    }
    Ok(out)
}

pub fn write_omega_csv<W: Write>(points: &[OmegaPoint], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "sigma_scale,size_scale,omega,within,between,total,rounds"
    )?;
    for p in points {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.sigma_scale, p.size_scale, p.omega, p.within, p.between, p.total, p.rounds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annuity::Annuitant;
    use ndarray::array;

    #[test]
    fn within_examples() {
        assert_eq!(
            estimate_within(&[vec![3.0, 3.0], vec![5.0, 5.0]]).unwrap(),
            0.0
        );
        assert_eq!(estimate_within(&[vec![0.0, 2.0]]).unwrap(), 2.0);
        assert!(matches!(
            estimate_within(&[vec![1.0]]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn between_examples() {
        assert_eq!(
            estimate_between(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap(),
            0.0
        );
        assert_eq!(
            estimate_between(&[vec![0.0, 0.0], vec![2.0, 2.0]]).unwrap(),
            2.0
        );
        assert!(matches!(
            estimate_between(&[vec![1.0, 2.0]]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn omega_examples() {
        assert_eq!(omega(1.0, 0.0).unwrap(), 0.0);
        assert_eq!(omega(0.0, 2.0).unwrap(), 1.0);
        assert_eq!(omega(3.0, 1.0).unwrap(), 0.25);
        assert!(matches!(omega(0.0, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn components_adjust_and_floor() {
        let rows: Vec<Moments> = [vec![0.0, 2.0], vec![1.0, 1.0]]
            .iter()
            .map(|r| Moments::from_slice(r))
            .collect();
        let c = components(&rows).unwrap();
        assert_eq!(c.within, 1.0);
        assert_eq!(c.between_raw, 0.0);
        assert_eq!(c.between, 0.0);
        assert_eq!(c.omega, 0.0);
        assert_eq!(c.grand_mean, 1.0);
    }

    fn toy() -> (Portfolio, Vec<ClosedTable>) {
        let p = Portfolio::new(
            2000,
            vec![Annuitant {
                id: "a".into(),
                age: 60,
                rent: 1.0,
            }],
        )
        .unwrap();
        let t = |q: f64| ClosedTable::from_rates(60, 2000, array![[q, q], [1.0, 1.0]]).unwrap();
        (p, vec![t(0.2), t(0.4)])
    }

    #[test]
    fn mixture_rows_are_bernoulli() {
        let (p, tables) = toy();
        let mix = TableMixture::new(&p, tables, &[1.0, 1.0], 0.0).unwrap();
        let streams = StreamFactory::new(4);
        let mut row = Moments::default();
        mix.extend_row(&streams, 0, 0..500, &mut row).unwrap();
        assert_eq!(row.n, 500);
        assert!(row.mean > 0.4 && row.mean < 0.95);
    }

    #[test]
    fn extension_matches_single_pass() {
        let (p, tables) = toy();
        let mix = TableMixture::new(&p, tables, &[1.0, 1.0], 0.0).unwrap();
        let streams = StreamFactory::new(9);
        let mut a = Vec::new();
        grow(&mix, &streams, &mut a, 3, 4).unwrap();
        grow(&mix, &streams, &mut a, 6, 8).unwrap();
        let mut b = Vec::new();
        grow(&mix, &streams, &mut b, 6, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.n, y.n);
            assert!((x.mean - y.mean).abs() < 1e-15);
        }
    }

    #[test]
    fn threshold_one_stops_after_two_rounds() {
        let (p, tables) = toy();
        let mix = TableMixture::new(&p, tables, &[1.0, 1.0], 0.0).unwrap();
        let cfg = DecompositionConfig {
            n_outer: 10,
            m_inner: 10,
            convergence_threshold: 1.0,
            ..Default::default()
        };
        let r = converge_with(&mix, &cfg).unwrap();
        assert_eq!(r.rounds, 2);
        assert_eq!(r.trace.len(), 2);
        assert!((0.0..=1.0).contains(&r.omega()));
    }

    #[test]
    fn non_convergence_carries_trace() {
        let (p, tables) = toy();
        let mix = TableMixture::new(&p, tables, &[1.0, 1.0], 0.0).unwrap();
        let cfg = DecompositionConfig {
            n_outer: 20,
            m_inner: 20,
            convergence_threshold: 1e-12,
            max_rounds: 3,
            ..Default::default()
        };
        match converge_with(&mix, &cfg) {
            Err(Error::Convergence { trace }) => assert_eq!(trace.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = DecompositionConfig {
            m_inner: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = DecompositionConfig {
            convergence_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(DecompositionConfig::default().validate().is_ok());
    }

    #[test]
    fn omega_csv_header() {
        let mut buf = Vec::new();
        write_omega_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sigma_scale,size_scale,omega,within,between,total,rounds\n"
        );
    }
}

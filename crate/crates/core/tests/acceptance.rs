//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::{Duration, Instant};

use longevity_core::annuity::{
    expected_flows, projector_for, reserve, sample_death_time, simulate_lambda,
    simulate_lambda_stochastic, Annuitant, Portfolio, SurvivalSchedule,
};
use longevity_core::decomposition::{
    converge_with, nested_estimate, omega_curve, DecompositionConfig, OmegaPoint, TableMixture,
};
use longevity_core::leecarter::{fit, LeeCarterModel};
use longevity_core::mortality_data::{ClosedTable, MortalitySurface};
use longevity_core::projection::{
    build_surface, fit_drift_to_model, sample_k_path, DriftModel, SurfaceKind,
};
use longevity_core::rng::{Domain, StreamFactory};
use longevity_core::stats::Moments;
use longevity_core::synthetic::{HistorySpec, PortfolioSpec};
use ndarray::{array, Array2};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const RATE: f64 = 0.025;
const TERMINAL_AGE: i32 = 120;
const SIMS: usize = 20_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn se_of(m: &Moments) -> f64 {
    (m.sample_variance().unwrap() / m.n as f64).sqrt()
}

fn lee_carter_round_trip() -> Outcome {
    let (n_ages, n_years) = (40, 30);
    let mut s = StreamFactory::new(1).stream(Domain::User, &[10]);
    let alpha: Vec<f64> = (0..n_ages).map(|i| -7.5 + 0.09 * i as f64).collect();
    let raw: Vec<f64> = (0..n_ages).map(|_| 0.5 + s.uniform()).collect();
    let sum: f64 = raw.iter().sum();
    let beta: Vec<f64> = raw.iter().map(|b| b / sum).collect();
    let mut k: Vec<f64> = (0..n_years)
        .map(|j| -2.0 * j as f64 + 3.0 * s.standard_normal())
        .collect();
    let mean = k.iter().sum::<f64>() / n_years as f64;
    k.iter_mut().for_each(|v| *v -= mean);
    let q = Array2::from_shape_fn((n_ages, n_years), |(i, j)| {
        -(-(alpha[i] + beta[i] * k[j]).exp()).exp_m1()
    });
    let surface = MortalitySurface::new(40, 1970, q).unwrap();
    let start = Instant::now();
    let m = fit(&surface).unwrap();
    let elapsed = start.elapsed();
    let err = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    let (ea, eb, ek) = (err(&m.alpha, &alpha), err(&m.beta, &beta), err(&m.k, &k));
    outcome(
        ea < 1e-8 && eb < 1e-6 && ek < 1e-6 && m.explained_variance >= 1.0 - 1e-10 && elapsed < Duration::from_secs(1),
        format!(
            "max|d alpha|={ea:.2e} max|d beta|={eb:.2e} max|d k|={ek:.2e} explained={:.12} time={elapsed:?}",
            m.explained_variance
        ),
    )
}

fn constraint_suite() -> Outcome {
    let mut worst_beta: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    let mut pass = true;
    for case in 0..50u64 {
        let spec = HistorySpec {
            seed: 1000 + case,
            age_min: 40 + (case % 7) as i32,
            year_min: 1950 + (case % 5) as i32,
            cell_noise_sd: 0.02 + 0.001 * case as f64,
            ..Default::default()
        };
        let surface = spec.generate().unwrap();
        let m = fit(&surface).unwrap();
        let db = (m.beta.iter().sum::<f64>() - 1.0).abs();
        let dk = m.k.iter().sum::<f64>().abs();
        worst_beta = worst_beta.max(db);
        worst_k = worst_k.max(dk / m.n_years() as f64);
        pass &= db < 1e-10 && dk < 1e-8 * m.n_years() as f64;
    }
    outcome(
        pass,
        format!("50 fits: max|sum beta - 1|={worst_beta:.2e} max|sum k|/n_years={worst_k:.2e}"),
    )
}

fn bias_identity() -> Outcome {
    let sigma = 0.1;
    let model = LeeCarterModel::from_parameters(
        70,
        1971,
        vec![-3.5],
        vec![1.0],
        (0..30).map(|j| 15.0 - j as f64).collect(),
    )
    .unwrap();
    let drift = DriftModel {
        a: -1.0,
        b: 1985.0,
        sigma_gamma: sigma,
        cov_ab: [[0.0; 2]; 2],
        n_obs: 30,
        year_min: 1971,
        year_max: 2000,
    };
    let hazard = |q: f64| -(-q).ln_1p();
    let trend = build_surface(
        &model,
        70,
        2001,
        &[drift.trend(2001)],
        SurfaceKind::Deterministic,
        0.0,
    )
    .unwrap();
    let mu0 = hazard(trend.q[[0, 0]]);
    let streams = StreamFactory::new(33);
    let start = Instant::now();
    let (mut raw, mut corrected) = (Moments::default(), Moments::default());
    for s in 0..200_000 {
        let k = sample_k_path(&drift, &[2001], &streams, s).unwrap();
        let r = build_surface(&model, 70, 2001, &k, SurfaceKind::StochasticRaw, sigma).unwrap();
        let c = build_surface(
            &model,
            70,
            2001,
            &k,
            SurfaceKind::StochasticCorrected,
            sigma,
        )
        .unwrap();
        raw.push(hazard(r.q[[0, 0]]) / mu0);
        corrected.push(hazard(c.q[[0, 0]]) / mu0);
    }
    let elapsed = start.elapsed();
    let target = (sigma * sigma / 2.0f64).exp();
    let ok_raw = (raw.mean - target).abs() < 3.0 * se_of(&raw);
    let ok_cor = (corrected.mean - 1.0).abs() < 3.0 * se_of(&corrected);
    outcome(
        ok_raw && ok_cor && elapsed < Duration::from_secs(5),
        format!(
            "raw mean={:.7} (target {target:.7}, se {:.1e}) corrected mean={:.7} (se {:.1e}) time={elapsed:?}",
            raw.mean,
            se_of(&raw),
            corrected.mean,
            se_of(&corrected)
        ),
    )
}

struct Setup {
    portfolio: Portfolio,
    model: LeeCarterModel,
    drift: DriftModel,
}

fn setup() -> Setup {
    let surface = HistorySpec::default().generate().unwrap();
    let model = fit(&surface).unwrap();
    let drift = fit_drift_to_model(&model).unwrap();
    let portfolio = PortfolioSpec::default().generate().unwrap();
    Setup {
        portfolio,
        model,
        drift,
    }
}

fn engagement_run(
    s: &Setup,
) -> (
    f64,
    longevity_core::annuity::LiabilityDistribution,
    Duration,
) {
    let table = projector_for(&s.portfolio, &s.model, &s.drift, TERMINAL_AGE)
        .unwrap()
        .deterministic_table()
        .unwrap();
    let l0 = reserve(&expected_flows(&s.portfolio, &table).unwrap(), RATE).unwrap();
    let start = Instant::now();
    let dist =
        simulate_lambda(&s.portfolio, &table, RATE, SIMS, &StreamFactory::new(2006)).unwrap();
    (l0, dist, start.elapsed())
}

fn engagement_unbiased(s: &Setup) -> Outcome {
    let (l0, dist, elapsed) = engagement_run(s);
    let sum = dist.summarize().unwrap();
    let band = 3.0 * sum.sd / (SIMS as f64).sqrt();
    outcome(
        (sum.mean - l0).abs() < band && elapsed < Duration::from_secs(2),
        format!(
            "L0={l0:.2} mean={:.2} |diff|={:.2} < {band:.2} time={elapsed:?}",
            sum.mean,
            (sum.mean - l0).abs()
        ),
    )
}

fn inversion_law() -> Outcome {
    let schedule = SurvivalSchedule::from_rates(&[0.1, 0.2, 0.3, 1.0]).unwrap();
    let p = [0.1, 0.18, 0.216, 0.504];
    let n = 1_000_000u64;
    let streams = StreamFactory::new(5);
    let mut counts = [0u64; 4];
    for i in 0..n {
        counts[sample_death_time(&schedule, streams.stream(Domain::Death, &[i, 0]).uniform())] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(p)
        .map(|(&c, p)| (c as f64 - p * n as f64).powi(2) / (p * n as f64))
        .sum();
    let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
    outcome(
        stat < critical,
        format!("counts={counts:?} chi2={stat:.3} < {critical:.3} (df 3, 1%)"),
    )
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
    let tables = [0.2, 0.4]
        .iter()
        .map(|&q| ClosedTable::from_rates(60, 2000, array![[q, q], [1.0, 1.0]]).unwrap())
        .collect();
    (p, tables)
}

/// Exact expectation of the floored adjusted between statistic with three
/// scenarios of three inner runs each.
fn micro_adjusted_expectation() -> f64 {
    let mut law = [0.0; 4];
    for q in [0.2f64, 0.4] {
        for (c, b) in [1.0, 3.0, 3.0, 1.0].iter().enumerate() {
            law[c] += 0.5 * b * (1.0 - q).powi(c as i32) * q.powi(3 - c as i32);
        }
    }
    let mut e = 0.0;
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                let k = [a, b, c].map(|v| v as f64);
                let means = k.map(|v| v / 3.0);
                let within = k.iter().map(|v| (v - v * v / 3.0) / 2.0).sum::<f64>() / 3.0;
                let g = means.iter().sum::<f64>() / 3.0;
                let raw = means.iter().map(|m| (m - g).powi(2)).sum::<f64>() / 2.0;
                e += law[a] * law[b] * law[c] * (raw - within / 3.0).max(0.0);
            }
        }
    }
    e
}

fn toy_converged() -> longevity_core::decomposition::DecompositionResult {
    let (p, tables) = toy();
    let mix = TableMixture::new(&p, tables, &[1.0, 1.0], 0.0).unwrap();
    converge_with(
        &mix,
        &DecompositionConfig {
            seed: 2006,
            ..Default::default()
        },
    )
    .unwrap()
}

fn total_variance_oracle() -> Outcome {
    let (within, between, total) = (0.20, 0.01, 0.21);
    let omega = between / total;
    let r = toy_converged();
    let c = r.components;
    let ok_w = (c.within - within).abs() < 3.0 * c.within_se;
    let ok_b = (c.between - between).abs() < 3.0 * c.between_se;
    let ok_o = (c.omega - omega).abs() < 3.0 * c.omega_se;

    let (p, tables) = toy();
    let mix = TableMixture::new(&p, tables, &[1.0, 1.0], 0.0).unwrap();
    let mut adjusted = Moments::default();
    for seed in 0..5000 {
        let c = nested_estimate(
            &mix,
            &DecompositionConfig {
                n_outer: 3,
                m_inner: 3,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        adjusted.push(c.between);
    }
    let expected = micro_adjusted_expectation();
    let ok_micro = (adjusted.mean - expected).abs() < 3.0 * se_of(&adjusted);
    outcome(
        ok_w && ok_b && ok_o && ok_micro,
        format!(
            "rounds={} within={:.5}±{:.5} between={:.5}±{:.5} omega={:.5}±{:.5} (exact 0.2/0.01/{omega:.5}); micro adjusted mean={:.5} vs exact {expected:.5} (se {:.5})",
            r.rounds, c.within, c.within_se, c.between, c.between_se, c.omega, c.omega_se,
            adjusted.mean, se_of(&adjusted)
        ),
    )
}

fn collapse(s: &Setup) -> Outcome {
    let streams = StreamFactory::new(77);
    let flat = s.drift.with_sigma_scale(0.0).unwrap();
    let projector = projector_for(&s.portfolio, &s.model, &flat, TERMINAL_AGE).unwrap();
    let det = simulate_lambda(
        &s.portfolio,
        &projector.deterministic_table().unwrap(),
        RATE,
        2_000,
        &streams,
    )
    .unwrap();
    let sto = simulate_lambda_stochastic(&s.portfolio, &projector, RATE, 2_000, &streams).unwrap();
    let identical = det
        .samples
        .iter()
        .zip(&sto.samples)
        .all(|(a, b)| a.to_bits() == b.to_bits());
    outcome(
        identical && det.samples.len() == sto.samples.len(),
        format!("2000 samples bit-identical: {identical}"),
    )
}

struct Pair {
    det_sd: f64,
    det_cv: f64,
    sto_sd: f64,
    sto_cv: f64,
}

fn det_vs_stochastic(s: &Setup, size: usize, sigma_scale: f64) -> Pair {
    let p = s.portfolio.replicate(size).unwrap();
    let streams = StreamFactory::new(2006);
    let base = projector_for(&p, &s.model, &s.drift, TERMINAL_AGE).unwrap();
    let det = simulate_lambda(
        &p,
        &base.deterministic_table().unwrap(),
        RATE,
        SIMS,
        &streams,
    )
    .unwrap()
    .summarize()
    .unwrap();
    let scaled = projector_for(
        &p,
        &s.model,
        &s.drift.with_sigma_scale(sigma_scale).unwrap(),
        TERMINAL_AGE,
    )
    .unwrap();
    let sto = simulate_lambda_stochastic(&p, &scaled, RATE, SIMS, &streams)
        .unwrap()
        .summarize()
        .unwrap();
    Pair {
        det_sd: det.sd,
        det_cv: det.cv,
        sto_sd: sto.sd,
        sto_cv: sto.cv,
    }
}

fn monotone(points: &[OmegaPoint]) -> bool {
    points.windows(2).all(|w| {
        let tol = 3.0 * w[0].omega_se.hypot(w[1].omega_se);
        w[1].omega >= w[0].omega - tol
    })
}

fn describe(points: &[OmegaPoint]) -> String {
    points
        .iter()
        .map(|p| {
            format!(
                "(sigma x{}, size x{}): {:.4}±{:.4} [{} rounds]",
                p.sigma_scale, p.size_scale, p.omega, p.omega_se, p.rounds
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn omega_config() -> DecompositionConfig {
    DecompositionConfig {
        n_outer: 400,
        m_inner: 10,
        convergence_threshold: 2e-2,
        max_rounds: 4,
        seed: 2006,
        ..Default::default()
    }
}

fn reference_patterns(s: &Setup) -> Vec<(&'static str, Outcome)> {
    let mut out = Vec::new();

    let start = Instant::now();
    let base = det_vs_stochastic(s, 1, 1.0);
    let gap = (base.sto_cv - base.det_cv).abs() * 100.0;
    out.push((
        "8a",
        outcome(
            (0.01..=0.025).contains(&base.det_cv)
                && (0.01..=0.025).contains(&base.sto_cv)
                && gap <= 0.1,
            format!(
                "cv deterministic={:.3}% stochastic={:.3}% gap={gap:.3} pp time={:?}",
                base.det_cv * 100.0,
                base.sto_cv * 100.0,
                start.elapsed()
            ),
        ),
    ));

    let start = Instant::now();
    let high = det_vs_stochastic(s, 1, 10.0);
    let rise = (high.sto_cv - high.det_cv) * 100.0;
    out.push((
        "8b",
        outcome(
            rise >= 0.3,
            format!(
                "sigma x10: cv {:.3}% -> {:.3}% (+{rise:.3} pp) time={:?}",
                high.det_cv * 100.0,
                high.sto_cv * 100.0,
                start.elapsed()
            ),
        ),
    ));

    let start = Instant::now();
    let big = det_vs_stochastic(s, 100, 1.0);
    let ratio = big.sto_sd / big.det_sd;
    out.push((
        "8c",
        outcome(
            (1.10..=1.40).contains(&ratio),
            format!(
                "size x100: sd deterministic={:.0} stochastic={:.0} ratio={ratio:.3} time={:?}",
                big.det_sd,
                big.sto_sd,
                start.elapsed()
            ),
        ),
    ));

    let start = Instant::now();
    let cfg = omega_config();
    let by_sigma = omega_curve(
        &s.portfolio,
        &s.model,
        &s.drift,
        RATE,
        TERMINAL_AGE,
        &cfg,
        &[0.0, 1.0, 5.0, 10.0],
        &[1],
    );
    let by_size = omega_curve(
        &s.portfolio,
        &s.model,
        &s.drift,
        RATE,
        TERMINAL_AGE,
        &cfg,
        &[1.0],
        &[1, 10, 100],
    );
    let d = match (by_sigma, by_size) {
        (Ok(a), Ok(b)) => outcome(
            monotone(&a) && monotone(&b),
            format!(
                "by sigma: {}; by size: {}; time={:?}",
                describe(&a),
                describe(&b),
                start.elapsed()
            ),
        ),
        (a, b) => outcome(
            false,
            format!("omega curve failed: {:?} / {:?}", a.err(), b.err()),
        ),
    };
    out.push(("8d", d));
    out
}

fn thread_determinism(s: &Setup) -> Outcome {
    let payload = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| {
                let (_, dist, _) = engagement_run(s);
                let mut bytes = serde_json::to_vec(&dist).unwrap();
                bytes.extend(serde_json::to_vec(&toy_converged()).unwrap());
                bytes
            })
    };
    let one = payload(1);
    let four = payload(4);
    let eight = payload(8);
    outcome(
        one == four && one == eight,
        format!(
            "{} bytes; 1 vs 4: {}, 1 vs 8: {}",
            one.len(),
            one == four,
            one == eight
        ),
    )
}

fn main() {
    let s = setup();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("1", lee_carter_round_trip()),
        ("2", constraint_suite()),
        ("3", bias_identity()),
        ("4", engagement_unbiased(&s)),
        ("5", inversion_law()),
        ("6", total_variance_oracle()),
        ("7", collapse(&s)),
    ];
    results.extend(reference_patterns(&s));
    results.push(("9", thread_determinism(&s)));

    let mut failed = 0;
    for (id, o) in &results {
        println!(
            "{} criterion {id}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += usize::from(!o.pass);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

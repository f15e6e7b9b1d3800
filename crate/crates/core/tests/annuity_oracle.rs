//! Annuity engine against enumeration and per-year Bernoulli references.

use longevity_core::annuity::{
    build_schedule, expected_flows, reserve, sample_death_time, simulate_lambda, Annuitant,
    Portfolio, SurvivalSchedule,
};
use longevity_core::mortality_data::ClosedTable;
use longevity_core::rng::{Domain, StreamFactory};
use ndarray::{array, Array2};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn toy_table() -> ClosedTable {
    ClosedTable::from_rates(
        60,
        2000,
        array![
            [0.10, 0.12, 0.14, 0.16],
            [0.20, 0.22, 0.24, 0.26],
            [0.30, 0.33, 0.36, 0.39],
            [1.0, 1.0, 1.0, 1.0],
        ],
    )
    .unwrap()
}

fn toy_portfolio() -> Portfolio {
    Portfolio::new(
        2000,
        vec![
            Annuitant {
                id: "a".into(),
                age: 60,
                rent: 1.0,
            },
            Annuitant {
                id: "b".into(),
                age: 61,
                rent: 2.5,
            },
            Annuitant {
                id: "c".into(),
                age: 62,
                rent: 4.0,
            },
        ],
    )
    .unwrap()
}

/// Death probability of annuitant `a` during projection year `s` (0-based).
fn q_at(table: &ClosedTable, a: &Annuitant, s: i32) -> f64 {
    table.q(a.age + s, 2000 + s).unwrap_or(1.0)
}

#[test]
fn flows_match_enumeration_of_survival_outcomes() {
    let table = toy_table();
    let p = toy_portfolio();
    let years = 3;
    let n_coins = p.len() * years;
    let mut flows = vec![0.0; years];
    // One coin per annuitant and year; a set bit means "dies this year if
    // still alive". Every outcome sequence is enumerated with its weight.
    for outcome in 0u32..(1 << n_coins) {
        let mut weight = 1.0;
        let mut paid = vec![0.0; years];
        for (j, a) in p.annuitants.iter().enumerate() {
            let mut alive = true;
            for s in 0..years {
                let dies = outcome >> (j * years + s) & 1 == 1;
                let q = q_at(&table, a, s as i32);
                weight *= if dies { q } else { 1.0 - q };
                alive &= !dies;
                if alive {
                    paid[s] += a.rent;
                }
            }
        }
        for (f, x) in flows.iter_mut().zip(&paid) {
            *f += weight * x;
        }
    }
    let got = expected_flows(&p, &table).unwrap();
    assert_eq!(got.len(), 3);
    for (g, e) in got.iter().zip(&flows) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn inversion_law_equals_bernoulli_walk_law() {
    let table = toy_table();
    for a in toy_portfolio().annuitants {
        let schedule = build_schedule(&a, &table, 2000).unwrap();
        let len = schedule.len();
        let mut law = vec![0.0; len];
        for coins in 0u32..(1 << len) {
            let mut weight = 1.0;
            let mut death = None;
            for s in 0..len {
                let dies = coins >> s & 1 == 1;
                let q = q_at(&table, &a, s as i32);
                weight *= if dies { q } else { 1.0 - q };
                if dies && death.is_none() {
                    death = Some(s);
                }
            }
            if let Some(t) = death {
                law[t] += weight;
            }
        }
        for (p, e) in schedule.p.iter().zip(&law) {
            assert!((p - e).abs() < 1e-15, "{}: {p} vs {e}", a.id);
        }
        // Exact law of the inversion sampler: the measure of the set of u
        // mapped to each death time.
        let mut edges = vec![0.0];
        edges.extend(schedule.cumulative.iter().copied());
        for t in 0..len {
            assert!(((edges[t + 1] - edges[t]) - law[t]).abs() < 1e-15);
            if edges[t + 1] > edges[t] {
                assert_eq!(sample_death_time(&schedule, edges[t]), t);
            }
        }
    }
}

#[test]
fn inversion_draws_pass_chi_square() {
    let schedule = SurvivalSchedule::from_rates(&[0.1, 0.2, 0.3, 1.0]).unwrap();
    let expected = [0.1, 0.18, 0.216, 0.504];
    let n = 1_000_000u64;
    let f = StreamFactory::new(2024);
    let mut counts = [0u64; 4];
    for i in 0..n {
        let u = f.stream(Domain::User, &[i]).uniform();
        counts[sample_death_time(&schedule, u)] += 1;
    }
    let stat: f64 = counts
        .iter()
        .zip(expected)
        .map(|(&c, p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let critical = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
    assert!(stat < critical, "{stat} >= {critical}");
}

/// Reference simulator that flips one survival coin per annuitant and year.
fn bernoulli_liability(
    p: &Portfolio,
    table: &ClosedTable,
    i: f64,
    s: &StreamFactory,
    n: u64,
) -> f64 {
    let v = 1.0 / (1.0 + i);
    let mut total = 0.0;
    for (j, a) in p.annuitants.iter().enumerate() {
        let mut st = s.stream(Domain::User, &[n, j as u64]);
        let mut d = 1.0;
        let mut year = 0;
        loop {
            let q = q_at(table, a, year);
            if st.uniform() < q {
                break;
            }
            year += 1;
            d *= v;
            total += a.rent * d;
        }
    }
    total
}

#[test]
fn inversion_and_bernoulli_simulations_agree() {
    let table = toy_table();
    let p = toy_portfolio();
    let n = 50_000;
    let f = StreamFactory::new(12);
    let inv = simulate_lambda(&p, &table, 0.03, n, &f)
        .unwrap()
        .summarize()
        .unwrap();
    let walk: Vec<f64> = (0..n as u64)
        .map(|k| bernoulli_liability(&p, &table, 0.03, &f, k))
        .collect();
    let m = longevity_core::stats::Moments::from_slice(&walk);
    let se = (inv.sd.powi(2) / n as f64 + m.sample_variance().unwrap() / n as f64).sqrt();
    assert!((inv.mean - m.mean).abs() < 3.0 * se);
    let l0 = reserve(&expected_flows(&p, &table).unwrap(), 0.03).unwrap();
    assert!((m.mean - l0).abs() < 3.0 * (m.sample_variance().unwrap() / n as f64).sqrt());
}

#[test]
fn unbiased_over_repeated_seeds() {
    let table = toy_table();
    let p = toy_portfolio();
    let l0 = reserve(&expected_flows(&p, &table).unwrap(), 0.025).unwrap();
    let mut misses = 0;
    for seed in 0..40 {
        let s = simulate_lambda(&p, &table, 0.025, 5_000, &StreamFactory::new(seed))
            .unwrap()
            .summarize()
            .unwrap();
        if (s.mean - l0).abs() > 3.0 * s.sd / (5_000f64).sqrt() {
            misses += 1;
        }
    }
    // Each run misses the 3-SE band with probability 0.27%.
    assert!(misses <= 2, "{misses}");
}

#[test]
fn thread_count_does_not_change_samples() {
    let table = toy_table();
    let p = toy_portfolio().replicate(20).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate_lambda(&p, &table, 0.025, 3_000, &StreamFactory::new(5)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
}

fn random_table(cells: &[f64]) -> Array2<f64> {
    let mut q = Array2::from_shape_fn((5, 5), |(i, j)| cells[i * 5 + j]);
    q.row_mut(4).fill(1.0);
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn higher_mortality_never_raises_a_realisation(
        cells in proptest::collection::vec(0.0f64..0.9, 25),
        bump in 0.0f64..0.5,
        seed in 0u64..1000,
    ) {
        let low = random_table(&cells);
        let high = low.mapv(|q| q + bump * (1.0 - q));
        let low = ClosedTable::from_rates(60, 2000, low).unwrap();
        let high = ClosedTable::from_rates(60, 2000, high).unwrap();
        let p = Portfolio::new(2000, vec![
            Annuitant { id: "a".into(), age: 60, rent: 3.0 },
            Annuitant { id: "b".into(), age: 62, rent: 1.0 },
        ]).unwrap();
        let f = StreamFactory::new(seed);
        let a = simulate_lambda(&p, &low, 0.02, 200, &f).unwrap();
        let b = simulate_lambda(&p, &high, 0.02, 200, &f).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            prop_assert!(y <= x);
        }
    }

    #[test]
    fn schedules_are_distributions(q in proptest::collection::vec(0.0f64..=1.0, 0..30)) {
        let mut q = q;
        q.push(1.0);
        let s = SurvivalSchedule::from_rates(&q).unwrap();
        prop_assert!(s.p.iter().all(|&p| p >= 0.0));
        prop_assert!((s.p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(s.cumulative.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*s.cumulative.last().unwrap(), 1.0);
    }

    #[test]
    fn survival_factors_do_not_increase(q in proptest::collection::vec(0.0f64..=1.0, 1..30)) {
        let mut q = q;
        q.push(1.0);
        let s = SurvivalSchedule::from_rates(&q).unwrap();
        for t in 0..q.len() {
            prop_assert!(s.survival(t + 1) <= s.survival(t));
        }
    }
}

//! Addressable random substreams.
//!
//! Every random draw in the crate comes from a substream identified by a
//! root seed, a [`Domain`] tag and a short path of indices such as
//! `(realization, annuitant)` or `(scenario, year)`. The path is hashed into
//! the starting state of a SplitMix64 generator, so a substream can be
//! rebuilt anywhere from its address alone. Results therefore never depend
//! on the order in which work items are evaluated or on the worker count.

use rand::distr::{Open01, StandardUniform};
use rand::{Rng, RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

use crate::normal::inverse_normal_cdf;

/// What a substream is used for. Distinct tags keep draws for different
/// purposes disjoint even when their index paths coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    /// Death time of one annuitant in one single-level realization.
    Death = 1,
    /// Gaussian noise of the time index for one scenario and one year.
    TimeIndexNoise = 2,
    /// Draw of the drift parameters `(a, b)` for one scenario.
    DriftParams = 3,
    /// Death time of one annuitant in one inner run of a nested simulation.
    NestedDeath = 4,
    /// Free-form use by callers and tests.
    User = 5,
    /// Choice among a finite set of scenarios for one outer draw.
    ScenarioChoice = 6,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Root of the substream tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    seed: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Starting state of the substream at `(domain, path)`.
    pub fn key(&self, domain: Domain, path: &[u64]) -> u64 {
        self.prefix(domain, path).h
    }

    pub fn stream(&self, domain: Domain, path: &[u64]) -> Substream {
        Substream {
            rng: SplitMix64::seed_from_u64(self.key(domain, path)),
        }
    }

    /// Partial address; children extend `path` by one index. Hashing the
    /// common prefix once makes tight loops over the last index cheap.
    pub fn prefix(&self, domain: Domain, path: &[u64]) -> StreamPrefix {
        let h = mix64(self.seed ^ GOLDEN_GAMMA);
        let mut p = StreamPrefix {
            h: mix64(h.wrapping_add((domain as u64).wrapping_mul(GOLDEN_GAMMA))),
            depth: 0,
        };
        for &idx in path {
            p = p.extend(idx);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamPrefix {
    h: u64,
    depth: u64,
}

impl StreamPrefix {
    #[inline]
    fn extend(self, idx: u64) -> Self {
        // Depth is folded in so that (1, 0) and (0, 1) land apart.
        let salt = (self.depth + 1).wrapping_mul(0xd6e8_feb8_6659_fd93);
        Self {
            h: mix64(self.h ^ idx.wrapping_add(salt)).wrapping_add(GOLDEN_GAMMA),
            depth: self.depth + 1,
        }
    }

    #[inline]
    pub fn child(&self, idx: u64) -> Self {
        self.extend(idx)
    }

    /// Substream at `prefix ++ [idx]`.
    #[inline]
    pub fn stream(&self, idx: u64) -> Substream {
        Substream {
            rng: SplitMix64::seed_from_u64(self.extend(idx).h),
        }
    }
}

/// A sequential generator for one address.
#[derive(Debug, Clone)]
pub struct Substream {
    rng: SplitMix64,
}

impl Substream {
    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.rng.sample(StandardUniform)
    }

    /// Uniform on the open interval `(0, 1)`.
    #[inline]
    pub fn open_uniform(&mut self) -> f64 {
        self.rng.sample(Open01)
    }

    /// Standard normal draw by inversion of one open uniform.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.open_uniform())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_address_same_draws() {
        let f = StreamFactory::new(42);
        let a: Vec<f64> = {
            let mut s = f.stream(Domain::Death, &[3, 7]);
            (0..5).map(|_| s.uniform()).collect()
        };
        let b: Vec<f64> = {
            let mut s = f.stream(Domain::Death, &[3, 7]);
            (0..5).map(|_| s.uniform()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_matches_full_path() {
        let f = StreamFactory::new(11);
        let p = f.prefix(Domain::NestedDeath, &[4]);
        let mut a = p.child(9).stream(2);
        let mut b = f.stream(Domain::NestedDeath, &[4, 9, 2]);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_eq!(p.child(9), f.prefix(Domain::NestedDeath, &[4, 9]));
    }

    #[test]
    fn addresses_are_distinct() {
        let f = StreamFactory::new(42);
        let keys = [
            f.key(Domain::Death, &[0, 1]),
            f.key(Domain::Death, &[1, 0]),
            f.key(Domain::Death, &[1]),
            f.key(Domain::NestedDeath, &[0, 1]),
            StreamFactory::new(43).key(Domain::Death, &[0, 1]),
        ];
        for i in 0..keys.len() {
            for j in (i + 1)..keys.len() {
                assert_ne!(keys[i], keys[j], "{i} vs {j}");
            }
        }
    }

    #[test]
    fn first_draws_across_addresses_look_uniform() {
        // One draw per address is how death times are sampled, so the
        // first output across consecutive addresses must be uniform.
        let f = StreamFactory::new(7);
        let n = 100_000;
        let mut bins = [0usize; 10];
        let mut sum = 0.0;
        for i in 0..n {
            let u = f.stream(Domain::Death, &[i, 0]).uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
            bins[(u * 10.0) as usize] += 1;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0f64).sqrt() / (n as f64).sqrt());
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 df, 0.1% critical value
        assert!(chi2 < 27.88, "chi2 = {chi2}");
    }
}

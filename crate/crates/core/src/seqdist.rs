//! Sequence-length distributions and decode-phase completion probabilities.
//!
//! Serving workloads are described by two discrete distributions: one over
//! input lengths (tokens consumed by encoding) and one over output lengths
//! (decoding iterations until a query finishes). From the output
//! distribution we derive, for a phase of `n_d` decoding iterations, the
//! probability that a query finishes at iteration `U` of its current
//! phase. Summing that distribution gives the expected fraction of a
//! decode batch that completes per phase, which ties encoder and decoder
//! batch sizes together.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use libm::{erf, round, sqrt};
use rand_core::RngCore;

use crate::{Error, Result};

/// Probabilities smaller than this are dropped from a PMF and the rest
/// renormalized, bounding support size.
const PRUNE_EPS: f64 = 1e-12;

/// Discrete probability mass over sequence lengths, in tokens.
///
/// Support is a subset of `[1, max_len]`; probabilities are stored
/// sparsely, sorted by length, and sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthPmf {
    entries: Vec<(u32, f64)>,
    max_len: u32,
}

impl LengthPmf {
    /// Builds a PMF from raw `(length, probability)` pairs, enforcing the
    /// type invariants (support in `[1, max_len]`, non-negative mass,
    /// total within 1e-9 of 1 before renormalization).
    pub fn from_entries(entries: &[(u32, f64)], max_len: u32) -> Result<Self> {
        if max_len < 1 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        let mut map: BTreeMap<u32, f64> = BTreeMap::new();
        for &(len, p) in entries {
            if len < 1 || len > max_len {
                let mut msg = String::new();
                let _ = write!(msg, "length {len} outside [1, {max_len}]");
                return Err(Error::InvalidParameter(msg));
            }
            if p < 0.0 || !p.is_finite() {
                return Err(Error::InvalidParameter(
                    "probabilities must be finite and >= 0".into(),
                ));
            }
            *map.entry(len).or_insert(0.0) += p;
        }
        let total: f64 = map.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            let mut msg = String::new();
            let _ = write!(msg, "probabilities sum to {total}, expected 1");
            return Err(Error::InvalidParameter(msg));
        }
        Ok(Self::normalized(map, max_len))
    }

    fn normalized(map: BTreeMap<u32, f64>, max_len: u32) -> Self {
        let total: f64 = map.values().sum();
        let mut entries: Vec<(u32, f64)> = map
            .into_iter()
            .filter_map(|(len, p)| {
                let p = p / total;
                (p >= PRUNE_EPS).then_some((len, p))
            })
            .collect();
        // renormalize once more after pruning
        let kept: f64 = entries.iter().map(|&(_, p)| p).sum();
        for (_, p) in &mut entries {
            *p /= kept;
        }
        Self { entries, max_len }
    }

    /// Discretized normal distribution truncated to `[1, max_len]`.
    ///
    /// The continuous density mass on the cell `(k-0.5, k+0.5]` is
    /// assigned to integer length `k`, with the lower truncation boundary
    /// at 0.5 and the upper at `max_len + 0.5`, then renormalized. A
    /// query always emits at least one token, so mass below length 1 is
    /// discarded rather than folded in.
    pub fn truncated_normal(mu: f64, sigma: f64, max_len: u32) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidParameter("sigma must be > 0".into()));
        }
        if max_len < 1 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        let cdf = |x: f64| 0.5 * (1.0 + erf((x - mu) / (sigma * sqrt(2.0))));
        let mut map = BTreeMap::new();
        for k in 1..=max_len {
            let mass = cdf(k as f64 + 0.5) - cdf(k as f64 - 0.5);
            if mass > 0.0 {
                map.insert(k, mass);
            }
        }
        if map.is_empty() {
            // All density collapsed outside [0.5, max_len + 0.5]; land the
            // mass on the nearest in-range length.
            let k = (round(mu).max(1.0) as u32).min(max_len);
            map.insert(k.max(1), 1.0);
        }
        Ok(Self::normalized(map, max_len))
    }

    /// Normalized histogram of observed lengths, clamped to `max_len`.
    pub fn empirical(lengths: &[u32], max_len: u32) -> Result<Self> {
        if lengths.is_empty() {
            return Err(Error::InvalidParameter(
                "empirical PMF needs at least one sample".into(),
            ));
        }
        if max_len < 1 {
            return Err(Error::InvalidParameter("max_len must be >= 1".into()));
        }
        let mut map = BTreeMap::new();
        for &len in lengths {
            if len < 1 {
                return Err(Error::InvalidParameter("lengths must be >= 1".into()));
            }
            *map.entry(len.min(max_len)).or_insert(0.0) += 1.0;
        }
        Ok(Self::normalized(map, max_len))
    }

    /// Sparse `(length, probability)` pairs, ascending by length.
    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn max_len(&self) -> u32 {
        self.max_len
    }

    /// Largest length carrying mass (<= `max_len`).
    pub fn max_support(&self) -> u32 {
        self.entries.last().map(|&(len, _)| len).unwrap_or(1)
    }

    /// Expected length in tokens.
    pub fn mean(&self) -> f64 {
        self.entries
            .iter()
            .map(|&(len, p)| len as f64 * p)
            .sum()
    }

    /// Expectation of an arbitrary function of the length.
    pub fn expect(&self, f: impl Fn(u32) -> f64) -> f64 {
        self.entries.iter().map(|&(len, p)| f(len) * p).sum()
    }

    /// `P(length >= a)`.
    pub fn survival(&self, a: u32) -> f64 {
        self.entries
            .iter()
            .filter(|&&(len, _)| len >= a)
            .map(|&(_, p)| p)
            .sum()
    }

    /// Smallest length whose CDF reaches `p` (`p` in `(0, 1]`).
    pub fn percentile(&self, p: f64) -> u32 {
        let mut acc = 0.0;
        for &(len, q) in &self.entries {
            acc += q;
            if acc >= p - 1e-12 {
                return len;
            }
        }
        self.max_support()
    }

    /// Draws one length by inverse-CDF sampling. Deterministic for a
    /// given RNG state.
    pub fn sample(&self, rng: &mut impl RngCore) -> u32 {
        // 53-bit uniform in [0, 1)
        let r = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let mut acc = 0.0;
        for &(len, p) in &self.entries {
            acc += p;
            if r < acc {
                return len;
            }
        }
        self.max_support()
    }
}

/// Distribution of the iteration index `U` (1-based, within a decode
/// phase of `n_d` iterations) at which a query completes.
///
/// Total mass is the expected per-phase completion fraction, not 1: a
/// query whose remaining output spans several phases completes in any
/// given phase with probability `1 / ceil(S / n_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCompletionPmf {
    probs: Vec<(u32, f64)>,
    n_d: u32,
}

impl PhaseCompletionPmf {
    /// Sparse `(U, probability)` pairs, ascending by iteration index.
    pub fn probs(&self) -> &[(u32, f64)] {
        &self.probs
    }

    pub fn n_d(&self) -> u32 {
        self.n_d
    }

    /// Expected fraction of the decode batch that completes per phase.
    pub fn total(&self) -> f64 {
        self.probs.iter().map(|&(_, p)| p).sum()
    }

    /// Cumulative completion mass strictly before iteration `u`.
    pub fn mass_before(&self, u: u32) -> f64 {
        self.probs
            .iter()
            .filter(|&&(v, _)| v < u)
            .map(|&(_, p)| p)
            .sum()
    }
}

/// Completion iteration of a query of total output length `s` under
/// phases of `n_d` iterations, assuming the query is uniformly positioned
/// over its `ceil(s / n_d)` phases.
///
/// Returns the single nonzero entry `(U, probability)`: `(s, 1)` when the
/// query fits in one phase, else `(1 + (s-1) mod n_d, 1 / ceil(s / n_d))`.
pub fn completion_conditional(s: u32, n_d: u32) -> (u32, f64) {
    debug_assert!(s >= 1 && n_d >= 1);
    if s <= n_d {
        (s, 1.0)
    } else {
        let phases = s.div_ceil(n_d);
        (1 + (s - 1) % n_d, 1.0 / phases as f64)
    }
}

/// Mixture of [`completion_conditional`] over an output-length PMF.
pub fn completion_distribution(pd: &LengthPmf, n_d: u32) -> PhaseCompletionPmf {
    let mut map: BTreeMap<u32, f64> = BTreeMap::new();
    for &(s, p) in pd.entries() {
        let (u, q) = completion_conditional(s, n_d);
        *map.entry(u).or_insert(0.0) += p * q;
    }
    PhaseCompletionPmf {
        probs: map.into_iter().collect(),
        n_d,
    }
}

/// Expected per-phase completion fraction, `sum_U P(U)` in `(0, 1]`.
pub fn expected_completion_fraction(pc: &PhaseCompletionPmf) -> f64 {
    pc.total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    /// Independent discretization oracle: Simpson quadrature of the
    /// normal density over each cell, truncated to [0.5, max_len + 0.5].
    fn quadrature_trunc_normal(mu: f64, sigma: f64, max_len: u32) -> Vec<(u32, f64)> {
        let density = |x: f64| {
            let z = (x - mu) / sigma;
            (-0.5 * z * z).exp() / (sigma * (2.0 * core::f64::consts::PI).sqrt())
        };
        let simpson = |a: f64, b: f64| {
            let n = 64; // even
            let h = (b - a) / n as f64;
            let mut s = density(a) + density(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * density(a + i as f64 * h);
            }
            s * h / 3.0
        };
        let mut cells: Vec<(u32, f64)> = (1..=max_len)
            .map(|k| (k, simpson(k as f64 - 0.5, k as f64 + 0.5)))
            .collect();
        let total: f64 = cells.iter().map(|&(_, m)| m).sum();
        for (_, m) in &mut cells {
            *m /= total;
        }
        cells
    }

    fn oracle_mean(cells: &[(u32, f64)]) -> f64 {
        cells.iter().map(|&(k, p)| k as f64 * p).sum()
    }

    #[test]
    fn trunc_normal_matches_quadrature_oracle() {
        for &(mu, sigma, max_len) in &[(32.0, 13.0, 80u32), (128.0, 68.0, 320), (0.0, 10.0, 100)] {
            let pmf = LengthPmf::truncated_normal(mu, sigma, max_len).unwrap();
            let oracle = quadrature_trunc_normal(mu, sigma, max_len);
            for &(k, m) in &oracle {
                let got = pmf
                    .entries()
                    .iter()
                    .find(|&&(len, _)| len == k)
                    .map(|&(_, p)| p)
                    .unwrap_or(0.0);
                assert!(
                    (got - m).abs() < 1e-7,
                    "cell {k}: impl {got} vs quadrature {m} for ({mu}, {sigma}, {max_len})"
                );
            }
            assert_relative_eq!(pmf.mean(), oracle_mean(&oracle), epsilon = 1e-6);
        }
    }

    #[test]
    fn trunc_normal_summarization_mean() {
        // mean frozen from the quadrature oracle: 32.0996
        let pmf = LengthPmf::truncated_normal(32.0, 13.0, 80).unwrap();
        assert!((pmf.mean() - 32.1).abs() < 1.0, "mean {}", pmf.mean());
        let total: f64 = pmf.entries().iter().map(|&(_, p)| p).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn trunc_normal_degenerate_width_is_point_mass() {
        let pmf = LengthPmf::truncated_normal(5.0, 1e-6, 10).unwrap();
        assert_eq!(pmf.entries(), &[(5, 1.0)]);
    }

    #[test]
    fn trunc_normal_half_normal_mean() {
        // sigma * sqrt(2/pi) = 7.9788 for the continuous half-normal;
        // cutting the cells below 0.5 and renormalizing lifts the
        // discrete mean to 8.3068 (frozen from the quadrature oracle).
        let pmf = LengthPmf::truncated_normal(0.0, 10.0, 100).unwrap();
        let oracle = oracle_mean(&quadrature_trunc_normal(0.0, 10.0, 100));
        assert_relative_eq!(pmf.mean(), oracle, epsilon = 1e-6);
        assert!((pmf.mean() - 8.3068).abs() < 1e-3, "mean {}", pmf.mean());
    }

    #[test]
    fn trunc_normal_rejects_bad_params() {
        assert!(LengthPmf::truncated_normal(10.0, 0.0, 20).is_err());
        assert!(LengthPmf::truncated_normal(10.0, -1.0, 20).is_err());
        assert!(LengthPmf::truncated_normal(10.0, 1.0, 0).is_err());
    }

    #[test]
    fn empirical_counts() {
        let pmf = LengthPmf::empirical(&[2, 2, 4], 10).unwrap();
        assert_eq!(pmf.entries().len(), 2);
        assert_relative_eq!(pmf.entries()[0].1, 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(pmf.entries()[1].1, 1.0 / 3.0, epsilon = 1e-15);

        let single = LengthPmf::empirical(&[5], 10).unwrap();
        assert_eq!(single.entries(), &[(5, 1.0)]);

        assert!(LengthPmf::empirical(&[], 10).is_err());
        assert!(LengthPmf::empirical(&[0], 10).is_err());
    }

    #[test]
    fn empirical_clamps_to_max_len() {
        let pmf = LengthPmf::empirical(&[3, 50, 60], 10).unwrap();
        assert_eq!(pmf.max_support(), 10);
        assert_relative_eq!(pmf.survival(10), 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn empirical_from_samples_recovers_mean() {
        // translation-task output shape: (128, 68, 320)
        let src = LengthPmf::truncated_normal(128.0, 68.0, 320).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples: Vec<u32> = (0..10_000).map(|_| src.sample(&mut rng)).collect();
        let emp = LengthPmf::empirical(&samples, 320).unwrap();
        let rel = (emp.mean() - src.mean()).abs() / src.mean();
        assert!(rel < 0.03, "relative mean error {rel}");
    }

    #[test]
    fn completion_conditional_examples() {
        assert_eq!(completion_conditional(3, 8), (3, 1.0));
        let (u, p) = completion_conditional(10, 4);
        assert_eq!(u, 2);
        assert_relative_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        let (u, p) = completion_conditional(8, 4);
        assert_eq!(u, 4);
        assert_relative_eq!(p, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn completion_distribution_examples() {
        let pd = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 10).unwrap();
        let pc = completion_distribution(&pd, 4);
        assert_eq!(pc.probs(), &[(2, 0.5), (4, 0.5)]);
        assert_relative_eq!(pc.total(), 1.0, epsilon = 1e-15);

        let pd = LengthPmf::from_entries(&[(10, 1.0)], 10).unwrap();
        let pc = completion_distribution(&pd, 4);
        assert_eq!(pc.probs().len(), 1);
        assert_eq!(pc.probs()[0].0, 2);
        assert_relative_eq!(pc.total(), 1.0 / 3.0, epsilon = 1e-15);

        let pd = LengthPmf::from_entries(&[(1, 1.0)], 1).unwrap();
        let pc = completion_distribution(&pd, 1);
        assert_eq!(pc.probs(), &[(1, 1.0)]);
    }

    #[test]
    fn expected_fraction_examples() {
        let pd = LengthPmf::from_entries(&[(4, 1.0 / 3.0), (8, 1.0 / 3.0), (12, 1.0 / 3.0)], 12)
            .unwrap();
        let pc = completion_distribution(&pd, 4);
        assert_relative_eq!(
            expected_completion_fraction(&pc),
            11.0 / 18.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn mean_examples() {
        let pmf = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 4).unwrap();
        assert_relative_eq!(pmf.mean(), 3.0, epsilon = 1e-15);
        let pmf = LengthPmf::from_entries(&[(7, 1.0)], 7).unwrap();
        assert_relative_eq!(pmf.mean(), 7.0, epsilon = 1e-15);
        // translation-task fixture: lower truncation trims ~3% of the
        // left tail, lifting the mean to 132.326 (quadrature oracle)
        let pmf = LengthPmf::truncated_normal(128.0, 68.0, 320).unwrap();
        assert!((pmf.mean() - 132.326).abs() < 1e-2, "mean {}", pmf.mean());
    }

    #[test]
    fn sampling_point_mass_and_determinism() {
        let pmf = LengthPmf::from_entries(&[(5, 1.0)], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(pmf.sample(&mut rng), 5);
        }

        let pmf = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 4).unwrap();
        let draw = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..1000).map(|_| pmf.sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
        assert_ne!(draw(42), draw(43));
    }

    #[test]
    fn sampling_frequencies_converge() {
        let pmf = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let twos = (0..n).filter(|_| pmf.sample(&mut rng) == 2).count();
        let freq = twos as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn empirical_total_variation_converges() {
        let src = LengthPmf::truncated_normal(64.0, 30.0, 160).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<u32> = (0..100_000).map(|_| src.sample(&mut rng)).collect();
        let emp = LengthPmf::empirical(&samples, 160).unwrap();
        let mut tv = 0.0;
        for k in 1..=160u32 {
            let a = src
                .entries()
                .iter()
                .find(|&&(len, _)| len == k)
                .map(|&(_, p)| p)
                .unwrap_or(0.0);
            let b = emp
                .entries()
                .iter()
                .find(|&&(len, _)| len == k)
                .map(|&(_, p)| p)
                .unwrap_or(0.0);
            tv += (a - b).abs();
        }
        tv *= 0.5;
        assert!(tv <= 0.02, "total-variation distance {tv}");
    }

    #[test]
    fn percentile_basics() {
        let pmf = LengthPmf::from_entries(&[(2, 0.5), (4, 0.5)], 4).unwrap();
        assert_eq!(pmf.percentile(0.5), 2);
        assert_eq!(pmf.percentile(0.99), 4);
        // summarization-task fixture p99 lands on the published 63
        let pmf = LengthPmf::truncated_normal(32.0, 13.0, 80).unwrap();
        let p99 = pmf.percentile(0.99);
        assert!((62..=64).contains(&p99), "p99 {p99}");
    }

    proptest! {
        #[test]
        fn conditional_mass_is_exact(s in 1u32..=64, n_d in 1u32..=16) {
            let (u, p) = completion_conditional(s, n_d);
            prop_assert!(u >= 1 && u <= n_d.max(s.min(n_d)));
            if s <= n_d {
                prop_assert_eq!(u, s);
                prop_assert_eq!(p, 1.0);
            } else {
                prop_assert_eq!(u, 1 + (s - 1) % n_d);
                prop_assert_eq!(p, 1.0 / s.div_ceil(n_d) as f64);
            }
        }

        #[test]
        fn mixture_matches_brute_force(
            lens in proptest::collection::btree_set(1u32..=64, 1..20),
            n_d in 1u32..=16,
        ) {
            let lens: Vec<u32> = lens.into_iter().collect();
            let p = 1.0 / lens.len() as f64;
            let entries: Vec<(u32, f64)> = lens.iter().map(|&l| (l, p)).collect();
            let pd = LengthPmf::from_entries(&entries, 64).unwrap();
            let pc = completion_distribution(&pd, n_d);
            // brute force over every (S, U) pair
            for u in 1..=n_d {
                let mut expect = 0.0;
                for &(s, ps) in pd.entries() {
                    let (cu, q) = completion_conditional(s, n_d);
                    if cu == u {
                        expect += ps * q;
                    }
                }
                let got = pc
                    .probs()
                    .iter()
                    .find(|&&(v, _)| v == u)
                    .map(|&(_, p)| p)
                    .unwrap_or(0.0);
                prop_assert!((got - expect).abs() < 1e-12);
            }
        }

        #[test]
        fn saturated_phase_recovers_length_pmf(
            lens in proptest::collection::btree_set(1u32..=40, 1..12),
        ) {
            let lens: Vec<u32> = lens.into_iter().collect();
            let p = 1.0 / lens.len() as f64;
            let entries: Vec<(u32, f64)> = lens.iter().map(|&l| (l, p)).collect();
            let pd = LengthPmf::from_entries(&entries, 40).unwrap();
            // n_d at least the longest output: every query completes in
            // its first phase, at iteration U = S.
            let pc = completion_distribution(&pd, 40);
            prop_assert!((pc.total() - 1.0).abs() < 1e-12);
            let mean_u: f64 = pc.probs().iter().map(|&(u, p)| u as f64 * p).sum();
            prop_assert!((mean_u - pd.mean()).abs() < 1e-12);
        }
    }
}

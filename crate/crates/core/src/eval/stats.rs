//! Seed aggregation and one-sided significance tests.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Reassignment counts up to this are enumerated exactly.
pub const EXACT_LIMIT: u64 = 20_000;
pub const PERMUTATION_SAMPLES: usize = 100_000;
pub const PERMUTATION_SEED: u64 = 0x5eed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigTest {
    Permutation,
    WelchT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    /// p < 0.05
    Strong,
    /// p < 0.1
    Weak,
    NotSignificant,
}

impl Tier {
    pub fn of(p: f64) -> Tier {
        if p < 0.05 {
            Tier::Strong
        } else if p < 0.1 {
            Tier::Weak
        } else {
            Tier::NotSignificant
        }
    }

    pub fn stars(self) -> &'static str {
        match self {
            Tier::Strong => "**",
            Tier::Weak => "*",
            Tier::NotSignificant => "",
        }
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

fn check_sides(baseline: &[f64], method: &[f64]) -> Result<()> {
    if baseline.len() < 2 || method.len() < 2 {
        return Err(Error::Invalid(format!(
            "significance needs at least 2 seeds per side, got {} and {}",
            baseline.len(),
            method.len()
        )));
    }
    if baseline.iter().chain(method).any(|x| !x.is_finite()) {
        return Err(Error::Invalid("non-finite sample".into()));
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul((n - i) as u64) / (i as u64 + 1))
}

/// Call `f` with every `k`-subset of `0..n` as a membership mask.
fn for_each_subset(n: usize, k: usize, f: &mut impl FnMut(&[bool])) {
    fn rec(start: usize, left: usize, mask: &mut Vec<bool>, f: &mut impl FnMut(&[bool])) {
        if left == 0 {
            f(mask);
            return;
        }
        for i in start..=mask.len() - left {
            mask[i] = true;
            rec(i + 1, left - 1, mask, f);
            mask[i] = false;
        }
    }
    let mut mask = vec![false; n];
    rec(0, k, &mut mask, f);
}

/// One-sided permutation test of `mean(method) > mean(baseline)`. The p-value
/// counts reassignments whose mean difference reaches the observed one.
/// Exact when at most [`EXACT_LIMIT`] reassignments exist, otherwise a
/// fixed-seed Monte Carlo estimate `(1 + hits) / (1 + samples)`.
pub fn permutation_test(baseline: &[f64], method: &[f64]) -> Result<f64> {
    check_sides(baseline, method)?;
    let pooled: Vec<f64> = method.iter().chain(baseline).copied().collect();
    let (n, k) = (pooled.len(), method.len());
    let total: f64 = pooled.iter().sum();
    let diff_of = |method_sum: f64| method_sum / k as f64 - (total - method_sum) / (n - k) as f64;
    let observed = diff_of(method.iter().sum());
    let scale = pooled.iter().fold(1.0f64, |a, x| a.max(x.abs()));
    let tol = 1e-9 * scale;
    let reaches = |d: f64| d >= observed - tol;
    if binomial(n, k) <= EXACT_LIMIT {
        let (mut hits, mut count) = (0u64, 0u64);
        for_each_subset(n, k, &mut |mask| {
            let s: f64 = pooled.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
            count += 1;
            hits += u64::from(reaches(diff_of(s)));
        });
        Ok(hits as f64 / count as f64)
    } else {
        let mut rng = crate::seed::rng(PERMUTATION_SEED);
        let mut idx: Vec<usize> = (0..n).collect();
        let mut hits = 0u64;
        for _ in 0..PERMUTATION_SAMPLES {
            idx.shuffle(&mut rng);
            let s: f64 = idx[..k].iter().map(|&i| pooled[i]).sum();
            hits += u64::from(reaches(diff_of(s)));
        }
        Ok((1 + hits) as f64 / (1 + PERMUTATION_SAMPLES) as f64)
    }
}

/// One-sided Welch t-test of `mean(method) > mean(baseline)`.
pub fn welch_t_test(baseline: &[f64], method: &[f64]) -> Result<f64> {
    check_sides(baseline, method)?;
    let (m1, m2) = (mean(method), mean(baseline));
    let (v1, v2) = (
        sample_var(method) / method.len() as f64,
        sample_var(baseline) / baseline.len() as f64,
    );
    let se2 = v1 + v2;
    if se2 == 0.0 {
        return Ok(if m1 > m2 { 0.0 } else { 1.0 });
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (v1 * v1 / (method.len() - 1) as f64 + v2 * v2 / (baseline.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Invalid(format!("t distribution: {e}")))?;
    Ok(1.0 - dist.cdf(t))
}

pub fn significance(baseline: &[f64], method: &[f64], test: SigTest) -> Result<f64> {
    match test {
        SigTest::Permutation => permutation_test(baseline, method),
        SigTest::WelchT => welch_t_test(baseline, method),
    }
}

/// Round to one decimal, halves away from zero, after snapping away
/// floating-point noise below 1e-9.
pub fn round1(x: f64) -> f64 {
    let scaled = (x * 10.0 * 1e9).round() / 1e9;
    scaled.round() / 10.0
}

pub fn format1(x: f64) -> String {
    format!("{:.1}", round1(x))
}

/// Per-dataset means of a method and its baseline and their differences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub method_means: Vec<f64>,
    pub baseline_means: Vec<f64>,
    pub diffs: Vec<f64>,
    /// Unweighted mean of `diffs`.
    pub average_diff: f64,
}

/// Aggregate per-dataset seed results. Both sides need the same number of
/// seeds on every dataset.
pub fn aggregate_seeds(method: &[Vec<f64>], baseline: &[Vec<f64>]) -> Result<SeedAggregate> {
    if method.is_empty() || method.len() != baseline.len() {
        return Err(Error::Invalid(format!(
            "{} method datasets against {} baseline datasets",
            method.len(),
            baseline.len()
        )));
    }
    for (i, (m, b)) in method.iter().zip(baseline).enumerate() {
        if m.is_empty() || m.len() != b.len() {
            return Err(Error::Invalid(format!(
                "dataset {i}: {} method seeds against {} baseline seeds",
                m.len(),
                b.len()
            )));
        }
    }
    let method_means: Vec<f64> = method.iter().map(|m| mean(m)).collect();
    let baseline_means: Vec<f64> = baseline.iter().map(|b| mean(b)).collect();
    let diffs: Vec<f64> = method_means.iter().zip(&baseline_means).map(|(m, b)| m - b).collect();
    let average_diff = mean(&diffs);
    Ok(SeedAggregate {
        method_means,
        baseline_means,
        diffs,
        average_diff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiers() {
        assert_eq!(Tier::of(0.03).stars(), "**");
        assert_eq!(Tier::of(0.07).stars(), "*");
        assert_eq!(Tier::of(0.2).stars(), "");
    }

    #[test]
    fn rounding() {
        assert_eq!(format1(1.35), "1.4");
        assert_eq!(format1(-1.35), "-1.4");
        assert_eq!(format1(0.04), "0.0");
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(10, 5), 252);
        assert_eq!(binomial(20, 10), 184_756);
        let mut n = 0;
        for_each_subset(6, 2, &mut |_| n += 1);
        assert_eq!(n, 15);
    }

    #[test]
    fn welch_direction() {
        let b = [1.0, 2.0, 3.0, 2.0];
        let m = [5.0, 6.0, 7.0, 6.0];
        assert!(welch_t_test(&b, &m).unwrap() < 0.01);
        assert!(welch_t_test(&m, &b).unwrap() > 0.99);
        assert_eq!(welch_t_test(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn sampled_mode_is_deterministic() {
        let b: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let m: Vec<f64> = (0..12).map(|i| i as f64 + 3.0).collect();
        let p = permutation_test(&b, &m).unwrap();
        assert_eq!(p, permutation_test(&b, &m).unwrap());
        assert!(p > 0.0 && p < 0.1);
    }
}

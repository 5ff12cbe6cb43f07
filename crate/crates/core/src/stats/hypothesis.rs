use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use super::StatsError;

/// Largest tie-free sample size handled by exact enumeration.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    /// Sum of the ranks of positive differences `x - y`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: TestMethod,
    pub n_effective: usize,
}

/// Number of subsets of `{1..n}` with each rank sum.
fn rank_sum_counts(n: usize) -> Vec<u64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Paired two-sided Wilcoxon signed-rank test.
///
/// Zero differences are dropped. Tied magnitudes get average ranks. Without
/// ties and with at most 25 pairs the null distribution is enumerated
/// exactly; otherwise the normal approximation with tie and continuity
/// corrections is used. `p = min(1, 2 min(P(W <= w), P(W >= w)))`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestOutcome, StatsError> {
    if x.len() != y.len() || x.is_empty() {
        return Err(StatsError::Invalid(format!(
            "paired samples of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::Invalid("non-finite difference".into()));
    }
    let n = d.len();
    if n == 0 {
        return Err(StatsError::NoNonzeroPairs);
    }
    d.sort_by(|a, b| a.abs().total_cmp(&b.abs()));

    let mut w = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[j + 1].abs() == d[i].abs() {
            j += 1;
        }
        let rank = (i + j + 2) as f64 / 2.0;
        w += rank * d[i..=j].iter().filter(|v| **v > 0.0).count() as f64;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let ties = tie_term > 0.0;

    if !ties && n <= EXACT_MAX_N {
        let counts = rank_sum_counts(n);
        let ws = w as usize;
        let lower: u64 = counts[..=ws].iter().sum();
        let upper: u64 = counts[ws..].iter().sum();
        let total = (1u64 << n) as f64;
        let p = (2.0 * (lower.min(upper) as f64 / total)).min(1.0);
        return Ok(TestOutcome {
            statistic: w,
            p_value: p,
            method: TestMethod::Exact,
            n_effective: n,
        });
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let p = erfc(z / std::f64::consts::SQRT_2).min(1.0);
    Ok(TestOutcome {
        statistic: w,
        p_value: p,
        method: TestMethod::NormalApprox,
        n_effective: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmOutcome {
    pub reject: Vec<bool>,
    pub adjusted: Vec<f64>,
}

/// Holm step-down correction. Equal p-values keep their input order.
pub fn holm_bonferroni(pvals: &[f64], alpha: f64) -> Result<HolmOutcome, StatsError> {
    let m = pvals.len();
    if m == 0 {
        return Err(StatsError::Invalid("no p-values".into()));
    }
    if let Some(p) = pvals.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(StatsError::Invalid(format!("p-value {p} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]).then(a.cmp(&b)));
    let mut reject = vec![false; m];
    let mut adjusted = vec![0.0; m];
    let mut still = true;
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        let factor = (m - j) as f64;
        still = still && pvals[i] < alpha / factor;
        reject[i] = still;
        running = running.max(factor * pvals[i]);
        adjusted[i] = running.min(1.0);
    }
    Ok(HolmOutcome { reject, adjusted })
}

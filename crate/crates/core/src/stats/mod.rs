//! Two-sample t-tests and Spearman rank correlation, plus the cohort
//! evaluation pipeline built on them.

mod cohort;

pub use cohort::{
    evaluate_cohort, export_stats, run_statistics, CohortError, CohortEvaluation, CohortRow,
    Comparison, CorrelationRow, EvalConfig, Exclusion, TTestRow,
};

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate group: {0}")]
    DegenerateGroup(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("constant input: rank correlation is undefined")]
    ConstantInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("exact p-value needs n <= {EXACT_SPEARMAN_MAX_N}, got {0}")]
    ExactUnavailable(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestVariant {
    #[default]
    Welch,
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TTestResult {
    /// Mean of group 1 minus mean of group 2.
    pub estimate: f64,
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub n1: usize,
    pub n2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpearmanMethod {
    #[default]
    Asymptotic,
    /// Permutation p-value; only available for n <= 9.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p: f64,
    pub n: usize,
}

pub const EXACT_SPEARMAN_MAX_N: usize = 9;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, ss / (n - 1.0))
}

/// Two-sided survival probability P(|T| >= |t|) for Student's t with `df`
/// degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

pub fn t_test_independent(
    group1: &[f64],
    group2: &[f64],
    variant: TTestVariant,
) -> Result<TTestResult, StatsError> {
    for (name, g) in [("group1", group1), ("group2", group2)] {
        if g.len() < 2 {
            return Err(StatsError::DegenerateGroup(format!("{name} has {} values", g.len())));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite);
        }
    }
    let (n1, n2) = (group1.len() as f64, group2.len() as f64);
    let (m1, v1) = mean_var(group1);
    let (m2, v2) = mean_var(group2);
    if v1 == 0.0 && v2 == 0.0 {
        return Err(StatsError::DegenerateGroup("both groups have zero variance".into()));
    }
    let estimate = m1 - m2;
    let (se, df) = match variant {
        TTestVariant::Welch => {
            let a = v1 / n1;
            let b = v2 / n2;
            let df = (a + b).powi(2) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0));
            ((a + b).sqrt(), df)
        }
        TTestVariant::Pooled => {
            let df = n1 + n2 - 2.0;
            let sp2 = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / df;
            ((sp2 * (1.0 / n1 + 1.0 / n2)).sqrt(), df)
        }
    };
    let t = estimate / se;
    Ok(TTestResult {
        estimate,
        t,
        df,
        p: t_two_sided_p(t, df),
        n1: group1.len(),
        n2: group2.len(),
    })
}

/// 1-based ranks with ties replaced by their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<SpearmanResult, StatsError> {
    spearman_with(x, y, SpearmanMethod::Asymptotic)
}

pub fn spearman_with(
    x: &[f64],
    y: &[f64],
    method: SpearmanMethod,
) -> Result<SpearmanResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewObservations { needed: 3, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let rho = pearson(&rx, &ry).ok_or(StatsError::ConstantInput)?;
    let n = x.len();
    let p = match method {
        SpearmanMethod::Asymptotic => {
            if rho.abs() >= 1.0 {
                0.0
            } else {
                let df = n as f64 - 2.0;
                let t = rho * (df / (1.0 - rho * rho)).sqrt();
                t_two_sided_p(t, df)
            }
        }
        SpearmanMethod::Exact => {
            if n > EXACT_SPEARMAN_MAX_N {
                return Err(StatsError::ExactUnavailable(n));
            }
            exact_p(&rx, &ry, rho)
        }
    };
    Ok(SpearmanResult { rho, p, n })
}

/// Fraction of all permutations of `ry` whose |rho| reaches the observed one.
fn exact_p(rx: &[f64], ry: &[f64], rho: f64) -> f64 {
    let target = rho.abs() - 1e-12;
    let mut perm = ry.to_vec();
    let n = perm.len();
    let mut c = vec![0usize; n];
    let mut hits = 0u64;
    let mut total = 0u64;
    let mut count = |p: &[f64]| {
        total += 1;
        if pearson(rx, p).is_some_and(|r| r.abs() >= target) {
            hits += 1;
        }
    };
    count(&perm);
    // Heap's algorithm
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            count(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_example() {
        let r = t_test_independent(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0], TTestVariant::Welch).unwrap();
        assert!((r.estimate + 1.0).abs() < 1e-12);
        assert!((r.t + 1.224744871391589).abs() < 1e-12);
        assert!((r.df - 4.0).abs() < 1e-12);
        assert!((r.p - 0.2878641347266908).abs() < 1e-6, "{}", r.p);
    }

    #[test]
    fn identical_and_swapped_groups() {
        let g = [0.9, 0.95, 0.97, 0.91];
        let r = t_test_independent(&g, &g, TTestVariant::Welch).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert_eq!(r.p, 1.0);
        let a = [0.1, 0.4, 0.35, 0.8];
        let b = [0.5, 0.55, 0.9];
        for variant in [TTestVariant::Welch, TTestVariant::Pooled] {
            let ab = t_test_independent(&a, &b, variant).unwrap();
            let ba = t_test_independent(&b, &a, variant).unwrap();
            assert_eq!(ab.estimate, -ba.estimate);
            assert_eq!(ab.t, -ba.t);
            assert!((ab.p - ba.p).abs() < 1e-15);
        }
    }

    #[test]
    fn pooled_df() {
        let r = t_test_independent(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0], TTestVariant::Pooled).unwrap();
        assert_eq!(r.df, 4.0);
    }

    #[test]
    fn degenerate_groups() {
        assert!(matches!(
            t_test_independent(&[1.0], &[1.0, 2.0], TTestVariant::Welch),
            Err(StatsError::DegenerateGroup(_))
        ));
        assert!(matches!(
            t_test_independent(&[1.0, 1.0], &[2.0, 2.0], TTestVariant::Welch),
            Err(StatsError::DegenerateGroup(_))
        ));
        assert!(t_test_independent(&[1.0, 1.0], &[2.0, 3.0], TTestVariant::Welch).is_ok());
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), [1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), [2.0, 2.0, 2.0]);
        assert_eq!(average_ranks(&[3.0, 1.0, 2.0]), [3.0, 1.0, 2.0]);
    }

    #[test]
    fn spearman_examples() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let up = spearman(&x, &[2.0, 4.0, 8.0, 16.0, 32.0]).unwrap();
        assert_eq!((up.rho, up.p), (1.0, 0.0));
        let down = spearman(&x, &[5.0, 3.0, 1.0, 0.0, -7.0]).unwrap();
        assert_eq!((down.rho, down.p), (-1.0, 0.0));
        // ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4] -> rho = 4.5 / sqrt(4.5 * 5)
        let tie = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((tie.rho - 4.5 / 22.5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(spearman(&x, &[1.0; 5]), Err(StatsError::ConstantInput)));
        assert!(matches!(spearman(&x, &[1.0; 4]), Err(StatsError::LengthMismatch(5, 4))));
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_spearman() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let r = spearman_with(&x, &[1.0, 2.0, 3.0, 4.0], SpearmanMethod::Exact).unwrap();
        // identity and reversal are the only permutations with |rho| = 1
        assert!((r.p - 2.0 / 24.0).abs() < 1e-15);
        let big: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(spearman_with(&big, &big, SpearmanMethod::Exact).is_err());
    }
}

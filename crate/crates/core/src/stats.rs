//! Statistical primitives shared by the probes: chi-square tests with
//! Bonferroni correction, rank and linear correlation, and the binary
//! classification metrics used throughout (F1 of a chosen class and
//! balanced accuracy).
//!
//! Binary labels follow the probing convention: `0` is omitted/distorted,
//! `1` is mentioned.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("chi-square goodness-of-fit needs at least one observation")]
    NoObservations,
    #[error("contingency table has a zero marginal ({0})")]
    ZeroMarginal(&'static str),
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },
    #[error("correlation undefined: {0} input is constant")]
    ConstantInput(&'static str),
    #[error("class {0} is absent from the gold labels")]
    MissingClass(u8),
    #[error("label {0} is not binary")]
    NonBinaryLabel(u8),
}

/// Outcome of a hypothesis test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub degrees_of_freedom: u32,
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
}

impl TestResult {
    /// Attaches a Bonferroni-adjusted p-value for `comparisons` tests.
    pub fn with_bonferroni(mut self, comparisons: usize) -> Self {
        self.p_adjusted = Some(bonferroni(self.p_value, comparisons));
        self
    }

    /// Significance at `alpha`, using the adjusted p-value when present.
    pub fn is_significant(&self, alpha: f64) -> bool {
        self.p_adjusted.unwrap_or(self.p_value) < alpha
    }
}

pub fn bonferroni(p_value: f64, comparisons: usize) -> f64 {
    (p_value * comparisons.max(1) as f64).min(1.0)
}

/// One-way goodness-of-fit test of two counts against an even split.
pub fn chi2_gof(count_a: u64, count_b: u64) -> Result<TestResult, StatsError> {
    let n = count_a + count_b;
    if n == 0 {
        return Err(StatsError::NoObservations);
    }
    let expected = n as f64 / 2.0;
    let statistic = [count_a, count_b]
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum::<f64>();
    Ok(TestResult {
        statistic,
        degrees_of_freedom: 1,
        p_value: chi2_sf(statistic, 1.0),
        p_adjusted: None,
    })
}

/// Chi-square test of independence on a 2×2 table, no continuity correction.
pub fn chi2_independence(table: [[u64; 2]; 2]) -> Result<TestResult, StatsError> {
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    if rows.contains(&0) {
        return Err(StatsError::ZeroMarginal("row"));
    }
    if cols.contains(&0) {
        return Err(StatsError::ZeroMarginal("column"));
    }
    let n = (rows[0] + rows[1]) as f64;
    let mut statistic = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &observed) in row.iter().enumerate() {
            let expected = rows[i] as f64 * cols[j] as f64 / n;
            statistic += (observed as f64 - expected).powi(2) / expected;
        }
    }
    Ok(TestResult {
        statistic,
        degrees_of_freedom: 1,
        p_value: chi2_sf(statistic, 1.0),
        p_adjusted: None,
    })
}

/// A correlation coefficient with its two-sided p-value under the null of
/// zero correlation (Student t approximation with n − 2 degrees of freedom).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub coefficient: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    check_paired(x, y)?;
    let coefficient = pearson_coefficient(x, y)?;
    Ok(Correlation {
        coefficient,
        p_value: correlation_p_value(coefficient, x.len()),
        n: x.len(),
    })
}

/// Spearman rank correlation; ties receive their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation, StatsError> {
    check_paired(x, y)?;
    let coefficient = pearson_coefficient(&average_ranks(x), &average_ranks(y))?;
    Ok(Correlation {
        coefficient,
        p_value: correlation_p_value(coefficient, x.len()),
        n: x.len(),
    })
}

fn check_paired(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFewObservations { needed: 3, got: x.len() });
    }
    Ok(())
}

fn pearson_coefficient(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(StatsError::ConstantInput("first"));
    }
    if syy == 0.0 {
        return Err(StatsError::ConstantInput("second"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let denom = 1.0 - r * r;
    if denom <= 0.0 {
        return 0.0;
    }
    let t = r * (df / denom).sqrt();
    student_t_two_sided(t, df)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // ranks start..end (0-based) → mean of (start+1)..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Counts for a binary confusion matrix, with class 0 as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// predicted 0, gold 0
    pub tp: u64,
    /// predicted 0, gold 1
    pub fp: u64,
    /// predicted 1, gold 1
    pub tn: u64,
    /// predicted 1, gold 0
    pub fn_: u64,
}

impl Confusion {
    pub fn from_labels(preds: &[u8], golds: &[u8]) -> Result<Self, StatsError> {
        if preds.len() != golds.len() {
            return Err(StatsError::LengthMismatch(preds.len(), golds.len()));
        }
        let mut c = Confusion::default();
        for (&p, &g) in preds.iter().zip(golds) {
            match (p, g) {
                (0, 0) => c.tp += 1,
                (0, 1) => c.fp += 1,
                (1, 1) => c.tn += 1,
                (1, 0) => c.fn_ += 1,
                (x, 0 | 1) => return Err(StatsError::NonBinaryLabel(x)),
                (_, y) => return Err(StatsError::NonBinaryLabel(y)),
            }
        }
        Ok(c)
    }

    /// F1 of the given class; 0 when that class was neither predicted nor present.
    pub fn f1(&self, class: u8) -> f64 {
        let (tp, fp, fn_) = if class == 0 {
            (self.tp, self.fp, self.fn_)
        } else {
            (self.tn, self.fn_, self.fp)
        };
        let denom = 2 * tp + fp + fn_;
        if denom == 0 || tp == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    }

    pub fn balanced_accuracy(&self) -> Result<f64, StatsError> {
        let positives = self.tp + self.fn_;
        let negatives = self.tn + self.fp;
        if positives == 0 {
            return Err(StatsError::MissingClass(0));
        }
        if negatives == 0 {
            return Err(StatsError::MissingClass(1));
        }
        Ok(0.5 * (self.tp as f64 / positives as f64 + self.tn as f64 / negatives as f64))
    }
}

pub fn f1_class0(preds: &[u8], golds: &[u8]) -> Result<f64, StatsError> {
    Ok(Confusion::from_labels(preds, golds)?.f1(0))
}

pub fn f1_class1(preds: &[u8], golds: &[u8]) -> Result<f64, StatsError> {
    Ok(Confusion::from_labels(preds, golds)?.f1(1))
}

pub fn balanced_accuracy(preds: &[u8], golds: &[u8]) -> Result<f64, StatsError> {
    Confusion::from_labels(preds, golds)?.balanced_accuracy()
}

/// Survival function of the chi-square distribution with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    regularized_gamma_q(df / 2.0, x / 2.0)
}

/// Two-sided tail probability of Student's t.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_beta(df / (df + t * t), df / 2.0, 0.5).clamp(0.0, 1.0)
}

const EPS: f64 = 1e-15;
const TINY: f64 = 1e-300;
const MAX_ITER: usize = 1000;

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Upper regularized incomplete gamma Q(a, x).
///
/// Series for x < a + 1, Lentz continued fraction otherwise.
pub fn regularized_gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < a + 1.0 {
        1.0 - gamma_p_series(a, x)
    } else {
        gamma_q_continued_fraction(a, x)
    }
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..MAX_ITER {
        ap += 1.0;
        term *= x / ap;
        sum += term;
        if term.abs() < sum.abs() * EPS {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_continued_fraction(a: f64, x: f64) -> f64 {
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    (h.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

/// Regularized incomplete beta I_x(a, b).
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    Some(if sorted.len() % 2 == 0 {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    })
}

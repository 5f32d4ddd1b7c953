//! Subspace diagnostics: label relevance of singular directions and the
//! cumulative explained variance of a spectrum.

use crate::dssa::truncated_svd;
use crate::error::{Result, ScptError};
use crate::tensor::Matrix;

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
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
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction of the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
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
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularised incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    incomplete_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// Pearson correlation of `scores` with 0/1 `labels` and its two-sided
/// t-test p-value (`df = n − 2`).
///
/// A perfect correlation has a p-value of exactly zero, which is reported as
/// the smallest positive double.
pub fn point_biserial(labels: &[usize], scores: &[f64]) -> Result<(f64, f64)> {
    let n = labels.len();
    if n != scores.len() {
        return Err(ScptError::shape(format!("{n} labels vs {} scores", scores.len())));
    }
    if n < 3 {
        return Err(ScptError::DegenerateInput("need at least 3 samples"));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(ScptError::DegenerateInput("labels must be 0 or 1"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(ScptError::NonFiniteInput);
    }
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones == 0 || ones == n {
        return Err(ScptError::DegenerateInput("single class"));
    }
    let nf = n as f64;
    let ms = scores.iter().sum::<f64>() / nf;
    let my = ones as f64 / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&y, &s) in labels.iter().zip(scores) {
        let (dx, dy) = (s - ms, y as f64 - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || sxx.sqrt() <= 1e-300 || scores.iter().all(|&s| s == scores[0]) {
        return Err(ScptError::DegenerateInput("zero score variance"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = nf - 2.0;
    let p = if r.abs() >= 1.0 { 0.0 } else { student_t_two_sided(r * (df / (1.0 - r * r)).sqrt(), df) };
    Ok((r, p.clamp(f64::MIN_POSITIVE, 1.0)))
}

/// `CEV_k = Σ_{i≤k} σ_i² / Σ_i σ_i²`
pub fn cumulative_explained_variance(sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) || sigma.windows(2).any(|w| w[1] > w[0]) {
        return Err(ScptError::InvalidArgument("singular values must be non-negative and descending".into()));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total == 0.0 {
        return Err(ScptError::AllZero);
    }
    let mut acc = 0.0;
    Ok(sigma
        .iter()
        .map(|s| {
            acc += s * s;
            acc / total
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionEntry {
    /// Column index in the singular basis (0 = largest σ).
    pub direction: usize,
    pub singular_value: f64,
    pub r_pb: f64,
    pub abs_r_pb: f64,
    pub p_value: f64,
    /// 1-based position by decreasing `|r_pb|`.
    pub rank: usize,
    pub top_s: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DirectionReport {
    /// Sorted by rank.
    pub entries: Vec<DirectionEntry>,
    pub sigma: Vec<f64>,
}

/// Ranks the pooled right singular directions of `features` (one row per
/// sample) by `|r_pb|` between labels and the projections on each direction.
pub fn rank_directions(features: &Matrix, labels: &[usize], s: usize) -> Result<DirectionReport> {
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(ScptError::shape(format!("{n} feature rows vs {} labels", labels.len())));
    }
    let ones = labels.iter().filter(|&&y| y == 1).count();
    if ones < 3 || n - ones < 3 || labels.iter().any(|&y| y > 1) {
        return Err(ScptError::DegenerateInput("need at least 3 samples of each class"));
    }
    let k = n.min(d);
    let f = truncated_svd(features, k)?;
    let mut entries = Vec::with_capacity(k);
    for j in 0..k {
        let scores: Vec<f64> = (0..n).map(|i| crate::tensor::dot(features.row(i), &f.v.col(j))).collect();
        let (r, p) = match point_biserial(labels, &scores) {
            Ok(v) => v,
            Err(ScptError::DegenerateInput(_)) => (0.0, 1.0),
            Err(e) => return Err(e),
        };
        entries.push(DirectionEntry {
            direction: j,
            singular_value: f.sigma[j],
            r_pb: r,
            abs_r_pb: r.abs(),
            p_value: p,
            rank: 0,
            top_s: false,
        });
    }
    entries.sort_by(|a, b| b.abs_r_pb.total_cmp(&a.abs_r_pb).then(a.direction.cmp(&b.direction)));
    for (i, e) in entries.iter_mut().enumerate() {
        e.rank = i + 1;
        e.top_s = i < s;
    }
    Ok(DirectionReport { entries, sigma: f.sigma })
}

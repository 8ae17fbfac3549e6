//! Episode-level comparison statistics.

use serde::{Deserialize, Serialize, Serializer};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Normal-approximation 95% multiplier.
pub const Z_95: f64 = 1.96;

/// Nemenyi critical values `q_0.05` for `k = 2..=10` methods (the studentized
/// range quantile at infinite degrees of freedom divided by `sqrt(2)`).
pub const NEMENYI_Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (ddof 1).
fn sample_std(v: &[f64]) -> f64 {
    if v.iter().all(|x| *x == v[0]) {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Mean and 95% confidence half-width `1.96 * s / sqrt(n)`.
pub fn mean_ci95(accs: &[f64]) -> Result<(f64, f64)> {
    if accs.len() < 2 {
        return Err(Error::Stats(format!(
            "confidence interval needs at least 2 values, got {}",
            accs.len()
        )));
    }
    Ok((mean(accs), Z_95 * sample_std(accs) / (accs.len() as f64).sqrt()))
}

fn finite_or_null<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn null_as_inf<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Infinite (serialised as null) for a zero-variance, non-zero mean difference.
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_inf")]
    pub t: f64,
    pub p: f64,
    pub df: usize,
    pub mean_diff: f64,
    /// Differences have zero variance; `p` is 0 for a non-zero mean
    /// difference and 1 otherwise.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Stats(format!("t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let md = mean(&d);
    let sd = sample_std(&d);
    let df = n - 1;
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sd <= 1e-12 * scale || sd == 0.0 {
        let (t, p) = if md == 0.0 || scale == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(md), 0.0)
        };
        return Ok(TTest {
            t,
            p,
            df,
            mean_diff: md,
            degenerate: true,
        });
    }
    let t = md / (sd / (n as f64).sqrt());
    Ok(TTest {
        t,
        p: student_t_two_sided(t, df as f64),
        df,
        mean_diff: md,
        degenerate: false,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    regularized_incomplete_beta(df / (df + t * t), 0.5 * df, 0.5)
}

/// `I_x(a, b)` via the continued fraction, using the symmetry relation where
/// the fraction converges slowly.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

/// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
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
    for m in 1..=500 {
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
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Ranks within one row, 1 for the highest value, ties sharing their
/// average rank.
pub fn rank_descending(row: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&i, &j| row[j].total_cmp(&row[i]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; row.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && row[order[end]] == row[order[start]] {
            end += 1;
        }
        // Positions start..end hold ranks start+1..=end.
        let shared = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = shared;
        }
        start = end;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FriedmanNemenyi {
    pub mean_ranks: Vec<f64>,
    pub statistic: f64,
    pub p_value: f64,
    pub q_alpha: f64,
    pub critical_difference: f64,
    /// Maximal groups (by method index) whose mean ranks span at most the
    /// critical difference.
    pub cliques: Vec<Vec<usize>>,
}

/// Friedman test and Nemenyi critical difference at alpha = 0.05 over an
/// `episodes x methods` accuracy matrix.
pub fn friedman_nemenyi(acc: &[Vec<f64>]) -> Result<FriedmanNemenyi> {
    let n = acc.len();
    let k = acc.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::Stats(format!(
            "Friedman test needs >= 2 episodes and >= 2 methods, got {n} x {k}"
        )));
    }
    if k > 1 + NEMENYI_Q_05.len() {
        return Err(Error::Stats(format!("Nemenyi table covers at most 10 methods, got {k}")));
    }
    if acc.iter().any(|r| r.len() != k || r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Stats("ragged or non-finite accuracy matrix".into()));
    }
    let mut mean_ranks = vec![0.0; k];
    for row in acc {
        for (m, r) in mean_ranks.iter_mut().zip(rank_descending(row)) {
            *m += r;
        }
    }
    mean_ranks.iter_mut().for_each(|r| *r /= n as f64);

    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let statistic = (12.0 * nf / (kf * (kf + 1.0)) * (sum_sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let p_value = ChiSquared::new(kf - 1.0)
        .map_err(|e| Error::Stats(e.to_string()))?
        .sf(statistic);
    let q_alpha = NEMENYI_Q_05[k - 2];
    let critical_difference = nemenyi_cd(q_alpha, k, n);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| mean_ranks[a].total_cmp(&mean_ranks[b]).then(a.cmp(&b)));
    let mut cliques: Vec<Vec<usize>> = Vec::new();
    let mut last_end = 0;
    for start in 0..k {
        let mut end = start;
        while end + 1 < k && mean_ranks[order[end + 1]] - mean_ranks[order[start]] <= critical_difference {
            end += 1;
        }
        if end > start && end > last_end {
            cliques.push(order[start..=end].to_vec());
            last_end = end;
        }
    }
    Ok(FriedmanNemenyi {
        mean_ranks,
        statistic,
        p_value,
        q_alpha,
        critical_difference,
        cliques,
    })
}

/// `q * sqrt(k (k + 1) / (6 N))`.
pub fn nemenyi_cd(q_alpha: f64, k: usize, n: usize) -> f64 {
    let kf = k as f64;
    q_alpha * (kf * (kf + 1.0) / (6.0 * n as f64)).sqrt()
}

//! Paired significance testing and delta formatting.
//!
//! The Student t machinery is written out here rather than pulled from a
//! stats crate so the report pipeline has no model of the distribution other
//! than this one; the test suite cross-checks it against an independent
//! implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Paired t-test summary for a difference series.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedStats {
    pub n: usize,
    pub mean_diff: f64,
    pub std_error: f64,
    /// `None` when the differences have zero variance (t is unbounded).
    pub t_stat: Option<f64>,
    pub df: usize,
    pub p_value: f64,
    pub ci95: (f64, f64),
    /// Zero-variance flag; the p-value is then 0 or 1 by inspection.
    pub degenerate: bool,
}

/// ln Γ(x) for x > 0, Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate range.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta function, modified Lentz.
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 3e-14;
    const FPMIN: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
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

/// Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1].
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * betacf(a, b, x) / a
    } else {
        // Symmetry keeps the continued fraction in its fast-converging zone.
        1.0 - front * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student t statistic with `df` degrees of freedom:
/// I_{df/(df+t^2)}(df/2, 1/2).
pub fn t_two_sided_p(t: f64, df: usize) -> f64 {
    let df = df as f64;
    let x = df / (df + t * t);
    incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Upper critical value t* with P(|T| <= t*) = `confidence`, by bisection on
/// the two-sided p-value.
pub fn t_critical(df: usize, confidence: f64) -> f64 {
    let alpha = 1.0 - confidence;
    let mut hi = 1.0;
    while t_two_sided_p(hi, df) > alpha {
        hi *= 2.0;
        if hi > 1e12 {
            break;
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_two_sided_p(mid, df) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Paired t-test on the per-item differences `a[i] - b[i]`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedStats> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired series differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    ttest_from_diffs(&diffs)
}

/// Paired t-test from an already-computed difference series.
pub fn ttest_from_diffs(diffs: &[f64]) -> Result<PairedStats> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::InvalidInput(
            "paired t-test needs at least two pairs".into(),
        ));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let ss: f64 = diffs.iter().map(|d| (d - mean) * (d - mean)).sum();
    let sd = (ss / (nf - 1.0)).sqrt();
    let se = sd / nf.sqrt();
    let df = n - 1;

    // Identical differences everywhere: the test is degenerate. Checked on
    // the values themselves, not via se == 0.0, because summation rounding
    // can leave a constant series with a spuriously nonzero variance.
    if diffs.windows(2).all(|w| w[0] == w[1]) || se == 0.0 {
        let exact = diffs[0];
        let p = if exact == 0.0 { 1.0 } else { 0.0 };
        return Ok(PairedStats {
            n,
            mean_diff: exact,
            std_error: 0.0,
            t_stat: None,
            df,
            p_value: p,
            ci95: (exact, exact),
            degenerate: true,
        });
    }

    let t = mean / se;
    let p = t_two_sided_p(t, df);
    let t_crit = t_critical(df, 0.95);
    let half = t_crit * se;
    Ok(PairedStats {
        n,
        mean_diff: mean,
        std_error: se,
        t_stat: Some(t),
        df,
        p_value: p,
        ci95: (mean - half, mean + half),
        degenerate: false,
    })
}

/// Relative change of `attacked` against `clean`, rendered for the report:
/// "n/a" when the baseline is zero, "0%" below half a tenth of a percent,
/// one decimal below one percent, whole percents otherwise (always signed).
pub fn format_delta(clean: f64, attacked: f64) -> String {
    if clean == 0.0 {
        return "n/a".to_string();
    }
    let pct = (attacked - clean) / clean * 100.0;
    if pct.abs() < 0.05 {
        "0%".to_string()
    } else if pct.abs() < 1.0 {
        format!("{pct:+.1}%")
    } else {
        format!("{pct:+.0}%")
    }
}

//! Correlation and related summary statistics.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance (divides by n).
pub fn variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Sample variance (divides by n - 1).
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Pearson product-moment correlation.
pub fn pearson_r(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "pearson_r: length mismatch ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("pearson_r needs at least 2 points".into()));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Data("pearson_r: zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided p-value for a Pearson correlation `r` over `n` points, from
/// t = r·sqrt((n−2)/(1−r²)) on n−2 degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    if n < 3 || !r.is_finite() {
        return 1.0;
    }
    if r.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n - 2) as f64;
    let t = r.abs() * (df / (1.0 - r * r)).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    (2.0 * dist.sf(t)).clamp(0.0, 1.0)
}

/// Correlation of one sparse column with a dense target, with its p-value.
///
/// `entries` are `(row, value)` for the nonzero cells; every other cell of the
/// `n`-row column is zero. `centered_y` must already have its mean removed.
/// Zero-variance columns yield `(0, 1)`.
pub(crate) fn sparse_column_correlation(
    entries: impl Iterator<Item = (usize, f64)> + Clone,
    n: usize,
    centered_y: &[f64],
    y_ss: f64,
) -> (f64, f64) {
    let sum: f64 = entries.clone().map(|(_, v)| v).sum();
    let mx = sum / n as f64;
    let mut ss = 0.0;
    let mut cov = 0.0;
    let mut nnz = 0usize;
    for (row, v) in entries {
        ss += (v - mx) * (v - mx);
        cov += v * centered_y[row];
        nnz += 1;
    }
    ss += (n - nnz) as f64 * mx * mx;
    // Relative threshold: columns constant up to rounding count as constant.
    if ss <= 1e-24 * (1.0 + mx * mx) * n as f64 || y_ss == 0.0 {
        return (0.0, 1.0);
    }
    let r = (cov / (ss.sqrt() * y_ss.sqrt())).clamp(-1.0, 1.0);
    (r, correlation_p_value(r, n))
}

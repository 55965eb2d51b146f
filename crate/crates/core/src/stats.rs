//! Small statistics helpers: moments, Pearson and Spearman correlation.

use crate::error::{Error, Result};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population standard deviation.
pub fn std_dev(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Pearson correlation. Zero-variance inputs yield 0 rather than NaN.
pub fn pearson_r(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() {
        return Err(Error::Validation(format!(
            "pearson_r: length mismatch ({} vs {})",
            pred.len(),
            actual.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::Validation(format!(
            "pearson_r: need at least 2 samples, got {}",
            pred.len()
        )));
    }
    Ok(pearson_unchecked(pred, actual))
}

pub(crate) fn pearson_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0)
}

/// Ranks starting at 1, ties receive the average of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    pearson_r(&average_ranks(x), &average_ranks(y))
}

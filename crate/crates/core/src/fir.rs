//! Finite impulse response expansion of TR-level features.
//!
//! Row `t` of the expanded matrix is `[h_t, h_{t-1}, ..., h_{t-k}]`. Lags
//! never reach across a run boundary: a lag that would fall before the start
//! of the row's run is a zero vector.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::features::{FeatureMatrix, Level};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FirSpec {
    /// Number of lagged copies in addition to the current TR.
    pub k: usize,
}

impl FirSpec {
    pub fn new(k: usize) -> Self {
        FirSpec { k }
    }

    /// Converts a window length in seconds to lags, `k = round(seconds / tr)`.
    pub fn from_seconds(window_seconds: f64, tr: f64) -> Result<Self> {
        ensure!(
            window_seconds.is_finite() && window_seconds >= 0.0,
            Validation,
            "FIR window must be non-negative, got {window_seconds}"
        );
        ensure!(tr > 0.0, Validation, "tr must be positive");
        Ok(FirSpec {
            k: (window_seconds / tr).round() as usize,
        })
    }
}

/// Run boundaries for consecutive runs of the given lengths.
pub fn boundaries_from_lengths(lengths: &[usize]) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

fn check_partition(boundaries: &[Range<usize>], n: usize) -> Result<()> {
    let mut expected = 0;
    for b in boundaries {
        ensure!(
            b.start == expected,
            Validation,
            "run boundaries must tile [0, {n}) without gaps or overlap; range {b:?} starts at {} but {expected} was expected",
            b.start
        );
        ensure!(b.end >= b.start, Validation, "run range {b:?} is reversed");
        expected = b.end;
    }
    ensure!(
        expected == n,
        Validation,
        "run boundaries cover [0, {expected}) but there are {n} TRs"
    );
    Ok(())
}

/// Raw-matrix FIR expansion; see [`fir_expand`].
pub fn fir_expand_matrix(x: &Matrix, k: usize, run_boundaries: &[Range<usize>]) -> Result<Matrix> {
    check_partition(run_boundaries, x.nrows())?;
    let d = x.ncols();
    let mut out = Matrix::zeros(x.nrows(), d * (k + 1));
    for run in run_boundaries {
        for t in run.clone() {
            for lag in 0..=k.min(t - run.start) {
                out.view_mut((t, lag * d), (1, d))
                    .copy_from(&x.row(t - lag));
            }
        }
    }
    Ok(out)
}

pub fn fir_expand(
    x: &FeatureMatrix,
    spec: FirSpec,
    run_boundaries: &[Range<usize>],
) -> Result<FeatureMatrix> {
    ensure!(
        x.level() == Level::Tr,
        Usage,
        "FIR expansion expects TR-level features"
    );
    let values = fir_expand_matrix(x.values(), spec.k, run_boundaries)?;
    let mut provenance = x.provenance().clone();
    provenance.params.insert("fir_k".into(), spec.k.to_string());
    FeatureMatrix::new(values, Level::Tr, provenance)
}

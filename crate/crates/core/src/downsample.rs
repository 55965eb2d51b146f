//! Token-rate to TR-rate aggregation.
//!
//! Sum, average and last-token pooling bin events by onset into half-open TR
//! windows `[t_r, t_r + tr)`; empty bins produce zero rows. Lanczos filtering
//! weights every event by a windowed-sinc kernel centred on each TR time.
//! Event durations are ignored.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::assembly::StimulusEvent;
use crate::error::{ensure, Result};
use crate::features::{FeatureMatrix, Level};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DownsampleMethod {
    Sum,
    Average,
    Last,
    #[default]
    Lanczos,
}

fn default_lobes() -> usize {
    3
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownsampleSpec {
    pub method: DownsampleMethod,
    #[serde(default = "default_lobes")]
    pub lanczos_a: usize,
    /// Defaults to the TR Nyquist frequency `1 / (2 tr)`.
    #[serde(default, rename = "cutoff_hz")]
    pub lanczos_cutoff_hz: Option<f64>,
    /// Divide each TR's Lanczos output by the sum of its weights.
    #[serde(default = "default_true")]
    pub lanczos_normalize: bool,
}

impl Default for DownsampleSpec {
    fn default() -> Self {
        DownsampleSpec::new(DownsampleMethod::default())
    }
}

impl DownsampleSpec {
    pub fn new(method: DownsampleMethod) -> Self {
        DownsampleSpec {
            method,
            lanczos_a: default_lobes(),
            lanczos_cutoff_hz: None,
            lanczos_normalize: true,
        }
    }

    fn validate(&self) -> Result<()> {
        ensure!(self.lanczos_a >= 1, Validation, "lanczos_a must be >= 1");
        if let Some(c) = self.lanczos_cutoff_hz {
            ensure!(
                c.is_finite() && c > 0.0,
                Validation,
                "lanczos cutoff must be positive, got {c}"
            );
        }
        Ok(())
    }
}

/// Weight sums at or below this are treated as "no support" for a TR.
const MIN_WEIGHT_SUM: f64 = 1e-12;

fn sinc(u: f64) -> f64 {
    if u == 0.0 {
        1.0
    } else if u.fract() == 0.0 {
        // sin(pi * k) is not exactly zero in floating point
        0.0
    } else {
        let x = PI * u;
        x.sin() / x
    }
}

/// `sinc(u) * sinc(u / a)` on `|u| < a`, zero elsewhere.
pub fn lanczos_kernel(u: f64, a: usize) -> f64 {
    let a = a as f64;
    if u.abs() >= a {
        0.0
    } else {
        sinc(u) * sinc(u / a)
    }
}

/// Aggregates event-level `features` onto the TR grid given by `tr_times`.
pub fn downsample(
    features: &FeatureMatrix,
    events: &[StimulusEvent],
    tr_times: &[f64],
    tr: f64,
    spec: &DownsampleSpec,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    ensure!(
        features.level() == Level::Event,
        Usage,
        "downsample expects event-level features, got {:?}",
        features.level()
    );
    ensure!(
        features.nrows() == events.len(),
        Alignment,
        "{} feature rows for {} events",
        features.nrows(),
        events.len()
    );
    ensure!(!tr_times.is_empty(), Validation, "no TR times");
    ensure!(tr > 0.0, Validation, "tr must be positive");

    let onsets: Vec<f64> = events.iter().map(|e| e.onset).collect();
    let x = features.values();
    let values = match spec.method {
        DownsampleMethod::Sum | DownsampleMethod::Average | DownsampleMethod::Last => {
            binned(x, &onsets, tr_times, tr, spec.method)
        }
        DownsampleMethod::Lanczos => {
            let cutoff = spec.lanczos_cutoff_hz.unwrap_or(1.0 / (2.0 * tr));
            lanczos(
                x,
                &onsets,
                tr_times,
                2.0 * cutoff,
                spec.lanczos_a,
                spec.lanczos_normalize,
            )
        }
    };
    let mut provenance = features.provenance().clone();
    provenance.params.insert(
        "downsample".into(),
        format!("{:?}", spec.method).to_lowercase(),
    );
    FeatureMatrix::new(values, Level::Tr, provenance)
}

/// Index of the TR bin containing `onset`, if any.
fn bin_of(onset: f64, tr_times: &[f64], tr: f64) -> Option<usize> {
    // last TR start <= onset
    let i = tr_times.partition_point(|&t| t <= onset);
    if i == 0 {
        return None;
    }
    let i = i - 1;
    (onset < tr_times[i] + tr).then_some(i)
}

fn binned(
    x: &Matrix,
    onsets: &[f64],
    tr_times: &[f64],
    tr: f64,
    method: DownsampleMethod,
) -> Matrix {
    let d = x.ncols();
    let mut out = Matrix::zeros(tr_times.len(), d);
    let mut counts = vec![0usize; tr_times.len()];
    // (onset, event index) of the latest event seen per bin
    let mut last: Vec<Option<(f64, usize)>> = vec![None; tr_times.len()];
    for (e, &onset) in onsets.iter().enumerate() {
        let Some(b) = bin_of(onset, tr_times, tr) else {
            continue;
        };
        counts[b] += 1;
        match method {
            DownsampleMethod::Last => {
                if last[b].is_none_or(|(o, _)| onset >= o) {
                    last[b] = Some((onset, e));
                }
            }
            _ => {
                let mut row = out.row_mut(b);
                row += x.row(e);
            }
        }
    }
    match method {
        DownsampleMethod::Average => {
            for (b, &c) in counts.iter().enumerate() {
                if c > 0 {
                    let mut row = out.row_mut(b);
                    row /= c as f64;
                }
            }
        }
        DownsampleMethod::Last => {
            for (b, l) in last.iter().enumerate() {
                if let Some((_, e)) = l {
                    out.row_mut(b).copy_from(&x.row(*e));
                }
            }
        }
        _ => {}
    }
    out
}

fn lanczos(
    x: &Matrix,
    onsets: &[f64],
    tr_times: &[f64],
    rate: f64,
    a: usize,
    normalize: bool,
) -> Matrix {
    let mut out = Matrix::zeros(tr_times.len(), x.ncols());
    for (r, &t) in tr_times.iter().enumerate() {
        let mut total = 0.0;
        let mut row = out.row_mut(r);
        for (e, &o) in onsets.iter().enumerate() {
            let w = lanczos_kernel(rate * (t - o), a);
            if w != 0.0 {
                for (o, v) in row.iter_mut().zip(x.row(e).iter()) {
                    *o += w * v;
                }
                total += w;
            }
        }
        if normalize {
            if total.abs() > MIN_WEIGHT_SUM {
                row /= total;
            } else {
                row.fill(0.0);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::features::{word_rate, Provenance};

    fn events_at(onsets: &[f64]) -> Vec<StimulusEvent> {
        onsets
            .iter()
            .enumerate()
            .map(|(i, &o)| StimulusEvent::new(format!("w{i}"), o, 0.0))
            .collect()
    }

    fn column(values: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(
            Matrix::from_column_slice(values.len(), 1, values),
            Level::Event,
            Provenance::new("test"),
        )
        .unwrap()
    }

    fn run(method: DownsampleMethod) -> Vec<f64> {
        let ev = events_at(&[0.5, 1.0, 1.8]);
        let out = downsample(
            &column(&[1.0, 2.0, 3.0]),
            &ev,
            &[0.0, 2.0],
            2.0,
            &DownsampleSpec::new(method),
        )
        .unwrap();
        assert_eq!(out.level(), Level::Tr);
        out.values().iter().copied().collect()
    }

    #[test]
    fn hand_binned_pooling() {
        assert_eq!(run(DownsampleMethod::Sum), [6.0, 0.0]);
        assert_eq!(run(DownsampleMethod::Average), [2.0, 0.0]);
        assert_eq!(run(DownsampleMethod::Last), [3.0, 0.0]);
    }

    #[test]
    fn word_rate_counts() {
        let ev = events_at(&[0.5, 1.0, 1.8]);
        let out = downsample(
            &word_rate(&ev),
            &ev,
            &[0.0, 2.0],
            2.0,
            &DownsampleSpec::new(DownsampleMethod::Sum),
        )
        .unwrap();
        assert_eq!(out.values().as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn bin_edges_half_open() {
        let ev = events_at(&[2.0, 3.999, 4.0]);
        let out = downsample(
            &word_rate(&ev),
            &ev,
            &[0.0, 2.0, 4.0],
            2.0,
            &DownsampleSpec::new(DownsampleMethod::Sum),
        )
        .unwrap();
        assert_eq!(out.values().as_slice(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn lanczos_event_on_tr_is_exact() {
        let ev = events_at(&[2.0]);
        let out = downsample(
            &column(&[7.5]),
            &ev,
            &[0.0, 2.0, 4.0],
            2.0,
            &DownsampleSpec::new(DownsampleMethod::Lanczos),
        )
        .unwrap();
        assert_eq!(out.values()[(1, 0)], 7.5);
    }

    #[test]
    fn lanczos_kernel_zeros_at_integers() {
        assert_eq!(lanczos_kernel(0.0, 3), 1.0);
        for k in 1..3 {
            assert!(lanczos_kernel(k as f64, 3).abs() < 1e-15);
        }
        assert_eq!(lanczos_kernel(3.0, 3), 0.0);
        assert_eq!(lanczos_kernel(-3.5, 3), 0.0);
    }

    #[test]
    fn lanczos_all_zero_weights_give_zero_row() {
        let ev = events_at(&[0.0]);
        let out = downsample(
            &column(&[5.0]),
            &ev,
            &[0.0, 2.0, 4.0, 6.0, 8.0],
            2.0,
            &DownsampleSpec::new(DownsampleMethod::Lanczos),
        )
        .unwrap();
        assert_eq!(out.values()[(4, 0)], 0.0);
        // first zero of the kernel sits one TR away
        assert!(out.values()[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn rejects_tr_level_input() {
        let fm = column(&[1.0]).with_level(Level::Tr);
        let err = downsample(
            &fm,
            &events_at(&[0.0]),
            &[0.0],
            2.0,
            &DownsampleSpec::default(),
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn rejects_row_mismatch() {
        let err = downsample(
            &column(&[1.0, 2.0]),
            &events_at(&[0.0]),
            &[0.0],
            2.0,
            &DownsampleSpec::default(),
        );
        assert!(matches!(err, Err(Error::Alignment(_))));
    }
}

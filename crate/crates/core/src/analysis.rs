//! Methodological audits: temporal leakage under different folding schemes,
//! head motion versus predictivity, and subject-level aggregation.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{apply_mask, Assembly, MOTION_PARAMS};
use crate::downsample::{downsample, DownsampleSpec};
use crate::error::{ensure, Error, Result};
use crate::features::{acv_features, AcvParams, Level};
use crate::fir::{boundaries_from_lengths, fir_expand_matrix};
use crate::mapping::{make_folds, ridge_fit, FoldScheme, RidgeSpec, ScoreReport};
use crate::stats::{mean, spearman_rho};
use crate::Matrix;

/// Reference head radius (mm) converting rotations to displacement.
pub const DEFAULT_HEAD_RADIUS_MM: f64 = 50.0;

/// Subjects whose mean FD exceeds this are excluded.
pub const DEFAULT_FD_THRESHOLD_MM: f64 = 0.2;

/// Framewise displacement: `sum |d trans| + radius * sum |d rot|`, with
/// `FD_0 = 0`.
pub fn framewise_displacement(motion: &Matrix, radius_mm: f64) -> Result<Vec<f64>> {
    ensure!(
        motion.ncols() == MOTION_PARAMS,
        Validation,
        "motion parameters need {MOTION_PARAMS} columns, got {}",
        motion.ncols()
    );
    let fd = (0..motion.nrows())
        .map(|t| {
            if t == 0 {
                return 0.0;
            }
            let d = motion.row(t) - motion.row(t - 1);
            let trans: f64 = (0..3).map(|j| d[j].abs()).sum();
            let rot: f64 = (3..6).map(|j| d[j].abs()).sum();
            trans + radius_mm * rot
        })
        .collect();
    Ok(fd)
}

/// Mean of an FD series over frames that have a predecessor.
pub fn mean_fd(fd: &[f64]) -> f64 {
    if fd.len() < 2 {
        0.0
    } else {
        mean(&fd[1..])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSummary {
    pub subject: String,
    pub mean_fd: f64,
    pub n_trs: usize,
}

/// Mean FD across all runs of an assembly. Fails if any run lacks motion
/// parameters.
pub fn motion_summary(a: &Assembly, radius_mm: f64) -> Result<MotionSummary> {
    let mut frames = Vec::new();
    let mut n_trs = 0;
    for run in a.runs() {
        let motion = run.motion().ok_or_else(|| {
            Error::Lookup(format!(
                "subject {} run {} has no motion parameters",
                a.subject(),
                run.id()
            ))
        })?;
        let fd = framewise_displacement(motion, radius_mm)?;
        frames.extend_from_slice(&fd[1.min(fd.len())..]);
        n_trs += run.n_trs();
    }
    Ok(MotionSummary {
        subject: a.subject().to_string(),
        mean_fd: mean(&frames),
        n_trs,
    })
}

/// Splits subjects into (kept, excluded); excluded iff `mean_fd > threshold`.
pub fn exclude_by_motion(
    subjects: &[MotionSummary],
    threshold_mm: f64,
) -> (Vec<MotionSummary>, Vec<MotionSummary>) {
    subjects
        .iter()
        .cloned()
        .partition(|s| s.mean_fd <= threshold_mm)
}

/// `y = a * x^b + c` fitted by least squares.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub sse: f64,
    pub r_squared: f64,
    pub spearman_rho: f64,
}

impl PowerLawFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.a * x.powf(self.b) + self.c
    }
}

const POWER_LAW_STARTS: usize = 25;
const POWER_LAW_B_RANGE: (f64, f64) = (-3.0, 3.0);
const LM_MAX_ITER: usize = 500;

fn sse_of(x: &[f64], y: &[f64], a: f64, b: f64, c: f64) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&xi, &yi)| {
            let r = yi - (a * xi.powf(b) + c);
            r * r
        })
        .sum()
}

/// Least-squares `(a, c)` for fixed exponent `b`.
fn linear_ac(x: &[f64], y: &[f64], b: f64) -> (f64, f64) {
    let n = x.len() as f64;
    let z: Vec<f64> = x.iter().map(|v| v.powf(b)).collect();
    let (mz, my) = (mean(&z), mean(y));
    let szz: f64 = z.iter().map(|v| (v - mz) * (v - mz)).sum();
    let szy: f64 = z.iter().zip(y).map(|(v, w)| (v - mz) * (w - my)).sum();
    if szz <= 1e-300 * n {
        return (0.0, my);
    }
    let a = szy / szz;
    (a, my - a * mz)
}

/// Damped Gauss-Newton (Levenberg-Marquardt) refinement from one start.
fn refine(x: &[f64], y: &[f64], start: (f64, f64, f64)) -> (f64, f64, f64, f64) {
    let (mut a, mut b, mut c) = start;
    let mut sse = sse_of(x, y, a, b, c);
    let mut lambda = 1e-3;
    let lnx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    for _ in 0..LM_MAX_ITER {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for i in 0..x.len() {
            let p = x[i].powf(b);
            let j = Vector3::new(p, a * p * lnx[i], 1.0);
            let r = y[i] - (a * p + c);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj;
            for k in 0..3 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let (na, nb, nc) = (a + step[0], b + step[1], c + step[2]);
            let nsse = sse_of(x, y, na, nb, nc);
            if nsse.is_finite() && nsse < sse {
                let gain = sse - nsse;
                (a, b, c) = (na, nb, nc);
                sse = nsse;
                lambda = (lambda / 10.0).max(1e-15);
                improved = gain > 1e-16 * sse.max(1e-300);
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (a, b, c, sse)
}

/// Fewest points [`power_law_fit`] accepts; three parameters need a residual.
pub const MIN_POWER_LAW_POINTS: usize = 4;

/// Fits `y = a x^b + c` by multi-start local optimisation: 25 exponent starts
/// on `[-3, 3]`, each seeded with the linear least-squares `(a, c)` and
/// refined by damped Gauss-Newton. The lowest SSE wins.
pub fn power_law_fit(x: &[f64], y: &[f64]) -> Result<PowerLawFit> {
    ensure!(
        x.len() == y.len(),
        Validation,
        "x and y lengths differ ({} vs {})",
        x.len(),
        y.len()
    );
    ensure!(
        x.len() >= MIN_POWER_LAW_POINTS,
        Validation,
        "power-law fit needs at least {MIN_POWER_LAW_POINTS} points"
    );
    ensure!(
        x.iter().all(|v| v.is_finite() && *v > 0.0),
        Validation,
        "power-law fit needs strictly positive x"
    );
    ensure!(
        y.iter().all(|v| v.is_finite()),
        Validation,
        "non-finite y values"
    );
    let (lo, hi) = POWER_LAW_B_RANGE;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for s in 0..POWER_LAW_STARTS {
        let b0 = lo + (hi - lo) * s as f64 / (POWER_LAW_STARTS - 1) as f64;
        let (a0, c0) = linear_ac(x, y, b0);
        let cand = refine(x, y, (a0, b0, c0));
        if best.is_none_or(|b| cand.3 < b.3) {
            best = Some(cand);
        }
    }
    let (a, b, c, sse) = best.expect("at least one start");
    let my = mean(y);
    let sst: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    let scale: f64 = y.iter().map(|v| v * v).sum();
    let r_squared = if sst <= 1e-24 * scale.max(1e-300) {
        0.0
    } else {
        1.0 - sse / sst
    };
    Ok(PowerLawFit {
        a,
        b,
        c,
        sse,
        r_squared,
        spearman_rho: spearman_rho(x, y)?,
    })
}

/// Timepoints the control vectors are built over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcvTimebase {
    /// One row per TR, no downsampling.
    #[default]
    Tr,
    /// One row per stimulus event, then downsampled to TRs.
    Event,
}

fn default_k_folds() -> usize {
    5
}

fn default_trim() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    #[serde(default)]
    pub ridge: RidgeSpec,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_trim")]
    pub trim_trs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub fir_k: usize,
    #[serde(default)]
    pub timebase: AcvTimebase,
    /// Used only for the event timebase.
    #[serde(default)]
    pub downsample: DownsampleSpec,
    /// Restrict to this mask before fitting.
    #[serde(default)]
    pub mask: Option<String>,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            ridge: RidgeSpec::default(),
            k_folds: default_k_folds(),
            trim_trs: default_trim(),
            seed: 0,
            fir_k: 0,
            timebase: AcvTimebase::Tr,
            downsample: DownsampleSpec::default(),
            mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub ell: f64,
    pub d: usize,
    /// Mean per-voxel r for each scheme name.
    pub mean_r: BTreeMap<String, f64>,
    pub per_voxel_r: BTreeMap<String, Vec<f64>>,
    pub config: AuditConfig,
}

impl LeakageReport {
    pub fn score(&self, scheme: FoldScheme) -> f64 {
        self.mean_r[scheme.name()]
    }
}

/// Content-free design matrix for every run of `a`, FIR-expanded and stacked.
pub fn acv_design(a: &Assembly, acv: AcvParams, cfg: &AuditConfig) -> Result<Matrix> {
    let mut blocks = Vec::with_capacity(a.runs().len());
    for run in a.runs() {
        let fm = match cfg.timebase {
            AcvTimebase::Tr => acv_features(run.n_trs(), acv)?.with_level(Level::Tr),
            AcvTimebase::Event => {
                let fm = acv_features(run.events().len(), acv)?;
                downsample(&fm, run.events(), run.tr_times(), run.tr(), &cfg.downsample)?
            }
        };
        blocks.push(fm.into_values());
    }
    stack_with_fir(&blocks, cfg.fir_k)
}

/// Stacks per-run TR-level blocks and FIR-expands them without crossing runs.
pub fn stack_with_fir(blocks: &[Matrix], k: usize) -> Result<Matrix> {
    ensure!(!blocks.is_empty(), Validation, "no runs to stack");
    let width = blocks[0].ncols();
    ensure!(
        blocks.iter().all(|b| b.ncols() == width),
        Validation,
        "runs have different feature widths"
    );
    let lengths: Vec<usize> = blocks.iter().map(|b| b.nrows()).collect();
    let stacked = stack_rows(blocks);
    fir_expand_matrix(&stacked, k, &boundaries_from_lengths(&lengths))
}

pub fn stack_rows(blocks: &[Matrix]) -> Matrix {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let width = blocks.first().map_or(0, |b| b.ncols());
    let mut out = Matrix::zeros(n, width);
    let mut offset = 0;
    for b in blocks {
        out.rows_mut(offset, b.nrows()).copy_from(b);
        offset += b.nrows();
    }
    out
}

/// Fits content-free control features under every folding scheme on the same
/// data. Differences between schemes isolate what temporal structure alone
/// can buy under each split.
pub fn leakage_audit(a: &Assembly, acv: AcvParams, cfg: &AuditConfig) -> Result<LeakageReport> {
    let a = match &cfg.mask {
        Some(m) => apply_mask(a, m)?,
        None => a.clone(),
    };
    let x = acv_design(&a, acv, cfg)?;
    let bolds: Vec<Matrix> = a.runs().iter().map(|r| r.bold().clone()).collect();
    let y = stack_rows(&bolds);
    let results = FoldScheme::ALL
        .par_iter()
        .map(|&scheme| {
            let plan = make_folds(x.nrows(), scheme, cfg.k_folds, cfg.trim_trs, cfg.seed)?;
            let (_, report) = ridge_fit(&x, &y, &cfg.ridge, &plan)?;
            Ok((scheme, report))
        })
        .collect::<Result<Vec<(FoldScheme, ScoreReport)>>>()?;
    let mut mean_r = BTreeMap::new();
    let mut per_voxel_r = BTreeMap::new();
    for (scheme, report) in results {
        mean_r.insert(scheme.name().to_string(), report.mean_r());
        per_voxel_r.insert(scheme.name().to_string(), report.per_voxel_r);
    }
    Ok(LeakageReport {
        ell: acv.ell,
        d: acv.d,
        mean_r,
        per_voxel_r,
        config: cfg.clone(),
    })
}

/// Subject-level score: mean over a subject's reports of the mask's ROI mean.
pub fn subject_summary(
    reports: &[(String, ScoreReport)],
    mask_name: &str,
) -> Result<BTreeMap<String, f64>> {
    let mut grouped: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (subject, report) in reports {
        let v = report.roi_means.get(mask_name).ok_or_else(|| {
            Error::Lookup(format!(
                "report for {subject} has no ROI mean for mask {mask_name:?}"
            ))
        })?;
        grouped.entry(subject.clone()).or_default().push(*v);
    }
    Ok(grouped.into_iter().map(|(s, v)| (s, mean(&v))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_motion_has_zero_fd() {
        let m = Matrix::from_fn(10, 6, |_, j| j as f64 + 0.5);
        assert!(framewise_displacement(&m, 50.0)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn translation_step() {
        let m = Matrix::from_fn(10, 6, |t, j| if j == 0 && t >= 5 { 1.0 } else { 0.0 });
        let fd = framewise_displacement(&m, 50.0).unwrap();
        assert_eq!(fd[5], 1.0);
        assert_eq!(fd.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn rotation_step_at_radius() {
        let m = Matrix::from_fn(3, 6, |t, j| if j == 4 && t >= 1 { 0.01 } else { 0.0 });
        let fd = framewise_displacement(&m, 50.0).unwrap();
        assert!((fd[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrong_column_count() {
        assert!(matches!(
            framewise_displacement(&Matrix::zeros(4, 5), 50.0),
            Err(Error::Validation(_))
        ));
    }

    fn summary(subject: &str, mean_fd: f64) -> MotionSummary {
        MotionSummary {
            subject: subject.into(),
            mean_fd,
            n_trs: 100,
        }
    }

    #[test]
    fn exclusion_is_strict() {
        let subjects = vec![summary("a", 0.2), summary("b", 0.25), summary("c", 0.05)];
        let (kept, excluded) = exclude_by_motion(&subjects, 0.2);
        assert_eq!(
            kept.iter().map(|s| s.subject.as_str()).collect::<Vec<_>>(),
            ["a", "c"]
        );
        assert_eq!(excluded.len(), 1);
        assert_eq!(excluded[0].subject, "b");
        let (_, none) = exclude_by_motion(&subjects[2..], 0.2);
        assert!(none.is_empty());
    }

    #[test]
    fn power_law_constant_y() {
        let x = [0.1, 0.2, 0.3, 0.4, 0.5];
        let fit = power_law_fit(&x, &[0.3; 5]).unwrap();
        assert!(fit.a.abs() < 1e-9);
        assert_eq!(fit.r_squared, 0.0);
    }

    #[test]
    fn power_law_rejects_non_positive_x() {
        assert!(matches!(
            power_law_fit(&[0.0, 0.1, 0.2, 0.3], &[1.0, 2.0, 3.0, 4.0]),
            Err(Error::Validation(_))
        ));
        assert!(power_law_fit(&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn power_law_monotone_decreasing_rho() {
        let x: Vec<f64> = (1..=10).map(|i| i as f64 * 0.03).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 - v).collect();
        assert!((power_law_fit(&x, &y).unwrap().spearman_rho + 1.0).abs() < 1e-15);
    }

    fn report_with(mask: &str, v: f64) -> ScoreReport {
        let mut r = ScoreReport::new(vec![v], vec![], serde_json::Value::Null);
        r.roi_means.insert(mask.into(), v);
        r
    }

    #[test]
    fn subject_summary_means_runs() {
        let reports = vec![
            ("s1".to_string(), report_with("language", 0.1)),
            ("s2".to_string(), report_with("language", 0.4)),
            ("s1".to_string(), report_with("language", 0.3)),
        ];
        let s = subject_summary(&reports, "language").unwrap();
        assert!((s["s1"] - 0.2).abs() < 1e-15);
        assert_eq!(s["s2"], 0.4);
        let mut rev = reports.clone();
        rev.reverse();
        assert_eq!(subject_summary(&rev, "language").unwrap(), s);
        assert!(matches!(
            subject_summary(&reports, "V1"),
            Err(Error::Lookup(_))
        ));
    }
}

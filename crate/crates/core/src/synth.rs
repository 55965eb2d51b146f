//! Synthetic assemblies with known ground truth.
//!
//! Three kinds of targets are available: a planted linear model of
//! hemodynamically lagged stimulus features, content-free autocorrelated
//! signals drawn from the exponential temporal kernel, and white noise. All
//! randomness comes from ChaCha8 streams keyed by the seed, one stream per
//! run, so fixtures are reproducible across platforms.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::assembly::{Assembly, Run, Space, StimulusEvent, MOTION_PARAMS};
use crate::downsample::{downsample, DownsampleMethod, DownsampleSpec};
use crate::error::{ensure, Result};
use crate::features::{FeatureMatrix, Level, Provenance};
use crate::fir::fir_expand_matrix;
use crate::io::round_to_f32;
use crate::Matrix;

/// Size of the token vocabulary events are drawn from.
pub const VOCABULARY: usize = 200;

/// Head radius (mm) used to turn rotational drift into comparable distances.
const MOTION_RADIUS_MM: f64 = 50.0;

const WEIGHT_STREAM: u64 = 0;
const MOTION_STREAM_BASE: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    PlantedLinear,
    Autocorrelated,
    White,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub drift_mm_per_tr: f64,
    pub spike_prob: f64,
}

fn default_subject() -> String {
    "sub-synth".into()
}

fn default_downsample() -> DownsampleMethod {
    DownsampleMethod::Sum
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_subject")]
    pub subject: String,
    pub n_runs: usize,
    pub n_trs: usize,
    pub n_voxels: usize,
    pub n_events_per_tr_mean: f64,
    pub tr: f64,
    pub feature_dim: usize,
    pub noise_sd: f64,
    pub target_kind: TargetKind,
    #[serde(default)]
    pub acv_ell: Option<f64>,
    pub seed: u64,
    /// Taps of the planted lag profile (lags `0..hrf_lags`); defaults to
    /// covering 12 s.
    #[serde(default)]
    pub hrf_lags: Option<usize>,
    /// How planted event features are pooled to TRs before lagging.
    #[serde(default = "default_downsample")]
    pub downsample: DownsampleMethod,
    #[serde(default)]
    pub motion: Option<MotionSpec>,
}

impl SynthSpec {
    /// A small planted-linear fixture; adjust fields as needed.
    pub fn planted(seed: u64) -> Self {
        SynthSpec {
            subject: default_subject(),
            n_runs: 2,
            n_trs: 200,
            n_voxels: 10,
            n_events_per_tr_mean: 2.5,
            tr: 2.0,
            feature_dim: 4,
            noise_sd: 0.0,
            target_kind: TargetKind::PlantedLinear,
            acv_ell: None,
            seed,
            hrf_lags: Some(4),
            downsample: default_downsample(),
            motion: None,
        }
    }

    pub fn lag_count(&self) -> usize {
        self.hrf_lags
            .unwrap_or_else(|| (12.0 / self.tr).round() as usize + 1)
    }

    fn validate(&self) -> Result<()> {
        ensure!(
            self.n_runs >= 1 && self.n_trs >= 1 && self.n_voxels >= 1 && self.feature_dim >= 1,
            Validation,
            "synthetic dimensions must be >= 1"
        );
        ensure!(
            self.tr.is_finite() && self.tr > 0.0,
            Validation,
            "tr must be positive"
        );
        ensure!(
            self.n_events_per_tr_mean.is_finite() && self.n_events_per_tr_mean > 0.0,
            Validation,
            "event rate must be positive"
        );
        ensure!(
            self.noise_sd.is_finite() && self.noise_sd >= 0.0,
            Validation,
            "noise_sd must be >= 0"
        );
        ensure!(self.lag_count() >= 1, Validation, "hrf_lags must be >= 1");
        if self.target_kind == TargetKind::Autocorrelated {
            ensure!(
                self.acv_ell.is_some_and(|l| l.is_finite() && l > 0.0),
                Validation,
                "autocorrelated targets need a positive acv_ell"
            );
        }
        if let Some(m) = &self.motion {
            ensure!(
                m.drift_mm_per_tr >= 0.0 && (0.0..=1.0).contains(&m.spike_prob),
                Validation,
                "motion drift must be >= 0 and spike_prob in [0, 1]"
            );
        }
        Ok(())
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub kind: TargetKind,
    /// `feature_dim x n_voxels`; zero unless planted-linear.
    pub weights: Matrix,
    /// Unit-peak hemodynamic gain per lag (TR units).
    pub lag_profile: Vec<f64>,
    pub ell: Option<f64>,
    /// Event-level stimulus features per run (rounded to f32).
    pub event_features: Vec<FeatureMatrix>,
    pub downsample: DownsampleMethod,
}

impl GroundTruth {
    /// JSON summary with weights as row arrays.
    pub fn to_json(&self) -> serde_json::Value {
        let weights: Vec<Vec<f64>> = self
            .weights
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        serde_json::json!({
            "target_kind": self.kind,
            "weights": weights,
            "lag_profile": self.lag_profile,
            "fir_k": self.lag_profile.len() - 1,
            "ell": self.ell,
            "downsample": self.downsample,
        })
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn ln_factorial(k: u32) -> f64 {
    (2..=k).map(|i| (i as f64).ln()).sum()
}

fn gamma_pdf(t: f64, shape: u32) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    ((shape - 1) as f64 * t.ln() - t - ln_factorial(shape - 1)).exp()
}

/// Canonical double-gamma response (peak 5 s, undershoot 15 s, ratio 6)
/// sampled at `j * tr` for `j in 0..lags`, scaled to unit peak.
pub fn double_gamma_profile(tr: f64, lags: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..lags)
        .map(|j| {
            let t = j as f64 * tr;
            gamma_pdf(t, 6) - gamma_pdf(t, 16) / 6.0
        })
        .collect();
    let peak = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if peak > 0.0 {
        raw.iter().map(|v| v / peak).collect()
    } else {
        raw
    }
}

fn draw_events(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<StimulusEvent> {
    let rate = spec.n_events_per_tr_mean / spec.tr;
    let gaps = Exp::new(rate).expect("rate validated positive");
    let end = spec.n_trs as f64 * spec.tr;
    let mut events = Vec::new();
    let mut t = gaps.sample(rng);
    while t < end {
        let word = rng.random_range(0..VOCABULARY);
        let duration = gaps.sample(rng).min(1.0);
        events.push(StimulusEvent::new(format!("w{word}"), t, duration));
        t += gaps.sample(rng);
    }
    events
}

/// Random-walk realignment parameters with occasional 1 mm transient spikes.
///
/// Translations step by `drift * N(0, 1)` mm per TR and rotations by
/// `drift / 50 * N(0, 1)` rad, so both contribute similarly to framewise
/// displacement. The same random draws are consumed whatever the parameters,
/// which keeps traces for different drifts comparable under one seed.
pub fn motion_trace(n_trs: usize, drift_mm_per_tr: f64, spike_prob: f64, seed: u64) -> Matrix {
    motion_from_rng(
        &mut rng_for(seed, MOTION_STREAM_BASE),
        n_trs,
        drift_mm_per_tr,
        spike_prob,
    )
}

fn motion_from_rng(rng: &mut ChaCha8Rng, n_trs: usize, drift: f64, spike_prob: f64) -> Matrix {
    let mut m = Matrix::zeros(n_trs, MOTION_PARAMS);
    let mut pos = [0.0; MOTION_PARAMS];
    for t in 0..n_trs {
        for (j, p) in pos.iter_mut().enumerate() {
            let step = normal(rng);
            if t > 0 {
                let scale = if j < 3 {
                    drift
                } else {
                    drift / MOTION_RADIUS_MM
                };
                *p += scale * step;
            }
        }
        m.row_mut(t).copy_from_slice(&pos);
        let u: f64 = rng.random();
        let axis = rng.random_range(0..3);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        if t > 0 && u < spike_prob {
            m[(t, axis)] += sign;
        }
    }
    m
}

/// Adds a transient displacement of `mm` to trans_x at row `t`.
pub fn add_spike(motion: &mut Matrix, t: usize, mm: f64) {
    motion[(t, 0)] += mm;
}

/// Generates a synthetic assembly and what was planted in it.
pub fn generate(spec: &SynthSpec) -> Result<(Assembly, GroundTruth)> {
    spec.validate()?;
    let lags = spec.lag_count();
    let lag_profile = double_gamma_profile(spec.tr, lags);

    let mut wrng = rng_for(spec.seed, WEIGHT_STREAM);
    let mut weights = Matrix::zeros(spec.feature_dim, spec.n_voxels);
    if spec.target_kind == TargetKind::PlantedLinear {
        weights = Matrix::from_fn(spec.feature_dim, spec.n_voxels, |_, _| normal(&mut wrng));
        // Unit expected signal variance per voxel: pooled features have
        // variance ~ events per TR for sum pooling.
        let pooled_var = match spec.downsample {
            DownsampleMethod::Sum => spec.n_events_per_tr_mean,
            _ => 1.0,
        };
        let gain: f64 = lag_profile.iter().map(|h| h * h).sum();
        for mut col in weights.column_iter_mut() {
            let norm2 = col.norm_squared();
            if norm2 > 0.0 {
                col /= (pooled_var * gain * norm2).sqrt();
            }
        }
    }
    // planted FIR weights: block j holds h_j * W
    let mut lagged_weights = Matrix::zeros(spec.feature_dim * lags, spec.n_voxels);
    for (j, h) in lag_profile.iter().enumerate() {
        lagged_weights
            .rows_mut(j * spec.feature_dim, spec.feature_dim)
            .copy_from(&(&weights * *h));
    }

    let mut runs = Vec::with_capacity(spec.n_runs);
    let mut event_features = Vec::with_capacity(spec.n_runs);
    for r in 0..spec.n_runs {
        let mut rng = rng_for(spec.seed, r as u64 + 1);
        let events = draw_events(&mut rng, spec);
        let mut feats = Matrix::from_fn(events.len(), spec.feature_dim, |_, _| normal(&mut rng));
        round_to_f32(&mut feats);
        let fm = FeatureMatrix::new(
            feats,
            Level::Event,
            Provenance::new("synth").with_param("seed", spec.seed),
        )?;
        let tr_times = Run::regular_tr_times(spec.n_trs, spec.tr, 0.0);

        let mut bold = match spec.target_kind {
            TargetKind::PlantedLinear => {
                let pooled = downsample(
                    &fm,
                    &events,
                    &tr_times,
                    spec.tr,
                    &DownsampleSpec::new(spec.downsample),
                )?;
                let design = fir_expand_matrix(pooled.values(), lags - 1, &[0..spec.n_trs])?;
                design * &lagged_weights
            }
            TargetKind::Autocorrelated => {
                let rho = (-1.0 / spec.acv_ell.expect("validated")).exp();
                let innov = (1.0 - rho * rho).sqrt();
                let mut m = Matrix::zeros(spec.n_trs, spec.n_voxels);
                for v in 0..spec.n_voxels {
                    let mut x = normal(&mut rng);
                    m[(0, v)] = x;
                    for t in 1..spec.n_trs {
                        x = rho * x + innov * normal(&mut rng);
                        m[(t, v)] = x;
                    }
                }
                m
            }
            TargetKind::White => {
                Matrix::from_fn(spec.n_trs, spec.n_voxels, |_, _| normal(&mut rng))
            }
        };
        if spec.noise_sd > 0.0 {
            for v in bold.iter_mut() {
                *v += spec.noise_sd * normal(&mut rng);
            }
        }
        round_to_f32(&mut bold);

        let motion = spec.motion.map(|m| {
            let mut mrng = rng_for(spec.seed, MOTION_STREAM_BASE + r as u64 + 1);
            let mut trace = motion_from_rng(&mut mrng, spec.n_trs, m.drift_mm_per_tr, m.spike_prob);
            round_to_f32(&mut trace);
            trace
        });
        runs.push(Run::new(
            format!("run-{:02}", r + 1),
            spec.tr,
            bold,
            tr_times,
            events,
            motion,
        )?);
        event_features.push(fm);
    }

    let mut masks = BTreeMap::new();
    masks.insert("all".to_string(), vec![true; spec.n_voxels]);
    let half = spec.n_voxels.div_ceil(2);
    masks.insert(
        "language".to_string(),
        (0..spec.n_voxels).map(|i| i < half).collect(),
    );
    let assembly = Assembly::new(spec.subject.clone(), Space::Surface, runs, masks)?;
    let truth = GroundTruth {
        kind: spec.target_kind,
        weights,
        lag_profile,
        ell: spec.acv_ell,
        event_features,
        downsample: spec.downsample,
    };
    Ok((assembly, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn hrf_peaks_two_to_three_trs_after_onset() {
        let h = double_gamma_profile(2.0, 8);
        let peak = (0..h.len()).max_by(|&a, &b| h[a].total_cmp(&h[b])).unwrap();
        assert!((2..=3).contains(&peak));
        assert_eq!(h[peak], 1.0);
        assert_eq!(h[0], 0.0);
        // undershoot
        assert!(h[7] < 0.0);
    }

    #[test]
    fn same_seed_same_assembly() {
        let spec = SynthSpec::planted(7);
        let (a, ga) = generate(&spec).unwrap();
        let (b, gb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = generate(&SynthSpec::planted(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn shapes_and_masks() {
        let mut spec = SynthSpec::planted(1);
        spec.n_trs = 50;
        spec.n_voxels = 10;
        let (a, g) = generate(&spec).unwrap();
        assert_eq!(a.runs().len(), 2);
        assert_eq!(a.runs()[0].bold().shape(), (50, 10));
        assert_eq!(
            a.mask("language").unwrap().iter().filter(|&&m| m).count(),
            5
        );
        assert_eq!(g.event_features[0].nrows(), a.runs()[0].events().len());
    }

    #[test]
    fn white_requires_nothing_autocorrelated_requires_ell() {
        let mut spec = SynthSpec::planted(1);
        spec.target_kind = TargetKind::Autocorrelated;
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
        spec.acv_ell = Some(10.0);
        assert!(generate(&spec).is_ok());
    }

    #[test]
    fn still_trace_has_no_motion() {
        let m = motion_trace(30, 0.0, 0.0, 3);
        assert!(m.iter().all(|&v| v == 0.0));
    }
}

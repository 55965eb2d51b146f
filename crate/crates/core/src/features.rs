//! Event-level feature extraction.
//!
//! Extractors turn a run's stimulus events into a [`FeatureMatrix`] with one
//! row per event. Features from large pretrained models are computed outside
//! this crate and brought in with [`ingest_activations`]; the context windows
//! such external extraction should use are planned by
//! [`plan_context_windows`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::assembly::StimulusEvent;
use crate::error::{ensure, Error, Result};
use crate::io::{matrix_from_f32_bytes, matrix_to_f32_bytes};
use crate::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Event,
    Tr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextKind {
    Full,
    Half,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPolicy {
    pub kind: ContextKind,
    /// Maximum number of tokens in a window.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub extractor: String,
    #[serde(default)]
    pub layer: Option<i64>,
    #[serde(default)]
    pub context_policy: Option<ContextKind>,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(extractor: impl Into<String>) -> Self {
        Provenance {
            extractor: extractor.into(),
            ..Default::default()
        }
    }

    pub fn with_param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

/// Real-valued features at event or TR resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    values: Matrix,
    level: Level,
    provenance: Provenance,
}

impl FeatureMatrix {
    pub fn new(values: Matrix, level: Level, provenance: Provenance) -> Result<Self> {
        ensure!(
            values.ncols() >= 1,
            Validation,
            "feature width must be >= 1"
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Validation,
            "features from {} contain non-finite values",
            provenance.extractor
        );
        Ok(FeatureMatrix {
            values,
            level,
            provenance,
        })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn into_values(self) -> Matrix {
        self.values
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn with_level(mut self, level: Level) -> Self {
        self.level = level;
        self
    }
}

/// One count per event; sum-downsampling turns this into words per TR.
pub fn word_rate(events: &[StimulusEvent]) -> FeatureMatrix {
    FeatureMatrix {
        values: Matrix::from_element(events.len(), 1, 1.0),
        level: Level::Event,
        provenance: Provenance::new("word_rate"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    #[default]
    Zeros,
    Mean,
}

/// Static token -> vector table, as found in GloVe/word2vec text dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: HashMap<String, Vec<f64>>) -> Result<Self> {
        ensure!(dim >= 1, Validation, "embedding dim must be >= 1");
        for (token, v) in &vectors {
            ensure!(
                v.len() == dim,
                Format,
                "embedding for {token:?} has {} values, expected {dim}",
                v.len()
            );
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    /// Parses `token v1 v2 ... vd` lines. Blank lines are skipped.
    pub fn parse(reader: impl Read) -> Result<Self> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line.map_err(|e| Error::Format(format!("embedding table: {e}")))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let v = parts
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        Error::Format(format!(
                            "embedding table line {}: bad number {s:?}",
                            lineno + 1
                        ))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            let d = *dim.get_or_insert(v.len());
            ensure!(
                d >= 1 && v.len() == d,
                Format,
                "embedding table line {}: {} values, expected {d}",
                lineno + 1,
                v.len()
            );
            vectors.insert(token.to_string(), v);
        }
        let dim = dim.ok_or_else(|| Error::Format("embedding table is empty".into()))?;
        EmbeddingTable::new(dim, vectors)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::parse(f).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    fn mean_vector(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        if self.vectors.is_empty() {
            return mean;
        }
        // Sorted keys so the float sum does not depend on hash order.
        let mut keys: Vec<&String> = self.vectors.keys().collect();
        keys.sort();
        for k in keys {
            for (m, x) in mean.iter_mut().zip(&self.vectors[k]) {
                *m += x;
            }
        }
        let n = self.vectors.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Lowercases and strips leading/trailing non-alphanumeric characters.
pub fn normalize_token(text: &str) -> String {
    text.trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

/// Looks up each event's token in `table`. With `normalize` set, tokens are
/// passed through [`normalize_token`] first.
pub fn embedding_lookup(
    events: &[StimulusEvent],
    table: &EmbeddingTable,
    oov: OovPolicy,
    normalize: bool,
) -> Result<FeatureMatrix> {
    let fallback = match oov {
        OovPolicy::Zeros => vec![0.0; table.dim],
        OovPolicy::Mean => table.mean_vector(),
    };
    let mut values = Matrix::zeros(events.len(), table.dim);
    let mut misses = 0usize;
    for (i, e) in events.iter().enumerate() {
        let key = if normalize {
            normalize_token(&e.text)
        } else {
            e.text.clone()
        };
        let v = match table.get(&key) {
            Some(v) => v,
            None => {
                misses += 1;
                &fallback
            }
        };
        values.row_mut(i).copy_from_slice(v);
    }
    let provenance = Provenance::new("embedding")
        .with_param("dim", table.dim)
        .with_param("oov", format!("{oov:?}").to_lowercase())
        .with_param("normalize_tokens", normalize)
        .with_param("oov_count", misses);
    FeatureMatrix::new(values, Level::Event, provenance)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcvParams {
    /// Correlation length in timepoint units.
    pub ell: f64,
    /// Feature width.
    pub d: usize,
}

/// The exponential temporal kernel `A[i][j] = exp(-|i - j| / ell)`.
pub fn acv_kernel(n: usize, ell: f64) -> Matrix {
    Matrix::from_fn(n, n, |i, j| (-(i.abs_diff(j) as f64) / ell).exp())
}

/// Eigendecomposition of the exponential kernel, sorted by decreasing
/// eigenvalue. The kernel is symmetric positive definite, so its singular
/// vectors and values coincide with its eigenvectors and eigenvalues.
#[derive(Debug, Clone)]
pub struct AcvBasis {
    ell: f64,
    values: Vec<f64>,
    vectors: Matrix,
}

impl AcvBasis {
    pub fn new(n: usize, ell: f64) -> Result<Self> {
        ensure!(n >= 1, Validation, "ACV needs at least one timepoint");
        ensure!(
            ell.is_finite() && ell > 0.0,
            Validation,
            "ACV correlation length must be positive, got {ell}"
        );
        let eig = SymmetricEigen::new(acv_kernel(n, ell));
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
        let mut vectors = eig.eigenvectors.select_columns(order.iter());
        for mut col in vectors.column_iter_mut() {
            let max = col.amax();
            // First entry within rounding of the largest magnitude decides
            // the sign; symmetric kernels produce +/- pairs of equal size.
            let pivot = col
                .iter()
                .find(|v| v.abs() >= max * (1.0 - 1e-9))
                .copied()
                .unwrap_or(0.0);
            if pivot < 0.0 {
                col.neg_mut();
            }
        }
        Ok(AcvBasis {
            ell,
            values,
            vectors,
        })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.values
    }

    /// `U[:, :d] * diag(sqrt(s[:d]))`.
    pub fn features(&self, d: usize) -> Result<FeatureMatrix> {
        ensure!(
            d >= 1 && d <= self.n(),
            Validation,
            "ACV width d={d} must be in 1..={}",
            self.n()
        );
        let mut f = self.vectors.columns(0, d).into_owned();
        for (j, mut col) in f.column_iter_mut().enumerate() {
            col *= self.values[j].sqrt();
        }
        let provenance = Provenance::new("acv")
            .with_param("ell", self.ell)
            .with_param("d", d)
            .with_param("n", self.n());
        FeatureMatrix::new(f, Level::Event, provenance)
    }
}

const ACV_CACHE_SIZE: usize = 4;

type AcvCache = Mutex<VecDeque<((usize, u64), Arc<AcvBasis>)>>;

/// Shared basis for `(n, ell)`. Recently used bases are cached because the
/// kernel decomposition dominates the cost and never depends on content.
pub fn acv_basis(n: usize, ell: f64) -> Result<Arc<AcvBasis>> {
    static CACHE: OnceLock<AcvCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(VecDeque::new()));
    let key = (n, ell.to_bits());
    if let Some((_, b)) = cache.lock().unwrap().iter().find(|(k, _)| *k == key) {
        return Ok(Arc::clone(b));
    }
    let basis = Arc::new(AcvBasis::new(n, ell)?);
    let mut guard = cache.lock().unwrap();
    if !guard.iter().any(|(k, _)| *k == key) {
        if guard.len() == ACV_CACHE_SIZE {
            guard.pop_front();
        }
        guard.push_back((key, Arc::clone(&basis)));
    }
    Ok(basis)
}

/// Autocorrelation control features for `n` timepoints, tagged event-level.
pub fn acv_features(n: usize, p: AcvParams) -> Result<FeatureMatrix> {
    ensure!(
        p.d >= 1 && p.d <= n,
        Validation,
        "ACV width d={} must be in 1..=n ({n})",
        p.d
    );
    acv_basis(n, p.ell)?.features(p.d)
}

/// As [`acv_features`], tagged TR-level when `n` equals the run's TR count.
pub fn acv_features_for_run(n: usize, p: AcvParams, n_trs: usize) -> Result<FeatureMatrix> {
    let level = if n == n_trs { Level::Tr } else { Level::Event };
    Ok(acv_features(n, p)?.with_level(level))
}

/// Token range `[start, end]` (inclusive) fed to an external model to produce
/// the representation of token `target`. `end == target` always.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWindow {
    pub start: usize,
    pub end: usize,
    pub target: usize,
}

/// Plans one context window per token.
///
/// * `full`: sliding window of at most `W` tokens ending at the target.
/// * `half`: the start stays fixed until the window would exceed `W` tokens,
///   then advances by `floor(W / 2)` (at least 1).
/// * `reset`: non-overlapping blocks of `W` tokens.
pub fn plan_context_windows(n_tokens: usize, policy: ContextPolicy) -> Result<Vec<ContextWindow>> {
    ensure!(
        policy.window >= 1,
        Validation,
        "context window must be >= 1"
    );
    let w = policy.window;
    let step = (w / 2).max(1);
    let mut half_start = 0usize;
    Ok((0..n_tokens)
        .map(|t| {
            let start = match policy.kind {
                ContextKind::Full => (t + 1).saturating_sub(w),
                ContextKind::Reset => (t / w) * w,
                ContextKind::Half => {
                    while t - half_start + 1 > w {
                        half_start += step;
                    }
                    half_start
                }
            };
            ContextWindow {
                start,
                end: t,
                target: t,
            }
        })
        .collect())
}

/// Header line of an activation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationHeader {
    pub extractor: String,
    #[serde(default)]
    pub layer: Option<i64>,
    #[serde(default)]
    pub context_policy: Option<ContextKind>,
    pub n_rows: usize,
    pub d: usize,
    /// Absent means event level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level: Option<Level>,
}

/// Writes a JSON header line followed by the row-major f32 block.
pub fn export_activations(path: &Path, features: &FeatureMatrix) -> Result<()> {
    let header = ActivationHeader {
        extractor: features.provenance.extractor.clone(),
        layer: features.provenance.layer,
        context_policy: features.provenance.context_policy,
        n_rows: features.nrows(),
        d: features.ncols(),
        level: (features.level == Level::Tr).then_some(Level::Tr),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
    out.push(b'\n');
    out.extend(matrix_to_f32_bytes(&features.values));
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Reads an activation file without checking it against any event list.
pub fn read_activations(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let header: ActivationHeader = serde_json::from_slice(&bytes[..split])
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    let values = matrix_from_f32_bytes(&bytes[split + 1..], header.n_rows, header.d).map_err(
        |e| match e {
            Error::Integrity(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        },
    )?;
    let provenance = Provenance {
        extractor: header.extractor,
        layer: header.layer,
        context_policy: header.context_policy,
        params: BTreeMap::new(),
    };
    FeatureMatrix::new(values, header.level.unwrap_or(Level::Event), provenance)
}

/// Loads externally computed activations for `events`. The row count must
/// match the event count exactly.
pub fn ingest_activations(path: &Path, events: &[StimulusEvent]) -> Result<FeatureMatrix> {
    let fm = read_activations(path)?;
    ensure!(
        fm.nrows() == events.len(),
        Alignment,
        "{}: {} activation rows for {} events",
        path.display(),
        fm.nrows(),
        events.len()
    );
    Ok(fm.with_level(Level::Event))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn events(n: usize) -> Vec<StimulusEvent> {
        (0..n)
            .map(|i| StimulusEvent::new(format!("w{i}"), i as f64 * 0.4, 0.2))
            .collect()
    }

    #[test]
    fn word_rate_shapes() {
        let fm = word_rate(&events(3));
        assert_eq!(fm.values().as_slice(), &[1.0, 1.0, 1.0]);
        assert_eq!(word_rate(&[]).values().shape(), (0, 1));
    }

    fn toy_table() -> EmbeddingTable {
        EmbeddingTable::parse("a 1 0\nb 0 1\n".as_bytes()).unwrap()
    }

    #[test]
    fn embedding_hit_and_oov() {
        let table = toy_table();
        let ev = vec![
            StimulusEvent::new("\"A,", 0.0, 0.0),
            StimulusEvent::new("zebra", 1.0, 0.0),
        ];
        let zeros = embedding_lookup(&ev, &table, OovPolicy::Zeros, true).unwrap();
        assert_eq!(
            zeros.values().row(0).iter().copied().collect::<Vec<_>>(),
            [1.0, 0.0]
        );
        assert_eq!(
            zeros.values().row(1).iter().copied().collect::<Vec<_>>(),
            [0.0, 0.0]
        );
        let mean = embedding_lookup(&ev, &table, OovPolicy::Mean, true).unwrap();
        assert_eq!(
            mean.values().row(1).iter().copied().collect::<Vec<_>>(),
            [0.5, 0.5]
        );
    }

    #[test]
    fn embedding_normalization_can_be_disabled() {
        let table = toy_table();
        let ev = vec![StimulusEvent::new("A", 0.0, 0.0)];
        let fm = embedding_lookup(&ev, &table, OovPolicy::Zeros, false).unwrap();
        assert_eq!(
            fm.values().row(0).iter().copied().collect::<Vec<_>>(),
            [0.0, 0.0]
        );
    }

    #[test]
    fn malformed_table_is_format_error() {
        assert!(matches!(
            EmbeddingTable::parse("a 1 0\nb 0\n".as_bytes()),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            EmbeddingTable::parse("a 1 x\n".as_bytes()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn acv_two_by_two() {
        let f = acv_features(2, AcvParams { ell: 1.0, d: 1 }).unwrap();
        // top eigenpair of [[1, 1/e], [1/e, 1]]: (1 + 1/e, [1, 1] / sqrt 2)
        let expected = ((1.0 + (-1.0f64).exp()) / 2.0).sqrt();
        assert!((f.values()[(0, 0)] - expected).abs() < 1e-12);
        assert!((f.values()[(1, 0)] - expected).abs() < 1e-12);
        assert!((expected - 0.8270).abs() < 1e-4);
    }

    #[test]
    fn acv_kernel_band_width_is_ell() {
        for ell in [300.0, 750.0] {
            let a = acv_kernel(1000, ell);
            assert!((a[(0, ell as usize)] - (-1.0f64).exp()).abs() < 1e-12);
            assert_eq!(a[(5, 5)], 1.0);
        }
    }

    #[test]
    fn acv_rejects_d_above_n() {
        assert!(matches!(
            acv_features(5, AcvParams { ell: 2.0, d: 6 }),
            Err(Error::Validation(_))
        ));
        assert!(AcvBasis::new(5, 0.0).is_err());
    }

    #[test]
    fn acv_prefix_consistency() {
        let p3 = acv_features(30, AcvParams { ell: 7.0, d: 3 }).unwrap();
        let p8 = acv_features(30, AcvParams { ell: 7.0, d: 8 }).unwrap();
        assert_eq!(p8.values().columns(0, 3), p3.values().columns(0, 3));
    }

    #[test]
    fn acv_level_tag() {
        let p = AcvParams { ell: 3.0, d: 2 };
        assert_eq!(acv_features_for_run(10, p, 10).unwrap().level(), Level::Tr);
        assert_eq!(
            acv_features_for_run(10, p, 4).unwrap().level(),
            Level::Event
        );
    }

    fn starts(kind: ContextKind, w: usize, n: usize) -> Vec<usize> {
        plan_context_windows(n, ContextPolicy { kind, window: w })
            .unwrap()
            .iter()
            .map(|c| c.start)
            .collect()
    }

    #[test]
    fn context_full_and_reset() {
        assert_eq!(starts(ContextKind::Full, 4, 6), [0, 0, 0, 0, 1, 2]);
        assert_eq!(starts(ContextKind::Reset, 4, 6), [0, 0, 0, 0, 4, 4]);
    }

    #[test]
    fn context_half_advances_by_half_window() {
        assert_eq!(
            starts(ContextKind::Half, 4, 10),
            [0, 0, 0, 0, 2, 2, 4, 4, 6, 6]
        );
        assert_eq!(starts(ContextKind::Half, 1, 3), [0, 1, 2]);
    }

    #[test]
    fn context_large_window_starts_at_zero() {
        for kind in [ContextKind::Full, ContextKind::Half, ContextKind::Reset] {
            assert!(starts(kind, 8, 8).iter().all(|&s| s == 0));
        }
    }

    #[test]
    fn activation_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gpt2.act");
        let mut prov = Provenance::new("gpt2");
        prov.layer = Some(6);
        prov.context_policy = Some(ContextKind::Half);
        let fm = FeatureMatrix::new(
            Matrix::from_fn(10, 4, |i, j| (i * 4 + j) as f64 * 0.5),
            Level::Event,
            prov.clone(),
        )
        .unwrap();
        export_activations(&path, &fm).unwrap();
        let back = ingest_activations(&path, &events(10)).unwrap();
        assert_eq!(back.values().shape(), (10, 4));
        assert_eq!(back.provenance().layer, Some(6));
        assert_eq!(back.provenance().context_policy, Some(ContextKind::Half));
        assert!(matches!(
            ingest_activations(&path, &events(9)),
            Err(Error::Alignment(_))
        ));
    }
}

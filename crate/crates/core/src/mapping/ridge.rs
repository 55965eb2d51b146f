use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::folds::{make_folds, FoldPlan, FoldScheme};
use super::score::ScoreReport;
use crate::error::{ensure, Error, Result};
use crate::stats::pearson_unchecked;
use crate::Matrix;

/// Columns whose training standard deviation falls below this (relative to
/// their magnitude) are treated as constant.
const ZERO_VARIANCE_TOL: f64 = 1e-10;

/// `count` log-spaced values from `10^lo` to `10^hi`.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![10f64.powf(lo)],
        _ => (0..count)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (count - 1) as f64))
            .collect(),
    }
}

fn default_alphas() -> Vec<f64> {
    log_grid(0.0, 4.0, 10)
}

fn default_true() -> bool {
    true
}

fn default_nested_folds() -> usize {
    5
}

/// How per-voxel scores are formed from cross-validated predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Correlation per fold, averaged across folds.
    #[default]
    FoldMean,
    /// One correlation over the concatenated test predictions of all folds.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeSpec {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_true")]
    pub per_voxel: bool,
    #[serde(default = "default_true")]
    pub normalize_features: bool,
    #[serde(default = "default_true")]
    pub normalize_targets: bool,
    #[serde(default = "default_nested_folds")]
    pub nested_folds: usize,
    #[serde(default)]
    pub score_mode: ScoreMode,
}

impl Default for RidgeSpec {
    fn default() -> Self {
        RidgeSpec {
            alphas: default_alphas(),
            per_voxel: true,
            normalize_features: true,
            normalize_targets: true,
            nested_folds: default_nested_folds(),
            score_mode: ScoreMode::FoldMean,
        }
    }
}

impl RidgeSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.alphas.is_empty(), Validation, "alpha grid is empty");
        ensure!(
            self.alphas.iter().all(|a| a.is_finite() && *a > 0.0),
            Validation,
            "alphas must be positive and finite"
        );
        ensure!(
            self.alphas.windows(2).all(|w| w[0] < w[1]),
            Validation,
            "alphas must be sorted strictly ascending"
        );
        ensure!(
            self.nested_folds >= 2,
            Validation,
            "nested_folds must be >= 2"
        );
        Ok(())
    }
}

/// Thin SVD of a design matrix, reusable across any number of ridge
/// penalties and targets: `w(alpha) = V diag(s / (s^2 + alpha)) U^T y`.
#[derive(Debug, Clone)]
pub struct RidgeSvd {
    u: Matrix,
    s: Vec<f64>,
    v: Matrix,
}

impl RidgeSvd {
    pub fn new(x: &Matrix) -> Result<Self> {
        ensure!(
            x.nrows() >= 1 && x.ncols() >= 1,
            Validation,
            "empty design matrix"
        );
        let svd = x
            .clone()
            .try_svd(true, true, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
        let u = svd.u.expect("u requested");
        let v = svd.v_t.expect("v_t requested").transpose();
        Ok(RidgeSvd {
            u,
            s: svd.singular_values.iter().copied().collect(),
            v,
        })
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    /// `U^T Y`, the only target-dependent quantity in the solution.
    pub fn project(&self, y: &Matrix) -> Matrix {
        self.u.tr_mul(y)
    }

    /// Weights for a single penalty shared by all targets.
    pub fn weights(&self, uty: &Matrix, alpha: f64) -> Matrix {
        let mut scaled = uty.clone();
        for (i, mut row) in scaled.row_iter_mut().enumerate() {
            let s = self.s[i];
            row *= s / (s * s + alpha);
        }
        &self.v * scaled
    }

    /// Weights with one penalty per target column.
    pub fn weights_per_target(&self, uty: &Matrix, alphas: &[f64]) -> Matrix {
        let mut scaled = uty.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            let alpha = alphas[j];
            for (i, v) in col.iter_mut().enumerate() {
                let s = self.s[i];
                *v *= s / (s * s + alpha);
            }
        }
        &self.v * scaled
    }

    /// Convenience: full solve for one penalty.
    pub fn solve(&self, y: &Matrix, alpha: f64) -> Matrix {
        self.weights(&self.project(y), alpha)
    }
}

/// Column statistics estimated on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ColumnStats {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// False for zero-variance columns.
    varying: Vec<bool>,
}

impl ColumnStats {
    fn estimate(m: &Matrix, rows: &[usize], standardize: bool) -> Self {
        let n = rows.len() as f64;
        let p = m.ncols();
        let (mut mean, mut std, mut varying) = (vec![0.0; p], vec![1.0; p], vec![true; p]);
        for j in 0..p {
            let mu = rows.iter().map(|&i| m[(i, j)]).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&i| (m[(i, j)] - mu) * (m[(i, j)] - mu))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            let constant = sd <= ZERO_VARIANCE_TOL * mu.abs().max(1.0);
            varying[j] = !constant;
            if standardize {
                mean[j] = mu;
                std[j] = if constant { 1.0 } else { sd };
            }
        }
        ColumnStats { mean, std, varying }
    }

    /// Standardised copy of the selected rows and columns.
    fn apply(&self, m: &Matrix, rows: &[usize], cols: &[usize]) -> Matrix {
        Matrix::from_fn(rows.len(), cols.len(), |r, c| {
            let j = cols[c];
            (m[(rows[r], j)] - self.mean[j]) / self.std[j]
        })
    }

    fn varying_columns(&self) -> Vec<usize> {
        (0..self.varying.len())
            .filter(|&j| self.varying[j])
            .collect()
    }
}

/// A fitted voxelwise ridge model. Weights live in the standardised feature
/// space; constant training columns get zero weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Matrix,
    pub alpha_per_voxel: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: Vec<f64>,
    pub target_std: Vec<f64>,
}

impl RidgeModel {
    /// Predictions on the target scale.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        ensure!(
            x.ncols() == self.weights.nrows(),
            Validation,
            "model expects {} features, got {}",
            self.weights.nrows(),
            x.ncols()
        );
        let rows: Vec<usize> = (0..x.nrows()).collect();
        Ok(self.predict_rows(x, &rows))
    }

    fn predict_rows(&self, x: &Matrix, rows: &[usize]) -> Matrix {
        let xs = Matrix::from_fn(rows.len(), x.ncols(), |r, j| {
            (x[(rows[r], j)] - self.feature_mean[j]) / self.feature_std[j]
        });
        let mut pred = xs * &self.weights;
        for (j, mut col) in pred.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = *v * self.target_std[j] + self.target_mean[j]);
        }
        pred
    }
}

/// Rows of `x`/`y` used for training, standardised per the spec.
struct Prepared {
    fstats: ColumnStats,
    tstats: ColumnStats,
    cols: Vec<usize>,
    svd: Option<RidgeSvd>,
    uty: Matrix,
}

fn prepare(x: &Matrix, y: &Matrix, rows: &[usize], spec: &RidgeSpec) -> Result<Prepared> {
    let fstats = ColumnStats::estimate(x, rows, spec.normalize_features);
    let tstats = ColumnStats::estimate(y, rows, spec.normalize_targets);
    let cols = fstats.varying_columns();
    let all_targets: Vec<usize> = (0..y.ncols()).collect();
    let ys = tstats.apply(y, rows, &all_targets);
    let (svd, uty) = if cols.is_empty() {
        (None, Matrix::zeros(0, y.ncols()))
    } else {
        let svd = RidgeSvd::new(&fstats.apply(x, rows, &cols))?;
        let uty = svd.project(&ys);
        (Some(svd), uty)
    };
    Ok(Prepared {
        fstats,
        tstats,
        cols,
        svd,
        uty,
    })
}

impl Prepared {
    /// Weights over all `p` features (zero rows for dropped columns).
    fn full_weights(&self, p: usize, alphas: &[f64]) -> Matrix {
        let v = self.uty.ncols();
        let mut w = Matrix::zeros(p, v);
        if let Some(svd) = &self.svd {
            let reduced = svd.weights_per_target(&self.uty, alphas);
            for (r, &j) in self.cols.iter().enumerate() {
                w.row_mut(j).copy_from(&reduced.row(r));
            }
        }
        w
    }

    fn into_model(self, p: usize, alphas: Vec<f64>) -> RidgeModel {
        let weights = self.full_weights(p, &alphas);
        RidgeModel {
            weights,
            alpha_per_voxel: alphas,
            feature_mean: self.fstats.mean,
            feature_std: self.fstats.std,
            target_mean: self.tstats.mean,
            target_std: self.tstats.std,
        }
    }
}

/// Fold layout used for alpha selection inside a training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerCv {
    pub scheme: FoldScheme,
    pub trim_trs: usize,
    pub seed: u64,
}

impl InnerCv {
    pub fn contiguous() -> Self {
        InnerCv {
            scheme: FoldScheme::Contiguous,
            trim_trs: 0,
            seed: 0,
        }
    }
}

/// Mean nested-CV correlation for every (alpha, voxel), shape
/// `alphas x voxels`.
fn nested_scores(
    x: &Matrix,
    y: &Matrix,
    train: &[usize],
    spec: &RidgeSpec,
    inner: InnerCv,
) -> Result<Matrix> {
    let plan = make_folds(
        train.len(),
        inner.scheme,
        spec.nested_folds,
        inner.trim_trs,
        inner.seed,
    )?;
    let per_fold = plan
        .folds
        .par_iter()
        .map(|fold| {
            let tr: Vec<usize> = fold.train.iter().map(|&i| train[i]).collect();
            let te: Vec<usize> = fold.test.iter().map(|&i| train[i]).collect();
            ensure!(
                tr.len() >= 2 && te.len() >= 2,
                Validation,
                "nested fold too small ({} train / {} test rows)",
                tr.len(),
                te.len()
            );
            let prep = prepare(x, y, &tr, spec)?;
            let mut scores = Matrix::zeros(spec.alphas.len(), y.ncols());
            let xs = prep.fstats.apply(x, &te, &prep.cols);
            for (a, &alpha) in spec.alphas.iter().enumerate() {
                let pred = match &prep.svd {
                    Some(svd) => &xs * svd.weights(&prep.uty, alpha),
                    None => Matrix::zeros(te.len(), y.ncols()),
                };
                for v in 0..y.ncols() {
                    let actual: Vec<f64> = te.iter().map(|&i| y[(i, v)]).collect();
                    scores[(a, v)] = pearson_unchecked(pred.column(v).as_slice(), &actual);
                }
            }
            Ok(scores)
        })
        .collect::<Result<Vec<Matrix>>>()?;
    let mut total = Matrix::zeros(spec.alphas.len(), y.ncols());
    for s in &per_fold {
        total += s;
    }
    Ok(total / per_fold.len() as f64)
}

/// Index of the maximum, ties resolved toward the last (largest alpha).
fn argmax_last(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v >= best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Per-voxel penalties chosen by nested cross-validation on `train` rows.
pub fn select_alphas(
    x: &Matrix,
    y: &Matrix,
    train: &[usize],
    spec: &RidgeSpec,
    inner: InnerCv,
) -> Result<Vec<f64>> {
    if spec.alphas.len() == 1 {
        return Ok(vec![spec.alphas[0]; y.ncols()]);
    }
    let scores = nested_scores(x, y, train, spec, inner)?;
    if spec.per_voxel {
        Ok((0..y.ncols())
            .map(|v| spec.alphas[argmax_last(scores.column(v).iter().copied())])
            .collect())
    } else {
        let best = argmax_last(scores.row_iter().map(|r| r.mean()));
        Ok(vec![spec.alphas[best]; y.ncols()])
    }
}

/// Fits a model on `train` rows with alphas chosen by nested CV.
pub fn fit_rows(
    x: &Matrix,
    y: &Matrix,
    train: &[usize],
    spec: &RidgeSpec,
    inner: InnerCv,
) -> Result<RidgeModel> {
    ensure!(
        train.len() >= 2,
        Validation,
        "need at least 2 training rows"
    );
    let alphas = select_alphas(x, y, train, spec, inner)?;
    Ok(prepare(x, y, train, spec)?.into_model(x.ncols(), alphas))
}

fn check_inputs(x: &Matrix, y: &Matrix) -> Result<()> {
    ensure!(
        x.nrows() == y.nrows(),
        Validation,
        "X has {} rows but Y has {}",
        x.nrows(),
        y.nrows()
    );
    ensure!(
        x.iter().all(|v| v.is_finite()),
        Validation,
        "non-finite values in features"
    );
    ensure!(
        y.iter().all(|v| v.is_finite()),
        Validation,
        "non-finite values in targets"
    );
    ensure!(
        x.ncols() >= 1 && y.ncols() >= 1,
        Validation,
        "empty feature or target matrix"
    );
    Ok(())
}

fn column_r(pred: &Matrix, y: &Matrix, rows: &[usize]) -> Vec<f64> {
    (0..y.ncols())
        .map(|v| {
            let actual: Vec<f64> = rows.iter().map(|&i| y[(i, v)]).collect();
            pearson_unchecked(pred.column(v).as_slice(), &actual)
        })
        .collect()
}

/// Cross-validated voxelwise ridge regression.
///
/// For each fold, normalisation statistics and penalties come from the
/// training rows only (penalties by nested CV laid out like the outer plan),
/// and the fold's test rows are scored with Pearson correlation per voxel.
pub fn ridge_fit(
    x: &Matrix,
    y: &Matrix,
    spec: &RidgeSpec,
    plan: &FoldPlan,
) -> Result<(Vec<RidgeModel>, ScoreReport)> {
    spec.validate()?;
    check_inputs(x, y)?;
    ensure!(
        plan.n == x.nrows(),
        Validation,
        "fold plan covers {} rows, data has {}",
        plan.n,
        x.nrows()
    );
    for (i, f) in plan.folds.iter().enumerate() {
        ensure!(
            f.test.len() >= 2,
            Validation,
            "fold {i} has {} test rows; need at least 2",
            f.test.len()
        );
    }
    let inner = InnerCv {
        scheme: plan.scheme,
        trim_trs: plan.trim_trs,
        seed: plan.seed,
    };
    let fitted = plan
        .folds
        .par_iter()
        .map(|fold| {
            let model = fit_rows(x, y, &fold.train, spec, inner)?;
            let pred = model.predict_rows(x, &fold.test);
            Ok((model, pred))
        })
        .collect::<Result<Vec<_>>>()?;

    let per_fold: Vec<Vec<f64>> = fitted
        .iter()
        .zip(&plan.folds)
        .map(|((_, pred), fold)| column_r(pred, y, &fold.test))
        .collect();
    let per_voxel_r = match spec.score_mode {
        ScoreMode::FoldMean => {
            let mut mean = vec![0.0; y.ncols()];
            for r in &per_fold {
                mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= per_fold.len() as f64);
            mean
        }
        ScoreMode::Pooled => {
            let rows: Vec<usize> = plan.folds.iter().flat_map(|f| f.test.clone()).collect();
            let mut pooled = Matrix::zeros(rows.len(), y.ncols());
            let mut offset = 0;
            for (_, pred) in &fitted {
                pooled.rows_mut(offset, pred.nrows()).copy_from(pred);
                offset += pred.nrows();
            }
            column_r(&pooled, y, &rows)
        }
    };
    let provenance = serde_json::json!({
        "ridge": spec,
        "folding_type": plan.scheme,
        "k_folds": plan.k_folds,
        "trim_trs": plan.trim_trs,
        "seed": plan.seed,
    });
    let report = ScoreReport::new(per_voxel_r, per_fold, provenance);
    Ok((fitted.into_iter().map(|(m, _)| m).collect(), report))
}

/// Trains on one set of rows (penalties by contiguous nested CV) and scores a
/// separate held-out set, e.g. a test story averaged over repetitions.
pub fn heldout_fit(
    x_train: &Matrix,
    y_train: &Matrix,
    x_test: &Matrix,
    y_test: &Matrix,
    spec: &RidgeSpec,
) -> Result<(RidgeModel, ScoreReport)> {
    spec.validate()?;
    check_inputs(x_train, y_train)?;
    check_inputs(x_test, y_test)?;
    ensure!(
        x_train.ncols() == x_test.ncols(),
        Validation,
        "train features have width {}, test {}",
        x_train.ncols(),
        x_test.ncols()
    );
    ensure!(
        y_train.ncols() == y_test.ncols(),
        Validation,
        "train targets have {} voxels, test {}",
        y_train.ncols(),
        y_test.ncols()
    );
    ensure!(y_test.nrows() >= 2, Validation, "need at least 2 test rows");
    let rows: Vec<usize> = (0..x_train.nrows()).collect();
    let model = fit_rows(x_train, y_train, &rows, spec, InnerCv::contiguous())?;
    let pred = model.predict(x_test)?;
    let test_rows: Vec<usize> = (0..y_test.nrows()).collect();
    let r = column_r(&pred, y_test, &test_rows);
    let provenance = serde_json::json!({
        "ridge": spec,
        "protocol": "heldout",
        "n_train": x_train.nrows(),
        "n_test": x_test.nrows(),
    });
    let report = ScoreReport::new(r.clone(), vec![r], provenance);
    Ok((model, report))
}

/// Element-wise mean of repeated presentations of the same stimulus.
pub fn average_repetitions(reps: &[Matrix]) -> Result<Matrix> {
    ensure!(!reps.is_empty(), Validation, "no repetitions to average");
    let shape = reps[0].shape();
    ensure!(
        reps.iter().all(|r| r.shape() == shape),
        Validation,
        "repetitions differ in shape"
    );
    let mut sum = Matrix::zeros(shape.0, shape.1);
    for r in reps {
        sum += r;
    }
    Ok(sum / reps.len() as f64)
}

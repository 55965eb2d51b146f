//! The end-to-end run: assemble, mask, extract, downsample, FIR, fit,
//! aggregate, write.
//!
//! Outputs are staged in a hidden directory and moved into place only after
//! every stage succeeds. On failure the staged files are moved to
//! `<output>/quarantine` together with an `error.json` naming the stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vem_core::analysis::{stack_rows, stack_with_fir, AcvTimebase};
use vem_core::assembly::{apply_mask, apply_trim, load_assembly, Assembly, Run};
use vem_core::downsample::downsample;
use vem_core::features::{
    acv_features, embedding_lookup, read_activations, word_rate, AcvParams, EmbeddingTable,
    FeatureMatrix, Level, Provenance,
};
use vem_core::io::write_f32_vector;
use vem_core::mapping::{
    average_repetitions, heldout_fit, make_folds, ridge_fit, RidgeModel, ScoreReport,
};
use vem_core::{Error, Matrix};

use crate::config::{Evaluation, FeatureSpec, RunConfig};
use crate::error::{CliError, CliResult, StageExt};
use crate::kv;
use crate::logger::Logger;
use crate::plots::bar_chart;

pub const REPORT_FILE: &str = "report.json";
pub const PER_VOXEL_FILE: &str = "per_voxel_r.f32";
pub const MODELS_FILE: &str = "models.json";
pub const PLOTS_DIR: &str = "plots";
pub const QUARANTINE_DIR: &str = "quarantine";
pub const PROGRESS_FILE: &str = "progress.json";
const STAGING_DIR: &str = ".staging";

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub version: String,
    pub config: RunConfig,
    pub subject: String,
    pub runs: Vec<String>,
    pub n_trs: usize,
    pub n_voxels: usize,
    pub n_features: usize,
    pub fir_k: usize,
    pub features: Provenance,
    pub report: ScoreReport,
}

impl ReportFile {
    pub fn load(path: &Path) -> CliResult<ReportFile> {
        crate::config::read_json(path)
    }
}

pub struct PipelineOutput {
    pub report: ReportFile,
    pub models: Vec<RidgeModel>,
}

/// Per-run inputs after exclusion, before trimming.
pub struct Inputs {
    pub raw: Assembly,
    pub trimmed: Assembly,
    pub test_runs: BTreeSet<String>,
}

/// Loads the assembly, drops excluded runs and applies the trim policy.
pub fn assemble(cfg: &RunConfig) -> vem_core::Result<Inputs> {
    let full = load_assembly(&cfg.assembly)?;
    let excluded: BTreeSet<String> = cfg.exclude_runs.iter().cloned().collect();
    let raw = full.without_runs(&excluded)?;
    let test_runs: BTreeSet<String> = cfg.trim.test_runs.iter().cloned().collect();
    let trimmed = apply_trim(&raw, &cfg.trim.policy, &test_runs)?;
    Ok(Inputs {
        raw,
        trimmed,
        test_runs,
    })
}

/// Features for one untrimmed run, at whatever level the extractor produces.
pub fn extract_run(
    spec: &FeatureSpec,
    run: &Run,
    table: Option<&EmbeddingTable>,
) -> vem_core::Result<FeatureMatrix> {
    match spec {
        FeatureSpec::WordRate => Ok(word_rate(run.events())),
        FeatureSpec::Embedding {
            oov,
            normalize_tokens,
            ..
        } => embedding_lookup(
            run.events(),
            table.expect("table loaded for embedding features"),
            *oov,
            *normalize_tokens,
        ),
        FeatureSpec::Acv { ell, d, timebase } => {
            let p = AcvParams { ell: *ell, d: *d };
            match timebase {
                AcvTimebase::Tr => Ok(acv_features(run.n_trs(), p)?.with_level(Level::Tr)),
                AcvTimebase::Event => acv_features(run.events().len(), p),
            }
        }
        FeatureSpec::Activations { dir } => {
            let path = activation_path(dir, run.id());
            let fm = read_activations(&path)?;
            let expected = match fm.level() {
                Level::Event => run.events().len(),
                Level::Tr => run.n_trs(),
            };
            if fm.nrows() != expected {
                return Err(Error::Alignment(format!(
                    "{}: {} rows, run {} needs {expected} at {:?} level",
                    path.display(),
                    fm.nrows(),
                    run.id(),
                    fm.level()
                )));
            }
            Ok(fm)
        }
    }
}

pub fn activation_path(dir: &Path, run_id: &str) -> PathBuf {
    dir.join(format!("{run_id}.act"))
}

pub fn load_table(spec: &FeatureSpec) -> vem_core::Result<Option<EmbeddingTable>> {
    match spec {
        FeatureSpec::Embedding { table, .. } => Ok(Some(EmbeddingTable::from_file(table)?)),
        _ => Ok(None),
    }
}

/// Brings one run's features onto its TR grid.
pub fn to_tr_level(
    cfg: &RunConfig,
    run: &Run,
    fm: FeatureMatrix,
) -> vem_core::Result<FeatureMatrix> {
    match fm.level() {
        Level::Tr => Ok(fm),
        Level::Event => downsample(&fm, run.events(), run.tr_times(), run.tr(), &cfg.downsample),
    }
}

fn common_tr(a: &Assembly) -> vem_core::Result<f64> {
    let tr = a.runs()[0].tr();
    if a.runs().iter().any(|r| (r.tr() - tr).abs() > 1e-9) {
        return Err(Error::Validation(
            "runs have different TRs; FIR lags would mean different delays".into(),
        ));
    }
    Ok(tr)
}

struct Design {
    /// TR-level feature block and BOLD per retained run, in assembly order.
    blocks: Vec<(String, Matrix, Matrix)>,
    provenance: Provenance,
}

fn build_design(
    cfg: &RunConfig,
    inputs: &Inputs,
    analysis: &Assembly,
    log: &Logger,
) -> CliResult<Design> {
    let table = load_table(&cfg.features).stage("extract")?;
    let mut extracted = Vec::new();
    for run in inputs.raw.runs() {
        let fm = extract_run(&cfg.features, run, table.as_ref()).stage("extract")?;
        log.record(
            "extract",
            "run",
            kv!("run" => run.id(), "rows" => fm.nrows(), "dim" => fm.ncols(), "level" => fm.level()),
        );
        extracted.push(fm);
    }
    let provenance = extracted[0].provenance().clone();

    let mut blocks = Vec::new();
    for ((raw_run, fm), run) in inputs.raw.runs().iter().zip(extracted).zip(analysis.runs()) {
        let tr_level = to_tr_level(cfg, raw_run, fm).stage("downsample")?;
        let rows = cfg
            .trim
            .policy
            .kept_rows(raw_run.n_trs(), inputs.test_runs.contains(raw_run.id()));
        let x = tr_level.values().rows(rows.start, rows.len()).into_owned();
        log.record(
            "downsample",
            "run",
            kv!("run" => raw_run.id(), "method" => cfg.downsample.method, "trs" => x.nrows()),
        );
        blocks.push((run.id().to_string(), x, run.bold().clone()));
    }
    Ok(Design { blocks, provenance })
}

fn design_matrix(
    blocks: &[&(String, Matrix, Matrix)],
    k: usize,
) -> vem_core::Result<(Matrix, Matrix)> {
    let xs: Vec<Matrix> = blocks.iter().map(|b| b.1.clone()).collect();
    let ys: Vec<Matrix> = blocks.iter().map(|b| b.2.clone()).collect();
    Ok((stack_with_fir(&xs, k)?, stack_rows(&ys)))
}

fn report_masks(
    cfg: &RunConfig,
    analysis: &Assembly,
) -> vem_core::Result<BTreeMap<String, Vec<bool>>> {
    if cfg.masks.is_empty() {
        return Ok(analysis.masks().clone());
    }
    cfg.masks
        .iter()
        .map(|m| Ok((m.clone(), analysis.mask(m)?.to_vec())))
        .collect()
}

/// Completed stages, rewritten to the staging directory after each one.
struct Progress<'a> {
    path: PathBuf,
    done: Vec<&'a str>,
}

impl<'a> Progress<'a> {
    fn mark(&mut self, stage: &'a str) {
        self.done.push(stage);
        let _ = fs::write(
            &self.path,
            serde_json::json!({ "completed": self.done }).to_string(),
        );
    }
}

fn stages(cfg: &RunConfig, log: &Logger, staging: &Path) -> CliResult<PipelineOutput> {
    let mut progress = Progress {
        path: staging.join(PROGRESS_FILE),
        done: Vec::new(),
    };
    let inputs = assemble(cfg).stage("assemble")?;
    progress.mark("assemble");
    log.record(
        "assemble",
        "loaded",
        kv!(
            "subject" => inputs.raw.subject(),
            "runs" => inputs.raw.runs().iter().map(|r| r.id()).collect::<Vec<_>>(),
            "voxels" => inputs.raw.n_voxels(),
        ),
    );

    let analysis = match &cfg.analysis_mask {
        Some(m) => apply_mask(&inputs.trimmed, m).stage("mask")?,
        None => inputs.trimmed.clone(),
    };
    let masks = report_masks(cfg, &analysis).stage("mask")?;
    progress.mark("mask");
    log.record(
        "mask",
        "selected",
        kv!("voxels" => analysis.n_voxels(), "report_masks" => masks.keys().collect::<Vec<_>>()),
    );

    let design = build_design(cfg, &inputs, &analysis, log)?;
    progress.mark("extract");
    progress.mark("downsample");
    let fir = cfg
        .fir
        .resolve(common_tr(&analysis).stage("fir")?)
        .stage("fir")?;
    log.record("fir", "resolved", kv!("k" => fir.k));
    progress.mark("fir");

    let (models, report, n_features) = match cfg.evaluation {
        Evaluation::Cv => {
            let all: Vec<_> = design.blocks.iter().collect();
            let (x, y) = design_matrix(&all, fir.k).stage("fir")?;
            let plan = make_folds(
                x.nrows(),
                cfg.mapping.folding_type,
                cfg.mapping.k_folds,
                cfg.mapping.trim_trs,
                cfg.mapping.seed,
            )
            .stage("fit")?;
            let (models, report) = ridge_fit(&x, &y, &cfg.mapping.ridge, &plan).stage("fit")?;
            for (i, f) in report.per_fold.iter().enumerate() {
                log.record(
                    "fit",
                    "fold",
                    kv!("fold" => i, "mean_r" => vem_core::stats::mean(f), "test_rows" => plan.folds[i].test.len()),
                );
            }
            (models, report, x.ncols())
        }
        Evaluation::Heldout {
            average_repetitions: average,
        } => {
            let (test, train): (Vec<_>, Vec<_>) = design
                .blocks
                .iter()
                .partition(|b| inputs.test_runs.contains(&b.0));
            if train.is_empty() {
                return Err(CliError::Stage {
                    stage: "fit",
                    source: Error::Validation("every run is a test run".into()),
                });
            }
            let (xtr, ytr) = design_matrix(&train, fir.k).stage("fir")?;
            let (xte, yte) = if average {
                let (x0, _) = design_matrix(&test[..1], fir.k).stage("fir")?;
                let reps: Vec<Matrix> = test.iter().map(|b| b.2.clone()).collect();
                (x0, average_repetitions(&reps).stage("fit")?)
            } else {
                design_matrix(&test, fir.k).stage("fir")?
            };
            let (model, report) =
                heldout_fit(&xtr, &ytr, &xte, &yte, &cfg.mapping.ridge).stage("fit")?;
            log.record(
                "fit",
                "heldout",
                kv!("train_rows" => xtr.nrows(), "test_rows" => xte.nrows(), "repetitions" => test.len()),
            );
            (vec![model], report, xtr.ncols())
        }
    };

    progress.mark("fit");
    let report = report.with_roi_means(&masks).stage("aggregate")?;
    progress.mark("aggregate");
    log.record(
        "aggregate",
        "roi_means",
        serde_json::Map::from_iter(
            report
                .roi_means
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::json!(v))),
        ),
    );

    let file = ReportFile {
        version: VERSION.to_string(),
        config: cfg.clone(),
        subject: analysis.subject().to_string(),
        runs: analysis.runs().iter().map(|r| r.id().to_string()).collect(),
        n_trs: design.blocks.iter().map(|b| b.1.nrows()).sum(),
        n_voxels: analysis.n_voxels(),
        n_features,
        fir_k: fir.k,
        features: design.provenance,
        report,
    };
    write_outputs(staging, &file, &models).stage("write")?;
    let _ = fs::remove_file(&progress.path);
    log.record(
        "write",
        "done",
        kv!("files" => [REPORT_FILE, PER_VOXEL_FILE, MODELS_FILE]),
    );
    Ok(PipelineOutput {
        report: file,
        models,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> vem_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_outputs(dir: &Path, file: &ReportFile, models: &[RidgeModel]) -> vem_core::Result<()> {
    write_json(&dir.join(REPORT_FILE), file)?;
    write_f32_vector(&dir.join(PER_VOXEL_FILE), &file.report.per_voxel_r)?;
    write_json(&dir.join(MODELS_FILE), &models)?;
    emit_report_plots(&dir.join(PLOTS_DIR), &file.report).map_err(|e| Error::Io {
        path: dir.join(PLOTS_DIR),
        source: e,
    })
}

/// ROI bar chart for one report.
pub fn emit_report_plots(dir: &Path, report: &ScoreReport) -> std::io::Result<()> {
    let labels: Vec<String> = report.roi_means.keys().cloned().collect();
    let values: Vec<f64> = report.roi_means.values().copied().collect();
    bar_chart("Mean r per mask", "Pearson r", &labels, &values).write(dir, "roi_means")
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Stage {
        stage: "write",
        source: Error::Io {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn move_into(from: &Path, to: &Path) -> CliResult<()> {
    fs::create_dir_all(to).map_err(io_err(to))?;
    for entry in fs::read_dir(from).map_err(io_err(from))? {
        let entry = entry.map_err(io_err(from))?;
        let dest = to.join(entry.file_name());
        if dest.is_dir() {
            fs::remove_dir_all(&dest).map_err(io_err(&dest))?;
        } else if dest.exists() {
            fs::remove_file(&dest).map_err(io_err(&dest))?;
        }
        fs::rename(entry.path(), &dest).map_err(io_err(&dest))?;
    }
    fs::remove_dir(from).map_err(io_err(from))
}

fn quarantine(out: &Path, staging: &Path, cfg: &RunConfig, err: &CliError) {
    let q = out.join(QUARANTINE_DIR);
    let _ = fs::remove_dir_all(&q);
    if fs::rename(staging, &q).is_err() {
        let _ = fs::create_dir_all(&q);
    }
    let record = serde_json::json!({
        "stage": err.stage(),
        "error": err.to_string(),
        "config": cfg,
    });
    let _ = fs::write(
        q.join("error.json"),
        serde_json::to_string_pretty(&record).unwrap_or_default(),
    );
}

/// Runs the whole pipeline described by `cfg` on a thread pool sized by
/// `runtime.threads`.
pub fn run_pipeline(cfg: &RunConfig, log: &Logger) -> CliResult<PipelineOutput> {
    cfg.validate()?;
    cfg.check_paths()?;
    let out = &cfg.output;
    let staging = out.join(STAGING_DIR);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    log.record(
        "config",
        "start",
        kv!("version" => VERSION, "config" => cfg),
    );

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.runtime.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| {
        CliError::Config(format!(
            "cannot start {:?} threads: {e}",
            cfg.runtime.threads
        ))
    })?;

    match pool.install(|| stages(cfg, log, &staging)) {
        Ok(output) => {
            move_into(&staging, out)?;
            Ok(output)
        }
        Err(err) => {
            log.record(
                "error",
                err.stage().unwrap_or("config"),
                kv!("message" => err.to_string()),
            );
            quarantine(out, &staging, cfg, &err);
            Err(err)
        }
    }
}

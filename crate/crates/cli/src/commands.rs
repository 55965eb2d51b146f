//! Subcommand implementations. Each takes its parsed JSON config plus the
//! global overrides and returns what it wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vem_core::analysis::{
    exclude_by_motion, leakage_audit, motion_summary, power_law_fit, AuditConfig, LeakageReport,
    MotionSummary, PowerLawFit, DEFAULT_FD_THRESHOLD_MM, DEFAULT_HEAD_RADIUS_MM,
    MIN_POWER_LAW_POINTS,
};
use vem_core::assembly::{
    load_assembly, save_assembly, Assembly, Run, Space, StimulusEvent, MOTION_PARAMS,
};
use vem_core::features::{export_activations, AcvParams};
use vem_core::io::{matrix_from_f32_bytes, read_f32_vector};
use vem_core::synth::{generate, SynthSpec};
use vem_core::{Error, Matrix};

use crate::config::{read_json, resolve_path, LogBackend, RunConfig};
use crate::error::{CliError, CliResult, StageExt};
use crate::kv;
use crate::logger::Logger;
use crate::pipeline::{
    activation_path, assemble, extract_run, load_table, run_pipeline, to_tr_level, PipelineOutput,
    ReportFile, PLOTS_DIR,
};
use crate::plots::{bar_chart, line_chart, scatter_power_law};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub config: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub seed: Option<u64>,
    pub log: Option<LogBackend>,
}

impl Globals {
    fn config_path(&self) -> CliResult<&Path> {
        self.config
            .as_deref()
            .ok_or_else(|| CliError::Config("--config <path> is required".into()))
    }

    fn out_or(&self, fallback: Option<&Path>) -> CliResult<PathBuf> {
        self.out
            .clone()
            .or_else(|| fallback.map(Path::to_path_buf))
            .ok_or_else(|| CliError::Config("--out <dir> is required".into()))
    }

    fn logger(&self, dir: &Path, configured: LogBackend) -> CliResult<Logger> {
        Logger::open(dir, self.log.unwrap_or(configured))
    }

    /// Loads a run config and applies the command-line overrides.
    pub fn run_config(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config_path()?)?;
        self.apply(&mut cfg);
        Ok(cfg)
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(out) = &self.out {
            cfg.output = out.clone();
        }
        if let Some(t) = self.threads {
            cfg.runtime.threads = Some(t);
        }
        if let Some(s) = self.seed {
            cfg.mapping.seed = s;
        }
        if let Some(l) = self.log {
            cfg.log = l;
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Config(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
        .stage("write")
}

fn io_stage<'a>(stage: &'static str, path: &'a Path) -> impl Fn(std::io::Error) -> CliError + 'a {
    move |source| CliError::Stage {
        stage,
        source: Error::Io {
            path: path.to_path_buf(),
            source,
        },
    }
}

fn plot_err(dir: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    io_stage("write", dir)
}

pub fn synth(g: &Globals) -> CliResult<PathBuf> {
    let mut spec = match &g.config {
        Some(p) => read_json::<SynthSpec>(p)?,
        None => SynthSpec::planted(0),
    };
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    let out = g.out_or(None)?;
    let (assembly, truth) = generate(&spec).stage("synth")?;
    save_assembly(&assembly, &out).stage("write")?;
    let mut gt = truth.to_json();
    gt["spec"] = serde_json::to_value(&spec).expect("spec is plain data");
    write_json(&out.join("ground_truth.json"), &gt)?;
    let features = out.join("features");
    fs::create_dir_all(&features).map_err(io_stage("write", &features))?;
    for (run, fm) in assembly.runs().iter().zip(&truth.event_features) {
        export_activations(&activation_path(&features, run.id()), fm).stage("write")?;
    }
    Ok(out)
}

/// Raw inputs for `assemble`. Paths are relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssembleConfig {
    pub subject: String,
    pub space: Space,
    pub runs: Vec<RawRun>,
    #[serde(default)]
    pub masks: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRun {
    pub id: String,
    pub tr: f64,
    pub n_voxels: usize,
    /// Little-endian f32, TR-major.
    pub bold: PathBuf,
    /// `.json` list of events, or a delimited table (`.tsv` tab, otherwise
    /// comma) with `onset`, `duration` and `text` columns.
    pub events: PathBuf,
    #[serde(default)]
    pub motion: Option<PathBuf>,
    /// Acquisition time of the first TR.
    #[serde(default)]
    pub start: f64,
}

fn read_bytes(path: &Path) -> vem_core::Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_raw_matrix(path: &Path, cols: usize) -> vem_core::Result<Matrix> {
    let bytes = read_bytes(path)?;
    let row_bytes = 4 * cols;
    if cols == 0 || bytes.len() % row_bytes != 0 {
        return Err(Error::Integrity(format!(
            "{}: {} bytes is not a whole number of {cols}-column f32 rows",
            path.display(),
            bytes.len()
        )));
    }
    matrix_from_f32_bytes(&bytes, bytes.len() / row_bytes, cols)
}

pub fn read_events(path: &Path) -> vem_core::Result<Vec<StimulusEvent>> {
    if path.extension().is_some_and(|e| e == "json") {
        let bytes = read_bytes(path)?;
        return serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())));
    }
    let delimiter = if path.extension().is_some_and(|e| e == "tsv") {
        b'\t'
    } else {
        b','
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    rdr.deserialize()
        .collect::<Result<Vec<StimulusEvent>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn build_assembly(cfg: &AssembleConfig, base: &Path) -> vem_core::Result<Assembly> {
    let mut runs = Vec::with_capacity(cfg.runs.len());
    for r in &cfg.runs {
        let bold = read_raw_matrix(&resolve_path(base, &r.bold), r.n_voxels)?;
        let events = read_events(&resolve_path(base, &r.events))?;
        let motion = match &r.motion {
            Some(p) => Some(read_raw_matrix(&resolve_path(base, p), MOTION_PARAMS)?),
            None => None,
        };
        let times = Run::regular_tr_times(bold.nrows(), r.tr, r.start);
        runs.push(Run::new(r.id.clone(), r.tr, bold, times, events, motion)?);
    }
    let mut masks = BTreeMap::new();
    for (name, p) in &cfg.masks {
        let bytes = read_bytes(&resolve_path(base, p))?;
        masks.insert(name.clone(), bytes.iter().map(|&b| b != 0).collect());
    }
    Assembly::new(cfg.subject.clone(), cfg.space, runs, masks)
}

pub fn assemble_cmd(g: &Globals) -> CliResult<PathBuf> {
    let path = g.config_path()?;
    let cfg: AssembleConfig = read_json(path)?;
    let out = g.out_or(None)?;
    let a = build_assembly(&cfg, path.parent().unwrap_or(Path::new(""))).stage("assemble")?;
    save_assembly(&a, &out).stage("write")?;
    // re-read so the written directory is known to validate
    load_assembly(&out).stage("assemble")?;
    Ok(out)
}

/// Writes each run's extracted (untrimmed, native-level) features.
pub fn extract_cmd(g: &Globals) -> CliResult<PathBuf> {
    let cfg = g.run_config()?;
    cfg.check_paths()?;
    let out = g
        .out_or(None)
        .unwrap_or_else(|_| cfg.output.join("features"));
    let log = g.logger(&out, cfg.log)?;
    let inputs = assemble(&cfg).stage("assemble")?;
    let table = load_table(&cfg.features).stage("extract")?;
    for run in inputs.raw.runs() {
        let fm = extract_run(&cfg.features, run, table.as_ref()).stage("extract")?;
        export_activations(&activation_path(&out, run.id()), &fm).stage("write")?;
        log.record(
            "extract",
            "run",
            kv!("run" => run.id(), "rows" => fm.nrows()),
        );
    }
    Ok(out)
}

/// Writes each run's features pooled to TR resolution.
pub fn downsample_cmd(g: &Globals) -> CliResult<PathBuf> {
    let cfg = g.run_config()?;
    cfg.check_paths()?;
    let out = g
        .out_or(None)
        .unwrap_or_else(|_| cfg.output.join("features_tr"));
    let log = g.logger(&out, cfg.log)?;
    let inputs = assemble(&cfg).stage("assemble")?;
    let table = load_table(&cfg.features).stage("extract")?;
    for run in inputs.raw.runs() {
        let fm = extract_run(&cfg.features, run, table.as_ref()).stage("extract")?;
        let tr = to_tr_level(&cfg, run, fm).stage("downsample")?;
        export_activations(&activation_path(&out, run.id()), &tr).stage("write")?;
        log.record(
            "downsample",
            "run",
            kv!("run" => run.id(), "trs" => tr.nrows()),
        );
    }
    Ok(out)
}

pub fn fit_cmd(g: &Globals) -> CliResult<PipelineOutput> {
    let cfg = g.run_config()?;
    let log = g.logger(&cfg.output, cfg.log)?;
    run_pipeline(&cfg, &log)
}

/// Agreement between a stored report and its rerun.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Reproduction {
    pub source: PathBuf,
    pub mean_abs_diff: f64,
    pub max_abs_diff: f64,
    pub bitwise_equal: bool,
}

/// Runs the pipeline. Given a `report.json`, reruns its embedded config
/// (into `<report dir>/rerun` unless `--out` is set) and compares scores.
pub fn evaluate_cmd(g: &Globals) -> CliResult<(PipelineOutput, Option<Reproduction>)> {
    let path = g.config_path()?;
    let original = ReportFile::load(path).ok();
    let mut cfg = RunConfig::load(path)?;
    if original.is_some() && g.out.is_none() {
        cfg.output = path.parent().unwrap_or(Path::new("")).join("rerun");
    }
    g.apply(&mut cfg);
    let log = g.logger(&cfg.output, cfg.log)?;
    let output = run_pipeline(&cfg, &log)?;
    let repro = match original {
        Some(orig) => {
            let a = &orig.report.per_voxel_r;
            let b = &output.report.report.per_voxel_r;
            if a.len() != b.len() {
                return Err(CliError::Stage {
                    stage: "evaluate",
                    source: Error::Integrity(format!(
                        "stored report has {} voxels, rerun has {}",
                        a.len(),
                        b.len()
                    )),
                });
            }
            let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
            let r = Reproduction {
                source: path.to_path_buf(),
                mean_abs_diff: vem_core::stats::mean(&diffs),
                max_abs_diff: diffs.iter().copied().fold(0.0, f64::max),
                bitwise_equal: a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            };
            write_json(&cfg.output.join("reproduction.json"), &r)?;
            log.record(
                "evaluate",
                "reproduction",
                kv!("mean_abs_diff" => r.mean_abs_diff),
            );
            Some(r)
        }
        None => None,
    };
    Ok((output, repro))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditRun {
    pub assembly: PathBuf,
    /// One audit per entry.
    pub acv: Vec<AcvParams>,
    #[serde(default)]
    pub audit: AuditConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub log: LogBackend,
}

pub fn audit_cmd(g: &Globals) -> CliResult<Vec<LeakageReport>> {
    let path = g.config_path()?;
    let mut run: AuditRun = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    run.assembly = resolve_path(base, &run.assembly);
    if let Some(s) = g.seed {
        run.audit.seed = s;
    }
    let out = g.out_or(
        run.output
            .as_deref()
            .map(|p| resolve_path(base, p))
            .as_deref(),
    )?;
    let log = g.logger(&out, run.log)?;
    let a = load_assembly(&run.assembly).stage("assemble")?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = g.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let mut reports = Vec::new();
    for p in &run.acv {
        let report = pool
            .install(|| leakage_audit(&a, *p, &run.audit))
            .stage("audit")?;
        log.record(
            "audit",
            "scores",
            kv!("ell" => p.ell, "d" => p.d, "mean_r" => &report.mean_r),
        );
        let labels: Vec<String> = report.mean_r.keys().cloned().collect();
        let values: Vec<f64> = report.mean_r.values().copied().collect();
        let dir = out.join(PLOTS_DIR);
        bar_chart(
            &format!("Content-free baseline, ell = {}, d = {}", p.ell, p.d),
            "mean r",
            &labels,
            &values,
        )
        .write(&dir, &format!("leakage_ell{}_d{}", p.ell, p.d))
        .map_err(plot_err(&dir))?;
        reports.push(report);
    }
    write_json(&out.join("leakage.json"), &reports)?;
    Ok(reports)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSubject {
    pub assembly: PathBuf,
    /// Predictivity taken from this report's ROI mean for `mask` (or its mean
    /// r when `mask` is unset).
    #[serde(default)]
    pub report: Option<PathBuf>,
    /// Reports for the same subject from different layers; the one with the
    /// highest aggregate score is used.
    #[serde(default)]
    pub layers: Vec<PathBuf>,
    #[serde(default)]
    pub score: Option<f64>,
}

/// Where a subject's predictivity came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject: String,
    pub score: f64,
    #[serde(default)]
    pub report: Option<PathBuf>,
    #[serde(default)]
    pub layer: Option<i64>,
}

fn default_threshold() -> f64 {
    DEFAULT_FD_THRESHOLD_MM
}

fn default_radius() -> f64 {
    DEFAULT_HEAD_RADIUS_MM
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionRun {
    pub subjects: Vec<MotionSubject>,
    #[serde(default = "default_threshold")]
    pub threshold_mm: f64,
    #[serde(default = "default_radius")]
    pub radius_mm: f64,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub log: LogBackend,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionOutput {
    pub summaries: Vec<MotionSummary>,
    pub kept: Vec<String>,
    pub excluded: Vec<String>,
    pub threshold_mm: f64,
    pub scores: Vec<SubjectScore>,
    /// Predictivity against mean FD, when enough subjects have scores.
    pub fit: Option<PowerLawFit>,
}

fn report_aggregate(path: &Path, mask: Option<&str>) -> CliResult<(f64, Option<i64>)> {
    let r = ReportFile::load(path)?;
    let score = match mask {
        Some(m) => r
            .report
            .roi_means
            .get(m)
            .copied()
            .ok_or_else(|| CliError::Stage {
                stage: "motion",
                source: Error::Lookup(format!("{} has no ROI mean for {m:?}", path.display())),
            })?,
        None => r.report.mean_r(),
    };
    Ok((score, r.features.layer))
}

/// A subject's predictivity: the given score, the single report, or the best
/// of its layer reports (first wins ties).
fn subject_score(
    s: &MotionSubject,
    subject: &str,
    mask: Option<&str>,
) -> CliResult<Option<SubjectScore>> {
    let given = usize::from(s.score.is_some()) + usize::from(s.report.is_some());
    if given + usize::from(!s.layers.is_empty()) > 1 {
        return Err(CliError::Config(format!(
            "subject {subject}: set one of score, report or layers"
        )));
    }
    if let Some(score) = s.score {
        return Ok(Some(SubjectScore {
            subject: subject.to_string(),
            score,
            report: None,
            layer: None,
        }));
    }
    let candidates: Vec<&PathBuf> = s.report.iter().chain(&s.layers).collect();
    let mut best: Option<SubjectScore> = None;
    for path in candidates {
        let (score, layer) = report_aggregate(path, mask)?;
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(SubjectScore {
                subject: subject.to_string(),
                score,
                report: Some(path.clone()),
                layer,
            });
        }
    }
    Ok(best)
}

pub fn motion_cmd(g: &Globals) -> CliResult<MotionOutput> {
    let path = g.config_path()?;
    let mut run: MotionRun = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    for s in &mut run.subjects {
        s.assembly = resolve_path(base, &s.assembly);
        s.report = s.report.as_ref().map(|p| resolve_path(base, p));
        for p in &mut s.layers {
            *p = resolve_path(base, p);
        }
    }
    let out = g.out_or(
        run.output
            .as_deref()
            .map(|p| resolve_path(base, p))
            .as_deref(),
    )?;
    let log = g.logger(&out, run.log)?;
    let mut summaries = Vec::new();
    let mut scored = Vec::new();
    for s in &run.subjects {
        let a = load_assembly(&s.assembly).stage("assemble")?;
        let summary = motion_summary(&a, run.radius_mm).stage("motion")?;
        log.record(
            "motion",
            "subject",
            kv!("subject" => &summary.subject, "mean_fd" => summary.mean_fd),
        );
        if let Some(v) = subject_score(s, &summary.subject, run.mask.as_deref())? {
            if v.report.is_some() {
                log.record(
                    "motion",
                    "score_source",
                    kv!("subject" => &v.subject, "score" => v.score, "layer" => v.layer),
                );
            }
            scored.push((summary.mean_fd, v));
        }
        summaries.push(summary);
    }
    let (kept, excluded) = exclude_by_motion(&summaries, run.threshold_mm);
    let fit = if scored.len() >= MIN_POWER_LAW_POINTS {
        let xs: Vec<f64> = scored.iter().map(|s| s.0).collect();
        let ys: Vec<f64> = scored.iter().map(|s| s.1.score).collect();
        let labels: Vec<String> = scored.iter().map(|s| s.1.subject.clone()).collect();
        let fit = power_law_fit(&xs, &ys).stage("motion")?;
        let dir = out.join(PLOTS_DIR);
        scatter_power_law(
            "Predictivity against head motion",
            "mean FD (mm)",
            "predictivity",
            &labels,
            &xs,
            &ys,
            &fit,
        )
        .write(&dir, "motion")
        .map_err(plot_err(&dir))?;
        Some(fit)
    } else {
        None
    };
    let output = MotionOutput {
        summaries,
        kept: kept.iter().map(|s| s.subject.clone()).collect(),
        excluded: excluded.iter().map(|s| s.subject.clone()).collect(),
        threshold_mm: run.threshold_mm,
        scores: scored.into_iter().map(|s| s.1).collect(),
        fit,
    };
    write_json(&out.join("motion.json"), &output)?;
    Ok(output)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// One bar chart of ROI means per report.
    Masks,
    /// Score against FIR lag count, one point per report.
    FirSweep,
    /// One bar per report, labelled by feature extractor.
    Families,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportRun {
    pub kind: ReportKind,
    pub reports: Vec<PathBuf>,
    /// ROI to plot; the whole-report mean r when unset.
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn report_score(r: &ReportFile, mask: Option<&str>) -> CliResult<f64> {
    match mask {
        None => Ok(r.report.mean_r()),
        Some(m) => r
            .report
            .roi_means
            .get(m)
            .copied()
            .ok_or_else(|| CliError::Stage {
                stage: "report",
                source: Error::Lookup(format!("report has no ROI mean for {m:?}")),
            }),
    }
}

/// Emits plots for a set of finished runs; returns the files written.
pub fn report_cmd(g: &Globals) -> CliResult<Vec<PathBuf>> {
    let path = g.config_path()?;
    let run: ReportRun = read_json(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    let out = g.out_or(
        run.output
            .as_deref()
            .map(|p| resolve_path(base, p))
            .as_deref(),
    )?;
    let dir = out.join(PLOTS_DIR);
    let reports = run
        .reports
        .iter()
        .map(|p| ReportFile::load(&resolve_path(base, p)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut written = Vec::new();
    let mut emit = |plot: crate::plots::Plot, name: String| -> CliResult<()> {
        plot.write(&dir, &name).map_err(plot_err(&dir))?;
        written.push(dir.join(format!("{name}.svg")));
        Ok(())
    };
    match run.kind {
        ReportKind::Masks => {
            for (i, r) in reports.iter().enumerate() {
                let labels: Vec<String> = r.report.roi_means.keys().cloned().collect();
                let values: Vec<f64> = r.report.roi_means.values().copied().collect();
                emit(
                    bar_chart(
                        &format!("{} mean r per mask", r.subject),
                        "Pearson r",
                        &labels,
                        &values,
                    ),
                    format!("roi_means_{i}"),
                )?;
            }
        }
        ReportKind::FirSweep => {
            let mut pts = reports
                .iter()
                .map(|r| Ok((r.fir_k as f64, report_score(r, run.mask.as_deref())?)))
                .collect::<CliResult<Vec<_>>>()?;
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (xs, ys): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            emit(
                line_chart(
                    "Predictivity by FIR window",
                    "FIR lags k",
                    "mean r",
                    &xs,
                    &ys,
                ),
                "fir_sweep".into(),
            )?;
        }
        ReportKind::Families => {
            let labels: Vec<String> = reports
                .iter()
                .map(|r| match r.features.layer {
                    Some(l) => format!("{} L{l}", r.features.extractor),
                    None => r.features.extractor.clone(),
                })
                .collect();
            let values = reports
                .iter()
                .map(|r| report_score(r, run.mask.as_deref()))
                .collect::<CliResult<Vec<_>>>()?;
            emit(
                bar_chart("Predictivity by feature family", "mean r", &labels, &values),
                "families".into(),
            )?;
        }
    }
    Ok(written)
}

/// Reads `per_voxel_r.f32` from a finished run directory.
pub fn read_per_voxel(dir: &Path) -> CliResult<Vec<f64>> {
    read_f32_vector(&dir.join(crate::pipeline::PER_VOXEL_FILE)).stage("report")
}

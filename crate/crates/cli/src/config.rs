//! Run configuration: one JSON document describing a whole pipeline run.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vem_core::analysis::AcvTimebase;
use vem_core::assembly::TrimPolicy;
use vem_core::downsample::DownsampleSpec;
use vem_core::features::OovPolicy;
use vem_core::fir::FirSpec;
use vem_core::mapping::{FoldScheme, RidgeSpec};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub assembly: PathBuf,
    #[serde(default)]
    pub trim: TrimConfig,
    #[serde(default)]
    pub exclude_runs: Vec<String>,
    pub features: FeatureSpec,
    #[serde(default)]
    pub downsample: DownsampleSpec,
    #[serde(default)]
    pub fir: FirConfig,
    #[serde(default)]
    pub mapping: MappingConfig,
    #[serde(default)]
    pub evaluation: Evaluation,
    /// Masks to report ROI means for; empty means every mask in the assembly.
    #[serde(default)]
    pub masks: Vec<String>,
    /// Restricts fitting to the voxels of this mask.
    #[serde(default)]
    pub analysis_mask: Option<String>,
    pub output: PathBuf,
    #[serde(default)]
    pub log: LogBackend,
    #[serde(default)]
    pub runtime: Runtime,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrimConfig {
    #[serde(flatten)]
    pub policy: TrimPolicy,
    #[serde(default)]
    pub test_runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "extractor", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeatureSpec {
    WordRate,
    Embedding {
        table: PathBuf,
        #[serde(default)]
        oov: OovPolicy,
        #[serde(default = "yes")]
        normalize_tokens: bool,
    },
    Acv {
        ell: f64,
        d: usize,
        #[serde(default)]
        timebase: AcvTimebase,
    },
    /// Precomputed activation files named `<run id>.act` in `dir`.
    Activations {
        dir: PathBuf,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirConfig {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub window_seconds: Option<f64>,
}

impl FirConfig {
    pub fn resolve(&self, tr: f64) -> vem_core::Result<FirSpec> {
        match (self.k, self.window_seconds) {
            (Some(k), None) => Ok(FirSpec::new(k)),
            (None, Some(s)) => FirSpec::from_seconds(s, tr),
            (None, None) => Ok(FirSpec::new(0)),
            (Some(_), Some(_)) => Err(vem_core::Error::Usage(
                "fir: set either k or window_seconds, not both".into(),
            )),
        }
    }
}

fn default_k_folds() -> usize {
    5
}

fn default_trim_trs() -> usize {
    5
}

fn default_scheme() -> FoldScheme {
    FoldScheme::Contiguous
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingConfig {
    #[serde(flatten)]
    pub ridge: RidgeSpec,
    #[serde(default = "default_scheme")]
    pub folding_type: FoldScheme,
    #[serde(default = "default_k_folds")]
    pub k_folds: usize,
    #[serde(default = "default_trim_trs")]
    pub trim_trs: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig {
            ridge: RidgeSpec::default(),
            folding_type: default_scheme(),
            k_folds: default_k_folds(),
            trim_trs: default_trim_trs(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case", deny_unknown_fields)]
pub enum Evaluation {
    /// Cross-validation over all retained TRs of all runs.
    #[default]
    Cv,
    /// Train on every non-test run, score on `trim.test_runs`. With
    /// `average_repetitions`, the test runs are repeated presentations of one
    /// stimulus and their responses are averaged before scoring.
    Heldout {
        #[serde(default)]
        average_repetitions: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LogBackend {
    Csv,
    Json,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Runtime {
    /// Worker threads; machine parallelism when unset.
    #[serde(default)]
    pub threads: Option<usize>,
}

/// Reads a JSON document, mapping failures to config errors.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|source| CliError::ConfigIo {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Joins relative paths onto `base`.
pub fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Loads a run config, or the config embedded in a `report.json`.
    /// Relative paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> CliResult<RunConfig> {
        let value: serde_json::Value = read_json(path)?;
        let inner = match value.get("config") {
            Some(c) if value.get("report").is_some() => c.clone(),
            _ => value,
        };
        let mut cfg: RunConfig = serde_json::from_value(inner)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        // Absolute, so a config embedded in a report resolves from anywhere.
        let base = std::path::absolute(path.parent().unwrap_or(Path::new("")).join(".")).map_err(
            |source| CliError::ConfigIo {
                path: path.to_path_buf(),
                source,
            },
        )?;
        cfg.rebase(&base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        self.assembly = resolve_path(base, &self.assembly);
        self.output = resolve_path(base, &self.output);
        match &mut self.features {
            FeatureSpec::Embedding { table, .. } => *table = resolve_path(base, table),
            FeatureSpec::Activations { dir } => *dir = resolve_path(base, dir),
            FeatureSpec::WordRate | FeatureSpec::Acv { .. } => {}
        }
    }

    /// Checks everything that can be checked without touching data.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if let Err(e) = self.mapping.ridge.validate() {
            return bad(format!("mapping: {e}"));
        }
        if self.mapping.k_folds < 2 {
            return bad("mapping.k_folds must be >= 2".into());
        }
        if self.fir.k.is_some() && self.fir.window_seconds.is_some() {
            return bad("fir: set either k or window_seconds, not both".into());
        }
        if self.runtime.threads == Some(0) {
            return bad("runtime.threads must be >= 1".into());
        }
        if let FeatureSpec::Acv { ell, d, .. } = self.features {
            if ell.is_nan() || ell <= 0.0 || d == 0 {
                return bad("features: acv needs ell > 0 and d >= 1".into());
            }
        }
        let test: BTreeSet<&String> = self.trim.test_runs.iter().collect();
        if self.exclude_runs.iter().any(|r| test.contains(r)) {
            return bad("a run cannot be both excluded and a test run".into());
        }
        if matches!(self.evaluation, Evaluation::Heldout { .. }) && test.is_empty() {
            return bad("heldout evaluation needs trim.test_runs".into());
        }
        Ok(())
    }

    /// Every input path named by the config must exist before a run starts.
    pub fn check_paths(&self) -> CliResult<()> {
        let mut paths = vec![&self.assembly];
        match &self.features {
            FeatureSpec::Embedding { table, .. } => paths.push(table),
            FeatureSpec::Activations { dir } => paths.push(dir),
            FeatureSpec::WordRate | FeatureSpec::Acv { .. } => {}
        }
        for p in paths {
            if !p.exists() {
                return Err(CliError::Config(format!(
                    "referenced path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> serde_json::Value {
        serde_json::json!({
            "assembly": "/data/sub-01",
            "features": {"extractor": "word_rate"},
            "output": "/out",
        })
    }

    #[test]
    fn defaults_fill_in() {
        let cfg: RunConfig = serde_json::from_value(minimal()).unwrap();
        assert_eq!(cfg.mapping.folding_type, FoldScheme::Contiguous);
        assert_eq!(cfg.mapping.trim_trs, 5);
        assert_eq!(cfg.mapping.ridge.alphas.len(), 10);
        assert_eq!(cfg.evaluation, Evaluation::Cv);
        cfg.validate().unwrap();
    }

    #[test]
    fn round_trips_unchanged() {
        let mut v = minimal();
        v["mapping"] = serde_json::json!({
            "alphas": [0.1, 10.0], "per_voxel": false, "folding_type": "contiguous_trimmed",
            "k_folds": 4, "trim_trs": 3, "nested_folds": 3, "seed": 7
        });
        v["features"] = serde_json::json!({"extractor": "acv", "ell": 12.5, "d": 4});
        v["evaluation"] = serde_json::json!({"protocol": "heldout", "average_repetitions": true});
        v["trim"] = serde_json::json!({"head_trs": 2, "test_runs": ["run-02"]});
        v["fir"] = serde_json::json!({"window_seconds": 8.0});
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
        assert_eq!(cfg.mapping.ridge.alphas, [0.1, 10.0]);
        assert!(!cfg.mapping.ridge.per_voxel);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = minimal();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn conflicting_fir_rejected() {
        let mut v = minimal();
        v["fir"] = serde_json::json!({"k": 2, "window_seconds": 4.0});
        let cfg: RunConfig = serde_json::from_value(v).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }

    #[test]
    fn relative_paths_follow_config_file() {
        let mut cfg: RunConfig = serde_json::from_value(serde_json::json!({
            "assembly": "asm", "features": {"extractor": "word_rate"}, "output": "out"
        }))
        .unwrap();
        cfg.rebase(Path::new("/cfg"));
        assert_eq!(cfg.assembly, Path::new("/cfg/asm"));
        assert_eq!(cfg.output, Path::new("/cfg/out"));
    }
}

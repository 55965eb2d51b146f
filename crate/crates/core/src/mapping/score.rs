use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Cross-validated prediction scores for one fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub per_voxel_r: Vec<f64>,
    #[serde(default)]
    pub roi_means: BTreeMap<String, f64>,
    pub per_fold: Vec<Vec<f64>>,
    pub provenance: serde_json::Value,
}

impl ScoreReport {
    pub fn new(
        per_voxel_r: Vec<f64>,
        per_fold: Vec<Vec<f64>>,
        provenance: serde_json::Value,
    ) -> Self {
        ScoreReport {
            per_voxel_r,
            roi_means: BTreeMap::new(),
            per_fold,
            provenance,
        }
    }

    pub fn mean_r(&self) -> f64 {
        crate::stats::mean(&self.per_voxel_r)
    }

    /// Fills `roi_means` from `masks`.
    pub fn with_roi_means(mut self, masks: &BTreeMap<String, Vec<bool>>) -> Result<Self> {
        self.roi_means = aggregate_roi(&self, masks)?;
        Ok(self)
    }
}

/// Mean per-voxel correlation within each mask.
pub fn aggregate_roi(
    report: &ScoreReport,
    masks: &BTreeMap<String, Vec<bool>>,
) -> Result<BTreeMap<String, f64>> {
    let n = report.per_voxel_r.len();
    masks
        .iter()
        .map(|(name, mask)| {
            ensure!(
                mask.len() == n,
                Validation,
                "mask {name:?} has length {}, report has {n} voxels",
                mask.len()
            );
            let selected: Vec<f64> = mask
                .iter()
                .zip(&report.per_voxel_r)
                .filter_map(|(&m, &r)| m.then_some(r))
                .collect();
            ensure!(
                !selected.is_empty(),
                Validation,
                "mask {name:?} selects no voxels"
            );
            Ok((name.clone(), crate::stats::mean(&selected)))
        })
        .collect()
}

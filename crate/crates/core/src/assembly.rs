//! Time-locked pairing of brain responses with stimulus events.
//!
//! An [`Assembly`] is the dataset-agnostic input to every later stage: one
//! subject's runs, each holding a TR x voxel response matrix, the TR
//! timestamps, and the stimulus events (tokens with onsets). Stimulus onsets
//! and TR timestamps are assumed to share one clock, measured in seconds from
//! the start of the run.
//!
//! On disk an assembly is a directory with a `manifest.json` and raw
//! little-endian f32 tensors; see [`save_assembly`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::io::{read_f32_matrix, write_f32_matrix};
use crate::Matrix;

/// Tolerance on `tr_times[i+1] - tr_times[i] == tr`, in seconds.
pub const TR_SPACING_TOL: f64 = 1e-6;

/// Number of realignment parameters per TR (3 translations, 3 rotations).
pub const MOTION_PARAMS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusEvent {
    pub text: String,
    /// Seconds from run start.
    pub onset: f64,
    #[serde(default)]
    pub duration: f64,
}

impl StimulusEvent {
    pub fn new(text: impl Into<String>, onset: f64, duration: f64) -> Self {
        StimulusEvent {
            text: text.into(),
            onset,
            duration,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    Volume,
    Surface,
}

/// One scanning run. Construct with [`Run::new`], which enforces the timing
/// invariants and sorts events by onset (stable, so ties keep input order).
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    id: String,
    tr: f64,
    bold: Matrix,
    tr_times: Vec<f64>,
    events: Vec<StimulusEvent>,
    motion: Option<Matrix>,
}

impl Run {
    pub fn new(
        id: impl Into<String>,
        tr: f64,
        bold: Matrix,
        tr_times: Vec<f64>,
        mut events: Vec<StimulusEvent>,
        motion: Option<Matrix>,
    ) -> Result<Self> {
        let id = id.into();
        ensure!(!id.is_empty(), Validation, "run id must not be empty");
        ensure!(
            !id.contains(['/', '\\']),
            Validation,
            "run id {id:?} must not contain path separators"
        );
        ensure!(
            tr.is_finite() && tr > 0.0,
            Validation,
            "run {id}: tr must be positive, got {tr}"
        );
        ensure!(bold.nrows() >= 1, Validation, "run {id}: no TRs");
        ensure!(bold.ncols() >= 1, Validation, "run {id}: no voxels");
        ensure!(
            tr_times.len() == bold.nrows(),
            Integrity,
            "run {id}: {} tr_times for {} bold rows",
            tr_times.len(),
            bold.nrows()
        );
        for (i, w) in tr_times.windows(2).enumerate() {
            ensure!(
                w[1] > w[0],
                Validation,
                "run {id}: tr_times not strictly increasing at index {}",
                i + 1
            );
            ensure!(
                ((w[1] - w[0]) - tr).abs() <= TR_SPACING_TOL,
                Validation,
                "run {id}: tr_times spacing {} at index {} differs from tr {tr}",
                w[1] - w[0],
                i + 1
            );
        }
        ensure!(
            bold.iter().all(|v| v.is_finite()),
            Validation,
            "run {id}: non-finite bold values"
        );
        let end = tr_times[tr_times.len() - 1] + tr;
        for e in &events {
            ensure!(
                e.onset.is_finite() && e.onset >= 0.0 && e.onset < end,
                Validation,
                "run {id}: event {:?} onset {} outside [0, {end})",
                e.text,
                e.onset
            );
        }
        events.sort_by(|a, b| a.onset.total_cmp(&b.onset));
        if let Some(m) = &motion {
            ensure!(
                m.nrows() == bold.nrows() && m.ncols() == MOTION_PARAMS,
                Integrity,
                "run {id}: motion is {}x{}, expected {}x{MOTION_PARAMS}",
                m.nrows(),
                m.ncols(),
                bold.nrows()
            );
        }
        Ok(Run {
            id,
            tr,
            bold,
            tr_times,
            events,
            motion,
        })
    }

    /// TR timestamps `start, start + tr, ...` for `n_trs` scans.
    pub fn regular_tr_times(n_trs: usize, tr: f64, start: f64) -> Vec<f64> {
        (0..n_trs).map(|i| start + i as f64 * tr).collect()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tr(&self) -> f64 {
        self.tr
    }

    pub fn bold(&self) -> &Matrix {
        &self.bold
    }

    pub fn tr_times(&self) -> &[f64] {
        &self.tr_times
    }

    pub fn events(&self) -> &[StimulusEvent] {
        &self.events
    }

    pub fn motion(&self) -> Option<&Matrix> {
        self.motion.as_ref()
    }

    pub fn n_trs(&self) -> usize {
        self.bold.nrows()
    }

    pub fn n_voxels(&self) -> usize {
        self.bold.ncols()
    }
}

/// One subject's runs plus named voxel masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembly {
    subject: String,
    space: Space,
    runs: Vec<Run>,
    masks: BTreeMap<String, Vec<bool>>,
}

impl Assembly {
    pub fn new(
        subject: impl Into<String>,
        space: Space,
        runs: Vec<Run>,
        masks: BTreeMap<String, Vec<bool>>,
    ) -> Result<Self> {
        let subject = subject.into();
        ensure!(!runs.is_empty(), Validation, "assembly has no runs");
        let n_voxels = runs[0].n_voxels();
        let mut ids = BTreeSet::new();
        for r in &runs {
            ensure!(
                r.n_voxels() == n_voxels,
                Integrity,
                "run {} has {} voxels, expected {n_voxels}",
                r.id,
                r.n_voxels()
            );
            ensure!(
                ids.insert(r.id.as_str()),
                Validation,
                "duplicate run id {}",
                r.id
            );
        }
        for (name, m) in &masks {
            ensure!(
                m.len() == n_voxels,
                Integrity,
                "mask {name} has length {}, expected {n_voxels}",
                m.len()
            );
        }
        Ok(Assembly {
            subject,
            space,
            runs,
            masks,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn runs(&self) -> &[Run] {
        &self.runs
    }

    pub fn run(&self, id: &str) -> Option<&Run> {
        self.runs.iter().find(|r| r.id == id)
    }

    pub fn masks(&self) -> &BTreeMap<String, Vec<bool>> {
        &self.masks
    }

    pub fn mask(&self, name: &str) -> Result<&[bool]> {
        self.masks
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown mask {name:?}")))
    }

    pub fn n_voxels(&self) -> usize {
        self.runs[0].n_voxels()
    }

    /// Drops the named runs (e.g. a run with confounding stimuli).
    pub fn without_runs(&self, ids: &BTreeSet<String>) -> Result<Assembly> {
        for id in ids {
            ensure!(self.run(id).is_some(), Lookup, "unknown run {id:?}");
        }
        let runs = self
            .runs
            .iter()
            .filter(|r| !ids.contains(&r.id))
            .cloned()
            .collect();
        Assembly::new(self.subject.clone(), self.space, runs, self.masks.clone())
    }
}

/// TRs removed from each run before modeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrimPolicy {
    #[serde(default)]
    pub head_trs: usize,
    #[serde(default)]
    pub tail_trs: usize,
    /// Removed in addition to `head_trs` from designated test runs.
    #[serde(default)]
    pub extra_test_head_trs: usize,
}

impl TrimPolicy {
    pub fn new(head_trs: usize, tail_trs: usize, extra_test_head_trs: usize) -> Self {
        TrimPolicy {
            head_trs,
            tail_trs,
            extra_test_head_trs,
        }
    }

    /// Rows of an `n_trs`-long run that survive trimming.
    pub fn kept_rows(&self, n_trs: usize, is_test: bool) -> Range<usize> {
        let head = self.head_trs + if is_test { self.extra_test_head_trs } else { 0 };
        head.min(n_trs)..n_trs.saturating_sub(self.tail_trs).max(head.min(n_trs))
    }
}

/// Removes leading/trailing TRs from every run and re-bases time so the first
/// retained TR is at 0. Events are kept iff their onset lies in the retained
/// half-open span `[first retained TR, last retained TR + tr)`.
pub fn apply_trim(
    a: &Assembly,
    policy: &TrimPolicy,
    test_run_ids: &BTreeSet<String>,
) -> Result<Assembly> {
    for id in test_run_ids {
        ensure!(a.run(id).is_some(), Lookup, "unknown test run {id:?}");
    }
    let runs = a
        .runs
        .iter()
        .map(|run| {
            let head = policy.head_trs
                + if test_run_ids.contains(&run.id) {
                    policy.extra_test_head_trs
                } else {
                    0
                };
            trim_run(run, head, policy.tail_trs)
        })
        .collect::<Result<Vec<_>>>()?;
    Assembly::new(a.subject.clone(), a.space, runs, a.masks.clone())
}

fn trim_run(run: &Run, head: usize, tail: usize) -> Result<Run> {
    let n = run.n_trs();
    ensure!(
        head + tail < n,
        Validation,
        "run {}: trimming {head} head + {tail} tail TRs leaves nothing of {n}",
        run.id
    );
    if head == 0 && tail == 0 {
        return Ok(run.clone());
    }
    let keep = n - head - tail;
    let start = run.tr_times[head];
    let end = run.tr_times[head + keep - 1] + run.tr;
    let tr_times = run.tr_times[head..head + keep]
        .iter()
        .map(|t| t - start)
        .collect();
    let events = run
        .events
        .iter()
        .filter(|e| e.onset >= start && e.onset < end)
        .map(|e| StimulusEvent {
            text: e.text.clone(),
            onset: e.onset - start,
            duration: e.duration,
        })
        .collect();
    let bold = run.bold.rows(head, keep).into_owned();
    let motion = run.motion.as_ref().map(|m| m.rows(head, keep).into_owned());
    Run::new(run.id.clone(), run.tr, bold, tr_times, events, motion)
}

/// Restricts every run to the voxels selected by `mask_name`, re-slicing all
/// masks so they stay aligned with the remaining columns.
pub fn apply_mask(a: &Assembly, mask_name: &str) -> Result<Assembly> {
    let mask = a.mask(mask_name)?;
    let keep: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect();
    ensure!(
        !keep.is_empty(),
        Validation,
        "mask {mask_name:?} selects no voxels"
    );
    let runs = a
        .runs
        .iter()
        .map(|run| {
            let bold = run.bold.select_columns(keep.iter());
            Run::new(
                run.id.clone(),
                run.tr,
                bold,
                run.tr_times.clone(),
                run.events.clone(),
                run.motion.clone(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let masks = a
        .masks
        .iter()
        .map(|(name, m)| (name.clone(), keep.iter().map(|&i| m[i]).collect()))
        .collect();
    Assembly::new(a.subject.clone(), a.space, runs, masks)
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    subject: String,
    space: Space,
    runs: Vec<RunEntry>,
    #[serde(default)]
    masks: Vec<MaskEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RunEntry {
    id: String,
    tr: f64,
    n_trs: usize,
    n_voxels: usize,
    bold_file: String,
    events_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    motion_file: Option<String>,
    /// Absent means `i * tr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tr_times: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskEntry {
    name: String,
    mask_file: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `a` as a manifest plus per-run tensor files into `path`, creating
/// the directory if needed.
pub fn save_assembly(a: &Assembly, path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    let mut runs = Vec::with_capacity(a.runs.len());
    for run in &a.runs {
        let bold_file = format!("{}.bold.f32", run.id);
        let events_file = format!("{}.events.json", run.id);
        write_f32_matrix(&path.join(&bold_file), &run.bold)?;
        let events_path = path.join(&events_file);
        let events =
            serde_json::to_vec_pretty(&run.events).map_err(|e| Error::json(&events_path, e))?;
        fs::write(&events_path, events).map_err(|e| Error::io(&events_path, e))?;
        let motion_file = match &run.motion {
            Some(m) => {
                let f = format!("{}.motion.f32", run.id);
                write_f32_matrix(&path.join(&f), m)?;
                Some(f)
            }
            None => None,
        };
        runs.push(RunEntry {
            id: run.id.clone(),
            tr: run.tr,
            n_trs: run.n_trs(),
            n_voxels: run.n_voxels(),
            bold_file,
            events_file,
            motion_file,
            tr_times: Some(run.tr_times.clone()),
        });
    }
    let mut masks = Vec::with_capacity(a.masks.len());
    for (name, m) in &a.masks {
        let mask_file = format!("{name}.mask.u8");
        let mask_path = path.join(&mask_file);
        let bytes: Vec<u8> = m.iter().map(|&b| b as u8).collect();
        fs::write(&mask_path, bytes).map_err(|e| Error::io(&mask_path, e))?;
        masks.push(MaskEntry {
            name: name.clone(),
            mask_file,
        });
    }
    let manifest = Manifest {
        subject: a.subject.clone(),
        space: a.space,
        runs,
        masks,
    };
    let manifest_path = path.join(MANIFEST_FILE);
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

/// Reads an assembly directory written by [`save_assembly`] (or by hand in
/// the same layout) and validates every invariant.
pub fn load_assembly(path: &Path) -> Result<Assembly> {
    let manifest_path = path.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Format(format!("no {MANIFEST_FILE} in {}", path.display()))
        } else {
            Error::io(&manifest_path, e)
        }
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;

    let mut runs = Vec::with_capacity(manifest.runs.len());
    for entry in &manifest.runs {
        let bold = read_f32_matrix(&path.join(&entry.bold_file), entry.n_trs, entry.n_voxels)?;
        let events_path = path.join(&entry.events_file);
        let events_text =
            fs::read_to_string(&events_path).map_err(|e| Error::io(&events_path, e))?;
        let events: Vec<StimulusEvent> = serde_json::from_str(&events_text)
            .map_err(|e| Error::Format(format!("{}: {e}", events_path.display())))?;
        let motion = entry
            .motion_file
            .as_ref()
            .map(|f| read_f32_matrix(&path.join(f), entry.n_trs, MOTION_PARAMS))
            .transpose()?;
        let tr_times = entry
            .tr_times
            .clone()
            .unwrap_or_else(|| Run::regular_tr_times(entry.n_trs, entry.tr, 0.0));
        runs.push(Run::new(
            entry.id.clone(),
            entry.tr,
            bold,
            tr_times,
            events,
            motion,
        )?);
    }

    let n_voxels = manifest.runs.first().map(|r| r.n_voxels).unwrap_or(0);
    let mut masks = BTreeMap::new();
    for entry in &manifest.masks {
        let mask_path = path.join(&entry.mask_file);
        let bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
        ensure!(
            bytes.len() == n_voxels,
            Integrity,
            "{}: {} bytes for {n_voxels} voxels",
            mask_path.display(),
            bytes.len()
        );
        let mask = bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Format(format!(
                    "{}: mask byte {other} is not 0/1",
                    mask_path.display()
                ))),
            })
            .collect::<Result<Vec<bool>>>()?;
        ensure!(
            masks.insert(entry.name.clone(), mask).is_none(),
            Validation,
            "duplicate mask name {:?}",
            entry.name
        );
    }
    Assembly::new(manifest.subject, manifest.space, runs, masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_run(id: &str, n_trs: usize, n_voxels: usize, tr: f64) -> Run {
        let bold = Matrix::from_fn(n_trs, n_voxels, |i, j| (i * n_voxels + j) as f64);
        let events = (0..n_trs)
            .map(|i| StimulusEvent::new(format!("w{i}"), i as f64 * tr + 0.5 * tr, 0.3))
            .collect();
        Run::new(
            id,
            tr,
            bold,
            Run::regular_tr_times(n_trs, tr, 0.0),
            events,
            None,
        )
        .unwrap()
    }

    fn toy_assembly() -> Assembly {
        let mut masks = BTreeMap::new();
        masks.insert("all".to_string(), vec![true; 10]);
        masks.insert(
            "language".to_string(),
            (0..10).map(|i| i % 3 == 0).collect(),
        );
        Assembly::new(
            "sub-01",
            Space::Surface,
            vec![toy_run("a", 50, 10, 2.0), toy_run("b", 40, 10, 2.0)],
            masks,
        )
        .unwrap()
    }

    #[test]
    fn events_sorted_stably() {
        let events = vec![
            StimulusEvent::new("late", 3.0, 0.0),
            StimulusEvent::new("tie1", 1.0, 0.0),
            StimulusEvent::new("tie2", 1.0, 0.0),
        ];
        let run = Run::new("r", 2.0, Matrix::zeros(2, 1), vec![0.0, 2.0], events, None).unwrap();
        let texts: Vec<_> = run.events().iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, ["tie1", "tie2", "late"]);
    }

    #[test]
    fn non_monotonic_tr_times_rejected() {
        let err = Run::new(
            "r",
            2.0,
            Matrix::zeros(3, 1),
            vec![0.0, 2.0, 1.0],
            vec![],
            None,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn irregular_spacing_rejected() {
        let err = Run::new(
            "r",
            2.0,
            Matrix::zeros(3, 1),
            vec![0.0, 2.0, 4.1],
            vec![],
            None,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn event_past_end_rejected() {
        let err = Run::new(
            "r",
            2.0,
            Matrix::zeros(2, 1),
            vec![0.0, 2.0],
            vec![StimulusEvent::new("x", 4.0, 0.0)],
            None,
        );
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn mismatched_voxels_rejected() {
        let err = Assembly::new(
            "s",
            Space::Volume,
            vec![toy_run("a", 5, 3, 2.0), toy_run("b", 5, 4, 2.0)],
            BTreeMap::new(),
        );
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn trim_narratives_policy() {
        let run = toy_run("story", 300, 2, 1.5);
        let a = Assembly::new("s", Space::Surface, vec![run], BTreeMap::new()).unwrap();
        let t = apply_trim(&a, &TrimPolicy::new(14, 9, 0), &BTreeSet::new()).unwrap();
        assert_eq!(t.runs()[0].n_trs(), 277);
        assert_eq!(t.runs()[0].bold()[(0, 0)], a.runs()[0].bold()[(14, 0)]);
    }

    #[test]
    fn trim_identity() {
        let a = toy_assembly();
        let t = apply_trim(&a, &TrimPolicy::default(), &BTreeSet::new()).unwrap();
        assert_eq!(t, a);
    }

    #[test]
    fn trim_event_boundary_is_half_open() {
        let events = vec![
            StimulusEvent::new("before", 9.0, 0.0),
            StimulusEvent::new("at", 10.0, 0.0),
        ];
        let run = Run::new(
            "r",
            2.0,
            Matrix::zeros(50, 1),
            Run::regular_tr_times(50, 2.0, 0.0),
            events,
            None,
        )
        .unwrap();
        let a = Assembly::new("s", Space::Volume, vec![run], BTreeMap::new()).unwrap();
        let t = apply_trim(&a, &TrimPolicy::new(5, 0, 0), &BTreeSet::new()).unwrap();
        let r = &t.runs()[0];
        assert_eq!(r.events().len(), 1);
        assert_eq!(r.events()[0].text, "at");
        assert_eq!(r.events()[0].onset, 0.0);
        assert_eq!(r.tr_times()[0], 0.0);
        assert_eq!(r.n_trs(), 45);
    }

    #[test]
    fn trim_extra_applies_to_test_runs_only() {
        let a = toy_assembly();
        let test: BTreeSet<String> = ["b".to_string()].into();
        let t = apply_trim(&a, &TrimPolicy::new(2, 3, 10), &test).unwrap();
        assert_eq!(t.run("a").unwrap().n_trs(), 45);
        assert_eq!(t.run("b").unwrap().n_trs(), 25);
    }

    #[test]
    fn trim_exceeding_run_rejected() {
        let a = toy_assembly();
        let err = apply_trim(&a, &TrimPolicy::new(30, 10, 0), &BTreeSet::new());
        assert!(matches!(err, Err(Error::Validation(_))));
    }

    #[test]
    fn mask_shapes_and_idempotence() {
        let a = toy_assembly();
        let all = apply_mask(&a, "all").unwrap();
        assert_eq!(all, a);
        let once = apply_mask(&a, "language").unwrap();
        assert_eq!(once.runs()[0].bold().shape(), (50, 4));
        assert!(once.mask("language").unwrap().iter().all(|&m| m));
        let twice = apply_mask(&once, "language").unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn mask_three_of_ten() {
        let mut a = toy_assembly();
        a.masks
            .insert("three".into(), (0..10).map(|i| i < 3).collect());
        let m = apply_mask(&a, "three").unwrap();
        assert_eq!(m.runs()[1].bold().shape(), (40, 3));
        assert_eq!(m.runs()[1].bold()[(1, 2)], a.runs()[1].bold()[(1, 2)]);
    }

    #[test]
    fn unknown_mask_is_lookup_error() {
        assert!(matches!(
            apply_mask(&toy_assembly(), "V1"),
            Err(Error::Lookup(_))
        ));
    }

    #[test]
    fn mask_commutes_with_trim() {
        let a = toy_assembly();
        let policy = TrimPolicy::new(3, 4, 0);
        let none = BTreeSet::new();
        let tm = apply_mask(&apply_trim(&a, &policy, &none).unwrap(), "language").unwrap();
        let mt = apply_trim(&apply_mask(&a, "language").unwrap(), &policy, &none).unwrap();
        assert_eq!(tm, mt);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = toy_assembly();
        let motion = Matrix::from_fn(50, 6, |i, j| (i as f64) * 0.25 + j as f64);
        a.runs[0].motion = Some(motion);
        save_assembly(&a, dir.path()).unwrap();
        let b = load_assembly(dir.path()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_manifest_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_assembly(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn short_tensor_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let run = toy_run("r", 100, 3, 2.0);
        let a = Assembly::new("s", Space::Volume, vec![run], BTreeMap::new()).unwrap();
        save_assembly(&a, dir.path()).unwrap();
        let bold = dir.path().join("r.bold.f32");
        let bytes = fs::read(&bold).unwrap();
        fs::write(&bold, &bytes[..99 * 3 * 4]).unwrap();
        assert!(matches!(
            load_assembly(dir.path()),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn manifest_without_tr_times_uses_regular_grid() {
        let dir = tempfile::tempdir().unwrap();
        let a = Assembly::new(
            "s",
            Space::Volume,
            vec![toy_run("r", 4, 1, 1.5)],
            BTreeMap::new(),
        )
        .unwrap();
        save_assembly(&a, dir.path()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&p).unwrap()).unwrap();
        v["runs"][0].as_object_mut().unwrap().remove("tr_times");
        fs::write(&p, v.to_string()).unwrap();
        assert_eq!(load_assembly(dir.path()).unwrap(), a);
    }
}

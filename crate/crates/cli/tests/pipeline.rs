use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use vem_cli::commands::{self, Globals};
use vem_cli::config::RunConfig;
use vem_cli::pipeline::{PLOTS_DIR, QUARANTINE_DIR, REPORT_FILE};
use vem_cli::plots::{embedded_data, embedded_fit};
use vem_cli::{run_pipeline, CliError, Logger, ReportFile};
use vem_core::assembly::{load_assembly, save_assembly};
use vem_core::features::read_activations;
use vem_core::synth::{generate, MotionSpec, SynthSpec};

fn synth_into(dir: &Path, seed: u64) -> PathBuf {
    let asm = dir.join(format!("asm{seed}"));
    commands::synth(&Globals {
        out: Some(asm.clone()),
        seed: Some(seed),
        ..Globals::default()
    })
    .unwrap();
    asm
}

fn config(asm: &Path, out: &Path, extra: serde_json::Value) -> RunConfig {
    let mut v = serde_json::json!({
        "assembly": asm,
        "features": {"extractor": "activations", "dir": asm.join("features")},
        "downsample": {"method": "sum"},
        "fir": {"k": 3},
        "output": out,
    });
    for (k, val) in extra.as_object().unwrap() {
        v[k] = val.clone();
    }
    serde_json::from_value(v).unwrap()
}

fn run(cfg: &RunConfig) -> Result<vem_cli::PipelineOutput, CliError> {
    let log = Logger::open(&cfg.output, cfg.log)?;
    run_pipeline(cfg, &log)
}

fn write_config(path: &Path, cfg: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
}

#[test]
fn word_rate_smoke_reports_every_mask() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 1);
    let cfg = config(
        &asm,
        &dir.path().join("out"),
        serde_json::json!({
            "features": {"extractor": "word_rate"},
            "masks": ["all", "language"],
            "mapping": {"folding_type": "contiguous"},
        }),
    );
    let out = run(&cfg).unwrap();
    let roi = &out.report.report.roi_means;
    assert_eq!(roi.keys().collect::<Vec<_>>(), ["all", "language"]);
    assert!(roi
        .values()
        .all(|r| r.is_finite() && (-1.0..=1.0).contains(r)));
    let stored = ReportFile::load(&cfg.output.join(REPORT_FILE)).unwrap();
    assert_eq!(stored.config, cfg);
    assert_eq!(stored.report.roi_means, *roi);
    let svg = fs::read_to_string(cfg.output.join(PLOTS_DIR).join("roi_means.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 2);
    let csv = fs::read_to_string(cfg.output.join(PLOTS_DIR).join("roi_means.csv")).unwrap();
    assert_eq!(embedded_data(&svg).unwrap(), csv);
    assert!(!cfg.output.join(QUARANTINE_DIR).exists());
}

#[test]
fn identical_runs_give_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 2);
    let cfg = config(
        &asm,
        &dir.path().join("out"),
        serde_json::json!({"mapping": {"folding_type": "shuffled"}}),
    );
    run(&cfg).unwrap();
    let a = fs::read(cfg.output.join(REPORT_FILE)).unwrap();
    run(&cfg).unwrap();
    assert_eq!(a, fs::read(cfg.output.join(REPORT_FILE)).unwrap());
}

#[test]
fn missing_mask_aborts_in_mask_stage() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 3);
    let cfg = config(
        &asm,
        &dir.path().join("out"),
        serde_json::json!({"masks": ["missing"]}),
    );
    let err = run(&cfg).err().unwrap();
    assert_eq!(err.stage(), Some("mask"));
    let q = cfg.output.join(QUARANTINE_DIR);
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(q.join("error.json")).unwrap()).unwrap();
    assert_eq!(record["stage"], "mask");
    assert_eq!(record["config"]["masks"][0], "missing");
    assert!(!cfg.output.join(REPORT_FILE).exists());
}

#[test]
fn log_lines_match_records() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 4);
    let cfg = config(&asm, &dir.path().join("out"), serde_json::json!({}));
    let log = Logger::open(&cfg.output, cfg.log).unwrap();
    run_pipeline(&cfg, &log).unwrap();
    let n = log.records_written() as usize;
    let json = fs::read_to_string(cfg.output.join("log.jsonl")).unwrap();
    assert_eq!(json.lines().count(), n);
    let mut rdr = csv::Reader::from_path(cfg.output.join("log.csv")).unwrap();
    assert_eq!(rdr.records().count(), n);
    let stages: Vec<String> = json
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    for s in [
        "config",
        "assemble",
        "mask",
        "extract",
        "downsample",
        "fir",
        "fit",
        "aggregate",
        "write",
    ] {
        assert!(stages.iter().any(|x| x == s), "no {s} record");
    }
}

#[test]
fn heldout_protocols() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_runs: 4,
        noise_sd: 0.5,
        ..SynthSpec::planted(9)
    };
    let asm = dir.path().join("asm");
    let (a, truth) = generate(&spec).unwrap();
    save_assembly(&a, &asm).unwrap();
    fs::create_dir_all(asm.join("features")).unwrap();
    for (run, fm) in a.runs().iter().zip(&truth.event_features) {
        vem_core::features::export_activations(
            &asm.join("features").join(format!("{}.act", run.id())),
            fm,
        )
        .unwrap();
    }
    let cfg = config(
        &asm,
        &dir.path().join("out"),
        serde_json::json!({
            "trim": {"head_trs": 2, "test_runs": ["run-03", "run-04"]},
            "evaluation": {"protocol": "heldout", "average_repetitions": false},
        }),
    );
    let out = run(&cfg).unwrap();
    assert_eq!(out.report.report.provenance["protocol"], "heldout");
    assert!(out.report.report.mean_r() > 0.5);

    let mut averaged = cfg.clone();
    averaged.evaluation = vem_cli::config::Evaluation::Heldout {
        average_repetitions: true,
    };
    let out = run(&averaged).unwrap();
    assert_eq!(out.report.report.provenance["n_test"], 198);
}

#[test]
fn acv_and_embedding_features_run() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 5);
    let table = dir.path().join("emb.txt");
    let rows: Vec<String> = (0..200)
        .map(|i| format!("w{i} {} {}", i % 7, (i * 3) % 5))
        .collect();
    fs::write(&table, rows.join("\n")).unwrap();
    for features in [
        serde_json::json!({"extractor": "acv", "ell": 20.0, "d": 5}),
        serde_json::json!({"extractor": "acv", "ell": 20.0, "d": 5, "timebase": "event"}),
        serde_json::json!({"extractor": "embedding", "table": table, "oov": "mean"}),
    ] {
        let cfg = config(
            &asm,
            &dir.path().join("out"),
            serde_json::json!({"features": features}),
        );
        let out = run(&cfg).unwrap();
        let width = if out.report.features.extractor == "embedding" {
            2
        } else {
            5
        };
        assert_eq!(out.report.n_features, 4 * width);
    }
}

#[test]
fn extract_then_downsample_commands() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 6);
    let cfg = config(
        &asm,
        &dir.path().join("out"),
        serde_json::json!({"features": {"extractor": "word_rate"}}),
    );
    let cfg_path = dir.path().join("run.json");
    write_config(&cfg_path, &cfg);
    let g = Globals {
        config: Some(cfg_path),
        ..Globals::default()
    };
    let ev_dir = commands::extract_cmd(&g).unwrap();
    let tr_dir = commands::downsample_cmd(&g).unwrap();
    let a = load_assembly(&asm).unwrap();
    for run in a.runs() {
        let ev = read_activations(&ev_dir.join(format!("{}.act", run.id()))).unwrap();
        let tr = read_activations(&tr_dir.join(format!("{}.act", run.id()))).unwrap();
        assert_eq!(ev.nrows(), run.events().len());
        assert_eq!(tr.nrows(), run.n_trs());
        assert_eq!(tr.level(), vem_core::features::Level::Tr);
    }
}

#[test]
fn evaluate_reproduces_stored_report() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 7);
    let cfg = config(&asm, &dir.path().join("out"), serde_json::json!({}));
    run(&cfg).unwrap();
    let (_, repro) = commands::evaluate_cmd(&Globals {
        config: Some(cfg.output.join(REPORT_FILE)),
        threads: Some(3),
        ..Globals::default()
    })
    .unwrap();
    let repro = repro.unwrap();
    assert!(repro.mean_abs_diff <= 1e-10);
    assert!(cfg.output.join("rerun").join("reproduction.json").exists());
}

#[test]
fn fir_sweep_report_is_a_line() {
    let dir = tempfile::tempdir().unwrap();
    let asm = synth_into(dir.path(), 8);
    let mut reports = Vec::new();
    for k in 0..5 {
        let out = dir.path().join(format!("k{k}"));
        run(&config(&asm, &out, serde_json::json!({"fir": {"k": k}}))).unwrap();
        reports.push(out.join(REPORT_FILE));
    }
    let spec = dir.path().join("plots.json");
    write_config(
        &spec,
        &serde_json::json!({"kind": "fir_sweep", "reports": reports, "mask": "all"}),
    );
    let written = commands::report_cmd(&Globals {
        config: Some(spec),
        out: Some(dir.path().join("figs")),
        ..Globals::default()
    })
    .unwrap();
    let svg = fs::read_to_string(&written[0]).unwrap();
    assert_eq!(svg.matches(r#"class="point""#).count(), 5);
    let data = embedded_data(&svg).unwrap();
    assert_eq!(
        data.lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect::<Vec<_>>(),
        ["0", "1", "2", "3", "4"]
    );
}

#[test]
fn motion_scatter_matches_fit_record() {
    let dir = tempfile::tempdir().unwrap();
    let mut subjects = Vec::new();
    for (i, drift) in [0.02, 0.05, 0.08, 0.12, 0.2, 0.3].iter().enumerate() {
        let spec = SynthSpec {
            subject: format!("sub-{i:02}"),
            n_runs: 1,
            n_trs: 100,
            motion: Some(MotionSpec {
                drift_mm_per_tr: *drift,
                spike_prob: 0.0,
            }),
            ..SynthSpec::planted(i as u64)
        };
        let (a, _) = generate(&spec).unwrap();
        let path = dir.path().join(format!("sub{i}"));
        save_assembly(&a, &path).unwrap();
        let fd = vem_core::analysis::motion_summary(&a, 50.0)
            .unwrap()
            .mean_fd;
        subjects.push(serde_json::json!({"assembly": path, "score": 0.05 * fd.powf(-0.5) + 0.02}));
    }
    let spec = dir.path().join("motion.json");
    write_config(
        &spec,
        &serde_json::json!({"subjects": subjects, "threshold_mm": 0.2}),
    );
    let out = dir.path().join("motion");
    let m = commands::motion_cmd(&Globals {
        config: Some(spec),
        out: Some(out.clone()),
        ..Globals::default()
    })
    .unwrap();
    let fit = m.fit.unwrap();
    assert!((fit.b + 0.5).abs() < 1e-3, "{fit:?}");
    let svg = fs::read_to_string(out.join(PLOTS_DIR).join("motion.svg")).unwrap();
    assert_eq!(embedded_fit(&svg).unwrap(), fit);
    for s in &m.summaries {
        assert_eq!(m.excluded.contains(&s.subject), s.mean_fd > 0.2);
    }
}

#[test]
fn audit_command_scores_every_scheme() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        n_runs: 1,
        n_trs: 300,
        target_kind: vem_core::synth::TargetKind::Autocorrelated,
        acv_ell: Some(30.0),
        ..SynthSpec::planted(1)
    };
    let (a, _) = generate(&spec).unwrap();
    let asm = dir.path().join("asm");
    save_assembly(&a, &asm).unwrap();
    let cfg = dir.path().join("audit.json");
    write_config(
        &cfg,
        &serde_json::json!({"assembly": "asm", "acv": [{"ell": 30.0, "d": 10}], "audit": {"trim_trs": 30}, "output": "audit"}),
    );
    let reports = commands::audit_cmd(&Globals {
        config: Some(cfg),
        ..Globals::default()
    })
    .unwrap();
    assert_eq!(reports[0].mean_r.len(), 3);
    assert!(dir.path().join("audit").join("leakage.json").exists());
    assert!(dir
        .path()
        .join("audit")
        .join(PLOTS_DIR)
        .join("leakage_ell30_d10.svg")
        .exists());
}

#[test]
fn assemble_from_raw_pieces() {
    let dir = tempfile::tempdir().unwrap();
    let bold: Vec<u8> = (0..12).flat_map(|i| (i as f32).to_le_bytes()).collect();
    fs::write(dir.path().join("bold.f32"), bold).unwrap();
    fs::write(
        dir.path().join("events.tsv"),
        "onset\tduration\ttext\n0.5\t0.2\thello\n2.5\t0.3\tworld\n",
    )
    .unwrap();
    fs::write(dir.path().join("lang.u8"), [1u8, 0, 1]).unwrap();
    let cfg = dir.path().join("assemble.json");
    write_config(
        &cfg,
        &serde_json::json!({
            "subject": "sub-01", "space": "volume",
            "runs": [{"id": "run-01", "tr": 2.0, "n_voxels": 3, "bold": "bold.f32", "events": "events.tsv"}],
            "masks": {"lang": "lang.u8"}
        }),
    );
    let out = commands::assemble_cmd(&Globals {
        config: Some(cfg),
        out: Some(dir.path().join("asm")),
        ..Globals::default()
    })
    .unwrap();
    let a = load_assembly(&out).unwrap();
    assert_eq!(a.runs()[0].bold().shape(), (4, 3));
    assert_eq!(a.runs()[0].events()[1].text, "world");
    assert_eq!(a.mask("lang").unwrap(), [true, false, true]);
}

fn vem(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_vem"))
        .args(args)
        .output()
        .unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let (code, _) = vem(&["fit", "--config", &format!("{d}/nope.json")]);
    assert_eq!(code, 2);
    fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert_eq!(vem(&["fit", "--config", &format!("{d}/bad.json")]).0, 2);

    let asm = format!("{d}/asm");
    assert_eq!(vem(&["synth", "--out", &asm, "--seed", "2"]).0, 0);
    let cfg = serde_json::json!({
        "assembly": "asm", "features": {"extractor": "word_rate"}, "output": "out", "masks": ["absent"]
    });
    write_config(&dir.path().join("run.json"), &cfg);
    let (code, err) = vem(&["fit", "--config", &format!("{d}/run.json"), "--log", "csv"]);
    assert_eq!(code, 3);
    assert!(err.contains("\"mask\""), "{err}");

    let mut ok = cfg.clone();
    ok["masks"] = serde_json::json!([]);
    write_config(&dir.path().join("ok.json"), &ok);
    assert_eq!(
        vem(&["fit", "--config", &format!("{d}/ok.json"), "--threads", "2"]).0,
        0
    );
    assert!(dir.path().join("out").join(REPORT_FILE).exists());
}

#[test]
fn stored_report_reruns_from_another_directory() {
    let dir = tempfile::tempdir().unwrap();
    synth_into(dir.path(), 4);
    let cfg = serde_json::json!({
        "assembly": "asm4", "features": {"extractor": "word_rate"}, "output": "out"
    });
    write_config(&dir.path().join("run.json"), &cfg);
    let in_dir = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_vem"))
            .current_dir(dir.path())
            .args(args)
            .status()
            .unwrap()
            .code()
            .unwrap()
    };
    assert_eq!(in_dir(&["--config", "run.json", "fit"]), 0);
    assert_eq!(in_dir(&["--config", "out/report.json", "evaluate"]), 0);
    let repro: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("out/rerun/reproduction.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(repro["bitwise_equal"], true, "{repro}");
}

#[test]
fn motion_uses_best_layer_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("synth.json");
    let synth = SynthSpec {
        motion: Some(MotionSpec {
            drift_mm_per_tr: 0.05,
            spike_prob: 0.0,
        }),
        ..SynthSpec::planted(9)
    };
    write_config(&spec, &synth);
    let asm = commands::synth(&Globals {
        config: Some(spec),
        out: Some(dir.path().join("asm")),
        ..Globals::default()
    })
    .unwrap();
    let mut paths = Vec::new();
    for (layer, extra) in [
        (
            3,
            serde_json::json!({"features": {"extractor": "word_rate"}}),
        ),
        (7, serde_json::json!({})),
    ] {
        let cfg = config(&asm, &dir.path().join(format!("layer{layer}")), extra);
        run(&cfg).unwrap();
        let path = cfg.output.join(REPORT_FILE);
        let mut v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        v["features"]["layer"] = serde_json::json!(layer);
        write_config(&path, &v);
        paths.push(path);
    }
    let spec = dir.path().join("motion.json");
    write_config(
        &spec,
        &serde_json::json!({"subjects": [{"assembly": asm, "layers": paths}]}),
    );
    let m = commands::motion_cmd(&Globals {
        config: Some(spec.clone()),
        out: Some(dir.path().join("motion")),
        ..Globals::default()
    })
    .unwrap();
    let chosen = &m.scores[0];
    assert_eq!(chosen.layer, Some(7));
    assert_eq!(chosen.report.as_ref(), Some(&paths[1]));
    let best = ReportFile::load(&paths[1]).unwrap().report.mean_r();
    assert_eq!(chosen.score, best);
    assert!(best > ReportFile::load(&paths[0]).unwrap().report.mean_r());

    write_config(
        &spec,
        &serde_json::json!({"subjects": [{"assembly": asm, "score": 0.1, "layers": paths}]}),
    );
    let err = commands::motion_cmd(&Globals {
        config: Some(spec),
        out: Some(dir.path().join("motion2")),
        ..Globals::default()
    })
    .err()
    .unwrap();
    assert_eq!(err.exit_code(), 2);
}

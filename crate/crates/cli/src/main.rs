use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vem_cli::commands::{self, Globals};
use vem_cli::config::LogBackend;
use vem_cli::CliError;

#[derive(Parser)]
#[command(name = "vem", version, about = "Voxelwise encoding model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `runtime.threads`.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed override for folds or synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log backend override.
    #[arg(long, global = true, value_enum)]
    log: Option<LogBackend>,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw pieces and write an assembly directory.
    Assemble,
    /// Write per-run features at their native resolution.
    Extract,
    /// Write per-run features pooled to the TR grid.
    Downsample,
    /// Run the full pipeline and keep the fitted models.
    Fit,
    /// Run the pipeline; given a report.json, rerun it and compare scores.
    Evaluate,
    /// Score content-free control features under every folding scheme.
    AuditLeakage,
    /// Framewise displacement, exclusion and predictivity-vs-motion fit.
    Motion,
    /// Generate a synthetic assembly with known ground truth.
    Synth,
    /// Plot a set of finished reports.
    Report,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = Globals {
        config: cli.config,
        out: cli.out,
        threads: cli.threads,
        seed: cli.seed,
        log: cli.log,
    };
    match cli.command {
        Command::Assemble => {
            let out = commands::assemble_cmd(&g)?;
            println!("assembly written to {}", out.display());
        }
        Command::Extract => {
            let out = commands::extract_cmd(&g)?;
            println!("features written to {}", out.display());
        }
        Command::Downsample => {
            let out = commands::downsample_cmd(&g)?;
            println!("TR-level features written to {}", out.display());
        }
        Command::Fit => {
            let out = commands::fit_cmd(&g)?;
            print_scores(&out.report);
        }
        Command::Evaluate => {
            let (out, repro) = commands::evaluate_cmd(&g)?;
            print_scores(&out.report);
            if let Some(r) = repro {
                println!(
                    "rerun vs stored: mean |diff| {:.3e}, max |diff| {:.3e}, bitwise equal: {}",
                    r.mean_abs_diff, r.max_abs_diff, r.bitwise_equal
                );
            }
        }
        Command::AuditLeakage => {
            for r in commands::audit_cmd(&g)? {
                println!("ell={} d={}", r.ell, r.d);
                for (scheme, v) in &r.mean_r {
                    println!("  {scheme:<20} {v:.4}");
                }
            }
        }
        Command::Motion => {
            let m = commands::motion_cmd(&g)?;
            for s in &m.summaries {
                println!("{:<20} mean FD {:.4} mm", s.subject, s.mean_fd);
            }
            println!("excluded above {} mm: {:?}", m.threshold_mm, m.excluded);
            if let Some(f) = m.fit {
                println!(
                    "fit: y = {:.4} x^{:.4} + {:.4}  R2 {:.4}  rho {:.4}",
                    f.a, f.b, f.c, f.r_squared, f.spearman_rho
                );
            }
        }
        Command::Synth => {
            let out = commands::synth(&g)?;
            println!("synthetic assembly written to {}", out.display());
        }
        Command::Report => {
            for p in commands::report_cmd(&g)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn print_scores(r: &vem_cli::ReportFile) {
    println!("subject {}: mean r {:.4}", r.subject, r.report.mean_r());
    for (mask, v) in &r.report.roi_means {
        println!("  {mask:<20} {v:.4}");
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

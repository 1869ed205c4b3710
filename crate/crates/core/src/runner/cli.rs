//! Command-line interface.
//!
//! Subcommands:
//!   run       train/score one method and write its run directory
//!   report    aggregate run directories into the results table
//!   gradcheck finite-difference verification of every objective
//!   gen-data  materialize a synthetic benchmark as CSV files
//!
//! The environment variable `OODLAB_OUT_ROOT`, when set, is prepended to
//! relative `--out` paths. Seeds are never read from the environment.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::analysis::{embedding_analysis, write_analysis};
use super::config::{ExperimentConfig, Method};
use super::gradcheck::gradient_check_suite;
use super::report::{aggregate_reports, write_results_table, write_run_outputs};
use super::train::run_experiment;
use crate::data::{export_labeled_csv, export_unlabeled_csv, generate};
use crate::model::Checkpoint;
use crate::scoring::ScoreKind;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "oodlab",
    about = "Train and compare out-of-distribution detection methods on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment arm and write report, scores, curves, checkpoint.
    Run {
        /// TOML experiment config.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's method (e1, e2, e3, e4, e5a, e5b, e6).
        #[arg(long)]
        method: Option<String>,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Path to the e1 checkpoint (required by e4, e5a, e5b, e6).
        #[arg(long)]
        e1_checkpoint: Option<PathBuf>,
        /// Output directory for this run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every report.json under the output root into one table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every objective's gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        points: usize,
    },
    /// Generate the synthetic benchmark and write it as CSV files.
    GenData {
        /// Optional TOML config; only its [data] section is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_out(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        return path;
    }
    match std::env::var_os("OODLAB_OUT_ROOT") {
        Some(root) => Path::new(&root).join(path),
        None => path,
    }
}

/// Entry point used by the binary and by tests; returns the exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            method,
            seed,
            e1_checkpoint,
            out,
        } => run_command(&config, method, seed, e1_checkpoint, resolve_out(out)),
        Command::Report { out } => report_command(&resolve_out(out)),
        Command::Gradcheck { seed, points } => gradcheck_command(seed, points),
        Command::GenData { config, out } => gen_data_command(config.as_deref(), &resolve_out(out)),
    }
}

fn run_command(
    config_path: &Path,
    method: Option<String>,
    seed: Option<u64>,
    e1_checkpoint: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(m) = method {
        config.method = Method::parse(&m)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(path) = e1_checkpoint {
        config.e1_checkpoint = Some(path);
    }
    config.validate()?;

    let e1 = match (&config.method.needs_e1_checkpoint(), &config.e1_checkpoint) {
        (true, Some(path)) => Some(Checkpoint::load(path)?),
        (true, None) => {
            return Err(Error::Config(format!(
                "method {} requires --e1-checkpoint (or e1_checkpoint in the config)",
                config.method
            )))
        }
        (false, _) => None,
    };

    let data = generate(&config.data)?;
    let record = run_experiment(&config, &data, e1.as_ref())?;
    write_run_outputs(&out, &record)?;
    record.selected_checkpoint.save(&out.join("checkpoint.bin"))?;

    // The canonical embedding-space comparison: the baseline checkpoint
    // against the energy fine-tuned one, on the near OOD set.
    if config.method == Method::E5b {
        if let Some(e1) = &e1 {
            let analysis = embedding_analysis(
                "e1",
                &e1.params,
                ScoreKind::NegMaxSoftmax,
                "e5b",
                &record.selected_checkpoint.params,
                ScoreKind::FreeEnergy,
                &data,
                "near",
                config.knn_k,
                config.loss.temperature,
            )?;
            write_analysis(&out.join("analysis"), &analysis)?;
        }
    }

    println!(
        "{} seed {} done: balanced_accuracy {:.4}, outputs in {}",
        record.method,
        record.seed,
        record.report.balanced_accuracy,
        out.display()
    );
    for (name, m) in &record.report.ood {
        println!("  {name}: auroc {:.4}, fpr95 {:.4}", m.auroc, m.fpr95);
    }
    Ok(())
}

fn report_command(out: &Path) -> Result<()> {
    let table = aggregate_reports(out)?;
    write_results_table(out, &table)?;
    println!(
        "aggregated {} runs into {}",
        table.rows.len(),
        out.join("results_table.csv").display()
    );
    for row in &table.rows {
        print!(
            "  {} seed {}: bal_acc {:.4}",
            row.method, row.seed, row.balanced_accuracy
        );
        for (name, m) in &row.ood {
            print!(", {name} auroc {:.4}", m.auroc);
        }
        println!();
    }
    Ok(())
}

fn gradcheck_command(seed: u64, points: usize) -> Result<()> {
    let results = gradient_check_suite(seed, points)?;
    let mut failed = false;
    for case in &results {
        let status = if case.max_rel_error <= 1e-4 {
            "ok"
        } else {
            failed = true;
            "FAIL"
        };
        println!(
            "{:28} max_rel_error {:.3e} over {} points  {status}",
            case.name, case.max_rel_error, case.points
        );
    }
    if failed {
        Err(Error::InvalidArgument(
            "gradient check exceeded 1e-4 tolerance".into(),
        ))
    } else {
        Ok(())
    }
}

fn gen_data_command(config_path: Option<&Path>, out: &Path) -> Result<()> {
    let config = match config_path {
        Some(path) => ExperimentConfig::load(path)?.data,
        None => Default::default(),
    };
    let data = generate(&config)?;
    std::fs::create_dir_all(out)?;
    export_labeled_csv(&out.join("id_train.csv"), data.id_train())?;
    export_labeled_csv(&out.join("id_wild_pool.csv"), data.id_wild_pool())?;
    export_labeled_csv(&out.join("id_val.csv"), data.id_val())?;
    export_labeled_csv(&out.join("id_test.csv"), data.id_test())?;
    export_unlabeled_csv(&out.join("aux_ood_train.csv"), data.aux_ood_train())?;
    export_unlabeled_csv(&out.join("aux_ood_val.csv"), data.aux_ood_val())?;
    export_unlabeled_csv(&out.join("wild_train.csv"), data.wild_train())?;
    for (name, set) in data.test_ood_sets() {
        export_unlabeled_csv(&out.join(format!("ood_{name}.csv")), set)?;
    }
    println!("benchmark written to {}", out.display());
    Ok(())
}

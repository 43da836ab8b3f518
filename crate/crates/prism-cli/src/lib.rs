//! Command-line harness over the core library. Exit codes: 0 on success,
//! 1 on usage or validation failure, 2 on internal error. Every output
//! goes to a caller-specified path; fixed seeds make output files
//! byte-identical across repeated runs.

mod config;

pub use config::{parse_run_config, RunSpec};

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use prism_core::data::{
    generate_synthetic, parse_structures, write_structures_file, SyntheticKind,
};
use prism_core::graph::graph_to_json_line;
use prism_core::invariance::{
    check_cell_invariance, check_multiscale_exact_invariance, check_permutation,
    reports_to_csv, InvarianceReport,
};
use prism_core::lattice::CrystalStructure;
use prism_core::model::{
    checkpoint_from_json, checkpoint_to_json, ModelConfig, PrismModel, StaticGraphs,
};
use prism_core::train::{epoch_log_csv, evaluate, fusion_report, fusion_report_csv, train};

#[derive(Parser)]
#[command(
    name = "prism",
    version,
    about = "Periodic multigraph networks for crystals: graphs, training, invariance checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dump atomistic, cell and multiscale graphs as JSON lines.
    BuildGraphs {
        /// Input structures (JSON lines).
        #[arg(long)]
        input: PathBuf,
        /// Atomistic cutoff radius in Angstrom.
        #[arg(long = "rc")]
        rc: f64,
        /// Cell (superatom replica) cutoff radius in Angstrom.
        #[arg(long = "Rc")]
        big_rc: f64,
        /// Output path for the graph dump.
        #[arg(long)]
        out: PathBuf,
        /// Reject fractional coordinates outside [0, 1) instead of wrapping.
        #[arg(long)]
        strict: bool,
    },
    /// Generate a synthetic dataset with closed-form targets.
    GenerateData {
        /// One of: short-range, long-range, mixed.
        #[arg(long)]
        kind: String,
        /// Number of structures.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model as described by a run-config file.
    Train {
        /// Flat key = value config; see README for the key list.
        #[arg(long)]
        config: PathBuf,
        /// Record wall-clock seconds in the epoch log. Off by default so
        /// repeated runs produce byte-identical files.
        #[arg(long)]
        timings: bool,
    },
    /// Evaluate a checkpoint on a dataset and print the MAE.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the MAE to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run invariance checks over input structures and emit a CSV report.
    CheckInvariance {
        #[arg(long)]
        input: PathBuf,
        /// Random transforms / permutations per structure.
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tolerance for full forward-pass deviations.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Summarize fusion weights of one or more checkpoints as CSV.
    FusionReport {
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum CliError {
    Validation(String),
    Internal(String),
}

impl CliError {
    fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        CliError::Internal(e.to_string())
    }
}

/// Parses arguments and runs the selected subcommand, returning the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::BuildGraphs {
            input,
            rc,
            big_rc,
            out,
            strict,
        } => build_graphs(&input, rc, big_rc, &out, strict),
        Command::GenerateData { kind, n, seed, out } => generate_data(&kind, n, seed, &out),
        Command::Train { config, timings } => train_command(&config, timings),
        Command::Evaluate {
            checkpoint,
            data,
            out,
        } => evaluate_command(&checkpoint, &data, out.as_deref()),
        Command::CheckInvariance {
            input,
            trials,
            out,
            seed,
            tol,
        } => check_invariance_command(&input, trials, &out, seed, tol),
        Command::FusionReport { checkpoints, out } => fusion_report_command(&checkpoints, &out),
    }
}

fn load_structures(path: &Path, strict: bool) -> Result<Vec<CrystalStructure>, CliError> {
    let structures = parse_structures(path, strict)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    if structures.is_empty() {
        return Err(CliError::Validation(format!(
            "{}: no structures",
            path.display()
        )));
    }
    Ok(structures)
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(CliError::internal)?;
        }
    }
    fs::write(path, contents).map_err(CliError::internal)
}

fn build_graphs(
    input: &Path,
    rc: f64,
    big_rc: f64,
    out: &Path,
    strict: bool,
) -> Result<(), CliError> {
    if !(rc > 0.0) || big_rc <= rc {
        return Err(CliError::Validation(format!(
            "cutoffs must satisfy 0 < rc < Rc (got rc = {rc}, Rc = {big_rc})"
        )));
    }
    let structures = load_structures(input, strict)?;
    let mut lines = String::new();
    for s in &structures {
        let config = ModelConfig {
            atomistic_cutoff: rc,
            cell_cutoff: big_rc,
            ..ModelConfig::default()
        };
        let graphs = StaticGraphs::build(s, &config).map_err(CliError::validation)?;
        if graphs.atomistic.is_empty() {
            eprintln!("warning: {}: atomistic graph has no edges at rc = {rc}", s.id);
        }
        if graphs.cell.is_empty() {
            eprintln!("warning: {}: cell graph has no edges at Rc = {big_rc}", s.id);
        }
        lines.push_str(&graph_to_json_line(&s.id, &graphs.atomistic));
        lines.push('\n');
        lines.push_str(&graph_to_json_line(&s.id, &graphs.cell));
        lines.push('\n');
        lines.push_str(&graph_to_json_line(&s.id, &graphs.multiscale));
        lines.push('\n');
    }
    write_file(out, &lines)
}

fn generate_data(kind: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind = SyntheticKind::parse(kind).ok_or_else(|| {
        CliError::Validation(format!(
            "unknown kind '{kind}' (expected short-range, long-range or mixed)"
        ))
    })?;
    if n == 0 {
        return Err(CliError::Validation("n must be >= 1".into()));
    }
    let structures = generate_synthetic(kind, n, seed);
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(CliError::internal)?;
        }
    }
    write_structures_file(out, &structures).map_err(CliError::internal)?;
    println!("wrote {} {} structures to {}", n, kind.as_str(), out.display());
    Ok(())
}

fn train_command(config_path: &Path, timings: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(config_path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config_path.display())))?;
    let spec = parse_run_config(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", config_path.display())))?;
    let dataset = load_structures(&spec.data, false)?;
    let outcome = train(&dataset, &spec.train).map_err(CliError::internal)?;
    fs::create_dir_all(&spec.out_dir).map_err(CliError::internal)?;
    let checkpoint = checkpoint_to_json(&outcome.model.config, &outcome.model.params);
    write_file(&spec.out_dir.join("checkpoint.json"), &checkpoint)?;
    write_file(
        &spec.out_dir.join("epochs.csv"),
        &epoch_log_csv(&outcome.log, timings),
    )?;
    let last = outcome.log.last().expect("epochs >= 1");
    println!(
        "trained {} epochs on {} structures; final val MAE {}",
        last.epoch,
        outcome.train_ids.len(),
        last.val_mae
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<PrismModel, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    let (config, params) = checkpoint_from_json(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    PrismModel::from_parts(config, params).map_err(CliError::validation)
}

fn evaluate_command(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let dataset = load_structures(data, false)?;
    let score = evaluate(&model, &dataset).map_err(CliError::internal)?;
    println!("mae {score}");
    if let Some(path) = out {
        write_file(path, &format!("mae\n{score}\n"))?;
    }
    Ok(())
}

fn check_invariance_command(
    input: &Path,
    trials: usize,
    out: &Path,
    seed: u64,
    tol: f64,
) -> Result<(), CliError> {
    if trials == 0 {
        return Err(CliError::Validation("trials must be >= 1".into()));
    }
    let structures = load_structures(input, false)?;
    // A compact model is enough to exercise every pathway.
    let model = PrismModel::new(ModelConfig {
        dim: 8,
        layers: 2,
        rbf_size: 8,
        seed,
        ..ModelConfig::default()
    })
    .map_err(CliError::validation)?;

    let mut merged: Vec<InvarianceReport> = Vec::new();
    let mut fold = |report: InvarianceReport| {
        match merged.iter_mut().find(|r| r.check == report.check) {
            Some(existing) => {
                existing.trials += report.trials;
                if report.max_deviation > existing.max_deviation {
                    existing.max_deviation = report.max_deviation;
                }
                existing.pass = existing.pass && report.pass;
            }
            None => merged.push(report),
        }
    };
    for (k, s) in structures.iter().enumerate() {
        let structure_seed = seed.wrapping_add((k as u64) * 1000);
        for r in check_cell_invariance(&model, s, trials, tol, structure_seed)
            .map_err(CliError::internal)?
        {
            fold(r);
        }
        fold(
            check_multiscale_exact_invariance(&model, s, trials, structure_seed)
                .map_err(CliError::internal)?,
        );
        fold(
            check_permutation(&model, s, trials, 1e-10, structure_seed)
                .map_err(CliError::internal)?,
        );
    }
    merged.sort_by(|a, b| a.check.cmp(&b.check));
    write_file(out, &reports_to_csv(&merged))?;
    let all_pass = merged.iter().all(|r| r.pass);
    for r in &merged {
        println!(
            "{}: {} (max deviation {}, tolerance {})",
            r.check,
            if r.pass { "pass" } else { "FAIL" },
            r.max_deviation,
            r.tolerance
        );
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Validation("invariance checks failed".into()))
    }
}

fn fusion_report_command(checkpoints: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let models: Vec<PrismModel> = checkpoints
        .iter()
        .map(|p| load_model(p))
        .collect::<Result<_, _>>()?;
    let params: Vec<_> = models.iter().map(|m| &m.params).collect();
    let report = fusion_report(&params).map_err(CliError::validation)?;
    write_file(out, &fusion_report_csv(&report))?;
    println!(
        "fusion report over {} checkpoints, {} layers",
        models.len(),
        report.mean.len()
    );
    Ok(())
}

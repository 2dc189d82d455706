//! `axnas`: search, train, energy accounting and multiplier analysis.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use axnas::darts::{read_genotype, write_genotype, GenotypeFile, Provenance};
use axnas::experiment::{
    build_network, energy_report, exec_mode, load_dataset, resolve_multiplier, run_eval_with,
    run_search_with, summarize_counts, unix_now, write_log_csv, EpochLog, NetworkConfig, RunConfig,
    RunManifest, TrainReport, DEFAULT_FP32_FACTOR, PRESETS,
};
use axnas::mult::{
    build_builtin_multiplier, compute_error_metrics, save_binary, BuiltinKind, MultiplierSpec,
};
use axnas::tensor::save_checkpoint;
use axnas::Error;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "axnas",
    version,
    about = "Architecture search with emulated approximate multipliers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search a cell genotype on the supernet.
    Search(SearchArgs),
    /// Train the network of a genotype from scratch and report test accuracy.
    Train(TrainArgs),
    /// Count the operations of a genotype's network and price them.
    Energy(EnergyArgs),
    /// Print the error metrics and energy of a multiplier.
    MultAnalyze(AnalyzeArgs),
}

#[derive(Args)]
struct MultiplierArgs {
    /// `fp32`, a builtin (`exact`, `trunc_1`..`trunc_4`) or a table file.
    #[arg(long)]
    multiplier: Option<String>,
    /// Energy per multiplication for the multiplier, overriding any known value.
    #[arg(long)]
    energy: Option<f64>,
}

#[derive(Args)]
struct SearchArgs {
    /// Configuration file (TOML or JSON) or preset name.
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mult: MultiplierArgs,
    /// Output genotype file; the log and manifest are written beside it.
    #[arg(long, default_value = "genotype.json")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct TrainArgs {
    genotype: PathBuf,
    /// Configuration file (TOML or JSON) or preset name.
    config: String,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    mult: MultiplierArgs,
    /// Output directory for the checkpoint, report and log.
    #[arg(long, default_value = "train-out")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EnergyArgs {
    genotype: PathBuf,
    /// Configuration file (TOML or JSON) or preset name.
    config: String,
    #[command(flatten)]
    mult: MultiplierArgs,
    /// Energy of a 32-bit float operation relative to an exact 8-bit multiplication.
    #[arg(long, default_value_t = DEFAULT_FP32_FACTOR)]
    fp32_factor: f64,
    /// Also write the report to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Builtin multiplier name or table file.
    multiplier: String,
    #[arg(long)]
    energy: Option<f64>,
    /// Write the product table in binary form to this file.
    #[arg(long)]
    table_dump: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Config(_) | Error::Json(_) | Error::Genotype(_) => 2,
            Error::Data(_) => 3,
            Error::Multiplier(_) | Error::MultiplierFile { .. } => 4,
            _ => 1,
        };
        Failure { code, error }
    }
}

/// Overrides the error class of a failed stage.
fn stage<T>(code: u8, r: Result<T, Error>) -> Result<T, Failure> {
    r.map_err(|error| Failure { code, error })
}

fn load_config(arg: &str) -> Result<RunConfig, Failure> {
    let path = Path::new(arg);
    if !path.exists() && PRESETS.contains(&arg) {
        return stage(2, RunConfig::preset(arg));
    }
    stage(2, RunConfig::load(path))
}

fn multiplier(spec: &str, energy: Option<f64>) -> Result<Option<MultiplierSpec>, Failure> {
    stage(4, resolve_multiplier(spec, energy))
}

fn progress(quiet: bool, stage: &'static str) -> impl FnMut(&EpochLog) {
    move |r: &EpochLog| {
        if !quiet {
            eprintln!(
                "{stage} epoch {:>3}  loss {:.4}  val loss {:.4}  val acc {:.2}%  lr {:.2e}  {:.1}s",
                r.epoch,
                r.train_loss,
                r.val_loss,
                100.0 * r.val_acc,
                r.lr,
                r.seconds
            );
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: 1,
        error: Error::Io {
            path: path.to_path_buf(),
            source: e,
        },
    }
}

fn create_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
        }
        _ => Ok(()),
    }
}

fn cmd_search(a: SearchArgs) -> Result<(), Failure> {
    let started = unix_now();
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.search.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.search.epochs = e;
        cfg.search.warmup_epochs = cfg.search.warmup_epochs.min(e);
    }
    if let Some(m) = a.mult.multiplier {
        cfg.search.multiplier = m;
    }
    stage(2, cfg.validate())?;
    let m = multiplier(&cfg.search.multiplier, a.mult.energy)?;
    let data = stage(3, load_dataset(&cfg.data))?;
    let outcome = run_search_with(
        &cfg.search,
        &exec_mode(m.clone()),
        &data.train,
        progress(a.quiet, "search"),
    )?;
    let hash = cfg.hash();
    let provenance = Provenance {
        multiplier: cfg.search.multiplier.clone(),
        multiplier_checksum: m
            .as_ref()
            .map_or_else(|| "none".to_string(), MultiplierSpec::checksum),
        seed: cfg.search.seed,
        config_hash: hash.clone(),
    };
    create_parent(&a.out)?;
    write_genotype(
        &a.out,
        &GenotypeFile::new(outcome.genotype, Some(provenance)),
    )?;
    write_log_csv(with_suffix(&a.out, ".log.csv"), &outcome.log)?;
    RunManifest::new("search", &hash, cfg.search.seed, m.as_ref(), started).write_for(&a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let started = unix_now();
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.eval.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.eval.epochs = e;
    }
    if let Some(m) = a.mult.multiplier {
        cfg.eval.multiplier = m;
    }
    stage(2, cfg.validate())?;
    let genotype = stage(2, read_genotype(&a.genotype))?.genotype();
    let m = multiplier(&cfg.eval.multiplier, a.mult.energy)?;
    let data = stage(3, load_dataset(&cfg.data))?;
    let outcome = run_eval_with(
        &genotype,
        &cfg.eval,
        &exec_mode(m.clone()),
        &data,
        progress(a.quiet, "train"),
    )?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let hash = cfg.hash();
    let manifest = RunManifest::new("train", &hash, cfg.eval.seed, m.as_ref(), started);
    let ckpt = a.out.join("checkpoint.axck");
    let embedded = json!({
        "command": "train",
        "config_hash": hash,
        "seed": cfg.eval.seed,
        "multiplier": manifest.multiplier,
        "multiplier_checksum": manifest.multiplier_checksum,
    });
    save_checkpoint(&ckpt, &outcome.network.store, embedded)?;
    manifest.write_for(&ckpt)?;
    let report_path = a.out.join("report.json");
    let report = TrainReport::new(&outcome, &cfg.eval, &hash);
    fs::write(&report_path, report.to_json()).map_err(|e| io_err(&report_path, e))?;
    manifest.write_for(&report_path)?;
    write_log_csv(a.out.join("log.csv"), &outcome.log)?;
    println!("test accuracy {:.2}%", 100.0 * outcome.test_acc);
    Ok(())
}

fn cmd_energy(a: EnergyArgs) -> Result<(), Failure> {
    let started = unix_now();
    let cfg = load_config(&a.config)?;
    let genotype = stage(2, read_genotype(&a.genotype))?.genotype();
    let spec = a
        .mult
        .multiplier
        .unwrap_or_else(|| cfg.eval.multiplier.clone());
    let m = match multiplier(&spec, a.mult.energy)? {
        Some(m) => m,
        None => {
            return Err(Failure {
                code: 4,
                error: Error::Multiplier(
                    "energy accounting needs an 8-bit multiplier, not `fp32`".into(),
                ),
            })
        }
    };
    let net_cfg = NetworkConfig {
        cells: cfg.eval.cells,
        init_channels: cfg.eval.init_channels,
        num_classes: cfg.data.num_classes,
        in_channels: cfg.data.channels,
        image_size: cfg.data.image_size,
        auxiliary: false,
        approximate_preprocessing: cfg.eval.approximate_preprocessing,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval.seed);
    let mut net = build_network(&genotype, &net_cfg, &mut rng)?;
    let (approx, exact) = summarize_counts(&net.count_macs()?);
    let exact8 = build_builtin_multiplier(BuiltinKind::Exact);
    let report = energy_report(approx, exact, &m, &exact8, a.fp32_factor)?;
    let body = json!({
        "multiplier": m.name(),
        "energy_per_op": m.energy_per_op(),
        "fp32_factor": a.fp32_factor,
        "report": report,
    });
    let text = serde_json::to_string_pretty(&body).expect("report serializes") + "\n";
    if let Some(out) = &a.out {
        create_parent(out)?;
        fs::write(out, &text).map_err(|e| io_err(out, e))?;
        RunManifest::new("energy", &cfg.hash(), cfg.eval.seed, Some(&m), started).write_for(out)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_mult_analyze(a: AnalyzeArgs) -> Result<(), Failure> {
    let m = multiplier(&a.multiplier, a.energy)?.ok_or_else(|| Failure {
        code: 4,
        error: Error::Multiplier("`fp32` is not a lookup-table multiplier".into()),
    })?;
    let metrics = compute_error_metrics(&m);
    println!("multiplier  {}", m.name());
    println!("MRE (%)     {}", metrics.mre_pct);
    println!("EP (%)      {}", metrics.ep_pct);
    println!("MAE (%)     {}", metrics.mae_pct);
    println!("WCE (%)     {}", metrics.wce_pct);
    println!("energy      {}", m.energy_per_op());
    println!("checksum    {}", m.checksum());
    if let Some(path) = &a.table_dump {
        create_parent(path)?;
        save_binary(&m, path)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Search(a) => cmd_search(a),
        Command::Train(a) => cmd_train(a),
        Command::Energy(a) => cmd_energy(a),
        Command::MultAnalyze(a) => cmd_mult_analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("axnas: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

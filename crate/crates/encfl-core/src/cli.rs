//! Command-line driver for the experiment pipeline.
//!
//! Subcommands: `run` executes one configured experiment end to end,
//! `compare` repeats it for every configured mode under shared seeds
//! and tabulates the accuracy gaps, `verify` executes the named
//! invariant suite, `plot-data` flattens round logs into one CSV for
//! plotting, and `export` materializes the configured dataset.
//!
//! Every failure path maps to a diagnostic string and one of three
//! documented exit codes: 2 for configuration problems, 3 for runtime
//! aborts, 4 for invariant failures. The only environment input is
//! `ENCFL_OUT`, an output-directory override that ranks below the
//! `--out` flag and above the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ckks::params::Profile;
use crate::ckks::refresh::derive_seed;
use crate::config::{
    CipherConfig, ConfigError, DatasetConfig, ExperimentConfig, Offload,
};
use crate::data::{
    load_csv, rebalance, scale_and_split, shard_for_vus, synth_generate,
    write_csv, DatasetSplit, Sample, SchemaConfig, SynthSpec, CLASS_COUNT,
    CLASS_NAMES,
};
use crate::fl::{classify, pre_learning, round_log_line, timing_log_line, Mode};
use crate::metrics::{
    comparison_csv, comparison_table, confusion_csv, summarize,
    ConfusionMatrix, MetricsSummary, RunMetrics,
};
use crate::model_io::{
    encode_enc_model, encode_plain_model, manifest_text, CheckpointKind,
};
use crate::verify;

/// A failed CLI invocation: the diagnostic plus its exit code class.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or usage; exit 2.
    Config(String),
    /// The pipeline started and failed; exit 3.
    Runtime(String),
    /// One or more invariant checks failed; exit 4.
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Verification(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m)
            | CliError::Runtime(m)
            | CliError::Verification(m) => f.write_str(m),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "encfl",
    version,
    about = "Federated intrusion-detection experiments under homomorphic encryption"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one experiment from a config file and write its artifacts.
    Run(RunArgs),
    /// Run every configured mode under shared seeds and tabulate gaps.
    Compare(CompareArgs),
    /// Execute the named invariant suite and report each check.
    Verify(VerifyArgs),
    /// Flatten existing round logs into one convergence CSV.
    PlotData(PlotArgs),
    /// Materialize the configured dataset as CSV with a summary.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides ENCFL_OUT and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the config seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Replace the cipher profile (toy, test, desk, secure-demo).
    #[arg(long)]
    pub profile: Option<String>,
    /// Replace the federation mode (cfl, n-encfl, encfl).
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides ENCFL_OUT and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the config seed for every mode.
    #[arg(long)]
    pub seed_override: Option<u64>,
    /// Replace the cipher profile (toy, test, desk, secure-demo).
    #[arg(long)]
    pub profile: Option<String>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Cipher profile to verify at (default desk).
    #[arg(long)]
    pub profile: Option<String>,
    /// Base seed for the suite (default 7).
    #[arg(long)]
    pub seed_override: Option<u64>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Experiment config file (TOML); names the output directory.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides ENCFL_OUT and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Experiment config file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides ENCFL_OUT and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace the config seed.
    #[arg(long)]
    pub seed_override: Option<u64>,
}

/// Route one parsed invocation; the binary maps Err to its exit code.
pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Verify(args) => cmd_verify(args),
        Command::PlotData(args) => cmd_plot_data(args),
        Command::Export(args) => cmd_export(args),
    }
}

fn parse_profile(s: &str) -> Result<Profile, CliError> {
    Profile::parse(s).ok_or_else(|| {
        CliError::Config(format!(
            "unknown profile {s:?}, expected toy, test, desk or secure-demo"
        ))
    })
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    Mode::parse(s).ok_or_else(|| {
        CliError::Config(format!(
            "unknown mode {s:?}, expected cfl, n-encfl or encfl"
        ))
    })
}

struct Experiment {
    cfg: ExperimentConfig,
    base_dir: PathBuf,
    out_root: PathBuf,
}

/// Load the config and settle the output root: the `--out` flag beats
/// the `ENCFL_OUT` environment variable beats the config file.
fn load_experiment(
    config_path: &Path,
    out_flag: &Option<PathBuf>,
) -> Result<Experiment, CliError> {
    let (cfg, base_dir) = ExperimentConfig::load(config_path)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let out_root = match (out_flag, std::env::var_os("ENCFL_OUT")) {
        (Some(dir), _) => dir.clone(),
        (None, Some(dir)) => PathBuf::from(dir),
        (None, None) => ExperimentConfig::resolve(&base_dir, &cfg.output_dir),
    };
    Ok(Experiment { cfg, base_dir, out_root })
}

fn validated(cfg: &ExperimentConfig, base_dir: &Path) -> Result<(), CliError> {
    let problems = cfg.validate(base_dir);
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(ConfigError::Invalid(problems).to_string()))
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| {
        CliError::Runtime(format!("cannot write {}: {e}", path.display()))
    })
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::Runtime(format!(
            "cannot create directory {}: {e}",
            path.display()
        ))
    })
}

fn train_fraction(cfg: &ExperimentConfig) -> f64 {
    match &cfg.dataset {
        DatasetConfig::Synthetic { train_fraction, .. } => *train_fraction,
        DatasetConfig::Csv { train_fraction, .. } => *train_fraction,
    }
}

/// Build the raw (unscaled) sample set the config describes, plus a
/// one-line provenance description for summaries.
fn build_samples(
    cfg: &ExperimentConfig,
    base_dir: &Path,
) -> Result<(Vec<Sample>, String), CliError> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            scale_divisor,
            feature_count,
            separation,
            noise,
            ..
        } => {
            let counts = crate::data::scaled_reference_counts(*scale_divisor);
            let spec = SynthSpec {
                feature_count: *feature_count,
                separation: *separation,
                noise: *noise,
            };
            let samples =
                synth_generate(&spec, &counts, derive_seed(cfg.seed, b"dataset"));
            let desc = format!(
                "synthetic: {} samples, {} features, class counts {:?}",
                samples.len(),
                feature_count,
                counts
            );
            Ok((samples, desc))
        }
        DatasetConfig::Csv { path, schema, rebalance: balance, .. } => {
            let data_path = ExperimentConfig::resolve(base_dir, path);
            if !data_path.is_file() {
                return Err(CliError::Config(format!(
                    "dataset file not found: {}",
                    data_path.display()
                )));
            }
            let schema_path = ExperimentConfig::resolve(base_dir, schema);
            let schema = SchemaConfig::load(&schema_path).map_err(|e| {
                CliError::Config(format!(
                    "cannot load schema {}: {e}",
                    schema_path.display()
                ))
            })?;
            let (mut samples, load) =
                load_csv(&data_path, &schema).map_err(|e| {
                    CliError::Runtime(format!(
                        "cannot load dataset {}: {e}",
                        data_path.display()
                    ))
                })?;
            let mut desc = format!(
                "csv {}: {} of {} rows parsed ({} bad numerics, {} unknown labels)",
                data_path.display(),
                load.parsed,
                load.rows,
                load.bad_numeric,
                load.unknown_label
            );
            if *balance {
                let mut counts = [0usize; CLASS_COUNT];
                for s in &samples {
                    counts[s.label] += 1;
                }
                if let Some(missing) =
                    counts.iter().position(|&c| c == 0)
                {
                    return Err(CliError::Runtime(format!(
                        "dataset has no samples for class {}",
                        CLASS_NAMES[missing]
                    )));
                }
                let floor = *counts.iter().min().expect("six classes");
                let targets = [floor; CLASS_COUNT];
                samples = rebalance(
                    &samples,
                    &targets,
                    derive_seed(cfg.seed, b"rebalance"),
                )
                .map_err(|e| {
                    CliError::Runtime(format!("cannot rebalance dataset: {e}"))
                })?;
                desc.push_str(&format!(
                    "; rebalanced to {floor} samples per class"
                ));
            }
            Ok((samples, desc))
        }
    }
}

fn prepared_split(
    cfg: &ExperimentConfig,
    base_dir: &Path,
) -> Result<DatasetSplit, CliError> {
    let (samples, _) = build_samples(cfg, base_dir)?;
    scale_and_split(&samples, train_fraction(cfg), derive_seed(cfg.seed, b"split"))
        .map_err(|e| CliError::Runtime(format!("cannot split dataset: {e}")))
}

/// Everything one completed mode run leaves behind, for reporting.
struct Executed {
    mode: Mode,
    offload_mean: f64,
    rounds: usize,
    converged_at: Option<u64>,
    summary: MetricsSummary,
    cm: ConfusionMatrix,
    dir: PathBuf,
}

/// Run one mode end to end and write its artifact directory.
fn execute_mode(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_root: &Path,
) -> Result<Executed, CliError> {
    let mode = cfg.mode;
    let split = prepared_split(cfg, base_dir)?;
    let fractions = cfg.fractions().map_err(CliError::Config)?;
    let shards =
        shard_for_vus(&split.train, &fractions, derive_seed(cfg.seed, b"shard"))
            .map_err(|e| {
                CliError::Runtime(format!("cannot shard dataset: {e}"))
            })?;
    let width = cfg.input_width(base_dir).map_err(CliError::Config)?;
    let sys_cfg = cfg.system_config(width);
    let mut sys = pre_learning(sys_cfg, &fractions, shards, split.test.clone())
        .map_err(|e| {
            CliError::Runtime(format!("{} setup failed: {e}", mode.name()))
        })?;
    let outcome = sys.run_protocol();

    let dir = out_root.join(mode.token());
    ensure_dir(&dir)?;

    let mut rounds_log = String::new();
    let mut timing_log = String::new();
    for r in &outcome.records {
        rounds_log.push_str(&round_log_line(r));
        rounds_log.push('\n');
        timing_log.push_str(&timing_log_line(r));
        timing_log.push('\n');
    }
    write_file(&dir.join("rounds.jsonl"), rounds_log.as_bytes())?;
    write_file(&dir.join("timings.jsonl"), timing_log.as_bytes())?;

    let specs = cfg.layer_specs(width);
    let converged_text = outcome
        .converged_at
        .map(|t| t.to_string())
        .unwrap_or_else(|| "none".into());
    let plain_bytes = encode_plain_model(&outcome.final_model);
    write_file(&dir.join("final_model.bin"), &plain_bytes)?;
    let extra = vec![
        ("mode".to_string(), mode.name().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("rounds".to_string(), outcome.records.len().to_string()),
        ("converged_round".to_string(), converged_text.clone()),
    ];
    write_file(
        &dir.join("final_model.manifest.txt"),
        manifest_text(&plain_bytes, &specs, CheckpointKind::Plain, &extra)
            .as_bytes(),
    )?;
    if mode == Mode::EncFl {
        if let (Some(em), Some(params)) = (&sys.server.enc_global, &sys.params)
        {
            let enc_bytes = encode_enc_model(em, params);
            write_file(&dir.join("final_model_enc.bin"), &enc_bytes)?;
            write_file(
                &dir.join("final_model_enc.manifest.txt"),
                manifest_text(
                    &enc_bytes,
                    &specs,
                    CheckpointKind::Encrypted,
                    &extra,
                )
                .as_bytes(),
            )?;
        }
    }

    let mut cm = ConfusionMatrix::new(CLASS_COUNT);
    for s in &split.test {
        let predicted =
            classify(&outcome.final_model, &s.features).map_err(|e| {
                CliError::Runtime(format!("cannot score test split: {e}"))
            })?;
        cm.accumulate(s.label, predicted).map_err(|e| {
            CliError::Runtime(format!("cannot score test split: {e}"))
        })?;
    }
    let summary = summarize(&cm).map_err(|e| {
        CliError::Runtime(format!("cannot summarize test metrics: {e}"))
    })?;
    write_file(&dir.join("confusion.csv"), confusion_csv(&cm).as_bytes())?;
    let offload_mean =
        fractions.iter().sum::<f64>() / fractions.len().max(1) as f64;
    let run_metrics = RunMetrics {
        mode: mode.name().to_string(),
        offload: offload_mean,
        summary: summary.clone(),
        cm: cm.clone(),
    };
    write_file(
        &dir.join("metrics.csv"),
        comparison_csv(std::slice::from_ref(&run_metrics)).as_bytes(),
    )?;

    let report = serde_json::json!({
        "mode": mode.name(),
        "seed": cfg.seed,
        "profile": cfg.cipher.as_ref().map(|c| c.profile.name()),
        "rounds": outcome.records.len(),
        "converged_at": outcome.converged_at,
        "paper_accuracy": summary.paper_accuracy,
        "micro_accuracy": summary.micro_accuracy,
        "macro_precision": summary.macro_precision,
        "macro_recall": summary.macro_recall,
        "message_bytes": sys.bus.total_bytes(),
        "refresh_calls": outcome.refresh.calls,
        "refresh_request_bytes": outcome.refresh.request_bytes,
        "refresh_response_bytes": outcome.refresh.response_bytes,
        "violations": outcome.violations,
        "aborted": outcome.aborted,
    });
    write_file(
        &dir.join("summary.json"),
        format!("{report:#}\n").as_bytes(),
    )?;

    if let Some(why) = &outcome.aborted {
        return Err(CliError::Runtime(format!(
            "{} run aborted: {why} (partial logs under {})",
            mode.name(),
            dir.display()
        )));
    }
    if !outcome.violations.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} run violated the privacy scan: {} (logs under {})",
            mode.name(),
            outcome.violations.join("; "),
            dir.display()
        )));
    }

    Ok(Executed {
        mode,
        offload_mean,
        rounds: outcome.records.len(),
        converged_at: outcome.converged_at,
        summary,
        cm,
        dir,
    })
}

/// Validate and execute one configured experiment, returning the same
/// summary document the artifact directory receives. Embedders (the
/// Python bindings among them) call this instead of the subcommand.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    base_dir: &Path,
    out_root: &Path,
) -> Result<serde_json::Value, CliError> {
    validated(cfg, base_dir)?;
    let run = execute_mode(cfg, base_dir, out_root)?;
    Ok(serde_json::json!({
        "mode": run.mode.name(),
        "rounds": run.rounds,
        "converged_at": run.converged_at,
        "paper_accuracy": run.summary.paper_accuracy,
        "micro_accuracy": run.summary.micro_accuracy,
        "macro_precision": run.summary.macro_precision,
        "macro_recall": run.summary.macro_recall,
        "artifacts_dir": run.dir.to_string_lossy(),
    }))
}

fn print_executed(run: &Executed) {
    let converged = run
        .converged_at
        .map(|t| format!("converged at round {t}"))
        .unwrap_or_else(|| "no convergence within the round budget".into());
    println!(
        "{}: {} rounds, {}; accuracy {:.2}%, precision {:.2}%, recall {:.2}%",
        run.mode.name(),
        run.rounds,
        converged,
        100.0 * run.summary.paper_accuracy,
        100.0 * run.summary.macro_precision,
        100.0 * run.summary.macro_recall,
    );
    println!("artifacts: {}", run.dir.display());
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let Experiment { mut cfg, base_dir, out_root } =
        load_experiment(&args.config, &args.out)?;
    if let Some(mode) = &args.mode {
        cfg.mode = parse_mode(mode)?;
    }
    if let Some(profile) = &args.profile {
        cfg.cipher = Some(CipherConfig { profile: parse_profile(profile)? });
    }
    if let Some(seed) = args.seed_override {
        cfg.seed = seed;
    }
    validated(&cfg, &base_dir)?;
    let run = execute_mode(&cfg, &base_dir, &out_root)?;
    print_executed(&run);
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let Experiment { mut cfg, base_dir, out_root } =
        load_experiment(&args.config, &args.out)?;
    if let Some(profile) = &args.profile {
        cfg.cipher = Some(CipherConfig { profile: parse_profile(profile)? });
    }
    if let Some(seed) = args.seed_override {
        cfg.seed = seed;
    }
    let modes = cfg.compare.clone().unwrap_or_default().modes;
    if modes.len() < 2 {
        return Err(CliError::Config(format!(
            "comparison needs at least two modes, got {:?}; list them under \
             [compare] modes, or run one mode with `encfl run --config {} \
             --mode <cfl|n-encfl|encfl>`",
            modes.iter().map(|m| m.token()).collect::<Vec<_>>(),
            args.config.display()
        )));
    }

    // One config clone per mode; CFL keeps all data on the VUs, so its
    // clone drops the offload the encrypted modes use.
    let mut mode_cfgs = Vec::new();
    let mut problems = Vec::new();
    for &mode in &modes {
        let mut mc = cfg.clone();
        mc.mode = mode;
        if mode == Mode::Cfl {
            mc.federation.offload = Offload::Uniform(0.0);
        }
        for p in mc.validate(&base_dir) {
            problems.push(format!("{}: {p}", mode.name()));
        }
        mode_cfgs.push(mc);
    }
    if !problems.is_empty() {
        return Err(CliError::Config(
            ConfigError::Invalid(problems).to_string(),
        ));
    }

    let mut runs = Vec::new();
    for mc in &mode_cfgs {
        println!("running {} with seed {}...", mc.mode.name(), mc.seed);
        let run = execute_mode(mc, &base_dir, &out_root)?;
        print_executed(&run);
        runs.push(run);
    }

    let rows: Vec<RunMetrics> = runs
        .iter()
        .map(|r| RunMetrics {
            mode: r.mode.name().to_string(),
            offload: r.offload_mean,
            summary: r.summary.clone(),
            cm: r.cm.clone(),
        })
        .collect();
    write_file(
        &out_root.join("comparison.csv"),
        comparison_csv(&rows).as_bytes(),
    )?;
    let table = comparison_table(&rows);
    write_file(&out_root.join("comparison.txt"), table.as_bytes())?;
    println!("\n{table}");

    let enc = runs.iter().find(|r| r.mode == Mode::EncFl);
    let plain = runs.iter().find(|r| r.mode == Mode::NEncFl);
    if let (Some(e), Some(p)) = (enc, plain) {
        println!(
            "accuracy gap, EncFL vs N-EncFL: {:+.3} percentage points",
            100.0 * (e.summary.paper_accuracy - p.summary.paper_accuracy)
        );
    }
    println!("comparison artifacts: {}", out_root.display());
    Ok(())
}

fn cmd_verify(args: VerifyArgs) -> Result<(), CliError> {
    let profile = match &args.profile {
        Some(s) => parse_profile(s)?,
        None => Profile::Desk,
    };
    let seed = args.seed_override.unwrap_or(7);
    let results = verify::run_all(profile, seed);
    for r in &results {
        println!("{}", verify::report_line(r));
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!(
        "{} of {} checks passed on the {} profile (seed {seed})",
        results.len() - failed,
        results.len(),
        profile.name()
    );
    if failed > 0 {
        return Err(CliError::Verification(format!(
            "{failed} of {} invariant checks failed",
            results.len()
        )));
    }
    Ok(())
}

fn cmd_plot_data(args: PlotArgs) -> Result<(), CliError> {
    let Experiment { out_root, .. } =
        load_experiment(&args.config, &args.out)?;
    let mut csv = String::from(
        "mode,round,val_accuracy,mean_vu_loss,server_loss,message_bytes,cumulative_bytes\n",
    );
    let mut rows = 0usize;
    for mode in Mode::all() {
        let path = out_root.join(mode.token()).join("rounds.jsonl");
        let Ok(text) = fs::read_to_string(&path) else { continue };
        let mut cumulative = 0u64;
        for (i, line) in text.lines().enumerate() {
            let record: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| {
                    CliError::Runtime(format!(
                        "cannot parse {} line {}: {e}",
                        path.display(),
                        i + 1
                    ))
                })?;
            let round = record["round"].as_u64().unwrap_or(0);
            let acc = record["val_accuracy"]
                .as_f64()
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            let losses: Vec<f64> = record["vu_losses"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_f64()).collect())
                .unwrap_or_default();
            let mean_loss = if losses.is_empty() {
                String::new()
            } else {
                format!(
                    "{:.6}",
                    losses.iter().sum::<f64>() / losses.len() as f64
                )
            };
            let server_loss = record["server_loss"]
                .as_f64()
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            let bytes = record["message_bytes"].as_u64().unwrap_or(0);
            cumulative += bytes;
            csv.push_str(&format!(
                "{},{round},{acc},{mean_loss},{server_loss},{bytes},{cumulative}\n",
                mode.token()
            ));
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(CliError::Config(format!(
            "no round logs under {}; run `encfl run --config {}` first",
            out_root.display(),
            args.config.display()
        )));
    }
    let path = out_root.join("convergence.csv");
    write_file(&path, csv.as_bytes())?;
    println!("wrote {} ({rows} rows)", path.display());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<(), CliError> {
    let Experiment { mut cfg, base_dir, out_root } =
        load_experiment(&args.config, &args.out)?;
    if let Some(seed) = args.seed_override {
        cfg.seed = seed;
    }
    let (samples, desc) = build_samples(&cfg, &base_dir)?;
    ensure_dir(&out_root)?;
    let csv_path = out_root.join("dataset.csv");
    write_csv(&samples, &csv_path).map_err(|e| {
        CliError::Runtime(format!(
            "cannot write {}: {e}",
            csv_path.display()
        ))
    })?;

    let mut counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(CLASS_NAMES[s.label]).or_default() += 1;
    }
    let width = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let mut summary = format!(
        "source: {desc}\nsamples: {}\nfeatures: {width}\nseed: {}\n",
        samples.len(),
        cfg.seed
    );
    for (name, count) in &counts {
        summary.push_str(&format!("class {name}: {count}\n"));
    }
    write_file(&out_root.join("dataset_summary.txt"), summary.as_bytes())?;
    print!("{summary}");
    println!("wrote {}", csv_path.display());
    Ok(())
}

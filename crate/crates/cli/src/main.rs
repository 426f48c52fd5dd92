//! `dticu`: one executable for the whole workflow — synthetic cohort
//! generation, training, evaluation, observation-window sweeps, modality
//! knockout attribution, and forward simulation.
//!
//! Conventions shared by every subcommand: flags override config-file
//! fields which override defaults; all randomness flows from a single
//! `--seed`; each output directory gets exactly one `manifest.json`
//! (written atomically at completion) recording the resolved config, seed,
//! inputs, and wall time, so a run is reproducible from its manifest alone.
//! Exit codes: 0 success, 2 usage or config error, 3 numerical failure.
//! `DTICU_LOG` (error | info | debug) controls log verbosity.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use dticu_core::ablation::{self, AblationError};
use dticu_core::data::{
    load_cohort, save_cohort, CohortSchema, DataError, IcuStay, Modality, SEQ_MODALITIES,
};
use dticu_core::model::{parse_zero_set, Model, ModelConfig, ModelError, ZeroSet};
use dticu_core::synth::{generate, GenConfig, GenError};
use dticu_core::train::{self, Balancing, TrainConfig, TrainError};

const COHORT_FILE: &str = "cohort.jsonl";
const SCHEMA_FILE: &str = "schema.json";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            // The one runtime (not configuration) failure mode: the step
            // diagnostic names the batch so the run can be replayed.
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

impl From<AblationError> for CliError {
    fn from(e: AblationError) -> Self {
        match e {
            AblationError::Train(t) => t.into(),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Usage(e.to_string())
            }
        }
    )*};
}
usage_from!(GenError, DataError, ModelError, std::io::Error, serde_json::Error);

/// Run record dropped into every output directory.
#[derive(Debug, serde::Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: Vec<String>,
    output: String,
    started_unix: u64,
    wall_seconds: f64,
}

struct Timer {
    started_unix: u64,
    t0: Instant,
}

impl Timer {
    fn start() -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Timer { started_unix, t0: Instant::now() }
    }

    /// Write the manifest via a temp file + rename so a crash mid-write
    /// never leaves a truncated manifest behind.
    fn finish(
        self,
        command: &str,
        seed: Option<u64>,
        config: serde_json::Value,
        inputs: &[&Path],
        out: &Path,
    ) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output: out.display().to_string(),
            started_unix: self.started_unix,
            wall_seconds: self.t0.elapsed().as_secs_f64(),
        };
        let tmp = out.join(format!("{MANIFEST_FILE}.tmp"));
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        std::fs::write(&tmp, body)?;
        std::fs::rename(&tmp, out.join(MANIFEST_FILE))?;
        Ok(())
    }
}

#[derive(Parser)]
#[command(
    name = "dticu",
    version,
    about = "ICU digital-twin workbench: generate cohorts, train, evaluate, ablate, simulate"
)]
struct Cli {
    /// Worker threads for generation, evaluation, and ablation
    /// (training itself is single-writer).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic cohort (JSONL + schema).
    Gen(GenArgs),
    /// Train a model on a generated cohort.
    Train(TrainArgs),
    /// Score a cohort with a checkpoint and report metrics.
    Eval(EvalArgs),
    /// Evaluate across truncated observation windows.
    Sweep(SweepArgs),
    /// Modality knockout attribution (single + pairwise).
    Ablate(AblateArgs),
    /// Autoregressive forward simulation for one stay.
    Rollout(RolloutArgs),
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI hours, got {s:?}"))?;
    let lo = lo.trim().parse::<usize>().map_err(|e| format!("bad lower bound {lo:?}: {e}"))?;
    let hi = hi.trim().parse::<usize>().map_err(|e| format!("bad upper bound {hi:?}: {e}"))?;
    Ok((lo, hi))
}

fn parse_weight(s: &str) -> Result<(Modality, f64), String> {
    let (name, value) =
        s.split_once('=').ok_or_else(|| format!("expected MODALITY=WEIGHT, got {s:?}"))?;
    let m = name.trim().parse::<Modality>().map_err(|e| e.to_string())?;
    let w = value.trim().parse::<f64>().map_err(|e| format!("bad weight {value:?}: {e}"))?;
    Ok((m, w))
}

#[derive(clap::Args)]
struct GenArgs {
    /// Generator config JSON; absent fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for cohort.jsonl + schema.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_stays: Option<usize>,
    #[arg(long)]
    positive_rate: Option<f64>,
    /// Inclusive stay-length bounds in hours, as LO:HI.
    #[arg(long, value_parser = parse_range)]
    length_range: Option<(usize, usize)>,
    #[arg(long)]
    noise_std: Option<f64>,
    /// Override one planted signal weight, e.g. proc=0.9; repeatable.
    #[arg(long = "signal-weight", value_parser = parse_weight)]
    signal_weight: Vec<(Modality, f64)>,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training config JSON; absent fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Cohort directory produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint/, loss.csv, and reports.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// none | length | label | both.
    #[arg(long)]
    balancing: Option<Balancing>,
    /// Next-step forecasting weight; 0 trains classification only.
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Batch truncation-length bounds in hours, as LO:HI.
    #[arg(long, value_parser = parse_range)]
    length_sample_range: Option<(usize, usize)>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    modality_layers: Option<usize>,
    #[arg(long)]
    temporal_layers: Option<usize>,
    #[arg(long)]
    ff_mult: Option<usize>,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Modalities to knock out at inference, comma-separated.
    #[arg(long)]
    zero_out: Option<String>,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Observation windows in hours.
    #[arg(long, value_delimiter = ',', default_values_t = ablation::DEFAULT_SWEEP_GRID)]
    hours: Vec<usize>,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct RolloutArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Stay to simulate forward.
    #[arg(long)]
    stay_id: String,
    /// Hours of self-simulated future.
    #[arg(long)]
    horizon: usize,
}

fn main() {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DTICU_LOG", "info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            std::process::exit(2);
        }
    }
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Rollout(args) => cmd_rollout(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<(CohortSchema, Vec<IcuStay>), CliError> {
    let schema = CohortSchema::load(&dir.join(SCHEMA_FILE))?;
    let stays = load_cohort(&dir.join(COHORT_FILE), &schema)?;
    Ok((schema, stays))
}

/// Load a checkpoint and insist its schema matches the cohort's; scoring a
/// cohort the model was not built for is always a caller mistake.
fn load_model(checkpoint: &Path, schema: &CohortSchema) -> Result<Model, CliError> {
    let model = Model::load(checkpoint)?;
    if model.cfg.schema != *schema {
        return Err(CliError::Usage(format!(
            "checkpoint {} was built for a different cohort schema",
            checkpoint.display()
        )));
    }
    Ok(model)
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let timer = Timer::start();
    let mut cfg: GenConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => GenConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.n_stays {
        cfg.n_stays = v;
    }
    if let Some(v) = args.positive_rate {
        cfg.positive_rate = v;
    }
    if let Some(v) = args.length_range {
        cfg.length_range = v;
    }
    if let Some(v) = args.noise_std {
        cfg.noise_std = v;
    }
    for &(m, w) in &args.signal_weight {
        cfg.signal_weights.set(m, w);
    }
    cfg.validate()?;

    let stays = generate(&cfg)?;
    std::fs::create_dir_all(&args.out)?;
    save_cohort(&args.out.join(COHORT_FILE), &stays)?;
    cfg.schema.save(&args.out.join(SCHEMA_FILE))?;

    let n_pos = stays.iter().filter(|s| s.label == 1).count();
    println!(
        "wrote {} stays ({} positive) to {}",
        stays.len(),
        n_pos,
        args.out.join(COHORT_FILE).display()
    );
    let inputs: Vec<&Path> = args.config.iter().map(PathBuf::as_path).collect();
    timer.finish("gen", Some(cfg.seed), serde_json::to_value(&cfg)?, &inputs, &args.out)
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let timer = Timer::start();
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.balancing {
        cfg.balancing = v;
    }
    if let Some(v) = args.lambda_reg {
        cfg.lambda_reg = v;
    }
    if let Some(v) = args.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = args.length_sample_range {
        cfg.length_sample_range = v;
    }

    let (schema, stays) = load_data(&args.data)?;
    let defaults = ModelConfig::default();
    let model_cfg = ModelConfig {
        d_model: args.d_model.unwrap_or(defaults.d_model),
        n_heads: args.n_heads.unwrap_or(defaults.n_heads),
        n_modality_layers: args.modality_layers.unwrap_or(defaults.n_modality_layers),
        n_temporal_layers: args.temporal_layers.unwrap_or(defaults.n_temporal_layers),
        ff_mult: args.ff_mult.unwrap_or(defaults.ff_mult),
        lambda_reg: cfg.lambda_reg,
        schema,
    };
    let mut model = Model::new(model_cfg.clone(), cfg.seed)?;
    log::info!(
        "training on {} stays: {} steps, batch {}, balancing {}",
        stays.len(),
        cfg.steps,
        cfg.batch_size,
        cfg.balancing
    );
    let report = train::train(&mut model, &stays, &cfg)?;

    std::fs::create_dir_all(&args.out)?;
    model.save(&args.out.join("checkpoint"))?;
    report.write_csv(&args.out.join("loss.csv"))?;
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    std::fs::write(args.out.join("train_report.json"), body)?;

    match (report.best_step, report.best_val_auprc) {
        (Some(step), Some(auprc)) => println!(
            "trained {} steps{}; best val AUPRC {auprc:.4} at step {step}",
            report.steps_run,
            if report.stopped_early { " (stopped early)" } else { "" },
        ),
        _ => println!("trained {} steps", report.steps_run),
    }
    println!("checkpoint: {}", args.out.join("checkpoint").display());
    let config = serde_json::json!({ "train": cfg, "model": model_cfg });
    let mut inputs: Vec<&Path> = vec![&args.data];
    inputs.extend(args.config.iter().map(PathBuf::as_path));
    timer.finish("train", Some(cfg.seed), config, &inputs, &args.out)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let timer = Timer::start();
    let zero: ZeroSet = match &args.zero_out {
        Some(s) => parse_zero_set(s)?,
        None => ZeroSet::new(),
    };
    let (schema, stays) = load_data(&args.data)?;
    let model = load_model(&args.checkpoint, &schema)?;
    let (scores, report) = train::evaluate_cohort(&model, &stays, &zero)?;

    std::fs::create_dir_all(&args.out)?;
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    print!("{body}");
    std::fs::write(args.out.join("metrics.json"), body)?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(args.out.join("scores.csv"))?);
    writeln!(csv, "stay_id,label,risk")?;
    for (stay, risk) in stays.iter().zip(&scores) {
        writeln!(csv, "{},{},{}", stay.stay_id, stay.label, risk)?;
    }
    drop(csv);

    let config = serde_json::json!({ "zero_out": zero });
    timer.finish("eval", None, config, &[&args.checkpoint, &args.data], &args.out)
}

fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let timer = Timer::start();
    let (schema, stays) = load_data(&args.data)?;
    let model = load_model(&args.checkpoint, &schema)?;
    let report = ablation::test_length_sweep(&model, &stays, &args.hours)?;
    std::fs::create_dir_all(&args.out)?;
    ablation::write_sweep_csv(&report, &args.out.join("sweep.csv"))?;
    println!("swept {} observation windows over {} stays", args.hours.len(), stays.len());

    let config = serde_json::json!({ "hours": args.hours });
    timer.finish("sweep", None, config, &[&args.checkpoint, &args.data], &args.out)
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CliError> {
    let timer = Timer::start();
    let (schema, stays) = load_data(&args.data)?;
    let model = load_model(&args.checkpoint, &schema)?;
    log::info!("evaluating 37 knockout configurations on {} stays", stays.len());
    let report = ablation::run_ablation(&model, &stays)?;
    report.write_outputs(&args.out)?;
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    std::fs::write(args.out.join("ablation.json"), body)?;

    // Headline: which single knockout moves ranking quality the most.
    let worst = report
        .lomo
        .rows
        .iter()
        .filter_map(|(m, c)| Some((*m, c.delta.auprc?)))
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap());
    match worst {
        Some((m, d)) => println!("largest single-knockout AUPRC shift: {m} ({d:+.4})"),
        None => println!("AUPRC undefined on this cohort; see lomo.csv"),
    }
    timer.finish(
        "ablate",
        None,
        serde_json::Value::Null,
        &[&args.checkpoint, &args.data],
        &args.out,
    )
}

fn cmd_rollout(args: RolloutArgs) -> Result<(), CliError> {
    let timer = Timer::start();
    let (schema, stays) = load_data(&args.data)?;
    let model = load_model(&args.checkpoint, &schema)?;
    let stay = stays
        .iter()
        .find(|s| s.stay_id == args.stay_id)
        .ok_or_else(|| CliError::Usage(format!("stay {:?} not found in cohort", args.stay_id)))?;

    let current = model.risk_for_stay(stay)?;
    let roll = model.rollout(stay, args.horizon)?;

    std::fs::create_dir_all(&args.out)?;
    // hours_ahead 0 is the risk at the observed end, before any simulation;
    // it matches `eval`'s score for the same stay exactly.
    let mut risks = std::io::BufWriter::new(std::fs::File::create(args.out.join("risks.csv"))?);
    writeln!(risks, "hours_ahead,risk")?;
    writeln!(risks, "0,{current}")?;
    for (i, r) in roll.risks.iter().enumerate() {
        writeln!(risks, "{},{}", i + 1, r)?;
    }
    drop(risks);

    let mut traj =
        std::io::BufWriter::new(std::fs::File::create(args.out.join("trajectory.csv"))?);
    writeln!(traj, "hours_ahead,modality,feature,value")?;
    for (i, rows) in roll.predicted.iter().enumerate() {
        for (m, row) in SEQ_MODALITIES.iter().zip(rows) {
            for (f, v) in row.iter().enumerate() {
                writeln!(traj, "{},{},{f},{v}", i + 1, m.name())?;
            }
        }
    }
    drop(traj);

    println!(
        "simulated {} h for stay {}; risk {:.4} -> {:.4}",
        args.horizon,
        stay.stay_id,
        current,
        roll.risks.last().unwrap(),
    );
    let config = serde_json::json!({ "stay_id": args.stay_id, "horizon": args.horizon });
    timer.finish("rollout", None, config, &[&args.checkpoint, &args.data], &args.out)
}

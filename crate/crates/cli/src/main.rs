//! `pv-client`: one binary for the whole forecasting pipeline — synthetic
//! station generation, training, evaluation against baselines, ablation
//! grids, and numerical self-checks.
//!
//! Exit codes: 0 success, 1 validation/assertion failure, 2 usage error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pv_client::data::{load_csv, synth, Split};
use pv_client::eval::{
    evaluate_with_baselines, export_plot_data, run_grid, train_station_model, GridKind,
    MetricReport,
};
use pv_client::layers::AttentionKind;
use pv_client::model::{ModelConfig, OutputMode, VariantFlags};
use pv_client::selfcheck::run_selfcheck;
use pv_client::training::checkpoint::{load_checkpoint, save_checkpoint};
use pv_client::training::TrainConfig;

/// Environment variable naming the default directory for produced files.
const OUT_DIR_ENV: &str = "PV_CLIENT_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "pv-client",
    version,
    about = "Day-ahead photovoltaic power forecasting pipeline",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic station CSV.
    SynthData(SynthArgs),
    /// Train a model on a station CSV and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the persistence and regression baselines.
    Evaluate(EvaluateArgs),
    /// Train and score a grid of model variants.
    Ablate(AblateArgs),
    /// Run the numerical self-check suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// RNG seed for the generator.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Number of generated days (96 rows each).
    #[arg(long, default_value_t = 60)]
    days: usize,
    /// Installed station capacity in kW.
    #[arg(long, default_value_t = 120.0)]
    capacity: f64,
    /// Output CSV path (defaults into the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// History length L in 15-minute steps.
    #[arg(long, default_value_t = 192)]
    history: usize,
    /// Forecast horizon T in 15-minute steps.
    #[arg(long, default_value_t = 96)]
    horizon: usize,
    /// Number of encoder blocks.
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Attention/FFN inner width.
    #[arg(long, default_value_t = 128)]
    d_model: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 8)]
    heads: usize,
    /// Token width when --embed is set.
    #[arg(long, default_value_t = 128)]
    embed_dim: usize,
    /// Drop the linear trend path.
    #[arg(long)]
    no_linear: bool,
    /// Drop reversible instance normalization.
    #[arg(long)]
    no_revin: bool,
    /// Embed variable tokens before the encoder.
    #[arg(long)]
    embed: bool,
    /// Token-mixing component of each block.
    #[arg(long, value_enum, default_value_t = AttentionArg::Attention)]
    attention: AttentionArg,
    /// Which series the model emits.
    #[arg(long, value_enum, default_value_t = OutputModeArg::Pv)]
    output_mode: OutputModeArg,
}

#[derive(Args, Clone)]
struct TrainHyperArgs {
    /// Adam learning rate.
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Mini-batch size (last partial batch kept).
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Training epochs; 0 leaves the model at initialization.
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Seed for initialization and shuffling.
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Optional global-L2 gradient clip.
    #[arg(long)]
    grad_clip: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Station CSV to train on.
    #[arg(long)]
    data: PathBuf,
    /// Installed station capacity in kW.
    #[arg(long)]
    capacity: f64,
    /// Checkpoint output path (defaults into the output directory).
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Station CSV to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Installed station capacity in kW.
    #[arg(long)]
    capacity: f64,
    /// Metric CSV output path (defaults into the output directory).
    #[arg(long)]
    report_out: Option<PathBuf>,
    /// Optional per-step forecast/trend/detail CSV for plotting.
    #[arg(long)]
    plot_out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Which variant grid to run.
    #[arg(long, value_enum)]
    grid: GridArg,
    /// Station CSV to train on.
    #[arg(long)]
    data: PathBuf,
    /// Installed station capacity in kW.
    #[arg(long)]
    capacity: f64,
    /// Grid CSV output path (defaults into the output directory).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    hyper: TrainHyperArgs,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttentionArg {
    Attention,
    Linear,
    Mlp,
    None,
}

impl From<AttentionArg> for AttentionKind {
    fn from(a: AttentionArg) -> Self {
        match a {
            AttentionArg::Attention => AttentionKind::Attention,
            AttentionArg::Linear => AttentionKind::LinearMixer,
            AttentionArg::Mlp => AttentionKind::MlpMixer,
            AttentionArg::None => AttentionKind::NoAttention,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputModeArg {
    Pv,
    Radiation,
    SumFixed,
    SumLearnable,
}

impl From<OutputModeArg> for OutputMode {
    fn from(o: OutputModeArg) -> Self {
        match o {
            OutputModeArg::Pv => OutputMode::PvDim,
            OutputModeArg::Radiation => OutputMode::RadiationDim,
            OutputModeArg::SumFixed => OutputMode::SumFixed,
            OutputModeArg::SumLearnable => OutputMode::SumLearnable,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GridArg {
    Ablation,
    Attention,
    History,
    OutputMode,
}

impl From<GridArg> for GridKind {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Ablation => GridKind::Ablation,
            GridArg::Attention => GridKind::Attention,
            GridArg::History => GridKind::History,
            GridArg::OutputMode => GridKind::OutputMode,
        }
    }
}

impl ModelArgs {
    fn to_config(&self) -> ModelConfig {
        ModelConfig {
            l: self.history,
            t: self.horizon,
            num_blocks: self.blocks,
            d_model: self.d_model,
            heads: self.heads,
            embed_dim: self.embed_dim,
            ..ModelConfig::default()
        }
    }

    fn to_flags(&self) -> VariantFlags {
        VariantFlags {
            use_linear: !self.no_linear,
            use_revin: !self.no_revin,
            add_embedding: self.embed,
            attention_kind: self.attention.into(),
            output_mode: self.output_mode.into(),
        }
    }
}

impl TrainHyperArgs {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }
}

fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn resolve_out(explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| out_dir().join(default_name))
}

fn print_model_config(config: &ModelConfig, flags: &VariantFlags) {
    println!(
        "model: L={} T={} C={} blocks={} d_model={} heads={} embed_dim={}",
        config.l, config.t, config.c, config.num_blocks, config.d_model, config.heads,
        config.embed_dim
    );
    println!(
        "variant: linear={} revin={} embedding={} attention={:?} output={:?}",
        flags.use_linear, flags.use_revin, flags.add_embedding, flags.attention_kind,
        flags.output_mode
    );
}

fn print_train_config(cfg: &TrainConfig) {
    println!(
        "training: lr={} batch={} epochs={} seed={} grad_clip={}",
        cfg.learning_rate,
        cfg.batch_size,
        cfg.epochs,
        cfg.seed,
        cfg.grad_clip
            .map(|c| c.to_string())
            .unwrap_or_else(|| "off".into()),
    );
}

fn metric_line(label: &str, m: &MetricReport) -> String {
    format!(
        "{label:<12} mse={:>12.3}  acc={:>7.3}  n={}",
        m.mse, m.acc, m.n
    )
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let out = resolve_out(args.out, "station.csv");
    println!(
        "synth-data: seed={} days={} capacity={} out={}",
        args.seed,
        args.days,
        args.capacity,
        out.display()
    );
    if args.days == 0 {
        bail!("--days must be at least 1");
    }
    let profile = synth::ShiftProfile::default();
    let (frame, meta) = synth::synth_station(args.seed, args.days, args.capacity, &profile);
    frame
        .write_csv(&out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!("rows: {}", frame.len());
    println!(
        "generator: {}",
        serde_json::to_string(&meta).expect("meta serialization")
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let out = resolve_out(args.out_checkpoint, "model.pvcl");
    let config = args.model.to_config();
    let flags = args.model.to_flags();
    let train_cfg = args.hyper.to_config();
    println!(
        "train: data={} capacity={} checkpoint={}",
        args.data.display(),
        args.capacity,
        out.display()
    );
    print_model_config(&config, &flags);
    print_train_config(&train_cfg);

    let raw = load_csv(&args.data, args.capacity)
        .with_context(|| format!("loading {}", args.data.display()))?;
    println!("loaded {} rows", raw.len());
    let fitted = train_station_model(config, flags, &train_cfg, &raw)?;
    println!("parameters: {}", fitted.model.count_parameters());
    for e in &fitted.log.epochs {
        println!("epoch {:>3}  loss {:.6}", e.epoch, e.mean_loss);
    }
    save_checkpoint(&fitted.model, &fitted.standardizer, &out)
        .with_context(|| format!("writing {}", out.display()))?;
    let log_path = loss_log_path(&out);
    let mut log_csv = String::from("epoch,loss\n");
    for e in &fitted.log.epochs {
        log_csv.push_str(&format!("{},{}\n", e.epoch, e.mean_loss));
    }
    std::fs::write(&log_path, log_csv).with_context(|| format!("writing {}", log_path.display()))?;
    println!("checkpoint written: {}", out.display());
    println!("loss log written: {}", log_path.display());
    Ok(())
}

fn loss_log_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.file_name().unwrap_or_default().to_os_string();
    name.push(".losses.csv");
    checkpoint.with_file_name(name)
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let report_out = resolve_out(args.report_out, "evaluation.csv");
    println!(
        "evaluate: checkpoint={} data={} capacity={} report={}",
        args.checkpoint.display(),
        args.data.display(),
        args.capacity,
        report_out.display()
    );
    let (model, standardizer) = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading {}", args.checkpoint.display()))?;
    print_model_config(&model.config, &model.flags);
    let raw = load_csv(&args.data, args.capacity)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let split = Split::standard(raw.len());
    let report = evaluate_with_baselines(&model, &standardizer, &raw, &split)?;

    println!("scored {} day(s), {} steps", report.days, report.model.n);
    println!("{}", metric_line("model", &report.model));
    println!("{}", metric_line("persistence", &report.persistence));
    println!("{}", metric_line("linear", &report.linear));

    let mut csv = String::from("label,mse,acc,n\n");
    for (label, m) in [
        ("model", &report.model),
        ("persistence", &report.persistence),
        ("linear", &report.linear),
    ] {
        csv.push_str(&format!("{},{},{},{}\n", label, m.mse, m.acc, m.n));
    }
    std::fs::write(&report_out, csv)
        .with_context(|| format!("writing {}", report_out.display()))?;
    println!("report written: {}", report_out.display());

    if let Some(plot) = args.plot_out {
        let rows = export_plot_data(&model, &standardizer, &raw, &split, &plot)?;
        println!("plot data written: {} ({} rows)", plot.display(), rows);
    }
    Ok(())
}

fn run_ablate(args: AblateArgs) -> Result<()> {
    let kind: GridKind = args.grid.into();
    let out = resolve_out(args.out, &format!("{}-grid.csv", kind.name()));
    let config = args.model.to_config();
    let flags = args.model.to_flags();
    let train_cfg = args.hyper.to_config();
    println!(
        "ablate: grid={} data={} capacity={} out={}",
        kind.name(),
        args.data.display(),
        args.capacity,
        out.display()
    );
    print_model_config(&config, &flags);
    print_train_config(&train_cfg);

    let raw = load_csv(&args.data, args.capacity)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let grid = run_grid(kind, &raw, config, flags, &train_cfg)?;
    for cell in &grid.cells {
        println!("{}", metric_line(&cell.label, &cell.report));
    }
    grid.write_csv(&out)?;
    println!("grid written: {}", out.display());
    Ok(())
}

fn run_selfcheck_cmd(args: SelfcheckArgs) -> Result<()> {
    println!("selfcheck: seed={}", args.seed);
    let report = run_selfcheck(args.seed);
    print!("{}", report.render());
    if let Some(f) = report.first_failure() {
        bail!("self-check failed at: {}", f.name);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::SynthData(args) => run_synth(args),
        Command::Train(args) => run_train(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Ablate(args) => run_ablate(args),
        Command::Selfcheck(args) => run_selfcheck_cmd(args),
    }
}

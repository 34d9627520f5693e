//! `heliofuse` — trimodal solar power forecasting toolkit.
//!
//! Subcommands: `synth` (generate a dataset), `train`, `eval`, `baseline`,
//! `zeroshot`, `diagnose`. Every run writes a resolved configuration
//! snapshot and its seed next to its outputs so it can be replayed exactly.
//!
//! Exit codes: 2 configuration error, 3 data error, 4 numeric failure,
//! 1 anything else.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use heliofuse_core::baseline::Baseline;
use heliofuse_core::config::{RunConfig, SplitModeCfg};
use heliofuse_core::data::synth::{generate, SynthConfig};
use heliofuse_core::data::{
    apply_nwp_stats, build_windows, dir_checksum, normalize_power, nwp_stats, split_chronological,
    Dataset, SampleWindow,
};
use heliofuse_core::error::Error;
use heliofuse_core::eval::{evaluate, latent_kl, per_window_csv, zero_shot_eval, EvalReport};
use heliofuse_core::model::{train, FusionNet, TrainOptions};

#[derive(Parser)]
#[command(name = "heliofuse", version, about = "Trimodal solar power forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic trimodal dataset.
    Synth(SynthArgs),
    /// Train the fusion forecaster on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint.
    Eval(EvalArgs),
    /// Fit and evaluate a naive baseline.
    #[command(name = "baseline")]
    BaselineCmd(BaselineArgs),
    /// Zero-shot protocol: train on some plants, test on disjoint plants.
    Zeroshot(ZeroshotArgs),
    /// Latent-distribution KL diagnostic for a trained checkpoint.
    Diagnose(DiagnoseArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    plants: usize,
    #[arg(long, default_value_t = 120)]
    days: usize,
    /// Square grid edge in pixels (up to 64).
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 15)]
    aux_channels: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    cloud_amplitude: f64,
}

#[derive(Args)]
struct CommonRunArgs {
    /// Dataset directory (falls back to HELIOFUSE_DATA_DIR).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Flat `key: value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual config overrides, e.g. --set dim=32 --set vq_in_ts=False.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Checkpoint directory produced by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Which chronological split to score: train | val | test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also write one CSV row per window.
    #[arg(long)]
    window_csv: bool,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// persistence | mean | clearsky
    #[arg(long)]
    which: String,
    #[arg(long, default_value = "test")]
    split: String,
    /// Export predictions as CSV (plant_id, t0, hour, y_hat).
    #[arg(long)]
    export_csv: bool,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    /// Comma-separated training plant ids.
    #[arg(long)]
    train_plants: String,
    /// Comma-separated held-out plant ids.
    #[arg(long)]
    test_plants: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
}

#[derive(Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: CommonRunArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::BaselineCmd(args) => cmd_baseline(args),
        Command::Zeroshot(args) => cmd_zeroshot(args),
        Command::Diagnose(args) => cmd_diagnose(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match &e {
                Error::Config(_) | Error::Invalid(_) => 2,
                Error::Data(_) | Error::Io { .. } | Error::Shape { .. } => 3,
                Error::Numeric(_) => 4,
            };
            ExitCode::from(code)
        }
    }
}

type Result<T> = std::result::Result<T, Error>;

fn resolve_config(common: &CommonRunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        cfg.apply_text(&text)?;
    }
    for kv in &common.sets {
        let (key, value) = kv
            .split_once('=')
            .or_else(|| kv.split_once(':'))
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.apply_kv(key.trim(), value.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn data_dir(common: &CommonRunArgs) -> Result<PathBuf> {
    if let Some(d) = &common.data {
        return Ok(d.clone());
    }
    if let Ok(env) = std::env::var("HELIOFUSE_DATA_DIR") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    Err(Error::Config(
        "no dataset directory: pass --data or set HELIOFUSE_DATA_DIR".into(),
    ))
}

fn write_out(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent.display().to_string(), e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Persist the resolved configuration and seed for exact replay.
fn snapshot_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_out(&out.join("config.txt"), &cfg.serialize_flat())
}

fn load_prepared(dir: &Path) -> Result<Dataset> {
    let mut ds = Dataset::load(dir)?;
    normalize_power(&mut ds)?;
    Ok(ds)
}

/// Chronological split of all windows per the manifest fractions.
fn split_windows(
    ds: &Dataset,
    cfg: &RunConfig,
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>, Vec<SampleWindow>, Vec<String>)> {
    let ws = build_windows(ds, cfg.model.t_in, cfg.model.t_out)?;
    for line in &ws.skipped {
        eprintln!("warning: {line}");
    }
    let (train_ws, val_ws, test_ws) = split_chronological(ws.windows, ds.manifest.split_fractions)?;
    Ok((train_ws, val_ws, test_ws, ws.skipped))
}

fn pick_split(
    which: &str,
    splits: (Vec<SampleWindow>, Vec<SampleWindow>, Vec<SampleWindow>),
) -> Result<Vec<SampleWindow>> {
    match which {
        "train" => Ok(splits.0),
        "val" => Ok(splits.1),
        "test" => Ok(splits.2),
        other => Err(Error::Config(format!("split: expected train|val|test, got '{other}'"))),
    }
}

/// Hours covered by the training portion of the chronological split.
fn train_hours(ds: &Dataset) -> usize {
    let windows_per_plant = ds.manifest.n_days.saturating_sub(1);
    let n_train = (ds.manifest.split_fractions[0] * windows_per_plant as f64).floor() as usize;
    // train windows cover target days 1..=n_train, so inputs and targets both
    // live strictly before this hour
    (n_train + 1) * 24
}

fn report_files(out: &Path, name: &str, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Data(format!("report: {e}")))?;
    write_out(&out.join(format!("{name}.json")), &json)?;
    write_out(&out.join(format!("{name}.txt")), &report.text_table())?;
    println!("{}", report.text_table());
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_plants: args.plants,
        n_days: args.days,
        grid: [args.grid, args.grid],
        aux_channels: args.aux_channels,
        seed: args.seed,
        noise_std: args.noise,
        cloud_amplitude: args.cloud_amplitude,
        ..SynthConfig::default()
    };
    if args.grid > 64 {
        return Err(Error::Config(format!("grid {} exceeds the 64 pixel maximum", args.grid)));
    }
    let ds = generate(&cfg)?;
    ds.save(&args.out)?;
    let checksum = dir_checksum(&args.out)?;
    println!(
        "dataset: {} plants x {} days on a {}x{} grid at {}",
        args.plants,
        args.days,
        args.grid,
        args.grid,
        args.out.display()
    );
    println!("checksum: {checksum:016x}");
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    let data = data_dir(&args.common)?;
    cfg.data_dir = data.display().to_string();
    cfg.out_dir = args.common.out.display().to_string();
    cfg.validate()?;

    let mut ds = load_prepared(&data)?;
    if ds.manifest.aux_channels != cfg.model.aux_channels {
        return Err(Error::Config(format!(
            "aux_channels: config says {}, dataset has {}",
            cfg.model.aux_channels, ds.manifest.aux_channels
        )));
    }
    let stats = match cfg.split {
        SplitModeCfg::Chronological => nwp_stats(&ds, None, train_hours(&ds))?,
        SplitModeCfg::ByPlant => {
            return Err(Error::Config(
                "train: by-plant split is driven by the zeroshot command".into(),
            ))
        }
    };
    for w in apply_nwp_stats(&mut ds, &stats) {
        eprintln!("warning: {w}");
    }
    let (train_ws, val_ws, _test_ws, _) = split_windows(&ds, &cfg)?;
    snapshot_config(&args.common.out, &cfg)?;
    println!(
        "training on {} windows ({} plants), {} epochs",
        train_ws.len(),
        ds.manifest.plants.len(),
        cfg.epochs
    );
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
    };
    let started = std::time::Instant::now();
    let (net, log) = train(&cfg.model, &train_ws, &opts)?;
    println!(
        "trained {} parameters in {:.1?} ({} steps)",
        net.n_parameters(),
        started.elapsed(),
        log.records.len()
    );
    write_out(&args.common.out.join("loss.csv"), &log.to_csv())?;
    let ckpt = args.common.out.join("checkpoint");
    net.save(&ckpt, log.records.len() as u64, Some(&stats))?;
    println!("checkpoint: {}", ckpt.display());
    if !val_ws.is_empty() {
        let report = evaluate(&net, &val_ws, cfg.threads, "validation")?;
        report_files(&args.common.out, "validation", &report)?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let data = data_dir(&args.common)?;
    let (net, _step, stats) = FusionNet::load(&args.model)?;
    let mut ds = load_prepared(&data)?;
    if let Some(stats) = &stats {
        apply_nwp_stats(&mut ds, stats);
    }
    let mut run_cfg = cfg;
    run_cfg.model = net.cfg.clone();
    let (train_ws, val_ws, test_ws, _) = split_windows(&ds, &run_cfg)?;
    let windows = pick_split(&args.split, (train_ws, val_ws, test_ws))?;
    snapshot_config(&args.common.out, &run_cfg)?;
    let report = evaluate(&net, &windows, run_cfg.threads, &format!("{} split", args.split))?;
    report_files(&args.common.out, "report", &report)?;
    if args.window_csv {
        write_out(&args.common.out.join("windows.csv"), &per_window_csv(&net, &windows)?)?;
    }
    Ok(())
}

fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let data = data_dir(&args.common)?;
    let ds = load_prepared(&data)?;
    let (train_ws, val_ws, test_ws, _) = split_windows(&ds, &cfg)?;
    let model = Baseline::fit(&args.which, &train_ws, &ds.manifest.region)?;
    let windows = pick_split(&args.split, (train_ws, val_ws, test_ws))?;
    snapshot_config(&args.common.out, &cfg)?;
    let report = evaluate(&model, &windows, cfg.threads, &format!("{} on {} split", args.which, args.split))?;
    report_files(&args.common.out, &format!("baseline_{}", args.which), &report)?;
    if args.export_csv {
        use heliofuse_core::eval::Forecaster;
        let mut csv = String::from("plant_id,t0,hour,y_hat\n");
        for w in &windows {
            let pred = model.predict(w)?;
            for (h, v) in pred.data.iter().enumerate() {
                csv.push_str(&format!("{},{},{},{}\n", w.plant.plant_id, w.t0, h, v));
            }
        }
        write_out(&args.common.out.join("predictions.csv"), &csv)?;
    }
    Ok(())
}

fn parse_plants(spec: &str) -> BTreeSet<String> {
    spec.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn cmd_zeroshot(args: ZeroshotArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    cfg.split = SplitModeCfg::ByPlant;
    let data = data_dir(&args.common)?;
    cfg.data_dir = data.display().to_string();
    cfg.out_dir = args.common.out.display().to_string();
    cfg.validate()?;
    let train_plants = parse_plants(&args.train_plants);
    let test_plants = parse_plants(&args.test_plants);

    let mut ds = load_prepared(&data)?;
    // covariate statistics come from the training plants only (no leakage)
    let stats = nwp_stats(&ds, Some(&train_plants), ds.manifest.n_hours())?;
    for w in apply_nwp_stats(&mut ds, &stats) {
        eprintln!("warning: {w}");
    }
    let ws = build_windows(&ds, cfg.model.t_in, cfg.model.t_out)?;
    snapshot_config(&args.common.out, &cfg)?;
    let opts = TrainOptions {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        seed: cfg.seed,
    };
    let (report, audit, net) =
        zero_shot_eval(&ws.windows, &train_plants, &test_plants, &cfg.model, &opts, cfg.threads)?;
    report_files(&args.common.out, "zeroshot", &report)?;
    let audit_json =
        serde_json::to_string_pretty(&audit).map_err(|e| Error::Data(format!("audit: {e}")))?;
    write_out(&args.common.out.join("audit.json"), &audit_json)?;
    let ckpt = args.common.out.join("checkpoint");
    net.save(&ckpt, 0, Some(&stats))?;
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let data = data_dir(&args.common)?;
    let (net, _, stats) = FusionNet::load(&args.model)?;
    let mut ds = load_prepared(&data)?;
    if let Some(stats) = &stats {
        apply_nwp_stats(&mut ds, stats);
    }
    let mut run_cfg = cfg;
    run_cfg.model = net.cfg.clone();
    let (train_ws, val_ws, test_ws, _) = split_windows(&ds, &run_cfg)?;
    let windows = pick_split(&args.split, (train_ws, val_ws, test_ws))?;
    snapshot_config(&args.common.out, &run_cfg)?;
    let (ctx_vals, ts_vals) = net.collect_latents(&windows, run_cfg.batch_size)?;
    let vq_on = net.cfg.vq_in_ctx || net.cfg.vq_in_ts;
    let diag = latent_kl(&ctx_vals, &ts_vals, vq_on)?;
    let json = serde_json::to_string_pretty(&diag).map_err(|e| Error::Data(format!("diag: {e}")))?;
    write_out(&args.common.out.join("diagnostics.json"), &json)?;
    println!(
        "KL(ctx || ts) = {:.6} over {} bins (vq {})",
        diag.kl,
        diag.bins,
        if diag.vq_on { "on" } else { "off" }
    );
    Ok(())
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use memto::data::{AnomalyKind, SyntheticSpec};
use memto::detect::Criterion;
use memto::train::LossMode;
use memto_cli::{
    cmd_analyze_lsd, cmd_eval, cmd_score, cmd_synth, cmd_train, init_threads, AnalyzeRequest,
    CliError, CliResult, EvalRequest, RunConfig, ScoreRequest, Split,
};

/// Memory-guided Transformer anomaly detection for multivariate time series.
///
/// Set MEMTO_THREADS to bound the worker threads used for scoring.
#[derive(Parser)]
#[command(name = "memto", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic train/test CSVs.
    Synth(SynthArgs),
    /// Two-phase training from a TOML config plus flag overrides.
    Train(TrainArgs),
    /// Write a per-timestamp score trace for a data file.
    Score(ScoreArgs),
    /// Threshold a test trace from train/val traces and report P/R/F1.
    Eval(EvalArgs),
    /// Analyses of a trained model.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Training series length.
    #[arg(long = "train-len", visible_alias = "T", default_value_t = 20_000)]
    train_len: usize,
    #[arg(long = "test-len", default_value_t = 10_000)]
    test_len: usize,
    /// Channel count.
    #[arg(long = "n", visible_alias = "channels", default_value_t = 8)]
    channels: usize,
    #[arg(long = "anomaly-ratio", default_value_t = 0.01)]
    anomaly_ratio: f64,
    #[arg(long = "noise-std", default_value_t = 0.1)]
    noise_std: f64,
    /// Comma-separated subset of spike, level-shift, segment-noise.
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Flat TOML run config; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data file starts with a header row.
    #[arg(long)]
    header: bool,
    /// Single phase with random memory, no k-means re-initialization.
    #[arg(long = "skip-kmeans")]
    skip_kmeans: bool,
    #[arg(long = "memory-items")]
    memory_items: Option<usize>,
    #[arg(long = "dec-layers")]
    dec_layers: Option<usize>,
    #[arg(long = "latent-dim")]
    latent_dim: Option<usize>,
    #[arg(long = "window-len")]
    window_len: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// both, rec or entr.
    #[arg(long = "loss-mode")]
    loss_mode: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "max-epochs")]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Last column of the data file holds 0/1 labels.
    #[arg(long)]
    labels: bool,
    #[arg(long)]
    header: bool,
    /// both, isd or lsd.
    #[arg(long, default_value = "both")]
    criterion: String,
    /// train, val or all (train/val use the checkpoint's split ratio).
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Labeled test trace.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// Top-p% threshold ratio.
    #[arg(long)]
    p: Option<f64>,
    /// Comma-separated p values; one metrics row each.
    #[arg(long = "p-sweep", value_delimiter = ',')]
    p_sweep: Option<Vec<f64>>,
    /// Benchmark preset for p (SMD, MSL, PSM, SMAP, SWaT).
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long, default_value = "eval")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Mean latent deviation of normal vs abnormal timestamps.
    Lsd {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled data file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        header: bool,
        #[arg(long, default_value = "lsd_report.json")]
        out: PathBuf,
    },
}

fn parse<T: std::str::FromStr<Err = memto::Error>>(s: &str) -> CliResult<T> {
    s.parse()
        .map_err(|e: memto::Error| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => {
            let mut spec = SyntheticSpec {
                train_len: a.train_len,
                test_len: a.test_len,
                channels: a.channels,
                noise_std: a.noise_std,
                anomaly_ratio: a.anomaly_ratio,
                seed: a.seed,
                ..SyntheticSpec::default()
            };
            if let Some(kinds) = a.kinds {
                spec.anomaly_kinds = kinds
                    .iter()
                    .map(|k| parse::<AnomalyKind>(k))
                    .collect::<CliResult<_>>()?;
            }
            let out = cmd_synth(&spec, &a.out)?;
            println!(
                "wrote {} and {} ({} labeled points)",
                out.train.display(),
                out.test.display(),
                out.labeled_points
            );
        }
        Command::Train(a) => {
            let mut cfg = match &a.config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            if let Some(d) = a.data {
                cfg.train_data = Some(d);
            }
            if let Some(o) = a.out {
                cfg.out_dir = o;
            }
            cfg.header |= a.header;
            cfg.skip_kmeans |= a.skip_kmeans;
            macro_rules! set {
                ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
            }
            set!(
                memory_items,
                dec_layers,
                latent_dim,
                window_len,
                lambda,
                lr,
                batch_size,
                max_epochs,
                seed
            );
            if let Some(m) = a.loss_mode {
                cfg.loss_mode = parse::<LossMode>(&m)?;
            }
            let out = cmd_train(&cfg)?;
            println!(
                "wrote {} (sha256 {}) in {:.1}s",
                out.checkpoint.display(),
                out.checkpoint_hash,
                out.seconds
            );
        }
        Command::Score(a) => {
            let req = ScoreRequest {
                checkpoint: a.checkpoint,
                data: a.data,
                labels: a.labels,
                header: a.header,
                criterion: parse::<Criterion>(&a.criterion)?,
                split: a.split.parse::<Split>()?,
                out: a.out,
            };
            let s = cmd_score(&req)?;
            println!("wrote {} rows to {}", s.len(), req.out.display());
        }
        Command::Eval(a) => {
            let p = match (a.p, &a.dataset) {
                (Some(p), _) => p,
                (None, Some(d)) => memto::presets::dataset_p(d)
                    .ok_or_else(|| CliError::Usage(format!("unknown dataset preset {d:?}")))?,
                (None, None) => 1.0,
            };
            let p_percent = a.p_sweep.unwrap_or_else(|| vec![p]);
            let rows = cmd_eval(&EvalRequest {
                test_trace: a.test,
                train_trace: a.train,
                val_trace: a.val,
                p_percent,
                out_dir: a.out,
            })?;
            println!("p,threshold,precision,recall,f1,tp,fp,fn");
            for r in rows {
                let m = &r.metrics;
                println!(
                    "{},{},{:.6},{:.6},{:.6},{},{},{}",
                    r.p_percent, r.threshold, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
                );
            }
        }
        Command::Analyze(AnalyzeCommand::Lsd {
            checkpoint,
            data,
            header,
            out,
        }) => {
            let r = cmd_analyze_lsd(&AnalyzeRequest {
                checkpoint,
                data,
                header,
                out,
            })?;
            println!(
                "normal mean LSD {:.6} ({} points), abnormal mean LSD {:.6} ({} points), ratio {:.6}",
                r.normal_mean_lsd, r.normal_count, r.abnormal_mean_lsd, r.abnormal_count, r.ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

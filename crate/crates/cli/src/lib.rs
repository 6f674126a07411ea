//! Command implementations behind the `memto` binary.

pub mod config;
pub mod trace;

use std::fs;
use std::path::{Path, PathBuf};

use memto::checkpoint::Checkpoint;
use memto::data::{
    generate_synthetic, load_csv, split_train_val, write_csv, RawSeries, SyntheticSpec,
};
use memto::detect::{
    analyze_lsd, evaluate, score_series, AnomalyScoreSeries, Criterion, EvalResult, LsdReport,
};
use memto::train::{train_two_phase, TrainReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] memto::Error),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use memto::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(E::Config(_)) => EXIT_USAGE,
            CliError::Core(E::Divergence { .. } | E::Numeric(_)) => EXIT_DIVERGENCE,
            CliError::Core(_) | CliError::Io { .. } => EXIT_DATA,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes") + "\n"
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthOutput {
    pub train: PathBuf,
    pub test: PathBuf,
    pub labeled_points: usize,
}

/// Generates `train.csv` (unlabeled) and `test.csv` (label in the last column)
/// plus `synth_spec.json`.
pub fn cmd_synth(spec: &SyntheticSpec, out_dir: &Path) -> CliResult<SynthOutput> {
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let data = generate_synthetic(spec)?;
    create_dir(out_dir)?;
    let train = out_dir.join("train.csv");
    let test = out_dir.join("test.csv");
    write_csv(&data.train, &train)?;
    write_csv(&data.test, &test)?;
    write_file(&out_dir.join("synth_spec.json"), json(spec))?;
    write_file(&out_dir.join("injected.json"), json(&data.injected))?;
    let labeled_points = data
        .test
        .labels()
        .map_or(0, |l| l.iter().filter(|&&v| v == 1).count());
    Ok(SynthOutput {
        train,
        test,
        labeled_points,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub phase1_checkpoint: PathBuf,
    pub report: TrainReport,
    pub checkpoint_hash: String,
    pub seconds: f64,
}

/// Two-phase training. Data is loaded and validated before anything is written.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutput> {
    let path = cfg
        .train_data
        .as_ref()
        .ok_or_else(|| CliError::Usage("train_data is not set".into()))?;
    let series = load_csv(path, false, cfg.header)?;
    let model_cfg = cfg.model_config(series.channels());
    let train_cfg = cfg.train_config();
    model_cfg.validate()?;
    train_cfg.validate()?;

    let outcome = train_two_phase(&series, &model_cfg, &train_cfg)?;

    create_dir(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join("model.ckpt");
    let phase1_checkpoint = cfg.out_dir.join("phase1.ckpt");
    outcome.phase1.save(&phase1_checkpoint)?;
    outcome.checkpoint.save(&checkpoint)?;
    write_file(
        &cfg.out_dir.join("train_report.json"),
        json(&outcome.report),
    )?;
    write_file(&cfg.out_dir.join("timing.json"), json(&outcome.timing))?;
    let mut echo = cfg.clone();
    echo.channels = Some(model_cfg.channels);
    write_file(&cfg.out_dir.join("config.toml"), echo.to_toml())?;
    log::info!(
        "stage seconds: phase1 {:.1}, kmeans {:.2}, phase2 {:.1}",
        outcome.timing.phase1_secs,
        outcome.timing.kmeans_secs,
        outcome.timing.phase2_secs
    );
    Ok(TrainOutput {
        checkpoint,
        phase1_checkpoint,
        checkpoint_hash: outcome.checkpoint.content_hash(),
        report: outcome.report,
        seconds: outcome.timing.total(),
    })
}

/// Portion of a data file to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    /// Training part of the chronological train/validation split.
    Train,
    /// Validation part of that split.
    Val,
    #[default]
    All,
}

impl std::str::FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "all" => Ok(Self::All),
            other => Err(CliError::Usage(format!(
                "unknown split {other:?} (expected train, val or all)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub labels: bool,
    pub header: bool,
    pub criterion: Criterion,
    pub split: Split,
    pub out: PathBuf,
}

fn select_split(series: RawSeries, split: Split, ckpt: &Checkpoint) -> CliResult<RawSeries> {
    let ratio = ckpt.train_config.as_ref().map_or(0.8, |t| t.train_ratio);
    Ok(match split {
        Split::All => series,
        Split::Train => split_train_val(&series, ratio)?.0,
        Split::Val => split_train_val(&series, ratio)?.1,
    })
}

/// Scores a data file and writes the per-timestamp trace plus a request echo.
pub fn cmd_score(req: &ScoreRequest) -> CliResult<AnomalyScoreSeries> {
    let ckpt = Checkpoint::load(&req.checkpoint)?;
    let series = load_csv(&req.data, req.labels, req.header)?;
    let series = select_split(series, req.split, &ckpt)?;
    let scored = score_series(&ckpt, &series, req.criterion)?;
    trace::write_trace(&req.out, &scored)?;
    write_file(&echo_path(&req.out), json(req))?;
    Ok(scored)
}

fn echo_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".echo.json");
    out.with_file_name(name)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRequest {
    pub test_trace: PathBuf,
    pub train_trace: PathBuf,
    pub val_trace: PathBuf,
    /// Threshold ratios; the first one is applied to the written trace.
    pub p_percent: Vec<f64>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub p_percent: f64,
    pub threshold: f64,
    pub flagged_raw: usize,
    #[serde(flatten)]
    pub metrics: EvalResult,
}

/// Thresholds the test trace from the pooled train and validation traces and
/// writes `metrics.json` and `eval_trace.csv`.
pub fn cmd_eval(req: &EvalRequest) -> CliResult<Vec<EvalRow>> {
    if req.p_percent.is_empty() {
        return Err(CliError::Usage("at least one p value is required".into()));
    }
    let test = trace::read_trace(&req.test_trace)?;
    if test.labels.is_none() {
        return Err(CliError::Usage(format!(
            "{} has no label column",
            req.test_trace.display()
        )));
    }
    let train = trace::read_trace(&req.train_trace)?;
    let val = trace::read_trace(&req.val_trace)?;

    let mut rows = Vec::with_capacity(req.p_percent.len());
    let mut first: Option<AnomalyScoreSeries> = None;
    for &p in &req.p_percent {
        let mut t = test.clone();
        let metrics = evaluate(&mut t, &train.scores, &val.scores, p).map_err(|e| match e {
            memto::Error::Config(m) => CliError::Usage(m),
            other => other.into(),
        })?;
        rows.push(EvalRow {
            p_percent: p,
            threshold: t.threshold.expect("threshold set"),
            flagged_raw: t
                .raw_pred
                .as_ref()
                .map_or(0, |r| r.iter().filter(|&&v| v == 1).count()),
            metrics,
        });
        first.get_or_insert(t);
    }
    create_dir(&req.out_dir)?;
    trace::write_trace(
        &req.out_dir.join("eval_trace.csv"),
        first.as_ref().expect("one p value"),
    )?;
    write_file(&req.out_dir.join("metrics.json"), json(&rows))?;
    write_file(&req.out_dir.join("eval_request.json"), json(req))?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub header: bool,
    pub out: PathBuf,
}

/// Mean LSD of normal and abnormal timestamps and their ratio.
pub fn cmd_analyze_lsd(req: &AnalyzeRequest) -> CliResult<LsdReport> {
    let ckpt = Checkpoint::load(&req.checkpoint)?;
    let series = load_csv(&req.data, true, req.header)?;
    let scored = score_series(&ckpt, &series, Criterion::Both)?;
    let labels = series.labels().expect("loaded with labels");
    let report = analyze_lsd(&scored.lsd, labels)?;
    if let Some(dir) = req.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&req.out, json(&report))?;
    write_file(&echo_path(&req.out), json(req))?;
    Ok(report)
}

/// Reads `MEMTO_THREADS` and sizes the global rayon pool accordingly.
pub fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("MEMTO_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!(
            "MEMTO_THREADS must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure thread pool: {e}")))
}

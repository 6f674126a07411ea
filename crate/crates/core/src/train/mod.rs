//! Objective, two-phase training with k-means memory initialization,
//! early stopping and the training report.

mod adam;
pub mod kmeans;
pub mod loss;

pub use adam::Adam;
pub use kmeans::{kmeans, Clusterer, KMeans, KMeansResult, KMeansTrace};
pub use loss::{
    entropy_loss, objective_vars, reconstruction_loss, total_loss, LossMode, ObjectiveVars,
};

use std::time::Instant;

use ndarray::{concatenate, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Phase};
use crate::data::{
    fit_normalizer, normalize, split_train_val, window, RawSeries, SubSeriesBatch, WindowMode,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::model::{Memto, Mode, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub kmeans_sample_frac: f64,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    /// Fraction of the training series used for fitting; the rest validates.
    pub train_ratio: f64,
    pub loss_mode: LossMode,
    /// Train a single phase with random memory.
    pub skip_kmeans: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            lr: 5e-5,
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            kmeans_sample_frac: 0.10,
            kmeans_iters: 100,
            kmeans_tol: 1e-4,
            seed: 0,
            train_ratio: 0.8,
            loss_mode: LossMode::Both,
            skip_kmeans: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be >= 1".into());
        }
        if !(self.kmeans_sample_frac > 0.0 && self.kmeans_sample_frac <= 1.0) {
            return bad(format!(
                "kmeans_sample_frac must lie in (0, 1], got {}",
                self.kmeans_sample_frac
            ));
        }
        if !(self.kmeans_tol >= 0.0) {
            return bad("kmeans_tol must be >= 0".into());
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return bad(format!(
                "train_ratio must lie in (0, 1), got {}",
                self.train_ratio
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: String,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_rec: Vec<f64>,
    pub val_entr: Vec<f64>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub early_stopped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase1: PhaseReport,
    pub phase2: Option<PhaseReport>,
    pub kmeans: Option<KMeansTrace>,
    pub kmeans_points: usize,
    pub train_windows: usize,
    pub val_windows: usize,
}

/// Wall-clock seconds per stage; kept apart from the report so reports
/// stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub phase1_secs: f64,
    pub kmeans_secs: f64,
    pub phase2_secs: f64,
}

impl StageTiming {
    pub fn total(&self) -> f64 {
        self.phase1_secs + self.kmeans_secs + self.phase2_secs
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Final checkpoint (phase 2, or phase 1 when k-means is skipped).
    pub checkpoint: Checkpoint,
    pub phase1: Checkpoint,
    pub report: TrainReport,
    pub timing: StageTiming,
}

/// Normalized train/validation windows ready for training.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub stats: crate::data::NormalizationStats,
    pub train: SubSeriesBatch,
    pub val: SubSeriesBatch,
}

/// Chronological split, z-score fit on the training part, train-mode windowing.
pub fn prepare(series: &RawSeries, window_len: usize, train_ratio: f64) -> Result<PreparedData> {
    let (train, val) = split_train_val(series, train_ratio)?;
    let stats = fit_normalizer(&train)?;
    let train = window(&normalize(&train, &stats)?, window_len, WindowMode::Train)?;
    let val = window(&normalize(&val, &stats)?, window_len, WindowMode::Train)
        .map_err(|e| Error::Data(format!("validation split too short for one window: {e}")))?;
    Ok(PreparedData { stats, train, val })
}

// Offsets separating the random streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 0x5EED_0001;
const STREAM_DROPOUT: u64 = 0x5EED_0002;
const STREAM_SAMPLE: u64 = 0x5EED_0003;
const STREAM_KMEANS: u64 = 0x5EED_0004;

fn stream(seed: u64, offset: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(offset))
}

/// Mean objective terms over windows in eval mode: `(total, rec, entr)`.
pub fn evaluate_loss(model: &Memto, windows: &[Mat], cfg: &TrainConfig) -> Result<(f64, f64, f64)> {
    if windows.is_empty() {
        return Err(Error::Data("no windows to evaluate".into()));
    }
    let per: Vec<Result<(f64, f64)>> = windows
        .par_iter()
        .map(|x| {
            let out = model.forward_eval(x)?;
            let rec = reconstruction_loss(
                std::slice::from_ref(x),
                std::slice::from_ref(&out.reconstruction),
            )?;
            let entr = entropy_loss(std::slice::from_ref(&out.read_weights))?;
            Ok((rec, entr))
        })
        .collect();
    let (mut rec, mut entr) = (0.0, 0.0);
    for r in per {
        let (a, b) = r?;
        rec += a;
        entr += b;
    }
    let n = windows.len() as f64;
    let (rec, entr) = (rec / n, entr / n);
    let total = match cfg.loss_mode {
        LossMode::Both => total_loss(rec, entr, cfg.lambda),
        LossMode::Rec => rec,
        LossMode::Entr => entr,
    };
    Ok((total, rec, entr))
}

/// Scalar losses and gradients for one batch, with the memory write in the graph.
#[derive(Debug)]
pub struct BatchGradients {
    pub total: f64,
    pub rec: f64,
    pub entr: f64,
    /// One entry per model parameter, in [`crate::model::ParamSet`] order.
    pub grads: Vec<Option<Mat>>,
    /// Memory items after the write.
    pub written_memory: Mat,
}

/// Builds the train-mode graph over `batch` and differentiates the objective.
pub fn batch_gradients(
    model: &Memto,
    batch: &[&Mat],
    cfg: &TrainConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<BatchGradients> {
    for x in batch {
        model.check_window(x)?;
    }
    let mut g = Graph::new();
    let pv = model.params().register(&mut g, true);
    let xs: Vec<_> = batch.iter().map(|x| g.constant((*x).clone())).collect();
    let fv = model.build_forward(&mut g, &pv, &xs, Mode::Train, dropout);
    let views: Vec<_> = batch.iter().map(|x| x.view()).collect();
    let target = g.constant(concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?);
    let obj = objective_vars(
        &mut g,
        fv.reconstruction,
        target,
        fv.read_weights,
        batch.len(),
        cfg.lambda,
        cfg.loss_mode,
    );
    let mut grads = g.backward(obj.total);
    let grads = pv.vars().iter().map(|&v| grads.take(v)).collect();
    Ok(BatchGradients {
        total: g.scalar(obj.total),
        rec: g.scalar(obj.rec),
        entr: g.scalar(obj.entr),
        grads,
        written_memory: g.value(fv.written_items.expect("train mode")).clone(),
    })
}

/// Trains one phase with early stopping on validation loss and restores
/// the best epoch's parameters and memory.
pub fn train_phase(
    model: &mut Memto,
    data: &PreparedData,
    cfg: &TrainConfig,
    phase: Phase,
) -> Result<PhaseReport> {
    let name = phase.to_string();
    let salt = match phase {
        Phase::Phase1 => 0,
        Phase::Phase2 => 1_000_003,
    };
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE + salt);
    let mut dropout_rng = stream(cfg.seed, STREAM_DROPOUT + salt);
    let shapes: Vec<_> = model.params().values().iter().map(|v| v.dim()).collect();
    let mut adam = Adam::new(cfg.lr, shapes);

    let mut report = PhaseReport {
        phase: name.clone(),
        best_val_loss: f64::INFINITY,
        ..PhaseReport::default()
    };
    let mut best_state = (model.params().clone(), model.memory().clone());
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Mat> = chunk.iter().map(|&i| &data.train.windows[i]).collect();
            let step = batch_gradients(model, &batch, cfg, Some(&mut dropout_rng))?;
            if !step.total.is_finite() {
                return Err(Error::Divergence {
                    phase: name,
                    epoch,
                    loss: step.total,
                });
            }
            epoch_loss += step.total * batch.len() as f64;
            adam.update(model.params_mut().values_mut(), &step.grads);
            if model
                .params()
                .values()
                .iter()
                .any(|p| p.iter().any(|v| !v.is_finite()))
            {
                return Err(Error::Divergence {
                    phase: name,
                    epoch,
                    loss: f64::NAN,
                });
            }
            model
                .set_memory(step.written_memory)
                .map_err(|_| Error::Divergence {
                    phase: name.clone(),
                    epoch,
                    loss: f64::NAN,
                })?;
        }
        let (val, val_rec, val_entr) = evaluate_loss(model, &data.val.windows, cfg)?;
        if !val.is_finite() {
            return Err(Error::Divergence {
                phase: name,
                epoch,
                loss: val,
            });
        }
        report.train_loss.push(epoch_loss / data.train.len() as f64);
        report.val_loss.push(val);
        report.val_rec.push(val_rec);
        report.val_entr.push(val_entr);
        report.epochs_run = epoch;
        log::info!(
            "{name} epoch {epoch}: train {:.6} val {val:.6}",
            report.train_loss[epoch - 1]
        );

        if val < report.best_val_loss {
            report.best_val_loss = val;
            report.best_epoch = epoch;
            best_state = (model.params().clone(), model.memory().clone());
        } else if epoch - report.best_epoch >= cfg.patience {
            report.early_stopped = true;
            break;
        }
    }

    let (params, memory) = best_state;
    *model.params_mut() = params;
    model.set_memory(memory)?;
    Ok(report)
}

/// Encodes a seeded random sample of windows, clusters the flattened
/// queries into `M` centroids and installs them as the memory items.
/// Gate projections and all other parameters are left as they are.
pub fn init_memory_kmeans(
    model: &mut Memto,
    windows: &SubSeriesBatch,
    cfg: &TrainConfig,
) -> Result<(KMeansResult, usize)> {
    init_memory_with(
        model,
        windows,
        cfg,
        &KMeans {
            max_iters: cfg.kmeans_iters,
            tol: cfg.kmeans_tol,
        },
    )
}

/// [`init_memory_kmeans`] with an arbitrary centroid producer.
pub fn init_memory_with(
    model: &mut Memto,
    windows: &SubSeriesBatch,
    cfg: &TrainConfig,
    clusterer: &dyn Clusterer,
) -> Result<(KMeansResult, usize)> {
    let n = windows.len();
    if n == 0 {
        return Err(Error::Data(
            "no windows to sample for memory initialization".into(),
        ));
    }
    let take = ((cfg.kmeans_sample_frac * n as f64).ceil() as usize).clamp(1, n);
    let mut rng = stream(cfg.seed, STREAM_SAMPLE);
    let mut picked: Vec<usize> = sample(&mut rng, n, take).into_iter().collect();
    picked.sort_unstable();

    let encoded: Vec<Result<Mat>> = picked
        .par_iter()
        .map(|&i| model.encode(&windows.windows[i]))
        .collect();
    let encoded = encoded.into_iter().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = encoded.iter().map(|q| q.view()).collect();
    let points = concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
    let m = model.config().memory_items;
    if points.nrows() < m {
        return Err(Error::Data(format!(
            "only {} queries available for {m} memory items",
            points.nrows()
        )));
    }
    let seed = stream(cfg.seed, STREAM_KMEANS).next_u64_seed();
    let result = clusterer.cluster(&points, m, seed)?;
    model.set_memory(result.centroids.clone())?;
    Ok((result, points.nrows()))
}

trait NextSeed {
    fn next_u64_seed(&mut self) -> u64;
}

impl NextSeed for ChaCha8Rng {
    fn next_u64_seed(&mut self) -> u64 {
        rand::RngCore::next_u64(self)
    }
}

/// Phase 1 from random memory, k-means re-initialization, phase 2.
pub fn train_two_phase(
    series: &RawSeries,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.validate()?;
    if series.channels() != model_cfg.channels {
        return Err(Error::shape(
            format!("{} channels", model_cfg.channels),
            format!("{} channels", series.channels()),
        ));
    }
    let data = prepare(series, model_cfg.window_len, cfg.train_ratio)?;
    let mut model = Memto::new(model_cfg.clone(), cfg.seed.wrapping_add(STREAM_INIT))?;
    let mut timing = StageTiming::default();

    let t0 = Instant::now();
    let phase1_report = train_phase(&mut model, &data, cfg, Phase::Phase1)?;
    timing.phase1_secs = t0.elapsed().as_secs_f64();
    let phase1 = Checkpoint::new(
        model.clone(),
        data.stats.clone(),
        Phase::Phase1,
        Some(cfg.clone()),
    );

    let mut report = TrainReport {
        phase1: phase1_report,
        train_windows: data.train.len(),
        val_windows: data.val.len(),
        ..TrainReport::default()
    };
    if cfg.skip_kmeans {
        return Ok(TrainOutcome {
            checkpoint: phase1.clone(),
            phase1,
            report,
            timing,
        });
    }

    let (checkpoint, phase2_report, kmeans, points, kmeans_secs, phase2_secs) =
        run_phase2(model, &data, cfg)?;
    timing.kmeans_secs = kmeans_secs;
    timing.phase2_secs = phase2_secs;
    report.phase2 = Some(phase2_report);
    report.kmeans = Some(kmeans.trace);
    report.kmeans_points = points;
    Ok(TrainOutcome {
        checkpoint,
        phase1,
        report,
        timing,
    })
}

type Phase2Parts = (Checkpoint, PhaseReport, KMeansResult, usize, f64, f64);

fn run_phase2(mut model: Memto, data: &PreparedData, cfg: &TrainConfig) -> Result<Phase2Parts> {
    let t0 = Instant::now();
    let (kmeans, points) = init_memory_kmeans(&mut model, &data.train, cfg)?;
    let kmeans_secs = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let report = train_phase(&mut model, data, cfg, Phase::Phase2)?;
    let phase2_secs = t1.elapsed().as_secs_f64();
    let ckpt = Checkpoint::new(model, data.stats.clone(), Phase::Phase2, Some(cfg.clone()));
    Ok((ckpt, report, kmeans, points, kmeans_secs, phase2_secs))
}

/// Runs k-means initialization and phase 2 starting from a phase-1 checkpoint.
pub fn resume_phase2(
    phase1: &Checkpoint,
    series: &RawSeries,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, PhaseReport, KMeansTrace)> {
    cfg.validate()?;
    if phase1.phase != Phase::Phase1 {
        return Err(Error::Checkpoint(format!(
            "expected a phase1 checkpoint, found {}",
            phase1.phase
        )));
    }
    let model = phase1.model.clone();
    if series.channels() != model.config().channels {
        return Err(Error::shape(
            format!("{} channels", model.config().channels),
            format!("{} channels", series.channels()),
        ));
    }
    let mut data = prepare(series, model.config().window_len, cfg.train_ratio)?;
    // keep the phase-1 normalization so both phases see identical inputs
    let (train, val) = split_train_val(series, cfg.train_ratio)?;
    data.train = window(
        &normalize(&train, &phase1.norm)?,
        model.config().window_len,
        WindowMode::Train,
    )?;
    data.val = window(
        &normalize(&val, &phase1.norm)?,
        model.config().window_len,
        WindowMode::Train,
    )?;
    data.stats = phase1.norm.clone();
    let (ckpt, report, kmeans, _, _, _) = run_phase2(model, &data, cfg)?;
    Ok((ckpt, report, kmeans.trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn tiny_model(channels: usize) -> ModelConfig {
        ModelConfig {
            window_len: 16,
            channels,
            latent_dim: 8,
            enc_layers: 1,
            enc_heads: 2,
            dec_layers: 2,
            memory_items: 3,
            tau: 0.1,
            dropout: 0.0,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_epochs: 6,
            patience: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn series() -> RawSeries {
        let spec = SyntheticSpec {
            train_len: 1200,
            test_len: 200,
            channels: 2,
            ..SyntheticSpec::default()
        };
        generate_synthetic(&spec).unwrap().train
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for cfg in [
            TrainConfig {
                lambda: -1.0,
                ..tiny_train()
            },
            TrainConfig {
                lr: 0.0,
                ..tiny_train()
            },
            TrainConfig {
                patience: 0,
                ..tiny_train()
            },
            TrainConfig {
                kmeans_sample_frac: 0.0,
                ..tiny_train()
            },
            TrainConfig {
                kmeans_sample_frac: 1.5,
                ..tiny_train()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn two_phase_reports_and_early_stopping() {
        let out = train_two_phase(&series(), &tiny_model(2), &tiny_train()).unwrap();
        let r = &out.report;
        let p2 = r.phase2.as_ref().unwrap();
        for p in [&r.phase1, p2] {
            assert_eq!(p.val_loss.len(), p.epochs_run);
            assert!(p.epochs_run <= p.best_epoch + tiny_train().patience);
            for v in &p.val_loss {
                assert!(p.best_val_loss <= *v);
            }
        }
        assert!(r.kmeans.is_some());
        assert_eq!(out.checkpoint.phase, Phase::Phase2);
        assert_eq!(out.phase1.phase, Phase::Phase1);
    }

    #[test]
    fn restored_model_matches_best_val_loss() {
        let cfg = tiny_train();
        let data = prepare(&series(), 16, cfg.train_ratio).unwrap();
        let mut model = Memto::new(tiny_model(2), 1).unwrap();
        let rep = train_phase(&mut model, &data, &cfg, Phase::Phase1).unwrap();
        let (val, _, _) = evaluate_loss(&model, &data.val.windows, &cfg).unwrap();
        assert_eq!(val, rep.best_val_loss);
    }

    #[test]
    fn kmeans_init_installs_centroids() {
        let cfg = tiny_train();
        let data = prepare(&series(), 16, cfg.train_ratio).unwrap();
        let mut model = Memto::new(tiny_model(2), 1).unwrap();
        let gate_before = model.gate_u().clone();
        let (res, points) = init_memory_kmeans(&mut model, &data.train, &cfg).unwrap();
        assert_eq!(model.memory(), &res.centroids);
        assert_eq!(model.gate_u(), &gate_before);
        let expected = (cfg.kmeans_sample_frac * data.train.len() as f64).ceil() as usize * 16;
        assert_eq!(points, expected);

        let mut again = Memto::new(tiny_model(2), 1).unwrap();
        init_memory_kmeans(&mut again, &data.train, &cfg).unwrap();
        assert_eq!(again.memory(), model.memory());
    }

    #[test]
    fn single_item_full_sample_is_query_mean() {
        let cfg = TrainConfig {
            kmeans_sample_frac: 1.0,
            ..tiny_train()
        };
        let data = prepare(&series(), 16, cfg.train_ratio).unwrap();
        let mcfg = ModelConfig {
            memory_items: 1,
            ..tiny_model(2)
        };
        let mut model = Memto::new(mcfg, 1).unwrap();
        init_memory_kmeans(&mut model, &data.train, &cfg).unwrap();
        let all: Vec<Mat> = data
            .train
            .windows
            .iter()
            .map(|w| model.encode(w).unwrap())
            .collect();
        let views: Vec<_> = all.iter().map(|q| q.view()).collect();
        let mean = concatenate(Axis(0), &views)
            .unwrap()
            .mean_axis(Axis(0))
            .unwrap();
        for (a, b) in model.memory().row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn skip_kmeans_is_single_phase() {
        let cfg = TrainConfig {
            skip_kmeans: true,
            ..tiny_train()
        };
        let out = train_two_phase(&series(), &tiny_model(2), &cfg).unwrap();
        assert!(out.report.phase2.is_none());
        assert_eq!(out.checkpoint.phase, Phase::Phase1);
    }

    #[test]
    fn divergence_is_reported_with_phase_and_epoch() {
        let cfg = TrainConfig {
            lr: 1e300,
            ..tiny_train()
        };
        match train_two_phase(&series(), &tiny_model(2), &cfg) {
            Err(Error::Divergence { phase, epoch, .. }) => {
                assert_eq!(phase, "phase1");
                assert_eq!(epoch, 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        assert!(train_two_phase(&series(), &tiny_model(3), &tiny_train()).is_err());
    }
}

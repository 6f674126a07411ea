//! Bi-dimensional anomaly scoring, thresholding, point adjustment,
//! precision/recall/F1 and the LSD ratio.

use ndarray::{concatenate, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{normalize, window, RawSeries, WindowMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Mat};
use crate::model::{Memto, Mode};

/// Which deviation forms the anomaly score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// `softmax(LSD) ∘ ISD` per window.
    #[default]
    Both,
    Isd,
    Lsd,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Self::Both),
            "isd" => Ok(Self::Isd),
            "lsd" => Ok(Self::Lsd),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected both, isd or lsd)"
            ))),
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Both => "both",
            Self::Isd => "isd",
            Self::Lsd => "lsd",
        })
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each query row to its nearest memory item.
/// Ties go to the lowest item index.
pub fn lsd(queries: &Mat, memory: &Mat) -> Result<Vec<f64>> {
    if memory.nrows() == 0 {
        return Err(Error::Data("memory bank is empty".into()));
    }
    if queries.ncols() != memory.ncols() {
        return Err(Error::shape(
            format!("queries of dim {}", memory.ncols()),
            format!("dim {}", queries.ncols()),
        ));
    }
    Ok(queries
        .rows()
        .into_iter()
        .map(|q| {
            memory
                .rows()
                .into_iter()
                .map(|m| sq_dist(q, m))
                .fold(f64::INFINITY, |best, d| if d < best { d } else { best })
        })
        .collect())
}

/// Index of the nearest memory item for each query, lowest index on ties.
pub fn nearest_items(queries: &Mat, memory: &Mat) -> Vec<usize> {
    queries
        .rows()
        .into_iter()
        .map(|q| {
            let mut best = (0, f64::INFINITY);
            for (i, m) in memory.rows().into_iter().enumerate() {
                let d = sq_dist(q, m);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect()
}

/// Squared reconstruction residual per row.
pub fn isd(x: &Mat, reconstruction: &Mat) -> Result<Vec<f64>> {
    if x.dim() != reconstruction.dim() {
        return Err(Error::shape(
            format!("{:?}", x.dim()),
            format!("{:?}", reconstruction.dim()),
        ));
    }
    Ok(x.rows()
        .into_iter()
        .zip(reconstruction.rows())
        .map(|(a, b)| sq_dist(a, b))
        .collect())
}

/// `softmax(lsd) ∘ isd` over one window's positions, temperature 1.
pub fn anomaly_score(lsd: &[f64], isd: &[f64]) -> Result<Vec<f64>> {
    if lsd.len() != isd.len() {
        return Err(Error::shape(
            format!("{} positions", lsd.len()),
            format!("{}", isd.len()),
        ));
    }
    if lsd.is_empty() {
        return Ok(Vec::new());
    }
    if lsd.iter().chain(isd).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "non-finite deviation in anomaly score".into(),
        ));
    }
    let max = lsd.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = lsd.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Ok(exp.iter().zip(isd).map(|(e, i)| e / z * i).collect())
}

/// Per-window deviations and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowScores {
    pub scores: Vec<f64>,
    pub lsd: Vec<f64>,
    pub isd: Vec<f64>,
}

fn combine(lsd: Vec<f64>, isd: Vec<f64>, criterion: Criterion) -> Result<WindowScores> {
    let scores = match criterion {
        Criterion::Both => anomaly_score(&lsd, &isd)?,
        Criterion::Isd => isd.clone(),
        Criterion::Lsd => lsd.clone(),
    };
    Ok(WindowScores { scores, lsd, isd })
}

/// Scores one normalized window in eval mode.
pub fn score_window(model: &Memto, x: &Mat, criterion: Criterion) -> Result<WindowScores> {
    let out = model.forward_eval(x)?;
    combine(
        lsd(&out.queries, model.memory())?,
        isd(x, &out.reconstruction)?,
        criterion,
    )
}

/// Scores several windows through a single eval-mode graph.
pub fn score_batch(
    model: &Memto,
    windows: &[Mat],
    criterion: Criterion,
) -> Result<Vec<WindowScores>> {
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    for x in windows {
        model.check_window(x)?;
    }
    let mut g = Graph::new();
    let pv = model.params().register(&mut g, false);
    let xs: Vec<_> = windows.iter().map(|x| g.constant(x.clone())).collect();
    let fv = model.build_forward(&mut g, &pv, &xs, Mode::Eval, None);
    let (q, recon) = (g.value(fv.queries), g.value(fv.reconstruction));
    let l = model.config().window_len;
    windows
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let rows = ndarray::s![i * l..(i + 1) * l, ..];
            let q = q.slice(rows).to_owned();
            let r = recon.slice(rows).to_owned();
            combine(lsd(&q, model.memory())?, isd(x, &r)?, criterion)
        })
        .collect()
}

/// Per-timestamp anomaly trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyScoreSeries {
    pub criterion: Criterion,
    pub scores: Vec<f64>,
    pub lsd: Vec<f64>,
    pub isd: Vec<f64>,
    pub threshold: Option<f64>,
    pub raw_pred: Option<Vec<u8>>,
    pub adjusted_pred: Option<Vec<u8>>,
    pub labels: Option<Vec<u8>>,
}

impl AnomalyScoreSeries {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Flags `score > threshold` and point-adjusts against the labels when present.
    pub fn apply_threshold(&mut self, threshold: f64) -> Result<()> {
        let raw: Vec<u8> = self
            .scores
            .iter()
            .map(|&s| u8::from(s > threshold))
            .collect();
        self.adjusted_pred = match &self.labels {
            Some(gt) => Some(point_adjust(&raw, gt)?),
            None => None,
        };
        self.raw_pred = Some(raw);
        self.threshold = Some(threshold);
        Ok(())
    }
}

/// Windows a raw series in score mode using the checkpoint's normalization,
/// scores every window in eval mode and truncates the padding.
pub fn score_series(
    ckpt: &Checkpoint,
    series: &RawSeries,
    criterion: Criterion,
) -> Result<AnomalyScoreSeries> {
    score_series_batched(ckpt, series, criterion, 1)
}

/// [`score_series`] with `batch` windows per forward graph.
pub fn score_series_batched(
    ckpt: &Checkpoint,
    series: &RawSeries,
    criterion: Criterion,
    batch: usize,
) -> Result<AnomalyScoreSeries> {
    let model = &ckpt.model;
    let cfg = model.config();
    if series.channels() != cfg.channels {
        return Err(Error::shape(
            format!("{} channels", cfg.channels),
            format!("{} channels", series.channels()),
        ));
    }
    let windows = window(
        &normalize(series, &ckpt.norm)?,
        cfg.window_len,
        WindowMode::Score,
    )?;
    let chunks: Vec<&[Mat]> = windows.windows.chunks(batch.max(1)).collect();
    let per_chunk: Vec<Result<Vec<WindowScores>>> = chunks
        .par_iter()
        .map(|c| {
            if c.len() == 1 {
                Ok(vec![score_window(model, &c[0], criterion)?])
            } else {
                score_batch(model, c, criterion)
            }
        })
        .collect();
    let mut per_window = Vec::with_capacity(windows.len());
    for c in per_chunk {
        per_window.extend(c?);
    }
    let pick = |f: fn(&WindowScores) -> &Vec<f64>| {
        let v: Vec<Vec<f64>> = per_window.iter().map(|w| f(w).clone()).collect();
        windows.truncate_scores(&v)
    };
    Ok(AnomalyScoreSeries {
        criterion,
        scores: pick(|w| &w.scores)?,
        lsd: pick(|w| &w.lsd)?,
        isd: pick(|w| &w.isd)?,
        threshold: None,
        raw_pred: None,
        adjusted_pred: None,
        labels: series.labels().map(<[u8]>::to_vec),
    })
}

/// Eval-mode queries for every timestamp of a series, padding truncated.
pub fn series_queries(ckpt: &Checkpoint, series: &RawSeries) -> Result<Mat> {
    let cfg = ckpt.model.config();
    let windows = window(
        &normalize(series, &ckpt.norm)?,
        cfg.window_len,
        WindowMode::Score,
    )?;
    let qs: Vec<Result<Mat>> = windows
        .windows
        .par_iter()
        .map(|w| ckpt.model.encode(w))
        .collect();
    let qs = qs.into_iter().collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = qs.iter().map(|q| q.view()).collect();
    let all = concatenate(Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
    Ok(all.slice(ndarray::s![..series.len(), ..]).to_owned())
}

/// Threshold such that points with `score > threshold` are the top-p% of the
/// pooled scores.
///
/// With `k = ⌈p·N/100⌉` the threshold is the pool value at 1-based rank
/// `max(1, N − k)` in ascending order, so at most `k` pool points exceed it
/// and no smaller pool value keeps that bound.
pub fn select_threshold(train_scores: &[f64], val_scores: &[f64], p_percent: f64) -> Result<f64> {
    if !(p_percent > 0.0 && p_percent <= 100.0) {
        return Err(Error::Config(format!(
            "p must lie in (0, 100], got {p_percent}"
        )));
    }
    let mut pool: Vec<f64> = train_scores.iter().chain(val_scores).copied().collect();
    if pool.is_empty() {
        return Err(Error::Data("threshold pool is empty".into()));
    }
    if pool.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "threshold pool contains non-finite scores".into(),
        ));
    }
    pool.sort_by(f64::total_cmp);
    let n = pool.len();
    let k = ((p_percent * n as f64 / 100.0) - 1e-9).ceil().max(0.0) as usize;
    let rank = n.saturating_sub(k).max(1);
    Ok(pool[rank - 1])
}

/// Maximal runs of ones as half-open ranges.
pub fn segments(gt: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &v) in gt.iter().enumerate() {
        match (v != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, gt.len()));
    }
    out
}

/// Marks a whole ground-truth segment as detected when any of its points is.
pub fn point_adjust(pred: &[u8], gt: &[u8]) -> Result<Vec<u8>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            format!("{} labels", gt.len()),
            format!("{} predictions", pred.len()),
        ));
    }
    let mut out = pred.to_vec();
    for (s, e) in segments(gt) {
        if pred[s..e].iter().any(|&p| p != 0) {
            out[s..e].fill(1);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub lsd_ratio: Option<f64>,
}

/// Pointwise precision, recall and F1; undefined ratios are 0.
pub fn prf1(pred: &[u8], gt: &[u8]) -> Result<EvalResult> {
    if pred.len() != gt.len() {
        return Err(Error::shape(
            format!("{} labels", gt.len()),
            format!("{} predictions", pred.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(EvalResult {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        lsd_ratio: None,
    })
}

/// Thresholds `test` at the top-p% of the train+val pool, point-adjusts and scores.
pub fn evaluate(
    test: &mut AnomalyScoreSeries,
    train: &[f64],
    val: &[f64],
    p_percent: f64,
) -> Result<EvalResult> {
    let labels = test
        .labels
        .clone()
        .ok_or_else(|| Error::Data("evaluation needs labels for the test series".into()))?;
    let threshold = select_threshold(train, val, p_percent)?;
    test.apply_threshold(threshold)?;
    prf1(
        test.adjusted_pred.as_ref().expect("labels present"),
        &labels,
    )
}

/// `mean(normal) / mean(abnormal)` of LSD values.
pub fn lsd_ratio_from_values(normal: &[f64], abnormal: &[f64]) -> Result<f64> {
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::Data(format!(
            "LSD ratio needs both classes (normal {}, abnormal {})",
            normal.len(),
            abnormal.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let a = mean(abnormal);
    if a == 0.0 {
        return Err(Error::Numeric("mean abnormal LSD is zero".into()));
    }
    Ok(mean(normal) / a)
}

/// LSD ratio for query sets against a frozen memory bank.
pub fn lsd_ratio(normal_queries: &Mat, abnormal_queries: &Mat, memory: &Mat) -> Result<f64> {
    lsd_ratio_from_values(
        &lsd(normal_queries, memory)?,
        &lsd(abnormal_queries, memory)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsdReport {
    pub normal_count: usize,
    pub abnormal_count: usize,
    pub normal_mean_lsd: f64,
    pub abnormal_mean_lsd: f64,
    pub ratio: f64,
}

/// Partitions per-timestamp LSD by label and reports both means and their ratio.
pub fn analyze_lsd(lsd_values: &[f64], labels: &[u8]) -> Result<LsdReport> {
    if lsd_values.len() != labels.len() {
        return Err(Error::shape(
            format!("{} labels", labels.len()),
            format!("{} LSD values", lsd_values.len()),
        ));
    }
    let (mut normal, mut abnormal) = (Vec::new(), Vec::new());
    for (&v, &l) in lsd_values.iter().zip(labels) {
        if l != 0 {
            abnormal.push(v);
        } else {
            normal.push(v);
        }
    }
    let ratio = lsd_ratio_from_values(&normal, &abnormal)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(LsdReport {
        normal_count: normal.len(),
        abnormal_count: abnormal.len(),
        normal_mean_lsd: mean(&normal),
        abnormal_mean_lsd: mean(&abnormal),
        ratio,
    })
}

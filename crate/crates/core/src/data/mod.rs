//! Series ingestion, z-score normalization, windowing and splitting.

mod synthetic;

pub use synthetic::{
    generate_synthetic, AnomalyKind, InjectedAnomaly, SyntheticData, SyntheticSpec,
};

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Mat;

/// Lower bound applied to every per-channel standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// A `T×n` multivariate series with optional per-timestamp labels (1 = anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    values: Mat,
    labels: Option<Vec<u8>>,
    channel_names: Option<Vec<String>>,
}

impl RawSeries {
    pub fn new(values: Mat, labels: Option<Vec<u8>>) -> Result<Self> {
        let (t, n) = values.dim();
        if t == 0 || n == 0 {
            return Err(Error::Data(format!(
                "series must be non-empty, got {t}×{n}"
            )));
        }
        if let Some((idx, _)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                idx / n,
                idx % n
            )));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::shape(
                    format!("{t} labels"),
                    format!("{} labels", l.len()),
                ));
            }
            if let Some(pos) = l.iter().position(|&v| v > 1) {
                return Err(Error::Data(format!("label at row {pos} is not 0 or 1")));
            }
        }
        Ok(Self {
            values,
            labels,
            channel_names: None,
        })
    }

    pub fn with_channel_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.channels() {
            return Err(Error::shape(
                format!("{} channel names", self.channels()),
                format!("{} channel names", names.len()),
            ));
        }
        self.channel_names = Some(names);
        Ok(self)
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn channel_names(&self) -> Option<&[String]> {
        self.channel_names.as_deref()
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            values: self.values.clone(),
            labels: None,
            channel_names: self.channel_names.clone(),
        }
    }

    /// Rows `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::Data(format!(
                "invalid row range {start}..{end} for series of length {}",
                self.len()
            )));
        }
        Ok(Self {
            values: self.values.slice(s![start..end, ..]).to_owned(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
            channel_names: self.channel_names.clone(),
        })
    }
}

/// Reads a headerless (or `skip_header`) comma-separated file, one row per timestamp.
/// With `has_labels`, the final column is parsed as a 0/1 label.
pub fn load_csv(path: impl AsRef<Path>, has_labels: bool, skip_header: bool) -> Result<RawSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(skip_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let header_offset = usize::from(skip_header);

    for (i, record) in reader.records().enumerate() {
        let row = i + 1 + header_offset;
        let record = record.map_err(|e| Error::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        let fields = record.len();
        match width {
            None => width = Some(fields),
            Some(w) if w != fields => {
                return Err(Error::Parse {
                    row,
                    column: fields.min(w) + 1,
                    message: format!("ragged row: expected {w} fields, found {fields}"),
                })
            }
            _ => {}
        }
        let channels = if has_labels {
            fields.saturating_sub(1)
        } else {
            fields
        };
        if channels == 0 {
            return Err(Error::Parse {
                row,
                column: 1,
                message: "row has no value columns".into(),
            });
        }
        for (c, cell) in record.iter().take(channels).enumerate() {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("cannot parse {cell:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite value {cell:?}"),
                });
            }
            values.push(v);
        }
        if has_labels {
            let cell = &record[channels];
            let label = match cell.parse::<f64>() {
                Ok(0.0) => 0u8,
                Ok(1.0) => 1u8,
                _ => {
                    return Err(Error::Parse {
                        row,
                        column: channels + 1,
                        message: format!("label {cell:?} is not 0 or 1"),
                    })
                }
            };
            labels.push(label);
        }
    }

    let Some(width) = width else {
        return Err(Error::Data(format!("{} contains no rows", path.display())));
    };
    let channels = if has_labels { width - 1 } else { width };
    let rows = values.len() / channels;
    let values =
        Array2::from_shape_vec((rows, channels), values).map_err(|e| Error::Data(e.to_string()))?;
    RawSeries::new(values, has_labels.then_some(labels))
}

/// Writes the series as CSV, appending the label column when present.
pub fn write_csv(series: &RawSeries, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (t, row) in series.values().rows().into_iter().enumerate() {
        let mut line = row
            .iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(labels) = series.labels() {
            line.push(',');
            line.push_str(&labels[t].to_string());
        }
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Population mean and standard deviation per channel, std floored at [`STD_FLOOR`].
pub fn fit_normalizer(train: &RawSeries) -> Result<NormalizationStats> {
    if train.is_empty() {
        return Err(Error::Data(
            "cannot fit normalizer on an empty series".into(),
        ));
    }
    let values = train.values();
    let t = values.nrows() as f64;
    let mean: Vec<f64> = values.sum_axis(Axis(0)).iter().map(|s| s / t).collect();
    let std = values
        .columns()
        .into_iter()
        .zip(&mean)
        .map(|(col, m)| {
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / t;
            var.sqrt().max(STD_FLOOR)
        })
        .collect();
    Ok(NormalizationStats { mean, std })
}

pub fn normalize(series: &RawSeries, stats: &NormalizationStats) -> Result<RawSeries> {
    check_channels(series, stats)?;
    let mut values = series.values().clone();
    for (mut col, (m, s)) in values
        .columns_mut()
        .into_iter()
        .zip(stats.mean.iter().zip(&stats.std))
    {
        col.mapv_inplace(|v| (v - m) / s);
    }
    Ok(RawSeries {
        values,
        labels: series.labels.clone(),
        channel_names: series.channel_names.clone(),
    })
}

pub fn denormalize(series: &RawSeries, stats: &NormalizationStats) -> Result<RawSeries> {
    check_channels(series, stats)?;
    let mut values = series.values().clone();
    for (mut col, (m, s)) in values
        .columns_mut()
        .into_iter()
        .zip(stats.mean.iter().zip(&stats.std))
    {
        col.mapv_inplace(|v| v * s + m);
    }
    Ok(RawSeries {
        values,
        labels: series.labels.clone(),
        channel_names: series.channel_names.clone(),
    })
}

fn check_channels(series: &RawSeries, stats: &NormalizationStats) -> Result<()> {
    if series.channels() != stats.channels() {
        return Err(Error::shape(
            format!("{} channels", stats.channels()),
            format!("{} channels", series.channels()),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Non-overlapping windows; the trailing remainder is dropped.
    Train,
    /// Non-overlapping windows plus one final window padded with the last row.
    Score,
}

/// Fixed-length windows cut from one series.
#[derive(Debug, Clone)]
pub struct SubSeriesBatch {
    pub windows: Vec<Mat>,
    pub origins: Vec<usize>,
    pub window_len: usize,
    /// Rows appended to the final window by padding (score mode only).
    pub pad: usize,
    pub source_len: usize,
}

impl SubSeriesBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Concatenates per-window, per-row values and drops the padding so exactly
    /// one value per source timestamp remains.
    pub fn truncate_scores(&self, per_window: &[Vec<f64>]) -> Result<Vec<f64>> {
        if per_window.len() != self.windows.len() {
            return Err(Error::shape(
                format!("{} windows", self.windows.len()),
                format!("{} windows", per_window.len()),
            ));
        }
        let mut out = Vec::with_capacity(self.windows.len() * self.window_len);
        for w in per_window {
            if w.len() != self.window_len {
                return Err(Error::shape(self.window_len, w.len()));
            }
            out.extend_from_slice(w);
        }
        out.truncate(self.source_len);
        Ok(out)
    }
}

pub fn window(series: &RawSeries, len: usize, mode: WindowMode) -> Result<SubSeriesBatch> {
    if len == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    let t = series.len();
    let full = t / len;
    let remainder = t % len;
    if mode == WindowMode::Train && full == 0 {
        return Err(Error::Data(format!(
            "series of length {t} is shorter than the window length {len}"
        )));
    }
    let values = series.values();
    let mut windows = Vec::with_capacity(full + 1);
    let mut origins = Vec::with_capacity(full + 1);
    for w in 0..full {
        let start = w * len;
        windows.push(values.slice(s![start..start + len, ..]).to_owned());
        origins.push(start);
    }
    let mut pad = 0;
    if mode == WindowMode::Score && remainder != 0 {
        let start = full * len;
        pad = len - remainder;
        let mut win = Mat::zeros((len, series.channels()));
        win.slice_mut(s![..remainder, ..])
            .assign(&values.slice(s![start..t, ..]));
        let last = values.row(t - 1);
        for r in remainder..len {
            win.row_mut(r).assign(&last);
        }
        windows.push(win);
        origins.push(start);
    }
    Ok(SubSeriesBatch {
        windows,
        origins,
        window_len: len,
        pad,
        source_len: t,
    })
}

/// Chronological split: the first `⌊ratio·T⌋` rows train, the rest validate.
pub fn split_train_val(series: &RawSeries, ratio: f64) -> Result<(RawSeries, RawSeries)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie in (0, 1) so both parts are non-empty, got {ratio}"
        )));
    }
    let t = series.len();
    if t < 2 {
        return Err(Error::Data(format!("cannot split a series of length {t}")));
    }
    let cut = ((ratio * t as f64).floor() as usize).clamp(1, t - 1);
    Ok((series.slice(0, cut)?, series.slice(cut, t)?))
}

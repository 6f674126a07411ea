//! Labeled synthetic multivariate series with injected anomalies.
//!
//! Each channel is a mix of two harmonics of a channel-specific base
//! frequency plus a slow component shared across channels and Gaussian
//! noise. The training split is clean; the test split continues the same
//! time axis and carries spikes, level shifts and noisy segments.

use std::str::FromStr;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RawSeries;
use crate::error::{Error, Result};
use crate::graph::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
    SegmentNoise,
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "spike" => Ok(Self::Spike),
            "level-shift" => Ok(Self::LevelShift),
            "segment-noise" => Ok(Self::SegmentNoise),
            other => Err(Error::Config(format!(
                "unknown anomaly kind {other:?} (expected spike, level-shift or segment-noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_len: usize,
    pub test_len: usize,
    pub channels: usize,
    /// Cycles per timestamp, one per channel. Empty means "draw from the seed".
    #[serde(default)]
    pub base_frequencies: Vec<f64>,
    pub noise_std: f64,
    pub anomaly_ratio: f64,
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_len: 20_000,
            test_len: 10_000,
            channels: 8,
            base_frequencies: Vec::new(),
            noise_std: 0.1,
            anomaly_ratio: 0.01,
            anomaly_kinds: vec![
                AnomalyKind::Spike,
                AnomalyKind::LevelShift,
                AnomalyKind::SegmentNoise,
            ],
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.anomaly_ratio > 0.0 && self.anomaly_ratio < 1.0) {
            return Err(Error::Config(format!(
                "anomaly_ratio must lie in (0, 1), got {}",
                self.anomaly_ratio
            )));
        }
        if self.train_len == 0 || self.test_len < 3 || self.channels == 0 {
            return Err(Error::Config(
                "train_len, channels must be >= 1 and test_len >= 3".into(),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "noise_std must be >= 0, got {}",
                self.noise_std
            )));
        }
        if self.anomaly_kinds.is_empty() {
            return Err(Error::Config(
                "at least one anomaly kind is required".into(),
            ));
        }
        if !self.base_frequencies.is_empty() && self.base_frequencies.len() != self.channels {
            return Err(Error::Config(format!(
                "{} base frequencies given for {} channels",
                self.base_frequencies.len(),
                self.channels
            )));
        }
        // gaps of one normal point keep segments separate; keep well clear of that limit
        if self.anomaly_ratio > 0.3 {
            return Err(Error::Config(format!(
                "anomaly_ratio {} too dense to place separated segments",
                self.anomaly_ratio
            )));
        }
        Ok(())
    }

    /// Number of labeled test timestamps the generator will produce.
    pub fn target_anomalies(&self) -> usize {
        ((self.anomaly_ratio * self.test_len as f64).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectedAnomaly {
    pub kind: AnomalyKind,
    pub start: usize,
    pub len: usize,
    pub channels: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: RawSeries,
    /// Test split with labels.
    pub test: RawSeries,
    /// Test signal before noise and anomalies.
    pub clean_test: Mat,
    pub injected: Vec<InjectedAnomaly>,
}

const MIN_SEGMENT: usize = 8;
const MAX_SEGMENT: usize = 24;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.channels;

    let freqs: Vec<f64> = if spec.base_frequencies.is_empty() {
        (0..n).map(|_| 1.0 / rng.random_range(20.0..80.0)).collect()
    } else {
        spec.base_frequencies.clone()
    };
    let phases: Vec<(f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let amps: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.2)).collect();
    let coupling: Vec<f64> = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let shared_freq = 1.0 / rng.random_range(300.0..600.0);

    let total = spec.train_len + spec.test_len;
    let clean = Array2::from_shape_fn((total, n), |(t, c)| {
        let t = t as f64;
        let tau = std::f64::consts::TAU;
        amps[c] * (tau * freqs[c] * t + phases[c].0).sin()
            + 0.5 * amps[c] * (2.0 * tau * freqs[c] * t + phases[c].1).sin()
            + coupling[c] * (tau * shared_freq * t).sin()
    });

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut noisy = clean.clone();
    noisy.mapv_inplace(|v| v + noise.sample(&mut rng));

    let train_values = noisy.slice(ndarray::s![..spec.train_len, ..]).to_owned();
    let mut test_values = noisy.slice(ndarray::s![spec.train_len.., ..]).to_owned();
    let clean_test = clean.slice(ndarray::s![spec.train_len.., ..]).to_owned();

    let mut labels = vec![0u8; spec.test_len];
    let target = spec.target_anomalies();
    let mut placed = 0;
    let mut injected = Vec::new();

    while placed < target {
        let kind = spec.anomaly_kinds[rng.random_range(0..spec.anomaly_kinds.len())];
        let want = match kind {
            AnomalyKind::Spike => 1,
            _ => rng.random_range(MIN_SEGMENT..=MAX_SEGMENT),
        };
        let len = want.min(target - placed);
        let start = place_segment(&mut rng, &labels, len)?;

        let k = rng.random_range(1..=(n / 2).max(1));
        let mut affected: Vec<usize> = sample(&mut rng, n, k).into_iter().collect();
        affected.sort_unstable();

        for &c in &affected {
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            match kind {
                AnomalyKind::Spike => {
                    let mag = rng.random_range(3.0..5.0f64).max(6.0 * spec.noise_std);
                    test_values[[start, c]] = clean_test[[start, c]] + sign * mag;
                }
                AnomalyKind::LevelShift => {
                    let offset = sign * rng.random_range(1.5..3.0f64).max(6.0 * spec.noise_std);
                    for t in start..start + len {
                        test_values[[t, c]] += offset;
                    }
                }
                AnomalyKind::SegmentNoise => {
                    let std = rng.random_range(0.8..1.5f64).max(6.0 * spec.noise_std);
                    let burst = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                    for t in start..start + len {
                        test_values[[t, c]] += burst.sample(&mut rng);
                    }
                }
            }
        }
        labels[start..start + len].iter_mut().for_each(|l| *l = 1);
        placed += len;
        injected.push(InjectedAnomaly {
            kind,
            start,
            len,
            channels: affected,
        });
    }
    injected.sort_by_key(|a| a.start);

    Ok(SyntheticData {
        train: RawSeries::new(train_values, None)?,
        test: RawSeries::new(test_values, Some(labels))?,
        clean_test,
        injected,
    })
}

/// Picks a start so the segment and one timestamp on either side are unlabeled.
fn place_segment(rng: &mut ChaCha8Rng, labels: &[u8], len: usize) -> Result<usize> {
    let t = labels.len();
    if len + 2 > t {
        return Err(Error::Config(format!(
            "segment of length {len} does not fit in {t} rows"
        )));
    }
    for _ in 0..10_000 {
        let start = rng.random_range(1..t - len);
        let lo = start - 1;
        let hi = (start + len + 1).min(t);
        if labels[lo..hi].iter().all(|&l| l == 0) {
            return Ok(start);
        }
    }
    Err(Error::Config(
        "could not place anomaly segments; lower anomaly_ratio".into(),
    ))
}

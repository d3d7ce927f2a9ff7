//! Dataset loading, train-only normalization, sliding windows, channel
//! exclusion and the synthetic three-sine generator.

use std::path::Path;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::spectral::csv_err;
use crate::util::stream_rng;

/// A multivariate series stored time-major: `values[t * channels + d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub channels: Vec<String>,
    pub values: Vec<f64>,
    pub frequency: Option<String>,
}

impl RawSeries {
    pub fn new(channels: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::invalid("a series needs at least one channel"));
        }
        if !values.len().is_multiple_of(channels.len()) {
            return Err(Error::invalid(format!(
                "{} values do not fill rows of {} channels",
                values.len(),
                channels.len()
            )));
        }
        Ok(Self {
            channels,
            values,
            frequency: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.channels.len()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    /// `(steps, channels)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.steps(), self.channel_count())
    }

    pub fn channel(&self, d: usize) -> Vec<f64> {
        let dim = self.channel_count();
        self.values.iter().skip(d).step_by(dim).copied().collect()
    }
}

/// Reads a CSV whose first column is a timestamp and whose remaining
/// columns are numeric channels. The timestamp is kept out of the model.
pub fn load_csv(path: &Path) -> Result<RawSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(Error::Format {
            path: path.into(),
            message: "expected a timestamp column followed by at least one channel".into(),
        });
    }
    let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let width = header.len();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let row = i + 2;
        let record = record.map_err(|e| csv_err(path, e))?;
        if record.len() != width {
            return Err(Error::Parse {
                row,
                column: record.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: if cell.is_empty() {
                    "missing value".to_string()
                } else {
                    format!("`{cell}` is not a number")
                },
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite value `{cell}`"),
                });
            }
            values.push(v);
        }
    }
    RawSeries::new(channels, values)
}

/// A channel addressed by position or by header name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChannelRef {
    Index(usize),
    Name(String),
}

impl std::str::FromStr for ChannelRef {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s.trim().parse::<usize>() {
            Ok(i) => ChannelRef::Index(i),
            Err(_) => ChannelRef::Name(s.trim().to_string()),
        })
    }
}

/// Drops the listed channels, keeping the order of the rest.
pub fn exclude_channels(rs: &RawSeries, drop: &[ChannelRef]) -> Result<RawSeries> {
    let dim = rs.channel_count();
    let mut removed = vec![false; dim];
    for r in drop {
        let idx = match r {
            ChannelRef::Index(i) if *i < dim => *i,
            ChannelRef::Index(i) => {
                return Err(Error::invalid(format!(
                    "channel index {i} out of range for {dim} channels"
                )))
            }
            ChannelRef::Name(n) => rs
                .channels
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::invalid(format!("unknown channel `{n}`")))?,
        };
        removed[idx] = true;
    }
    if removed.iter().all(|&r| r) {
        return Err(Error::invalid("cannot exclude every channel"));
    }
    let keep: Vec<usize> = (0..dim).filter(|&d| !removed[d]).collect();
    let values = rs
        .values
        .chunks(dim)
        .flat_map(|row| keep.iter().map(move |&d| row[d]))
        .collect();
    Ok(RawSeries {
        channels: keep.iter().map(|&d| rs.channels[d].clone()).collect(),
        values,
        frequency: rs.frequency.clone(),
    })
}

/// Chronological train/validation/test partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum SplitSpec {
    /// Fractions of the series length; the test segment takes the remainder.
    Ratios { train: f64, val: f64 },
    /// Explicit end indices (exclusive) of the train and validation segments.
    Indices { train_end: usize, val_end: usize },
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl SplitSpec {
    /// ETT-family protocol: 60/20/20.
    pub fn ett() -> Self {
        SplitSpec::Ratios {
            train: 0.6,
            val: 0.2,
        }
    }

    /// Protocol for the other benchmarks: 70/10/20.
    pub fn standard() -> Self {
        SplitSpec::Ratios {
            train: 0.7,
            val: 0.1,
        }
    }

    /// Segment boundaries `[train, val, test]` as half-open ranges.
    pub fn segments(&self, steps: usize) -> Result<[(usize, usize); 3]> {
        let (a, b) = match *self {
            SplitSpec::Ratios { train, val } => {
                let ok = |f: f64| f.is_finite() && f > 0.0;
                if !ok(train) || !ok(val) || train + val >= 1.0 {
                    return Err(Error::invalid(format!(
                        "split fractions train={train}, val={val} must be positive and sum below 1"
                    )));
                }
                let a = (steps as f64 * train).round() as usize;
                let b = (steps as f64 * (train + val)).round() as usize;
                (a, b)
            }
            SplitSpec::Indices { train_end, val_end } => (train_end, val_end),
        };
        if !(0 < a && a < b && b < steps) {
            return Err(Error::InsufficientData(format!(
                "split boundaries {a}, {b} do not partition {steps} steps"
            )));
        }
        Ok([(0, a), (a, b), (b, steps)])
    }
}

/// Per-channel statistics of the training segment (population std).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_rows(values: &[f64], channels: usize) -> Self {
        let n = (values.len() / channels) as f64;
        let mut mean = vec![0.0; channels];
        for row in values.chunks(channels) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; channels];
        for row in values.chunks(channels) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    log::warn!("constant channel in training segment; leaving it unscaled");
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        let dim = self.mean.len();
        values
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % dim]) / self.std[i % dim])
            .collect()
    }
}

/// One `(lookback, horizon)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    /// `[channels, lookback]`.
    pub input: Tensor,
    /// `[channels, horizon]`.
    pub target: Tensor,
    /// Start of the input within the full series.
    pub origin: usize,
}

/// All sliding windows of one normalized segment.
#[derive(Clone, Debug)]
pub struct WindowStream {
    name: &'static str,
    values: Arc<Vec<f64>>,
    channels: usize,
    offset: usize,
    lookback: usize,
    horizon: usize,
    count: usize,
}

impl WindowStream {
    pub fn name(&self) -> &str {
        self.name
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Normalized segment values, time-major.
    pub fn segment(&self) -> &[f64] {
        &self.values
    }

    fn fill(&self, start: usize, len: usize, out: &mut Vec<f64>) {
        let dim = self.channels;
        for d in 0..dim {
            out.extend((start..start + len).map(|t| self.values[t * dim + d]));
        }
    }

    pub fn get(&self, i: usize) -> Option<WindowSample> {
        if i >= self.count {
            return None;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        self.fill(i, self.lookback, &mut x);
        self.fill(i + self.lookback, self.horizon, &mut y);
        Some(WindowSample {
            input: Tensor::new(vec![self.channels, self.lookback], x).ok()?,
            target: Tensor::new(vec![self.channels, self.horizon], y).ok()?,
            origin: self.offset + i,
        })
    }

    /// Stacks the listed windows into `[batch, channels, lookback]` inputs
    /// and `[batch, channels, horizon]` targets.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut x = Vec::with_capacity(indices.len() * self.channels * self.lookback);
        let mut y = Vec::with_capacity(indices.len() * self.channels * self.horizon);
        for &i in indices {
            if i >= self.count {
                return Err(Error::invalid(format!(
                    "window {i} out of range for the {} segment ({} windows)",
                    self.name, self.count
                )));
            }
            self.fill(i, self.lookback, &mut x);
            self.fill(i + self.lookback, self.horizon, &mut y);
        }
        let b = indices.len();
        Ok((
            Tensor::new(vec![b, self.channels, self.lookback], x)?,
            Tensor::new(vec![b, self.channels, self.horizon], y)?,
        ))
    }
}

/// Window streams for the three segments plus the statistics used.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: WindowStream,
    pub val: WindowStream,
    pub test: WindowStream,
    pub stats: NormStats,
}

pub fn window_count(segment: usize, lookback: usize, horizon: usize) -> usize {
    (segment + 1).saturating_sub(lookback + horizon)
}

/// Normalizes with train-segment statistics and cuts every valid window of
/// each segment. Segments do not overlap, so no window crosses a boundary.
pub fn make_windows(
    rs: &RawSeries,
    split: &SplitSpec,
    lookback: usize,
    horizon: usize,
) -> Result<Splits> {
    if lookback == 0 || horizon == 0 {
        return Err(Error::invalid("lookback and horizon must be positive"));
    }
    let dim = rs.channel_count();
    let segs = split.segments(rs.steps())?;
    let stats = NormStats::from_rows(&rs.values[..segs[0].1 * dim], dim);
    let names = ["train", "validation", "test"];
    let mut streams = Vec::with_capacity(3);
    for (&(a, b), name) in segs.iter().zip(names) {
        let count = window_count(b - a, lookback, horizon);
        if count == 0 {
            return Err(Error::InsufficientData(format!(
                "{name} segment has {} steps, fewer than lookback + horizon = {}",
                b - a,
                lookback + horizon
            )));
        }
        streams.push(WindowStream {
            name,
            values: Arc::new(stats.apply(&rs.values[a * dim..b * dim])),
            channels: dim,
            offset: a,
            lookback,
            horizon,
            count,
        });
    }
    let test = streams.pop().unwrap();
    let val = streams.pop().unwrap();
    let train = streams.pop().unwrap();
    Ok(Splits {
        train,
        val,
        test,
        stats,
    })
}

/// Windows over a whole (already prepared) series, without normalization.
pub fn windows_of(rs: &RawSeries, lookback: usize, horizon: usize) -> Result<WindowStream> {
    let count = window_count(rs.steps(), lookback, horizon);
    if count == 0 {
        return Err(Error::invalid(format!(
            "series has {} steps, fewer than lookback + horizon = {}",
            rs.steps(),
            lookback + horizon
        )));
    }
    Ok(WindowStream {
        name: "series",
        values: Arc::new(rs.values.clone()),
        channels: rs.channel_count(),
        offset: 0,
        lookback,
        horizon,
        count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SineComponent {
    pub amplitude: f64,
    /// Cycles per sample.
    pub frequency: f64,
    #[serde(default)]
    pub phase: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub components: Vec<SineComponent>,
    pub length: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let c = |amplitude, cycles: f64| SineComponent {
            amplitude,
            frequency: cycles / 96.0,
            phase: 0.0,
        };
        Self {
            components: vec![c(1.0, 2.0), c(0.6, 10.0), c(0.4, 30.0)],
            length: 2000,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.length == 0 {
            return Err(Error::invalid(
                "synthetic spec needs components and a length",
            ));
        }
        for c in &self.components {
            if !(c.frequency > 0.0 && c.frequency < 0.5) {
                return Err(Error::invalid(format!(
                    "frequency {} cycles/sample must lie in (0, 0.5)",
                    c.frequency
                )));
            }
        }
        if self
            .components
            .windows(2)
            .any(|p| p[0].frequency >= p[1].frequency)
        {
            return Err(Error::invalid(
                "component frequencies must be strictly increasing",
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!(
                "noise level {} is invalid",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Single-channel sum of sines plus optional Gaussian noise.
pub fn synth_three_sine(spec: &SyntheticSpec) -> Result<RawSeries> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, "synthetic.noise");
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let tau = std::f64::consts::TAU;
    let values = (0..spec.length)
        .map(|t| {
            let clean: f64 = spec
                .components
                .iter()
                .map(|c| c.amplitude * (tau * c.frequency * t as f64 + c.phase).sin())
                .sum();
            if spec.noise > 0.0 {
                clean + noise.sample(&mut rng)
            } else {
                clean
            }
        })
        .collect();
    let mut rs = RawSeries::new(vec!["value".into()], values)?;
    rs.frequency = Some("synthetic".into());
    Ok(rs)
}

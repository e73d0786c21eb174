//! Station data handling: CSV ingestion with hard validation, contiguous
//! train/validation/test splitting, train-fitted standardization, and
//! leakage-free sliding-window construction.
//!
//! Windows follow the forecast-availability alignment: the PV column of an
//! input window holds the L most recent measurements, while the five weather
//! columns lead it by T steps, so the last T weather rows describe the day
//! being forecast. The target is the T PV values immediately after the PV
//! history. Nothing in the input ever reads PV at or beyond the first target
//! step.

pub mod synth;

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use chrono::{NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Fixed channel layout of a station file, PV power first.
pub const CHANNEL_NAMES: [&str; 6] = [
    "pv_power",
    "radiation",
    "temperature",
    "humidity",
    "wind_speed",
    "surface_pressure",
];
pub const CHANNELS: usize = 6;
/// Sampling interval between consecutive rows.
pub const STEP_MINUTES: i64 = 15;
/// Rows per day at the 15-minute cadence.
pub const STEPS_PER_DAY: usize = 96;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header mismatch: expected columns {expected:?}, missing {missing:?}")]
    Schema {
        expected: Vec<String>,
        missing: Vec<String>,
    },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("timestamp gap at {timestamp}: rows must advance by exactly {STEP_MINUTES} minutes")]
    Gap { timestamp: String },
    #[error("row {row}: pv_power {value} outside [0, {capacity}]")]
    CapacityViolation { row: usize, value: f64, capacity: f64 },
    #[error("row {row}, column {column}: value is not finite")]
    NonFinite { row: usize, column: String },
    #[error("capacity must be positive, got {0}")]
    BadCapacity(f64),
    #[error("frame has {len} rows but windows of L={l}, T={t} need at least {}", l + t)]
    TooShort { len: usize, l: usize, t: usize },
    #[error("standardizer used before fitting")]
    Unfitted,
    #[error("frame is empty")]
    Empty,
}

pub type Result<T> = std::result::Result<T, DataError>;

// ── SeriesFrame ──────────────────────────────────────────────────────

/// A validated station series: equally spaced timestamps and a time × C
/// value matrix, with the installed capacity used by the accuracy metric.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesFrame {
    timestamps: Vec<NaiveDateTime>,
    /// Row-major n × CHANNELS.
    values: Vec<f64>,
    capacity: f64,
}

impl SeriesFrame {
    /// Wraps raw parts without validation; callers that construct frames
    /// from unchecked input must run [`validate`](Self::validate).
    pub fn from_parts(
        timestamps: Vec<NaiveDateTime>,
        values: Vec<f64>,
        capacity: f64,
    ) -> Result<Self> {
        if timestamps.is_empty() {
            return Err(DataError::Empty);
        }
        if values.len() != timestamps.len() * CHANNELS {
            return Err(DataError::Parse {
                row: 0,
                message: format!(
                    "value buffer holds {} floats for {} rows of {CHANNELS} channels",
                    values.len(),
                    timestamps.len()
                ),
            });
        }
        Ok(SeriesFrame {
            timestamps,
            values,
            capacity,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.values[row * CHANNELS + channel]
    }

    pub fn pv(&self, row: usize) -> f64 {
        self.value(row, 0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Checks the frame invariants: positive capacity, gapless 15-minute
    /// timestamps, finite values, PV within [0, capacity].
    pub fn validate(&self) -> Result<()> {
        if !(self.capacity > 0.0) {
            return Err(DataError::BadCapacity(self.capacity));
        }
        let step = TimeDelta::minutes(STEP_MINUTES);
        for (i, pair) in self.timestamps.windows(2).enumerate() {
            if pair[1] - pair[0] != step {
                return Err(DataError::Gap {
                    timestamp: pair[1].format(TIMESTAMP_FORMAT).to_string(),
                });
            }
            let _ = i;
        }
        for row in 0..self.len() {
            for (ch, name) in CHANNEL_NAMES.iter().enumerate() {
                let v = self.value(row, ch);
                if !v.is_finite() {
                    return Err(DataError::NonFinite {
                        row: row + 1,
                        column: name.to_string(),
                    });
                }
            }
            let pv = self.pv(row);
            if pv < 0.0 || pv > self.capacity {
                return Err(DataError::CapacityViolation {
                    row: row + 1,
                    value: pv,
                    capacity: self.capacity,
                });
            }
        }
        Ok(())
    }

    /// Copy of rows `range` as a standalone frame.
    pub fn slice_rows(&self, range: Range<usize>) -> SeriesFrame {
        SeriesFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values[range.start * CHANNELS..range.end * CHANNELS].to_vec(),
            capacity: self.capacity,
        }
    }

    /// Writes the frame in the station CSV schema with full-precision floats.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(DataError::Csv)?;
        let mut header = vec!["timestamp".to_string()];
        header.extend(CHANNEL_NAMES.iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        let mut field = String::new();
        for row in 0..self.len() {
            let mut record = Vec::with_capacity(1 + CHANNELS);
            record.push(self.timestamps[row].format(TIMESTAMP_FORMAT).to_string());
            for ch in 0..CHANNELS {
                field.clear();
                write!(field, "{}", self.value(row, ch)).expect("write to string");
                record.push(field.clone());
            }
            w.write_record(&record)?;
        }
        w.flush().map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(())
    }
}

/// Parses and validates a station CSV. The installed capacity is supplied by
/// the caller (it is not part of the file format).
pub fn load_csv(path: &Path, capacity: f64) -> Result<SeriesFrame> {
    if !(capacity > 0.0) {
        return Err(DataError::BadCapacity(capacity));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(DataError::Csv)?;

    let headers = reader.headers()?.clone();
    let expected: Vec<String> = std::iter::once("timestamp")
        .chain(CHANNEL_NAMES)
        .map(str::to_string)
        .collect();
    let got: Vec<&str> = headers.iter().collect();
    if got != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        let missing = expected
            .iter()
            .filter(|e| !got.contains(&e.as_str()))
            .cloned()
            .collect();
        return Err(DataError::Schema { expected, missing });
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != 1 + CHANNELS {
            return Err(DataError::Parse {
                row,
                message: format!("expected {} fields, got {}", 1 + CHANNELS, record.len()),
            });
        }
        let ts = NaiveDateTime::parse_from_str(&record[0], TIMESTAMP_FORMAT).map_err(|e| {
            DataError::Parse {
                row,
                message: format!("bad timestamp {:?}: {e}", &record[0]),
            }
        })?;
        timestamps.push(ts);
        for ch in 0..CHANNELS {
            let v: f64 = record[1 + ch].parse().map_err(|e| DataError::Parse {
                row,
                message: format!("bad {} value {:?}: {e}", CHANNEL_NAMES[ch], &record[1 + ch]),
            })?;
            values.push(v);
        }
    }
    let frame = SeriesFrame::from_parts(timestamps, values, capacity)?;
    frame.validate()?;
    Ok(frame)
}

// ── Contiguous splits ────────────────────────────────────────────────

/// Contiguous train/validation/test row ranges; never shuffled across the
/// boundary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Split {
    /// 80/10/10 by rows; the test range absorbs rounding.
    pub fn standard(n: usize) -> Split {
        Split::with_ratios(n, 0.8, 0.1)
    }

    pub fn with_ratios(n: usize, train: f64, val: f64) -> Split {
        assert!(train > 0.0 && val >= 0.0 && train + val < 1.0);
        let train_len = (n as f64 * train).floor() as usize;
        let val_len = (n as f64 * val).floor() as usize;
        Split {
            train: 0..train_len,
            val: train_len..train_len + val_len,
            test: train_len + val_len..n,
        }
    }
}

// ── Standardization ──────────────────────────────────────────────────

/// Per-channel z-scoring with statistics taken from the training rows only.
/// Channels with zero spread are clamped to unit scale and recorded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Channels whose training std was ~0 and was clamped to 1.
    clamped: Vec<usize>,
    fitted: bool,
}

impl Standardizer {
    pub fn new_unfitted() -> Self {
        Standardizer {
            mean: vec![0.0; CHANNELS],
            std: vec![1.0; CHANNELS],
            clamped: Vec::new(),
            fitted: false,
        }
    }

    /// Fits per-channel mean and population std over `rows` of `frame`.
    pub fn fit(frame: &SeriesFrame, rows: Range<usize>) -> Self {
        assert!(rows.end <= frame.len() && !rows.is_empty(), "nonempty in-bounds fit range");
        let n = rows.len() as f64;
        let mut mean = vec![0.0; CHANNELS];
        let mut std = vec![0.0; CHANNELS];
        let mut clamped = Vec::new();
        for ch in 0..CHANNELS {
            let mut s = 0.0;
            for row in rows.clone() {
                s += frame.value(row, ch);
            }
            mean[ch] = s / n;
            let mut v = 0.0;
            for row in rows.clone() {
                let d = frame.value(row, ch) - mean[ch];
                v += d * d;
            }
            let sd = (v / n).sqrt();
            if sd < 1e-12 {
                clamped.push(ch);
                std[ch] = 1.0;
            } else {
                std[ch] = sd;
            }
        }
        Standardizer {
            mean,
            std,
            clamped,
            fitted: true,
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    pub fn clamped_channels(&self) -> &[usize] {
        &self.clamped
    }

    pub fn mean(&self, channel: usize) -> f64 {
        self.mean[channel]
    }

    pub fn std(&self, channel: usize) -> f64 {
        self.std[channel]
    }

    /// z-scores every channel of `frame` with the fitted statistics.
    pub fn apply(&self, frame: &SeriesFrame) -> Result<SeriesFrame> {
        if !self.fitted {
            return Err(DataError::Unfitted);
        }
        let mut values = Vec::with_capacity(frame.values.len());
        for row in 0..frame.len() {
            for ch in 0..CHANNELS {
                values.push((frame.value(row, ch) - self.mean[ch]) / self.std[ch]);
            }
        }
        Ok(SeriesFrame {
            timestamps: frame.timestamps.clone(),
            values,
            capacity: frame.capacity,
        })
    }

    /// Maps standardized values of one channel back to original units.
    pub fn invert_channel(&self, channel: usize, z: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(DataError::Unfitted);
        }
        Ok(z
            .iter()
            .map(|&v| v * self.std[channel] + self.mean[channel])
            .collect())
    }

    pub fn apply_channel(&self, channel: usize, x: &[f64]) -> Result<Vec<f64>> {
        if !self.fitted {
            return Err(DataError::Unfitted);
        }
        Ok(x
            .iter()
            .map(|&v| (v - self.mean[channel]) / self.std[channel])
            .collect())
    }
}

// ── Windows ──────────────────────────────────────────────────────────

/// One training/evaluation sample. `h` is the L×C input (PV history plus
/// T-led weather); `g` is the length-T PV target in the frame's units;
/// `start_index` is the offset of the first PV history row in the source
/// frame.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub h: Tensor,
    pub g: Vec<f64>,
    pub start_index: usize,
}

/// Builds the window starting at PV-history row `s`. Requires
/// `s + l + t <= frame.len()`.
pub fn window_at(frame: &SeriesFrame, s: usize, l: usize, t: usize) -> WindowSample {
    debug_assert!(s + l + t <= frame.len());
    let mut h = vec![0.0; l * CHANNELS];
    for i in 0..l {
        h[i * CHANNELS] = frame.pv(s + i);
        for ch in 1..CHANNELS {
            // Weather leads by T: the last T rows are the forecast day.
            h[i * CHANNELS + ch] = frame.value(s + t + i, ch);
        }
    }
    let g = (0..t).map(|j| frame.pv(s + l + j)).collect();
    WindowSample {
        h: Tensor::matrix(l, CHANNELS, h).expect("window shape"),
        g,
        start_index: s,
    }
}

/// Sliding windows at offsets 0, stride, 2·stride, …;
/// count = floor((N − L − T)/stride) + 1.
pub fn make_windows(
    frame: &SeriesFrame,
    l: usize,
    t: usize,
    stride: usize,
) -> Result<Vec<WindowSample>> {
    assert!(stride >= 1, "stride must be at least 1");
    let n = frame.len();
    if n < l + t {
        return Err(DataError::TooShort { len: n, l, t });
    }
    Ok((0..=n - l - t)
        .step_by(stride)
        .map(|s| window_at(frame, s, l, t))
        .collect())
}

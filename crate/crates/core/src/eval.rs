//! Original-scale evaluation: MSE and capacity-normalized accuracy, the
//! persistence and ridge-regression baselines, day-aligned test harness,
//! variant experiment grids, and plot-data export.
//!
//! The contract throughout: training loss lives in standardized space,
//! metrics live in original units, and the two never mix. Forecasts are
//! produced from standardized inputs and inverted through the train-fitted
//! standardizer before scoring; actuals are read from the raw frame.

use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::data::{
    make_windows, window_at, DataError, SeriesFrame, Split, Standardizer, WindowSample,
    STEPS_PER_DAY,
};
use crate::model::{ModelConfig, ModelError, PvClient, VariantFlags};
use crate::tensor::Tensor;
use crate::training::{train, TrainConfig, TrainError, TrainLog};

/// Ridge regularization for the linear-regression baseline.
pub const RIDGE_LAMBDA: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("series length mismatch: actual has {actual}, forecast has {forecast}")]
    Length { actual: usize, forecast: usize },
    #[error("cannot score an empty series")]
    Empty,
    #[error("capacity must be positive, got {0}")]
    BadCapacity(f64),
    #[error("ridge lambda must be positive, got {0}")]
    BadLambda(f64),
    #[error("normal equations are singular")]
    Singular,
    #[error("insufficient data: {0}")]
    Insufficient(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

// ── Metrics ──────────────────────────────────────────────────────────

fn check_pair(actual: &[f64], forecast: &[f64]) -> Result<()> {
    if actual.is_empty() {
        return Err(EvalError::Empty);
    }
    if actual.len() != forecast.len() {
        return Err(EvalError::Length {
            actual: actual.len(),
            forecast: forecast.len(),
        });
    }
    Ok(())
}

/// Capacity-normalized accuracy: `1 − √(Σ(G−P)²) / (Cap·√n)`, i.e.
/// `1 − RMSE/Cap`. At most 1, with equality exactly for a perfect forecast.
pub fn accuracy(actual: &[f64], forecast: &[f64], cap: f64) -> Result<f64> {
    check_pair(actual, forecast)?;
    if !(cap > 0.0) {
        return Err(EvalError::BadCapacity(cap));
    }
    let sse: f64 = actual
        .iter()
        .zip(forecast)
        .map(|(&g, &p)| (g - p) * (g - p))
        .sum();
    Ok(1.0 - sse.sqrt() / (cap * (actual.len() as f64).sqrt()))
}

/// Plain mean squared error in original units; no gradient involved.
pub fn mse_original(actual: &[f64], forecast: &[f64]) -> Result<f64> {
    check_pair(actual, forecast)?;
    let sse: f64 = actual
        .iter()
        .zip(forecast)
        .map(|(&g, &p)| (g - p) * (g - p))
        .sum();
    Ok(sse / actual.len() as f64)
}

/// Scores of one forecast series against actuals, in original units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub acc: f64,
    pub n: usize,
    pub cap: f64,
}

impl MetricReport {
    pub fn from_series(actual: &[f64], forecast: &[f64], cap: f64) -> Result<MetricReport> {
        Ok(MetricReport {
            mse: mse_original(actual, forecast)?,
            acc: accuracy(actual, forecast, cap)?,
            n: actual.len(),
            cap,
        })
    }
}

// ── Persistence baseline ─────────────────────────────────────────────

/// Day-before persistence: the forecast for target step `k` is the PV value
/// at the same time of day one day earlier, read from the window's PV
/// history. When the history is too short to reach back a full day the last
/// observed value is used instead.
pub fn persistence_forecast(h_raw: &Tensor, t: usize) -> Vec<f64> {
    let l = h_raw.shape()[0];
    (0..t)
        .map(|k| {
            // Target row s+l+k sits one day after history row l+k−96.
            match (l + k).checked_sub(STEPS_PER_DAY) {
                Some(idx) if idx < l => h_raw.at(idx, 0),
                _ => h_raw.at(l - 1, 0),
            }
        })
        .collect()
}

// ── Linear-regression baseline ───────────────────────────────────────

/// Ridge regression from the flattened L×C window (plus intercept) to the
/// T-step target, solved in closed form via the normal equations. The
/// intercept is not penalized, so in the large-λ limit the forecast
/// degenerates to the training-target mean.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressionBaseline {
    /// (L·C + 1) × T; last row is the intercept.
    weights: DMatrix<f64>,
    l: usize,
    c: usize,
    t: usize,
}

pub fn fit_linear_regression(
    windows: &[WindowSample],
    lambda: f64,
) -> Result<LinearRegressionBaseline> {
    if !(lambda > 0.0) {
        return Err(EvalError::BadLambda(lambda));
    }
    let first = windows
        .first()
        .ok_or_else(|| EvalError::Insufficient("no windows for the regression fit".into()))?;
    let (l, c) = (first.h.shape()[0], first.h.shape()[1]);
    let t = first.g.len();
    let d = l * c + 1;
    let n = windows.len();

    let mut x = DMatrix::zeros(n, d);
    let mut y = DMatrix::zeros(n, t);
    for (i, w) in windows.iter().enumerate() {
        for (j, &v) in w.h.data().iter().enumerate() {
            x[(i, j)] = v;
        }
        x[(i, d - 1)] = 1.0;
        for (j, &g) in w.g.iter().enumerate() {
            y[(i, j)] = g;
        }
    }

    let mut gram = x.tr_mul(&x);
    // Penalize feature weights only, never the intercept.
    for j in 0..d - 1 {
        gram[(j, j)] += lambda;
    }
    let rhs = x.tr_mul(&y);
    let chol = gram.cholesky().ok_or(EvalError::Singular)?;
    let weights = chol.solve(&rhs);
    Ok(LinearRegressionBaseline { weights, l, c, t })
}

impl LinearRegressionBaseline {
    pub fn predict(&self, h: &Tensor) -> Vec<f64> {
        assert_eq!(h.shape(), &[self.l, self.c], "window shape");
        let d = self.l * self.c + 1;
        (0..self.t)
            .map(|j| {
                let mut acc = self.weights[(d - 1, j)];
                for (k, &v) in h.data().iter().enumerate() {
                    acc += self.weights[(k, j)] * v;
                }
                acc
            })
            .collect()
    }

    pub fn horizon(&self) -> usize {
        self.t
    }
}

// ── Day-aligned evaluation ───────────────────────────────────────────

/// One scored day: standardized input for the model, raw input for the
/// persistence baseline, raw actuals for the metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalWindow {
    pub h_std: Tensor,
    pub h_raw: Tensor,
    pub g_raw: Vec<f64>,
    pub start_index: usize,
}

/// Non-overlapping windows whose targets tile the test rows at day stride.
/// The lookback may reach into the validation rows; that is history, not
/// leakage.
pub fn day_aligned_eval_windows(
    raw: &SeriesFrame,
    standardized: &SeriesFrame,
    split: &Split,
    l: usize,
    t: usize,
) -> Result<Vec<EvalWindow>> {
    assert_eq!(raw.len(), standardized.len(), "frames must be aligned");
    let n = raw.len();
    let mut out = Vec::new();
    let mut day_start = split.test.start;
    while day_start + t <= n {
        if day_start < l {
            return Err(EvalError::Insufficient(format!(
                "lookback of {l} steps reaches before the series at test row {day_start}"
            )));
        }
        let s = day_start - l;
        let w_std = window_at(standardized, s, l, t);
        let w_raw = window_at(raw, s, l, t);
        out.push(EvalWindow {
            h_std: w_std.h,
            h_raw: w_raw.h,
            g_raw: w_raw.g,
            start_index: s,
        });
        day_start += STEPS_PER_DAY;
    }
    if out.is_empty() {
        return Err(EvalError::Insufficient(format!(
            "test rows {:?} are shorter than one forecast horizon of {t}",
            split.test
        )));
    }
    Ok(out)
}

/// Runs the model over eval windows and returns per-window forecasts in
/// original units (standardizer-inverted on the target channel).
pub fn model_forecasts(
    model: &PvClient,
    st: &Standardizer,
    windows: &[EvalWindow],
) -> Result<Vec<Vec<f64>>> {
    let ch = model.config.target_channel;
    windows
        .iter()
        .map(|w| {
            let pred = model.predict(&w.h_std)?;
            Ok(st.invert_channel(ch, pred.final_forecast.data())?)
        })
        .collect()
}

// ── Pipeline helpers ─────────────────────────────────────────────────

/// A model trained on the standard split of one station frame, together
/// with everything needed to evaluate or persist it.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: PvClient,
    pub standardizer: Standardizer,
    pub split: Split,
    pub log: TrainLog,
}

/// The full training pipeline on a raw frame: 80/10/10 split, train-fitted
/// standardizer, stride-1 windows over the training rows, seeded training.
pub fn train_station_model(
    config: ModelConfig,
    flags: VariantFlags,
    train_cfg: &TrainConfig,
    raw: &SeriesFrame,
) -> Result<FittedModel> {
    let split = Split::standard(raw.len());
    let standardizer = Standardizer::fit(raw, split.train.clone());
    let std_frame = standardizer.apply(raw)?;
    let train_frame = std_frame.slice_rows(split.train.clone());
    let windows = make_windows(&train_frame, config.l, config.t, 1)?;
    let mut model = PvClient::new(config, flags, train_cfg.seed)?;
    let log = train(&mut model, &windows, train_cfg)?;
    Ok(FittedModel {
        model,
        standardizer,
        split,
        log,
    })
}

/// Model, persistence, and linear-regression scores over the same
/// day-aligned test windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkReport {
    pub model: MetricReport,
    pub persistence: MetricReport,
    pub linear: MetricReport,
    pub days: usize,
}

pub fn evaluate_with_baselines(
    model: &PvClient,
    st: &Standardizer,
    raw: &SeriesFrame,
    split: &Split,
) -> Result<BenchmarkReport> {
    let (l, t, ch) = (model.config.l, model.config.t, model.config.target_channel);
    let std_frame = st.apply(raw)?;
    let windows = day_aligned_eval_windows(raw, &std_frame, split, l, t)?;

    let train_frame = std_frame.slice_rows(split.train.clone());
    let lr = fit_linear_regression(&make_windows(&train_frame, l, t, 1)?, RIDGE_LAMBDA)?;

    let mut actual = Vec::new();
    let mut from_model = Vec::new();
    let mut from_persistence = Vec::new();
    let mut from_lr = Vec::new();
    for (w, m) in windows.iter().zip(model_forecasts(model, st, &windows)?) {
        actual.extend_from_slice(&w.g_raw);
        from_model.extend(m);
        from_persistence.extend(persistence_forecast(&w.h_raw, t));
        from_lr.extend(st.invert_channel(ch, &lr.predict(&w.h_std))?);
    }
    let cap = raw.capacity();
    Ok(BenchmarkReport {
        model: MetricReport::from_series(&actual, &from_model, cap)?,
        persistence: MetricReport::from_series(&actual, &from_persistence, cap)?,
        linear: MetricReport::from_series(&actual, &from_lr, cap)?,
        days: windows.len(),
    })
}

// ── Experiment grids ─────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    /// Component ablations: full, −Linear, −RevIN, +Embed.
    Ablation,
    /// Token-mixer swap: Attention, Linear, MLP, No Attention.
    Attention,
    /// History length sweep: L ∈ {96, 192, 384} with T fixed.
    History,
    /// Output selection: PV dim, Radiation dim, fixed and learnable sums.
    OutputMode,
}

impl GridKind {
    pub fn name(&self) -> &'static str {
        match self {
            GridKind::Ablation => "ablation",
            GridKind::Attention => "attention",
            GridKind::History => "history",
            GridKind::OutputMode => "output-mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub label: String,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub kind: GridKind,
    pub cells: Vec<GridCell>,
}

impl ExperimentGrid {
    pub fn labels(&self) -> Vec<&str> {
        self.cells.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn cell(&self, label: &str) -> Option<&GridCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// CSV with full-precision floats, rows in construction order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,mse,acc,n\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}\n",
                c.label, c.report.mse, c.report.acc, c.report.n
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// The variant roster of one grid: (label, config, flags) triples derived
/// from a base configuration.
pub fn grid_variants(
    kind: GridKind,
    base_config: ModelConfig,
    base_flags: VariantFlags,
) -> Vec<(String, ModelConfig, VariantFlags)> {
    use crate::layers::AttentionKind;
    use crate::model::OutputMode;
    match kind {
        GridKind::Ablation => vec![
            ("full".into(), base_config, base_flags),
            (
                "-Linear".into(),
                base_config,
                VariantFlags {
                    use_linear: false,
                    ..base_flags
                },
            ),
            (
                "-RevIN".into(),
                base_config,
                VariantFlags {
                    use_revin: false,
                    ..base_flags
                },
            ),
            (
                "+Embed".into(),
                base_config,
                VariantFlags {
                    add_embedding: true,
                    ..base_flags
                },
            ),
        ],
        GridKind::Attention => [
            ("Attention", AttentionKind::Attention),
            ("Linear", AttentionKind::LinearMixer),
            ("MLP", AttentionKind::MlpMixer),
            ("No Attention", AttentionKind::NoAttention),
        ]
        .into_iter()
        .map(|(label, attention_kind)| {
            (
                label.to_string(),
                base_config,
                VariantFlags {
                    attention_kind,
                    ..base_flags
                },
            )
        })
        .collect(),
        GridKind::History => [96usize, 192, 384]
            .into_iter()
            .map(|l| {
                (
                    l.to_string(),
                    ModelConfig { l, ..base_config },
                    base_flags,
                )
            })
            .collect(),
        GridKind::OutputMode => [
            ("PV dim", OutputMode::PvDim),
            ("Radiation dim", OutputMode::RadiationDim),
            ("Sum (fixed weights)", OutputMode::SumFixed),
            ("Sum (updatable weights)", OutputMode::SumLearnable),
        ]
        .into_iter()
        .map(|(label, output_mode)| {
            (
                label.to_string(),
                base_config,
                VariantFlags {
                    output_mode,
                    ..base_flags
                },
            )
        })
        .collect(),
    }
}

/// Trains and scores every variant of a grid on the same data, seed, and
/// day-aligned test windows.
pub fn run_grid(
    kind: GridKind,
    raw: &SeriesFrame,
    base_config: ModelConfig,
    base_flags: VariantFlags,
    train_cfg: &TrainConfig,
) -> Result<ExperimentGrid> {
    let mut cells = Vec::new();
    for (label, config, flags) in grid_variants(kind, base_config, base_flags) {
        let fitted = train_station_model(config, flags, train_cfg, raw)?;
        let report = evaluate_model_only(&fitted, raw)?;
        cells.push(GridCell { label, report });
    }
    debug_assert!(
        cells
            .iter()
            .enumerate()
            .all(|(i, a)| cells[..i].iter().all(|b| a.label != b.label)),
        "grid labels must be unique"
    );
    Ok(ExperimentGrid { kind, cells })
}

/// Scores just the model of a fitted pipeline on its day-aligned test set.
pub fn evaluate_model_only(fitted: &FittedModel, raw: &SeriesFrame) -> Result<MetricReport> {
    let (l, t) = (fitted.model.config.l, fitted.model.config.t);
    let std_frame = fitted.standardizer.apply(raw)?;
    let windows = day_aligned_eval_windows(raw, &std_frame, &fitted.split, l, t)?;
    let mut actual = Vec::new();
    let mut forecast = Vec::new();
    for (w, m) in windows
        .iter()
        .zip(model_forecasts(&fitted.model, &fitted.standardizer, &windows)?)
    {
        actual.extend_from_slice(&w.g_raw);
        forecast.extend(m);
    }
    MetricReport::from_series(&actual, &forecast, raw.capacity())
}

// ── Plot export ──────────────────────────────────────────────────────

/// Writes `timestamp,actual,forecast,trend_component,detail_component` for
/// every scored step of the day-aligned test windows, in original units.
/// The trend column carries the denormalization constant, so trend + detail
/// equals the forecast column. Returns the number of data rows written.
pub fn export_plot_data(
    model: &PvClient,
    st: &Standardizer,
    raw: &SeriesFrame,
    split: &Split,
    path: &Path,
) -> Result<usize> {
    let (l, t, ch) = (model.config.l, model.config.t, model.config.target_channel);
    let std_frame = st.apply(raw)?;
    let windows = day_aligned_eval_windows(raw, &std_frame, split, l, t)?;
    let sigma = st.std(ch);
    let mu = st.mean(ch);

    let mut out = String::from("timestamp,actual,forecast,trend_component,detail_component\n");
    let mut rows = 0;
    for w in &windows {
        let (trend_std, detail_std) = model.decompose(&w.h_std)?;
        for k in 0..t {
            let ts = raw.timestamps()[w.start_index + l + k].format("%Y-%m-%dT%H:%M:%S");
            // The standardizer's affine constant joins the trend, mirroring
            // how the in-model denormalization constant is carried.
            let trend = trend_std.data()[k] * sigma + mu;
            let detail = detail_std.data()[k] * sigma;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                ts,
                w.g_raw[k],
                trend + detail,
                trend,
                detail
            ));
            rows += 1;
        }
    }
    std::fs::write(path, out).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(rows)
}

/// Convenience: the standard split of a frame as explicit row ranges.
pub fn standard_split_ranges(n: usize) -> (Range<usize>, Range<usize>, Range<usize>) {
    let s = Split::standard(n);
    (s.train, s.val, s.test)
}

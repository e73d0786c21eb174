//! Day-ahead photovoltaic power forecasting.
//!
//! The model maps a lookback window of plant measurements and weather
//! forecasts to the next day of PV output. Variables are treated as tokens:
//! an attention encoder mixes information across channels while a
//! channel-independent linear module carries the daily trend, both operating
//! on reversibly instance-normalized inputs so the forecast is robust to
//! level shifts between days.
//!
//! Crate layout:
//! - [`tensor`], [`gradcheck`]: f64 autodiff tape and its finite-difference
//!   verification harness
//! - [`layers`], [`model`]: network building blocks and the assembled
//!   forecaster with its variant switches
//! - [`data`]: CSV ingestion, windowing, standardization, synthetic plants
//! - [`training`]: loss, Adam, the training loop, checkpointing
//! - [`eval`]: capacity-normalized accuracy, baselines, comparison grids
//! - [`selfcheck`]: fast invariant suite wired to the CLI

pub mod data;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod training;

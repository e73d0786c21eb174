//! Deterministic synthetic PV station generator.
//!
//! The series is built from a diurnal solar elevation curve with three
//! deliberate difficulty levers:
//!
//! * a slow **amplitude ramp** across days, so the test segment of a
//!   chronological split sits at a different level than the training segment;
//! * **day-level cloud factors**, so yesterday is a poor predictor of today
//!   while the (noisy) weather channels remain informative;
//! * **saturating PV conversion** (tanh of normalized irradiance, plus mild
//!   high-temperature damping), so the irradiance→power map is nonlinear.
//!
//! All randomness comes from a single seeded ChaCha8 stream with a fixed
//! draw order, so a given (seed, days, capacity, profile) always produces a
//! byte-identical series.

use chrono::{NaiveDate, TimeDelta};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SeriesFrame, CHANNELS, STEPS_PER_DAY, STEP_MINUTES};

/// Peak clear-sky irradiance in W/m² before the amplitude ramp.
pub const BASE_RADIATION: f64 = 800.0;
/// Gain inside the tanh irradiance→power curve; chosen so a clear day at
/// nominal amplitude just reaches capacity and mid-range irradiance sits on
/// the steep, visibly curved part of the response.
pub const SATURATION_GAIN: f64 = 2.0;
/// First step of the day with nonzero elevation (exclusive of the zero at
/// the boundary itself).
pub const SUNRISE_STEP: usize = 24;
/// First evening step with zero elevation again.
pub const SUNSET_STEP: usize = 72;

/// Difficulty levers of the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftProfile {
    /// Relative irradiance growth from the first to the last day.
    pub amplitude_ramp: f64,
    /// Maximum fractional irradiance loss on the cloudiest day.
    pub cloud_strength: f64,
    /// Relative conversion-efficiency loss from the first to the last day
    /// (panel soiling/aging): the irradiance→power relation itself drifts, so
    /// a mapping fitted on early days is biased on late days.
    pub efficiency_drift: f64,
    /// Scale of the error added to stored weather channels, as a fraction of
    /// each channel's natural span.
    pub forecast_noise: f64,
    /// Measurement noise on PV output as a fraction of capacity.
    pub pv_noise: f64,
    /// When true, every weather row carries forecast error; when false the
    /// stored weather equals the true weather exactly (useful for debugging).
    pub forecast_noise_everywhere: bool,
}

impl Default for ShiftProfile {
    fn default() -> Self {
        ShiftProfile {
            amplitude_ramp: 0.5,
            cloud_strength: 0.6,
            efficiency_drift: 0.25,
            forecast_noise: 0.04,
            pv_noise: 0.02,
            forecast_noise_everywhere: true,
        }
    }
}

/// Everything needed to describe (and reproduce) a generated station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub seed: u64,
    pub days: usize,
    pub capacity: f64,
    pub profile: ShiftProfile,
    pub base_radiation: f64,
    pub saturation_gain: f64,
    pub sunrise_step: usize,
    pub sunset_step: usize,
}

/// Solar elevation proxy in [0, 1]; exactly zero outside daylight steps.
fn elevation(step_in_day: usize) -> f64 {
    if step_in_day >= SUNRISE_STEP && step_in_day < SUNSET_STEP {
        let span = (SUNSET_STEP - SUNRISE_STEP) as f64;
        (std::f64::consts::PI * (step_in_day - SUNRISE_STEP) as f64 / span).sin()
    } else {
        0.0
    }
}

/// Generates `days` days of 15-minute station data.
///
/// Draw order is fixed (per-day clouds, per-day wind phases, then eleven
/// uniforms per row) and independent of the profile values, so toggling
/// `forecast_noise_everywhere` changes only the stored weather, never the
/// underlying true series.
pub fn synth_station(
    seed: u64,
    days: usize,
    capacity: f64,
    profile: &ShiftProfile,
) -> (SeriesFrame, SynthMeta) {
    assert!(days >= 1, "need at least one day");
    assert!(capacity > 0.0, "capacity must be positive");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clouds: Vec<f64> = (0..days)
        .map(|_| 1.0 - profile.cloud_strength * rng.gen_range(0.0..1.0))
        .collect();
    let wind_phases: Vec<f64> = (0..days)
        .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
        .collect();

    let n = days * STEPS_PER_DAY;
    let ramp_denom = (days.saturating_sub(1)).max(1) as f64;
    let tanh_norm = SATURATION_GAIN.tanh();

    let start = NaiveDate::from_ymd_opt(2024, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<_> = (0..n)
        .map(|i| start + TimeDelta::minutes(STEP_MINUTES * i as i64))
        .collect();

    let mut values = Vec::with_capacity(n * CHANNELS);
    for row in 0..n {
        let day = row / STEPS_PER_DAY;
        let step = row % STEPS_PER_DAY;
        let e = elevation(step);
        let amp = 1.0 + profile.amplitude_ramp * day as f64 / ramp_denom;

        // Eleven uniforms per row, always drawn so the stream position never
        // depends on data values or profile switches.
        let n_flicker: f64 = rng.gen_range(-1.0..1.0);
        let n_temp = rng.gen_range(-1.0..1.0);
        let n_humid = rng.gen_range(-1.0..1.0);
        let n_wind = rng.gen_range(-1.0..1.0);
        let n_press = rng.gen_range(-1.0..1.0);
        let n_pv = rng.gen_range(-1.0..1.0);
        let n_fc_rad = rng.gen_range(-1.0..1.0);
        let n_fc_temp = rng.gen_range(-1.0..1.0);
        let n_fc_humid = rng.gen_range(-1.0..1.0);
        let n_fc_wind = rng.gen_range(-1.0..1.0);
        let n_fc_press = rng.gen_range(-1.0..1.0);

        let rad_true =
            BASE_RADIATION * amp * clouds[day] * e * (1.0 + 0.03 * n_flicker).max(0.0);
        let temp_true = 12.0
            + 0.012 * rad_true
            + 4.0 * (std::f64::consts::TAU * (step as f64 - 30.0) / STEPS_PER_DAY as f64).sin()
            + 0.3 * n_temp;
        let humid_true = (70.0 - 0.025 * rad_true + 2.0 * n_humid).clamp(20.0, 100.0);
        let wind_true = (4.0
            + 2.0 * (std::f64::consts::TAU * step as f64 / STEPS_PER_DAY as f64 + wind_phases[day])
                .sin()
            + 0.5 * n_wind)
            .max(0.0);
        let press_true =
            1013.0 + 3.0 * (std::f64::consts::TAU * day as f64 / 14.0).sin() + 0.5 * n_press;

        let pv = if e == 0.0 {
            0.0
        } else {
            let load = rad_true / BASE_RADIATION;
            let damp = 1.0 - 0.004 * (temp_true - 25.0).max(0.0);
            let eff = 1.0 - profile.efficiency_drift * day as f64 / ramp_denom;
            let clean = capacity * (SATURATION_GAIN * load).tanh() / tanh_norm * damp * eff;
            (clean + profile.pv_noise * capacity * n_pv).clamp(0.0, capacity)
        };

        let (rad, temp, humid, wind, press) = if profile.forecast_noise_everywhere {
            let s = profile.forecast_noise;
            (
                // Radiation forecasts stay exactly zero at night.
                if e == 0.0 {
                    0.0
                } else {
                    (rad_true + s * BASE_RADIATION * n_fc_rad).max(0.0)
                },
                temp_true + s * 5.0 * n_fc_temp,
                (humid_true + s * 30.0 * n_fc_humid).clamp(0.0, 100.0),
                (wind_true + s * 3.0 * n_fc_wind).max(0.0),
                press_true + s * 4.0 * n_fc_press,
            )
        } else {
            (rad_true, temp_true, humid_true, wind_true, press_true)
        };

        values.extend_from_slice(&[pv, rad, temp, humid, wind, press]);
    }

    let frame = SeriesFrame::from_parts(timestamps, values, capacity).expect("generator shape");
    debug_assert!(frame.validate().is_ok());
    let meta = SynthMeta {
        seed,
        days,
        capacity,
        profile: profile.clone(),
        base_radiation: BASE_RADIATION,
        saturation_gain: SATURATION_GAIN,
        sunrise_step: SUNRISE_STEP,
        sunset_step: SUNSET_STEP,
    };
    (frame, meta)
}

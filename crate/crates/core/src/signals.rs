//! Gearbox fault recordings: synthetic generation, CSV ingestion and windowing.
//!
//! The generator produces the seven drive/gearbox channels on top of a
//! healthy baseline (mesh sinusoids plus Gaussian noise) and injects one
//! signature per fault class:
//!
//! | label | fault          | signature                                                  |
//! |-------|----------------|------------------------------------------------------------|
//! | 1     | missing tooth  | ringing impulse once per revolution on both accelerometers |
//! | 2     | chipped tooth  | torque variance x (1 + 3 I), AM of accelerometer mesh tone |
//! | 3     | root crack     | once-per-revolution sideband on torque and active current  |
//! | 4     | surface crack  | raised broadband noise floor on both accelerometers        |
//! | 5     | eccentricity   | 1x oscillation on speed and reactive current               |
//!
//! `I` is `SynthConfig::fault_intensity`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::stream_rng;

pub const NUM_CHANNELS: usize = 7;

/// Gear condition. 0 is healthy, 1..=5 are the gear faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct FaultLabel(u8);

impl FaultLabel {
    pub const HEALTHY: FaultLabel = FaultLabel(0);
    pub const MISSING_TOOTH: FaultLabel = FaultLabel(1);
    pub const CHIPPED_TOOTH: FaultLabel = FaultLabel(2);
    pub const ROOT_CRACK: FaultLabel = FaultLabel(3);
    pub const SURFACE_CRACK: FaultLabel = FaultLabel(4);
    pub const ECCENTRICITY: FaultLabel = FaultLabel(5);

    pub fn new(code: u8) -> Result<Self> {
        if code <= 5 {
            Ok(FaultLabel(code))
        } else {
            Err(Error::invalid(format!("fault label {code} outside 0..=5")))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "healthy",
            1 => "missing tooth",
            2 => "chipped tooth",
            3 => "root crack",
            4 => "surface crack",
            _ => "eccentricity",
        }
    }
}

impl TryFrom<u8> for FaultLabel {
    type Error = Error;
    fn try_from(code: u8) -> Result<Self> {
        FaultLabel::new(code)
    }
}

impl From<FaultLabel> for u8 {
    fn from(l: FaultLabel) -> u8 {
        l.0
    }
}

impl fmt::Display for FaultLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Measurement channel. The first five are the drive-internal signals,
/// the last two the gearbox accelerometers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelId {
    Speed,
    Torque,
    Vdc,
    IActive,
    IReactive,
    AccelX,
    AccelY,
}

impl ChannelId {
    pub const ALL: [ChannelId; NUM_CHANNELS] = [
        ChannelId::Speed,
        ChannelId::Torque,
        ChannelId::Vdc,
        ChannelId::IActive,
        ChannelId::IReactive,
        ChannelId::AccelX,
        ChannelId::AccelY,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ChannelId::Speed => "speed",
            ChannelId::Torque => "torque",
            ChannelId::Vdc => "vdc",
            ChannelId::IActive => "i_active",
            ChannelId::IReactive => "i_reactive",
            ChannelId::AccelX => "accel_x",
            ChannelId::AccelY => "accel_y",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub base_speed_hz: f64,
    /// Multiplier on every channel's nominal sensor noise.
    pub noise_std: f64,
    pub fault_intensity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 20.0,
            sample_rate_hz: 5000.0,
            base_speed_hz: 25.0,
            noise_std: 1.0,
            fault_intensity: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn num_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::invalid("duration_s must be positive"));
        }
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::invalid("sample_rate_hz must be positive"));
        }
        if !(self.base_speed_hz > 0.0) {
            return Err(Error::invalid("base_speed_hz must be positive"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::invalid("noise_std must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.fault_intensity) {
            return Err(Error::invalid("fault_intensity must lie in [0, 1]"));
        }
        if self.num_samples() < 1 {
            return Err(Error::invalid("duration x sample rate yields no samples"));
        }
        Ok(())
    }
}

/// Multichannel recording, channel-major (`samples[channel][t]`).
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub samples: Vec<Vec<f64>>,
    pub sample_rate_hz: f64,
    pub label: FaultLabel,
    pub load_level: f64,
    pub seed: u64,
}

impl RawRecording {
    pub fn num_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn channel(&self, c: ChannelId) -> &[f64] {
        &self.samples[c.index()]
    }
}

/// A `[7 x L]` slice of a recording.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Vec<Vec<f64>>,
    pub label: FaultLabel,
    pub load_level: f64,
}

impl Window {
    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// Healthy-baseline constants (SI units).
const GEAR_TEETH: f64 = 20.0;
const SPEED_DROOP: f64 = 0.03;
const SPEED_RIPPLE: f64 = 0.3;
const RATED_TORQUE: f64 = 20.0;
const TORQUE_RIPPLE: f64 = 0.8;
const VDC_NOMINAL: f64 = 540.0;
const VDC_RIPPLE: f64 = 3.0;
const VDC_RIPPLE_HZ: f64 = 300.0;
const RATED_ACTIVE_CURRENT: f64 = 12.0;
const CURRENT_RIPPLE: f64 = 0.2;
const REACTIVE_CURRENT: f64 = 4.0;
const ACCEL_MESH: f64 = 1.0;
const ACCEL_HARMONIC: f64 = 0.4;

/// Nominal noise per channel, scaled by `SynthConfig::noise_std`.
const CHANNEL_NOISE: [f64; NUM_CHANNELS] = [0.5, 0.5, 1.0, 0.3, 0.2, 0.3, 0.3];

// Fault signature constants.
const IMPULSE_AMPLITUDE: f64 = 3.5;
const IMPULSE_RING_HZ: f64 = 1500.0;
const IMPULSE_DECAY_S: f64 = 0.002;
const CHIP_AM_DEPTH: f64 = 0.1;
const CRACK_TORQUE_SIDEBAND: f64 = 1.6;
const CRACK_CURRENT_SIDEBAND: f64 = 0.1;
const SURFACE_NOISE: f64 = 0.5;
/// Share of the impulse and noise-floor signatures seen by the y axis.
const Y_AXIS_COUPLING: f64 = 0.4;
const ECCENTRIC_SPEED: f64 = 0.5;
const ECCENTRIC_REACTIVE: f64 = 0.1;

/// Generates a seeded synthetic recording.
///
/// Baseline noise comes from one RNG stream drawn in a fixed order for
/// every label, so two recordings that differ only in label share their
/// healthy part exactly. Fault-specific randomness uses a second stream.
pub fn synthesize_recording(
    label: FaultLabel,
    load_level: f64,
    cfg: &SynthConfig,
    seed: u64,
) -> Result<RawRecording> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&load_level) {
        return Err(Error::invalid(format!(
            "load_level {load_level} outside [0, 1]"
        )));
    }
    let n = cfg.num_samples();
    let fs = cfg.sample_rate_hz;
    let fr = cfg.base_speed_hz;
    let fm = GEAR_TEETH * fr;
    let intensity = cfg.fault_intensity;

    let mut base = stream_rng(seed, 0);
    let mut fault_rng = stream_rng(seed, 1 + label.code() as u64);

    let phase: [f64; 4] = std::array::from_fn(|_| base.random::<f64>() * 2.0 * PI);
    let noise_scale: [f64; NUM_CHANNELS] =
        std::array::from_fn(|c| CHANNEL_NOISE[c] * cfg.noise_std);

    let torque_gain = if label == FaultLabel::CHIPPED_TOOTH {
        (1.0 + 3.0 * intensity).sqrt()
    } else {
        1.0
    };

    let mut samples = vec![Vec::with_capacity(n); NUM_CHANNELS];
    let speed_mean = 2.0 * PI * fr * (1.0 - SPEED_DROOP * load_level);
    let rev_period = 1.0 / fr;

    for i in 0..n {
        let t = i as f64 / fs;
        let mesh = 2.0 * PI * fm * t;
        let rot = 2.0 * PI * fr * t;
        let noise: [f64; NUM_CHANNELS] =
            std::array::from_fn(|c| noise_scale[c] * Distribution::<f64>::sample(&StandardNormal, &mut base));

        let mut speed = speed_mean + SPEED_RIPPLE * (mesh + phase[0]).sin() + noise[0];
        let torque_fluct = TORQUE_RIPPLE * (mesh + phase[0]).sin() + noise[1];
        let mut torque = RATED_TORQUE * load_level + torque_gain * torque_fluct;
        let vdc = VDC_NOMINAL
            + VDC_RIPPLE * (2.0 * PI * VDC_RIPPLE_HZ * t + phase[1]).sin()
            + noise[2];
        let mut i_active =
            RATED_ACTIVE_CURRENT * load_level + CURRENT_RIPPLE * (mesh + phase[0]).sin() + noise[3];
        let mut i_reactive = REACTIVE_CURRENT + noise[4];

        let mesh_tone_x = ACCEL_MESH * (mesh + phase[2]).sin();
        let mesh_tone_y = ACCEL_MESH * (mesh + phase[2]).cos();
        let harmonic_x = ACCEL_HARMONIC * (2.0 * mesh + phase[3]).sin();
        let harmonic_y = ACCEL_HARMONIC * (2.0 * mesh + phase[3]).cos();
        let mut accel_x = mesh_tone_x + harmonic_x + noise[5];
        let mut accel_y = mesh_tone_y + harmonic_y + noise[6];

        match label.code() {
            1 => {
                let since = t % rev_period;
                let ring = IMPULSE_AMPLITUDE
                    * intensity
                    * (-since / IMPULSE_DECAY_S).exp()
                    * (2.0 * PI * IMPULSE_RING_HZ * since).sin();
                accel_x += ring;
                accel_y += Y_AXIS_COUPLING * ring;
            }
            2 => {
                let am = CHIP_AM_DEPTH * intensity * rot.sin();
                accel_x += am * mesh_tone_x;
                accel_y += am * mesh_tone_y;
            }
            3 => {
                torque += CRACK_TORQUE_SIDEBAND * intensity * (rot + phase[1]).sin();
                i_active += CRACK_CURRENT_SIDEBAND * intensity * (rot + phase[1]).sin();
            }
            4 => {
                let sx: f64 = StandardNormal.sample(&mut fault_rng);
                let sy: f64 = StandardNormal.sample(&mut fault_rng);
                accel_x += SURFACE_NOISE * intensity * sx;
                accel_y += Y_AXIS_COUPLING * SURFACE_NOISE * intensity * sy;
            }
            5 => {
                speed += ECCENTRIC_SPEED * intensity * (rot + phase[3]).sin();
                i_reactive += ECCENTRIC_REACTIVE * intensity * (rot + phase[3]).cos();
            }
            _ => {}
        }

        for (c, v) in [speed, torque, vdc, i_active, i_reactive, accel_x, accel_y]
            .into_iter()
            .enumerate()
        {
            samples[c].push(v);
        }
    }

    Ok(RawRecording {
        samples,
        sample_rate_hz: fs,
        label,
        load_level,
        seed,
    })
}

/// Reads a recording from CSV, mapping columns by header name.
///
/// Row numbers in errors count data rows from 1 (the header is row 0).
pub fn ingest_csv(path: &Path, label: FaultLabel, sample_rate_hz: f64) -> Result<RawRecording> {
    if !(sample_rate_hz > 0.0) {
        return Err(Error::invalid("sample_rate_hz must be positive"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut column_of = [0usize; NUM_CHANNELS];
    for ch in ChannelId::ALL {
        column_of[ch.index()] = headers
            .iter()
            .position(|h| h == ch.name())
            .ok_or_else(|| Error::MissingChannel(ch.name().to_string()))?;
    }

    let mut samples = vec![Vec::new(); NUM_CHANNELS];
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        for ch in ChannelId::ALL {
            let cell = record.get(column_of[ch.index()]).ok_or_else(|| Error::BadRow {
                row,
                message: format!("missing value for `{}`", ch.name()),
            })?;
            let v: f64 = cell.parse().map_err(|_| Error::BadRow {
                row,
                message: format!("non-numeric value `{cell}` in `{}`", ch.name()),
            })?;
            if !v.is_finite() {
                return Err(Error::BadRow {
                    row,
                    message: format!("non-finite value `{cell}` in `{}`", ch.name()),
                });
            }
            samples[ch.index()].push(v);
        }
    }
    if samples[0].len() < 2 {
        return Err(Error::invalid(format!(
            "{} has {} data rows, at least 2 required",
            path.display(),
            samples[0].len()
        )));
    }
    Ok(RawRecording {
        samples,
        sample_rate_hz,
        label,
        load_level: 0.0,
        seed: 0,
    })
}

/// Writes a recording as CSV with the channel names as header.
pub fn write_csv(rec: &RawRecording, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ChannelId::ALL.iter().map(|c| c.name()))?;
    let mut row = Vec::with_capacity(NUM_CHANNELS);
    for t in 0..rec.num_samples() {
        row.clear();
        row.extend(rec.samples.iter().map(|ch| ch[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Cuts a recording into windows at offsets `0, hop, 2 hop, ...`; the
/// trailing partial window is dropped.
pub fn segment(rec: &RawRecording, window_len: usize, hop: usize) -> Result<Vec<Window>> {
    if window_len == 0 || hop == 0 {
        return Err(Error::invalid("window_len and hop must be positive"));
    }
    let n = rec.num_samples();
    if window_len > n {
        return Err(Error::invalid(format!(
            "window_len {window_len} exceeds recording length {n}"
        )));
    }
    let count = (n - window_len) / hop + 1;
    Ok((0..count)
        .map(|w| {
            let start = w * hop;
            Window {
                data: rec
                    .samples
                    .iter()
                    .map(|ch| ch[start..start + window_len].to_vec())
                    .collect(),
                label: rec.label,
                load_level: rec.load_level,
            }
        })
        .collect())
}

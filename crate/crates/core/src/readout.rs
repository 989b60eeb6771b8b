//! Readout analysis: record preprocessing, homodyne I/Q extraction and the
//! linear IQ-plane discriminator.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{fir_apply, FirFilter};
use crate::datalink::Record;
use crate::waveform::Waveform;

/// Scale from 12-bit codes to normalized amplitude.
pub const ADC_SCALE: f64 = 2048.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReadoutError {
    #[error("record {seq} is incomplete, missing frames {missing:?}")]
    IncompleteRecord { seq: u32, missing: Vec<u16> },
    #[error("record {0} is corrupt")]
    CorruptRecord(u32),
    #[error("class {0} has no points")]
    EmptyClass(u8),
    #[error("class centroids coincide")]
    CoincidentCentroids,
    #[error("discriminator normal must be non-zero and finite")]
    DegenerateNormal,
    #[error("malformed discriminator text: {0}")]
    Parse(String),
    #[error("invalid acquisition config: {0}")]
    InvalidConfig(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IqPoint {
    pub i: f64,
    pub q: f64,
}

impl IqPoint {
    pub fn new(i: f64, q: f64) -> Self {
        Self { i, q }
    }

    /// `atan2(-Q, I)`: the phase of `A cos(wt + phi)` under this module's convention.
    pub fn phase(&self) -> f64 {
        (-self.q).atan2(self.i)
    }

    pub fn amplitude(&self) -> f64 {
        self.i.hypot(self.q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum QubitState {
    Zero,
    One,
}

impl From<QubitState> for u8 {
    fn from(s: QubitState) -> u8 {
        match s {
            QubitState::Zero => 0,
            QubitState::One => 1,
        }
    }
}

impl TryFrom<u8> for QubitState {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(QubitState::Zero),
            1 => Ok(QubitState::One),
            other => Err(format!("qubit state must be 0 or 1, got {other}")),
        }
    }
}

/// Codes divided by 2048, then the optional FIR.
pub fn preprocess(
    record: &Record,
    fir: Option<&FirFilter>,
    sample_rate: f64,
) -> Result<Waveform, ReadoutError> {
    if !record.complete {
        return Err(ReadoutError::IncompleteRecord {
            seq: record.key.trigger_seq,
            missing: record.missing.clone(),
        });
    }
    if record.corrupt {
        return Err(ReadoutError::CorruptRecord(record.key.trigger_seq));
    }
    let samples = record
        .samples
        .iter()
        .map(|&c| c as f64 / ADC_SCALE)
        .collect();
    let w = Waveform::new(samples, sample_rate)
        .map_err(|_| ReadoutError::InvalidConfig("empty record or bad sample rate"))?;
    Ok(match fir {
        Some(f) => fir_apply(&w, f),
        None => w,
    })
}

/// `I = 2/N sum w[n] cos(2 pi f n / fs)`, `Q = 2/N sum w[n] sin(2 pi f n / fs)`.
///
/// For `w[n] = A cos(2 pi f n / fs + phi)` over whole periods this gives
/// `(A cos phi, -A sin phi)`.
pub fn homodyne(w: &Waveform, freq: f64) -> IqPoint {
    let step = 2.0 * PI * freq / w.sample_rate();
    let (mut i, mut q) = (0.0, 0.0);
    for (n, &x) in w.samples().iter().enumerate() {
        let (s, c) = (step * n as f64).sin_cos();
        i += x * c;
        q += x * s;
    }
    let norm = 2.0 / w.len() as f64;
    IqPoint::new(i * norm, q * norm)
}

/// Homodyne with precomputed reference tables, for repeated demodulation of
/// equal-length records. Matches [`homodyne`] to rounding.
#[derive(Debug, Clone)]
pub struct Demodulator {
    freq: f64,
    sample_rate: f64,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Demodulator {
    pub fn new(freq: f64, sample_rate: f64, length: usize) -> Self {
        let step = 2.0 * PI * freq / sample_rate;
        let (sin, cos) = (0..length).map(|n| (step * n as f64).sin_cos()).unzip();
        Self {
            freq,
            sample_rate,
            cos,
            sin,
        }
    }

    pub fn len(&self) -> usize {
        self.cos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cos.is_empty()
    }

    /// Demodulates raw 12-bit codes (scaled by 1/2048) without building a Waveform.
    pub fn demod_codes(&self, codes: &[i16]) -> IqPoint {
        if codes.len() != self.len() {
            let w = Waveform::new(
                codes.iter().map(|&c| c as f64 / ADC_SCALE).collect(),
                self.sample_rate,
            )
            .expect("non-empty");
            return homodyne(&w, self.freq);
        }
        let (mut i, mut q) = (0.0, 0.0);
        for ((&c, &cr), &sr) in codes.iter().zip(&self.cos).zip(&self.sin) {
            let x = c as f64 / ADC_SCALE;
            i += x * cr;
            q += x * sr;
        }
        let norm = 2.0 / codes.len() as f64;
        IqPoint::new(i * norm, q * norm)
    }

    pub fn demod(&self, w: &Waveform) -> IqPoint {
        if w.len() != self.len() || w.sample_rate() != self.sample_rate {
            return homodyne(w, self.freq);
        }
        let (mut i, mut q) = (0.0, 0.0);
        for ((&x, &cr), &sr) in w.samples().iter().zip(&self.cos).zip(&self.sin) {
            i += x * cr;
            q += x * sr;
        }
        let norm = 2.0 / w.len() as f64;
        IqPoint::new(i * norm, q * norm)
    }
}

/// Linear boundary `w . p = b` in the IQ plane; points with `w . p > b` read as One.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub w: [f64; 2],
    pub b: f64,
}

impl Discriminator {
    pub fn new(w: [f64; 2], b: f64) -> Result<Self, ReadoutError> {
        let norm = w[0].hypot(w[1]);
        if !(norm > 0.0 && norm.is_finite() && b.is_finite()) {
            return Err(ReadoutError::DegenerateNormal);
        }
        Ok(Self { w, b })
    }

    pub fn score(&self, p: IqPoint) -> f64 {
        self.w[0] * p.i + self.w[1] * p.q - self.b
    }

    /// Ties go to Zero.
    pub fn classify(&self, p: IqPoint) -> QubitState {
        if self.score(p) > 0.0 {
            QubitState::One
        } else {
            QubitState::Zero
        }
    }

    pub fn to_text(&self) -> String {
        format!("{} {} {}\n", self.w[0], self.w[1], self.b)
    }
}

impl fmt::Display for Discriminator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.w[0], self.w[1], self.b)
    }
}

impl FromStr for Discriminator {
    type Err = ReadoutError;

    /// Parses `w_i w_q b` on a single line.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let line = s.strip_suffix('\n').unwrap_or(s);
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.contains('\n') {
            return Err(ReadoutError::Parse("expected a single line".into()));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(ReadoutError::Parse(format!(
                "expected 3 fields, found {}",
                fields.len()
            )));
        }
        let mut v = [0.0; 3];
        for (slot, field) in v.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .map_err(|e| ReadoutError::Parse(format!("`{field}`: {e}")))?;
            if !slot.is_finite() {
                return Err(ReadoutError::Parse(format!("`{field}` is not finite")));
            }
        }
        Discriminator::new([v[0], v[1]], v[2])
    }
}

fn centroid(points: &[IqPoint]) -> IqPoint {
    let n = points.len() as f64;
    let (si, sq) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.i, b + p.q));
    IqPoint::new(si / n, sq / n)
}

/// Perpendicular bisector of the segment between the class centroids:
/// `w = c1 - c0`, `b = w . (c0 + c1) / 2`.
pub fn train_discriminator(
    points0: &[IqPoint],
    points1: &[IqPoint],
) -> Result<Discriminator, ReadoutError> {
    if points0.is_empty() {
        return Err(ReadoutError::EmptyClass(0));
    }
    if points1.is_empty() {
        return Err(ReadoutError::EmptyClass(1));
    }
    let (c0, c1) = (centroid(points0), centroid(points1));
    let w = [c1.i - c0.i, c1.q - c0.q];
    if w == [0.0, 0.0] {
        return Err(ReadoutError::CoincidentCentroids);
    }
    let b = 0.5 * (w[0] * (c0.i + c1.i) + w[1] * (c0.q + c1.q));
    Discriminator::new(w, b).map_err(|_| ReadoutError::CoincidentCentroids)
}

pub fn classify(d: &Discriminator, p: IqPoint) -> QubitState {
    d.classify(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBinding {
    pub name: String,
    pub device_id: u16,
    pub channel_id: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub inputs: Vec<InputBinding>,
    #[serde(default = "default_record_length")]
    pub record_length: usize,
    #[serde(default = "default_sample_rate")]
    pub sample_rate: f64,
    pub demod_freq: f64,
    #[serde(default)]
    pub fir: Option<FirFilter>,
}

fn default_record_length() -> usize {
    10_000
}

fn default_sample_rate() -> f64 {
    1e9
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<(), ReadoutError> {
        if self.record_length == 0 {
            return Err(ReadoutError::InvalidConfig(
                "record_length must be at least 1",
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(ReadoutError::InvalidConfig("sample_rate must be positive"));
        }
        if !(self.demod_freq > 0.0 && self.demod_freq < self.sample_rate / 2.0) {
            return Err(ReadoutError::InvalidConfig(
                "demod_freq must lie strictly between 0 and sample_rate/2",
            ));
        }
        let mut names: Vec<&str> = self.inputs.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(ReadoutError::InvalidConfig("duplicate input name"));
        }
        Ok(())
    }

    pub fn input(&self, name: &str) -> Option<&InputBinding> {
        self.inputs.iter().find(|b| b.name == name)
    }
}

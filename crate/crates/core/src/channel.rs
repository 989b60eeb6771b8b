//! Per-channel compensation of hardware defects and rendering to DAC codes.
//!
//! The pipeline order is fixed: FIR, gain, offset, delay. The delay pads the
//! front of the waveform with the offset level so a biased channel stays
//! biased while it waits.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::waveform::{sample_expr, Bindings, ExprError, WaveExpr, WaveKind, Waveform};

pub const MAX_FIR_TAPS: usize = 1024;
pub const MAX_DELAY_SAMPLES: u32 = 1_000_000;
pub const DAC_FULL_SCALE: f64 = 32767.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelError {
    #[error("FIR filter needs between 1 and {MAX_FIR_TAPS} taps, got {0}")]
    TapCount(usize),
    #[error("FIR tap {0} is not finite")]
    NonFiniteTap(usize),
    #[error("invalid channel config: {0}")]
    InvalidConfig(&'static str),
    #[error("carrier has no sine primitive")]
    NonSinusoidalCarrier,
    #[error("carrier has {0} sine primitives; expected exactly one")]
    AmbiguousCarrier(usize),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FirFilter {
    taps: Vec<f64>,
}

impl FirFilter {
    pub fn new(taps: Vec<f64>) -> Result<Self, ChannelError> {
        if taps.is_empty() || taps.len() > MAX_FIR_TAPS {
            return Err(ChannelError::TapCount(taps.len()));
        }
        if let Some(i) = taps.iter().position(|t| !t.is_finite()) {
            return Err(ChannelError::NonFiniteTap(i));
        }
        Ok(Self { taps })
    }

    pub fn identity() -> Self {
        Self { taps: vec![1.0] }
    }

    /// Equal-weight moving average over `n` taps.
    pub fn moving_average(n: usize) -> Result<Self, ChannelError> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }
}

impl TryFrom<Vec<f64>> for FirFilter {
    type Error = ChannelError;

    fn try_from(taps: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(taps)
    }
}

impl From<FirFilter> for Vec<f64> {
    fn from(f: FirFilter) -> Self {
        f.taps
    }
}

/// `out[n] = sum_k taps[k] * w[n - k]`, with zero history before the first
/// sample. Output length equals input length.
pub fn fir_apply(w: &Waveform, filter: &FirFilter) -> Waveform {
    let x = w.samples();
    let taps = filter.taps();
    let out: Vec<f64> = (0..x.len())
        .map(|n| {
            let k_max = taps.len().min(n + 1);
            taps[..k_max]
                .iter()
                .enumerate()
                .map(|(k, &h)| h * x[n - k])
                .sum()
        })
        .collect();
    Waveform::with_start(out, w.sample_rate(), w.t0()).expect("length preserved")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ChannelRole {
    X,
    Y,
    Z,
    #[serde(rename = "DC")]
    Dc,
    #[serde(rename = "I")]
    ReadoutI,
    #[serde(rename = "Q")]
    ReadoutQ,
}

impl fmt::Display for ChannelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelRole::X => "X",
            ChannelRole::Y => "Y",
            ChannelRole::Z => "Z",
            ChannelRole::Dc => "DC",
            ChannelRole::ReadoutI => "I",
            ChannelRole::ReadoutQ => "Q",
        })
    }
}

impl FromStr for ChannelRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "X" | "x" => ChannelRole::X,
            "Y" | "y" => ChannelRole::Y,
            "Z" | "z" => ChannelRole::Z,
            "DC" | "dc" => ChannelRole::Dc,
            "I" | "i" => ChannelRole::ReadoutI,
            "Q" | "q" => ChannelRole::ReadoutQ,
            other => return Err(format!("unknown channel role `{other}`")),
        })
    }
}

/// Compensation record for one output channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub role: ChannelRole,
    #[serde(default)]
    pub fir: Option<FirFilter>,
    /// Additive bias in normalized units, applied after gain.
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub delay_samples: u32,
    #[serde(default = "one")]
    pub gain: f64,
    /// Volts corresponding to a normalized amplitude of 1.0.
    #[serde(default = "one")]
    pub full_scale_volts: f64,
}

fn one() -> f64 {
    1.0
}

impl ChannelConfig {
    pub fn neutral(role: ChannelRole) -> Self {
        Self {
            role,
            fir: None,
            offset: 0.0,
            delay_samples: 0,
            gain: 1.0,
            full_scale_volts: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.offset.is_nan() || self.offset.abs() > 1.0 {
            return Err(ChannelError::InvalidConfig("|offset| must be at most 1"));
        }
        if self.delay_samples > MAX_DELAY_SAMPLES {
            return Err(ChannelError::InvalidConfig("delay exceeds 1e6 samples"));
        }
        if !(self.gain > 0.0 && self.gain.is_finite()) {
            return Err(ChannelError::InvalidConfig("gain must be positive"));
        }
        if !(self.full_scale_volts > 0.0 && self.full_scale_volts.is_finite()) {
            return Err(ChannelError::InvalidConfig("full scale must be positive"));
        }
        Ok(())
    }

    pub fn volts_to_normalized(&self, volts: f64) -> f64 {
        volts / self.full_scale_volts
    }

    pub fn normalized_to_volts(&self, x: f64) -> f64 {
        x * self.full_scale_volts
    }
}

/// Runs the fixed FIR, gain, offset, delay pipeline. Output length is
/// `len(w) + delay_samples`; a neutral config returns `w` bit for bit.
pub fn apply_channel(w: &Waveform, cfg: &ChannelConfig) -> Waveform {
    let filtered;
    let src = match &cfg.fir {
        Some(f) => {
            filtered = fir_apply(w, f);
            &filtered
        }
        None => w,
    };
    let delay = cfg.delay_samples as usize;
    let mut out = Vec::with_capacity(src.len() + delay);
    out.resize(delay, cfg.offset);
    let (gain, offset) = (cfg.gain, cfg.offset);
    match (gain == 1.0, offset == 0.0) {
        (true, true) => out.extend_from_slice(src.samples()),
        (false, true) => out.extend(src.samples().iter().map(|&x| x * gain)),
        (true, false) => out.extend(src.samples().iter().map(|&x| x + offset)),
        (false, false) => out.extend(src.samples().iter().map(|&x| x * gain + offset)),
    }
    Waveform::with_start(out, w.sample_rate(), w.t0()).expect("non-empty")
}

/// Signed 16-bit DAC codes ready for upload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DacRecord {
    pub codes: Vec<i16>,
    pub sample_rate_hz: u64,
    /// Samples that fell outside [-1, 1] (or were NaN) and were clamped.
    pub clipped: usize,
}

impl DacRecord {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.codes.iter().flat_map(|c| c.to_le_bytes()).collect()
    }
}

/// `code = round(clamp(x, -1, 1) * 32767)`.
pub fn dac_code(x: f64) -> (i16, bool) {
    if x.is_nan() {
        return (0, true);
    }
    let clipped = !(-1.0..=1.0).contains(&x);
    (
        (x.clamp(-1.0, 1.0) * DAC_FULL_SCALE).round() as i16,
        clipped,
    )
}

pub fn render_dac(w: &Waveform) -> DacRecord {
    let mut clipped = 0;
    let codes = w
        .samples()
        .iter()
        .map(|&x| {
            let (code, clip) = dac_code(x);
            clipped += clip as usize;
            code
        })
        .collect();
    DacRecord {
        codes,
        sample_rate_hz: w.sample_rate().round() as u64,
        clipped,
    }
}

/// `a * sin(2 pi f t + phi)` as an expression.
pub fn sine_carrier(a: f64, f: f64, phi: f64) -> WaveExpr {
    WaveExpr::call(
        WaveKind::Sine,
        [
            ("a", WaveExpr::Const(a)),
            ("f", WaveExpr::Const(f)),
            ("phi", WaveExpr::Const(phi)),
        ],
    )
}

fn count_sines(e: &WaveExpr) -> usize {
    match e {
        WaveExpr::Call {
            kind: WaveKind::Sine,
            ..
        } => 1,
        WaveExpr::Call { args, .. } => args.iter().map(|(_, v)| count_sines(v)).sum(),
        WaveExpr::Add(a, b) | WaveExpr::Sub(a, b) | WaveExpr::Mul(a, b) | WaveExpr::Div(a, b) => {
            count_sines(a) + count_sines(b)
        }
        WaveExpr::Neg(a) => count_sines(a),
        _ => 0,
    }
}

fn advance_carrier(e: &WaveExpr) -> WaveExpr {
    match e {
        WaveExpr::Call {
            kind: WaveKind::Sine,
            args,
        } => {
            let mut args = args.clone();
            match args.iter_mut().find(|(k, _)| k == "phi") {
                Some((_, phi)) => {
                    *phi =
                        WaveExpr::Add(Box::new(phi.clone()), Box::new(WaveExpr::Const(FRAC_PI_2)))
                }
                None => args.push(("phi".into(), WaveExpr::Const(FRAC_PI_2))),
            }
            WaveExpr::Call {
                kind: WaveKind::Sine,
                args,
            }
        }
        WaveExpr::Add(a, b) => {
            WaveExpr::Add(Box::new(advance_carrier(a)), Box::new(advance_carrier(b)))
        }
        WaveExpr::Sub(a, b) => {
            WaveExpr::Sub(Box::new(advance_carrier(a)), Box::new(advance_carrier(b)))
        }
        WaveExpr::Mul(a, b) => {
            WaveExpr::Mul(Box::new(advance_carrier(a)), Box::new(advance_carrier(b)))
        }
        WaveExpr::Div(a, b) => {
            WaveExpr::Div(Box::new(advance_carrier(a)), Box::new(advance_carrier(b)))
        }
        WaveExpr::Neg(a) => WaveExpr::Neg(Box::new(advance_carrier(a))),
        other => other.clone(),
    }
}

/// Builds the X/Y drive pair for an IQ mixer. `carrier` must contain exactly
/// one sine primitive (it may be multiplied by an envelope); Y is X with that
/// sine's phase advanced by pi/2. Each output then passes through its own
/// channel config, whose offsets null LO leakage and whose gain/delay balance
/// the image sideband.
pub fn gen_iq_pair(
    carrier: &WaveExpr,
    bindings: &Bindings,
    length: usize,
    sample_rate: f64,
    cfg_x: &ChannelConfig,
    cfg_y: &ChannelConfig,
) -> Result<(Waveform, Waveform), ChannelError> {
    match count_sines(carrier) {
        0 => return Err(ChannelError::NonSinusoidalCarrier),
        1 => {}
        n => return Err(ChannelError::AmbiguousCarrier(n)),
    }
    let x = sample_expr(carrier, bindings, length, sample_rate)?;
    let y = sample_expr(&advance_carrier(carrier), bindings, length, sample_rate)?;
    Ok((apply_channel(&x, cfg_x), apply_channel(&y, cfg_y)))
}

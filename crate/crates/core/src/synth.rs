//! Synthetic dispersive-readout traces for the digitizer emulator.
//!
//! Each trigger produces `round(2047 * clamp(A cos(2 pi f n / fs + phi_state) + noise, -1, 1))`
//! with Gaussian noise drawn from a generator seeded per trigger.

use std::f64::consts::PI;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::kvconfig::{KvConfig, KvError};
use crate::readout::QubitState;

pub const SYNTH_SCALE: f64 = 2047.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DigitizerProfile {
    pub record_length: usize,
    pub sample_rate: f64,
    pub carrier_freq: f64,
    pub amplitude: f64,
    pub phase_zero: f64,
    pub phase_one: f64,
    pub noise_sigma: f64,
    pub trigger_interval: Duration,
    /// Cycled per trigger sequence number.
    pub schedule: Vec<QubitState>,
    pub seed: u64,
    pub device_id: u16,
    pub channel_id: u8,
}

impl Default for DigitizerProfile {
    fn default() -> Self {
        Self {
            record_length: 10_000,
            sample_rate: 1e9,
            carrier_freq: 50e6,
            amplitude: 0.8,
            phase_zero: 0.0,
            phase_one: PI / 2.0,
            noise_sigma: 0.1,
            trigger_interval: Duration::from_micros(500),
            schedule: vec![QubitState::Zero, QubitState::One],
            seed: 1,
            device_id: 0,
            channel_id: 0,
        }
    }
}

pub const PROFILE_KEYS: &[&str] = &[
    "record_length",
    "sample_rate",
    "carrier_freq",
    "amplitude",
    "phase_zero",
    "phase_one",
    "noise_sigma",
    "trigger_interval",
    "schedule",
    "seed",
    "device_id",
    "channel_id",
];

/// Parses a schedule string of `0`/`1` characters, e.g. `0011`.
pub fn parse_schedule(s: &str) -> Result<Vec<QubitState>, ProfileError> {
    let states = s
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '0' => Ok(QubitState::Zero),
            '1' => Ok(QubitState::One),
            other => Err(ProfileError::Invalid(format!(
                "schedule character `{other}`"
            ))),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if states.is_empty() {
        return Err(ProfileError::Invalid("empty schedule".into()));
    }
    Ok(states)
}

pub fn format_schedule(states: &[QubitState]) -> String {
    states
        .iter()
        .map(|s| match s {
            QubitState::Zero => '0',
            QubitState::One => '1',
        })
        .collect()
}

impl DigitizerProfile {
    /// Reads a profile; missing keys keep their defaults. `trigger_interval`
    /// is in seconds.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ProfileError> {
        let d = Self::default();
        let interval: Option<f64> = kv.get("trigger_interval")?;
        let p = Self {
            record_length: kv.get_or("record_length", d.record_length)?,
            sample_rate: kv.get_or("sample_rate", d.sample_rate)?,
            carrier_freq: kv.get_or("carrier_freq", d.carrier_freq)?,
            amplitude: kv.get_or("amplitude", d.amplitude)?,
            phase_zero: kv.get_or("phase_zero", d.phase_zero)?,
            phase_one: kv.get_or("phase_one", d.phase_one)?,
            noise_sigma: kv.get_or("noise_sigma", d.noise_sigma)?,
            trigger_interval: match interval {
                Some(s) if s.is_finite() && s > 0.0 => Duration::from_secs_f64(s),
                Some(s) => {
                    return Err(ProfileError::Invalid(format!(
                        "trigger_interval {s} must be > 0"
                    )))
                }
                None => d.trigger_interval,
            },
            schedule: match kv.raw("schedule") {
                Some(s) => parse_schedule(s)?,
                None => d.schedule,
            },
            seed: kv.get_or("seed", d.seed)?,
            device_id: kv.get_or("device_id", d.device_id)?,
            channel_id: kv.get_or("channel_id", d.channel_id)?,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn to_kv_text(&self) -> String {
        format!(
            "record_length={}\nsample_rate={}\ncarrier_freq={}\namplitude={}\nphase_zero={}\nphase_one={}\nnoise_sigma={}\ntrigger_interval={}\nschedule={}\nseed={}\ndevice_id={}\nchannel_id={}\n",
            self.record_length,
            self.sample_rate,
            self.carrier_freq,
            self.amplitude,
            self.phase_zero,
            self.phase_one,
            self.noise_sigma,
            self.trigger_interval.as_secs_f64(),
            format_schedule(&self.schedule),
            self.seed,
            self.device_id,
            self.channel_id,
        )
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |m: &str| Err(ProfileError::Invalid(m.into()));
        if self.record_length == 0
            || self.record_length > u16::MAX as usize * crate::datalink::MAX_SAMPLES_PER_FRAME
        {
            return bad("record_length out of range");
        }
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return bad("sample_rate must be > 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if self.trigger_interval.is_zero() {
            return bad("trigger_interval must be > 0");
        }
        if self.schedule.is_empty() {
            return bad("empty schedule");
        }
        if ![
            self.carrier_freq,
            self.amplitude,
            self.phase_zero,
            self.phase_one,
        ]
        .iter()
        .all(|v| v.is_finite())
        {
            return bad("non-finite signal parameter");
        }
        Ok(())
    }

    pub fn state_for(&self, trigger_seq: u32) -> QubitState {
        self.schedule[trigger_seq as usize % self.schedule.len()]
    }

    pub fn phase_for(&self, state: QubitState) -> f64 {
        match state {
            QubitState::Zero => self.phase_zero,
            QubitState::One => self.phase_one,
        }
    }

    /// Seed of the noise generator for one trigger.
    pub fn trigger_seed(&self, trigger_seq: u32) -> u64 {
        splitmix64(self.seed ^ u64::from(trigger_seq).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Reusable trace generator with both state carriers precomputed.
#[derive(Debug, Clone)]
pub struct TraceSynth {
    carriers: [Vec<f64>; 2],
    sigma: f64,
}

impl TraceSynth {
    pub fn new(p: &DigitizerProfile) -> Self {
        let step = 2.0 * PI * p.carrier_freq / p.sample_rate;
        let carrier = |phi: f64| -> Vec<f64> {
            (0..p.record_length)
                .map(|n| p.amplitude * (step * n as f64 + phi).cos())
                .collect()
        };
        Self {
            carriers: [carrier(p.phase_zero), carrier(p.phase_one)],
            sigma: p.noise_sigma,
        }
    }

    pub fn trace_into(&self, state: QubitState, seed: u64, out: &mut Vec<i16>) {
        let carrier = &self.carriers[u8::from(state) as usize];
        out.clear();
        out.reserve(carrier.len());
        let quantize = |x: f64| (SYNTH_SCALE * x.clamp(-1.0, 1.0)).round() as i16;
        if self.sigma == 0.0 {
            out.extend(carrier.iter().map(|&c| quantize(c)));
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            out.extend(carrier.iter().map(|&c| {
                let n: f64 = StandardNormal.sample(&mut rng);
                quantize(c + self.sigma * n)
            }));
        }
    }

    pub fn trace(&self, state: QubitState, seed: u64) -> Vec<i16> {
        let mut out = Vec::new();
        self.trace_into(state, seed, &mut out);
        out
    }
}

pub fn synth_readout_trace(profile: &DigitizerProfile, state: QubitState, seed: u64) -> Vec<i16> {
    TraceSynth::new(profile).trace(state, seed)
}

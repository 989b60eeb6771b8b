//! Waveform engine: sampled signals, the built-in generators and the numeric
//! algebra (pointwise ops, integral, differential, convolution).

mod expr;
mod store;

pub use expr::{differentiate_expr, parse_expr, sample_expr, Bindings, ExprError, WaveExpr};
pub use store::{StoreError, WaveformStore, DEFAULT_STORE_CAPACITY};

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use statrs::function::erf::erf;
use thiserror::Error;

/// 1 GS/s.
pub const DEFAULT_SAMPLE_RATE: f64 = 1e9;
/// Benchmark waveform length.
pub const DEFAULT_LENGTH: usize = 6000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveError {
    #[error("waveform length must be at least 1")]
    EmptyWaveform,
    #[error("sample rate must be positive and finite, got {0}")]
    BadSampleRate(f64),
    #[error("{kind} is missing parameter `{name}`")]
    MissingParameter { kind: WaveKind, name: &'static str },
    #[error("{kind} does not take parameter `{name}`")]
    UnknownParameter { kind: WaveKind, name: String },
    #[error("{kind} parameter `{name}` is invalid: {reason}")]
    InvalidParameter {
        kind: WaveKind,
        name: &'static str,
        reason: &'static str,
    },
    #[error("sample rates differ: {0} Hz vs {1} Hz")]
    SampleRateMismatch(f64, f64),
}

/// A uniformly sampled real-valued signal. Sample `n` sits at `t0 + n / sample_rate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: f64,
    t0: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self, WaveError> {
        Self::with_start(samples, sample_rate, 0.0)
    }

    pub fn with_start(samples: Vec<f64>, sample_rate: f64, t0: f64) -> Result<Self, WaveError> {
        if samples.is_empty() {
            return Err(WaveError::EmptyWaveform);
        }
        check_rate(sample_rate)?;
        Ok(Self {
            samples,
            sample_rate,
            t0,
        })
    }

    pub fn zeros(length: usize, sample_rate: f64) -> Result<Self, WaveError> {
        Self::new(vec![0.0; length], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn time_of(&self, n: usize) -> f64 {
        self.t0 + n as f64 / self.sample_rate
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }
}

fn check_rate(sample_rate: f64) -> Result<(), WaveError> {
    if sample_rate > 0.0 && sample_rate.is_finite() {
        Ok(())
    } else {
        Err(WaveError::BadSampleRate(sample_rate))
    }
}

/// The built-in waveform kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WaveKind {
    Dc,
    Sine,
    Rectangle,
    Gaussian,
    IsoscelesTrapezoid,
    Triangle,
    Slope,
    Flattop,
}

impl WaveKind {
    pub const ALL: [WaveKind; 8] = [
        WaveKind::Dc,
        WaveKind::Sine,
        WaveKind::Rectangle,
        WaveKind::Gaussian,
        WaveKind::IsoscelesTrapezoid,
        WaveKind::Triangle,
        WaveKind::Slope,
        WaveKind::Flattop,
    ];

    /// Name used in the expression language.
    pub fn primitive_name(self) -> &'static str {
        match self {
            WaveKind::Dc => "dc",
            WaveKind::Sine => "sine",
            WaveKind::Rectangle => "rect",
            WaveKind::Gaussian => "gauss",
            WaveKind::IsoscelesTrapezoid => "trapezoid",
            WaveKind::Triangle => "triangle",
            WaveKind::Slope => "slope",
            WaveKind::Flattop => "flattop",
        }
    }

    pub fn from_primitive_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.primitive_name() == name)
    }

    /// Accepted parameter names. `a` defaults to 1, `phi` to 0; all others are required.
    pub fn parameters(self) -> &'static [&'static str] {
        match self {
            WaveKind::Dc => &["a"],
            WaveKind::Sine => &["a", "f", "phi"],
            WaveKind::Rectangle => &["a", "t1", "t2"],
            WaveKind::Gaussian => &["a", "mu", "sigma"],
            WaveKind::IsoscelesTrapezoid => &["a", "t1", "t2", "r"],
            WaveKind::Triangle => &["a", "t1", "t2"],
            WaveKind::Slope => &["a", "t0", "width"],
            WaveKind::Flattop => &["a", "sigma", "t1", "t2"],
        }
    }
}

impl fmt::Display for WaveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            WaveKind::Dc => "DC",
            WaveKind::Sine => "Sine",
            WaveKind::Rectangle => "Rectangle",
            WaveKind::Gaussian => "Gaussian",
            WaveKind::IsoscelesTrapezoid => "IsoscelesTrapezoid",
            WaveKind::Triangle => "Triangle",
            WaveKind::Slope => "Slope",
            WaveKind::Flattop => "Flattop",
        };
        f.write_str(name)
    }
}

impl FromStr for WaveKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s) || k.primitive_name() == s)
            .ok_or_else(|| format!("unknown waveform kind `{s}`"))
    }
}

/// Named real arguments for [`generate`].
pub type WaveParams = BTreeMap<String, f64>;

struct ParamReader<'a> {
    kind: WaveKind,
    params: &'a WaveParams,
}

impl ParamReader<'_> {
    fn required(&self, name: &'static str) -> Result<f64, WaveError> {
        self.params
            .get(name)
            .copied()
            .ok_or(WaveError::MissingParameter {
                kind: self.kind,
                name,
            })
    }

    fn or(&self, name: &'static str, default: f64) -> f64 {
        self.params.get(name).copied().unwrap_or(default)
    }

    fn positive(&self, name: &'static str) -> Result<f64, WaveError> {
        let v = self.required(name)?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(WaveError::InvalidParameter {
                kind: self.kind,
                name,
                reason: "must be positive",
            })
        }
    }

    fn window(&self) -> Result<(f64, f64), WaveError> {
        let t1 = self.required("t1")?;
        let t2 = self.required("t2")?;
        if t2 < t1 {
            return Err(WaveError::InvalidParameter {
                kind: self.kind,
                name: "t2",
                reason: "must not precede t1",
            });
        }
        Ok((t1, t2))
    }
}

/// Samples `kind` at `t = n / sample_rate` for `n in 0..length`.
pub fn generate(
    kind: WaveKind,
    params: &WaveParams,
    length: usize,
    sample_rate: f64,
) -> Result<Waveform, WaveError> {
    if length == 0 {
        return Err(WaveError::EmptyWaveform);
    }
    check_rate(sample_rate)?;
    if let Some(name) = params
        .keys()
        .find(|name| !kind.parameters().contains(&name.as_str()))
    {
        return Err(WaveError::UnknownParameter {
            kind,
            name: name.clone(),
        });
    }
    let p = ParamReader { kind, params };
    let a = p.or("a", 1.0);
    let dt = 1.0 / sample_rate;
    let time = |n: usize| n as f64 * dt;

    let samples: Vec<f64> = match kind {
        WaveKind::Dc => vec![p.required("a")?; length],
        WaveKind::Sine => {
            let f = p.required("f")?;
            let phi = p.or("phi", 0.0);
            let w = 2.0 * PI * f;
            (0..length).map(|n| a * (w * time(n) + phi).sin()).collect()
        }
        WaveKind::Rectangle => {
            let (t1, t2) = p.window()?;
            (0..length)
                .map(|n| {
                    let t = time(n);
                    if t >= t1 && t < t2 {
                        a
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        WaveKind::Gaussian => {
            let mu = p.required("mu")?;
            let sigma = p.positive("sigma")?;
            let inv = 1.0 / (2.0 * sigma * sigma);
            (0..length)
                .map(|n| {
                    let x = time(n) - mu;
                    a * (-x * x * inv).exp()
                })
                .collect()
        }
        WaveKind::IsoscelesTrapezoid => {
            let (t1, t2) = p.window()?;
            let r = p.positive("r")?;
            if 2.0 * r > t2 - t1 {
                return Err(WaveError::InvalidParameter {
                    kind,
                    name: "r",
                    reason: "ramps longer than the pulse",
                });
            }
            (0..length)
                .map(|n| {
                    let t = time(n);
                    if t < t1 || t >= t2 {
                        0.0
                    } else if t < t1 + r {
                        a * (t - t1) / r
                    } else if t > t2 - r {
                        a * (t2 - t) / r
                    } else {
                        a
                    }
                })
                .collect()
        }
        WaveKind::Triangle => {
            let (t1, t2) = p.window()?;
            if t2 <= t1 {
                return Err(WaveError::InvalidParameter {
                    kind,
                    name: "t2",
                    reason: "must exceed t1",
                });
            }
            let half = 0.5 * (t2 - t1);
            let mid = t1 + half;
            (0..length)
                .map(|n| {
                    let t = time(n);
                    if t < t1 || t >= t2 {
                        0.0
                    } else {
                        a * (1.0 - (t - mid).abs() / half)
                    }
                })
                .collect()
        }
        WaveKind::Slope => {
            let start = p.required("t0")?;
            let width = p.positive("width")?;
            let (lo, hi) = if a >= 0.0 { (0.0, a) } else { (a, 0.0) };
            (0..length)
                .map(|n| (a * (time(n) - start) / width).clamp(lo, hi))
                .collect()
        }
        WaveKind::Flattop => {
            let sigma = p.positive("sigma")?;
            let (t1, t2) = p.window()?;
            let scale = 1.0 / (SQRT_2 * sigma);
            (0..length)
                .map(|n| {
                    let t = time(n);
                    0.5 * a * (erf((t - t1) * scale) - erf((t - t2) * scale))
                })
                .collect()
        }
    };
    Ok(Waveform {
        samples,
        sample_rate,
        t0: 0.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseOp {
    Add,
    Sub,
    Mul,
}

/// Elementwise combination; the shorter operand is zero-extended on the right.
pub fn pointwise(op: PointwiseOp, a: &Waveform, b: &Waveform) -> Result<Waveform, WaveError> {
    if a.sample_rate != b.sample_rate {
        return Err(WaveError::SampleRateMismatch(a.sample_rate, b.sample_rate));
    }
    let len = a.len().max(b.len());
    let at = |w: &Waveform, n: usize| w.samples.get(n).copied().unwrap_or(0.0);
    let samples = (0..len)
        .map(|n| {
            let (x, y) = (at(a, n), at(b, n));
            match op {
                PointwiseOp::Add => x + y,
                PointwiseOp::Sub => x - y,
                PointwiseOp::Mul => x * y,
            }
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: a.sample_rate,
        t0: a.t0,
    })
}

/// Cumulative left-Riemann sum: `out[n] = dt * sum(w[0..=n])`.
pub fn integrate(w: &Waveform) -> Waveform {
    let dt = w.dt();
    let mut acc = 0.0;
    let samples = w
        .samples
        .iter()
        .map(|&x| {
            acc += x;
            acc * dt
        })
        .collect();
    Waveform {
        samples,
        sample_rate: w.sample_rate,
        t0: w.t0,
    }
}

/// Backward difference; `out[0] = 0`.
pub fn differentiate_numeric(w: &Waveform) -> Waveform {
    let fs = w.sample_rate;
    let mut samples = Vec::with_capacity(w.len());
    samples.push(0.0);
    samples.extend(w.samples.windows(2).map(|p| (p[1] - p[0]) * fs));
    Waveform {
        samples,
        sample_rate: fs,
        t0: w.t0,
    }
}

/// Full linear convolution scaled by `1 / sample_rate`, approximating the
/// continuous convolution integral.
pub fn convolve(a: &Waveform, kernel: &Waveform) -> Result<Waveform, WaveError> {
    if a.sample_rate != kernel.sample_rate {
        return Err(WaveError::SampleRateMismatch(
            a.sample_rate,
            kernel.sample_rate,
        ));
    }
    let dt = a.dt();
    let mut out = vec![0.0; a.len() + kernel.len() - 1];
    for (i, &x) in a.samples.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (acc, &k) in out[i..].iter_mut().zip(&kernel.samples) {
            *acc += x * k;
        }
    }
    for v in &mut out {
        *v *= dt;
    }
    Ok(Waveform {
        samples: out,
        sample_rate: a.sample_rate,
        t0: a.t0 + kernel.t0,
    })
}

//! Waveform generation timing for the eight primitive kinds.

use std::hint::black_box;
use std::time::Instant;

use qctrl_core::waveform::{generate, WaveKind, WaveParams, DEFAULT_LENGTH, DEFAULT_SAMPLE_RATE};
use serde::Serialize;
use serde_json::json;

use crate::stats::{Machine, Summary};

pub const MIN_ITERATIONS: usize = 30;

/// Reference generation times, in microseconds per 6000-point waveform, from
/// the original C++ implementation on a 2012 desktop.
pub fn reference_budget_us(kind: WaveKind) -> f64 {
    match kind {
        WaveKind::Dc => 30.0,
        WaveKind::Sine => 48.0,
        WaveKind::Rectangle => 33.0,
        WaveKind::Gaussian => 66.0,
        WaveKind::IsoscelesTrapezoid => 46.0,
        WaveKind::Triangle => 47.0,
        WaveKind::Slope => 32.0,
        WaveKind::Flattop => 79.0,
    }
}

/// Typical pulse parameters inside a 6 µs window.
pub fn bench_params(kind: WaveKind) -> WaveParams {
    let p: &[(&str, f64)] = match kind {
        WaveKind::Dc => &[("a", 0.5)],
        WaveKind::Sine => &[("a", 0.8), ("f", 100e6), ("phi", 0.3)],
        WaveKind::Rectangle => &[("a", 0.9), ("t1", 1e-6), ("t2", 5e-6)],
        WaveKind::Gaussian => &[("a", 0.9), ("mu", 3e-6), ("sigma", 5e-7)],
        WaveKind::IsoscelesTrapezoid => &[("a", 0.9), ("t1", 1e-6), ("t2", 5e-6), ("r", 5e-7)],
        WaveKind::Triangle => &[("a", 0.9), ("t1", 1e-6), ("t2", 5e-6)],
        WaveKind::Slope => &[("a", 0.9), ("t0", 1e-6), ("width", 4e-6)],
        WaveKind::Flattop => &[("a", 0.9), ("sigma", 2e-7), ("t1", 1e-6), ("t2", 5e-6)],
    };
    p.iter().map(|&(k, v)| (k.to_string(), v)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct GenRow {
    pub kind: String,
    pub samples: usize,
    #[serde(flatten)]
    pub timing: Summary,
    pub reference_us: f64,
}

impl GenRow {
    pub fn median_us(&self) -> f64 {
        self.timing.median_s * 1e6
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GenReport {
    pub machine: Machine,
    pub rows: Vec<GenRow>,
}

pub fn bench_gen(iterations: usize) -> GenReport {
    let iterations = iterations.max(MIN_ITERATIONS);
    let rows = WaveKind::ALL
        .iter()
        .map(|&kind| {
            let params = bench_params(kind);
            // warm caches and the allocator
            for _ in 0..3 {
                black_box(
                    generate(kind, &params, DEFAULT_LENGTH, DEFAULT_SAMPLE_RATE)
                        .expect("bench params are valid"),
                );
            }
            let times: Vec<_> = (0..iterations)
                .map(|_| {
                    let t = Instant::now();
                    let w = generate(
                        kind,
                        black_box(&params),
                        DEFAULT_LENGTH,
                        DEFAULT_SAMPLE_RATE,
                    );
                    let dt = t.elapsed();
                    black_box(w).expect("bench params are valid");
                    dt
                })
                .collect();
            GenRow {
                kind: kind.to_string(),
                samples: DEFAULT_LENGTH,
                timing: Summary::from_durations(&times),
                reference_us: reference_budget_us(kind),
            }
        })
        .collect();
    GenReport {
        machine: Machine::detect(),
        rows,
    }
}

impl GenReport {
    pub fn slowest(&self) -> Option<&GenRow> {
        self.rows
            .iter()
            .max_by(|a, b| a.timing.median_s.total_cmp(&b.timing.median_s))
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "waveform generation, {} points @ 1 GS/s\nmachine: {}\n",
            DEFAULT_LENGTH,
            self.machine.describe()
        );
        s.push_str(&format!(
            "{:<20} {:>6} {:>12} {:>12} {:>14}\n",
            "kind", "iters", "median µs", "p95 µs", "reference µs"
        ));
        for r in &self.rows {
            s.push_str(&format!(
                "{:<20} {:>6} {:>12.2} {:>12.2} {:>14.0}\n",
                r.kind,
                r.timing.iterations,
                r.median_us(),
                r.timing.p95_s * 1e6,
                r.reference_us
            ));
        }
        s
    }

    pub fn json_lines(&self) -> Vec<String> {
        let mut out = vec![json!({ "bench": "gen", "machine": self.machine }).to_string()];
        for r in &self.rows {
            let mut v = serde_json::to_value(r).expect("row serializes");
            v["bench"] = json!("gen");
            out.push(v.to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_has_valid_bench_params() {
        for kind in WaveKind::ALL {
            generate(
                kind,
                &bench_params(kind),
                DEFAULT_LENGTH,
                DEFAULT_SAMPLE_RATE,
            )
            .unwrap();
        }
    }

    #[test]
    fn report_has_eight_rows() {
        let r = bench_gen(1);
        assert_eq!(r.rows.len(), 8);
        assert!(r
            .rows
            .iter()
            .all(|row| row.timing.iterations == MIN_ITERATIONS));
        assert_eq!(r.json_lines().len(), 9);
    }
}

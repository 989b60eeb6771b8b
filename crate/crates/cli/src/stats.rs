//! Timing summaries and the machine descriptor printed with every report.

use std::time::Duration;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub iterations: usize,
    pub median_s: f64,
    pub p95_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl Summary {
    /// Nearest-rank percentiles over the measured durations.
    pub fn from_durations(samples: &[Duration]) -> Self {
        assert!(!samples.is_empty(), "no timing samples");
        let mut s: Vec<f64> = samples.iter().map(Duration::as_secs_f64).collect();
        s.sort_by(f64::total_cmp);
        Self {
            iterations: s.len(),
            median_s: median_sorted(&s),
            p95_s: percentile_sorted(&s, 95.0),
            min_s: s[0],
            max_s: s[s.len() - 1],
        }
    }
}

pub fn median_sorted(s: &[f64]) -> f64 {
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

pub fn percentile_sorted(s: &[f64], pct: f64) -> f64 {
    let rank = ((pct / 100.0) * s.len() as f64).ceil() as usize;
    s[rank.clamp(1, s.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Machine {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
    pub memory_kib: Option<u64>,
}

impl Machine {
    pub fn detect() -> Self {
        let cpuinfo = std::fs::read_to_string("/proc/cpuinfo").unwrap_or_default();
        let meminfo = std::fs::read_to_string("/proc/meminfo").unwrap_or_default();
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model: cpuinfo
                .lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|s| s.trim().to_string()),
            memory_kib: meminfo
                .lines()
                .find(|l| l.starts_with("MemTotal:"))
                .and_then(|l| l.split_whitespace().nth(1))
                .and_then(|v| v.parse().ok()),
        }
    }

    pub fn describe(&self) -> String {
        let mut s = format!("{} {}, {} cpu", self.os, self.arch, self.cpus);
        if let Some(m) = &self.cpu_model {
            s.push_str(&format!(" ({m})"));
        }
        if let Some(k) = self.memory_kib {
            s.push_str(&format!(", {:.1} GiB", k as f64 / (1024.0 * 1024.0)));
        }
        s
    }
}

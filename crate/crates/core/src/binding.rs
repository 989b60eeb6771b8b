//! Virtual-to-physical channel bindings and their calibration file.
//!
//! One binding per line:
//!
//! ```text
//! # virtual_name device_id physical_channel kind latency_samples
//! Q0.X   1 0 waveform 12
//! Q0.DC  9 2 dc       0
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Waveform,
    Trigger,
    Dc,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Waveform => "waveform",
            ChannelKind::Trigger => "trigger",
            ChannelKind::Dc => "dc",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "waveform" => Ok(ChannelKind::Waveform),
            "trigger" => Ok(ChannelKind::Trigger),
            "dc" => Ok(ChannelKind::Dc),
            other => Err(format!("unknown channel kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelBinding {
    pub virtual_channel: String,
    pub device_id: u16,
    pub physical_channel: u8,
    pub kind: ChannelKind,
    /// Device pipeline latency, used to align waveform channels.
    #[serde(default)]
    pub latency_samples: u32,
}

impl ChannelBinding {
    pub fn new(
        name: impl Into<String>,
        device_id: u16,
        physical_channel: u8,
        kind: ChannelKind,
        latency_samples: u32,
    ) -> Self {
        Self {
            virtual_channel: name.into(),
            device_id,
            physical_channel,
            kind,
            latency_samples,
        }
    }

    pub fn physical_key(&self) -> (u16, u8, ChannelKind) {
        (self.device_id, self.physical_channel, self.kind)
    }
}

impl fmt::Display for ChannelBinding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.virtual_channel,
            self.device_id,
            self.physical_channel,
            self.kind,
            self.latency_samples
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {message}")]
pub struct BindingFileError {
    pub line: usize,
    pub message: String,
}

pub fn parse_bindings(text: &str) -> Result<Vec<ChannelBinding>, BindingFileError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| BindingFileError {
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, device, physical, kind, latency] = fields[..] else {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        };
        out.push(ChannelBinding {
            virtual_channel: name.to_string(),
            device_id: device
                .parse()
                .map_err(|e| err(format!("device_id `{device}`: {e}")))?,
            physical_channel: physical
                .parse()
                .map_err(|e| err(format!("physical_channel `{physical}`: {e}")))?,
            kind: kind.parse().map_err(err)?,
            latency_samples: latency
                .parse()
                .map_err(|e| err(format!("latency_samples `{latency}`: {e}")))?,
        });
    }
    Ok(out)
}

pub fn format_bindings(bindings: &[ChannelBinding]) -> String {
    let mut s = String::from("# virtual_name device_id physical_channel kind latency_samples\n");
    for b in bindings {
        s.push_str(&b.to_string());
        s.push('\n');
    }
    s
}

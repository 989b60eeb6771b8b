//! The virtual instrument: separate AWG and DC-source channels presented as
//! one device, with per-channel compensation and automatic timing alignment.
//!
//! This is the transport-free half of the control server. It resolves
//! waveform sources to DAC codes and validates requests; sending the
//! resulting device commands is left to the caller.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use thiserror::Error;

use crate::binding::{ChannelBinding, ChannelKind};
use crate::channel::{
    apply_channel, render_dac, ChannelConfig, ChannelError, ChannelRole, DacRecord,
};
use crate::waveform::{
    sample_expr, Bindings, ExprError, StoreError, WaveExpr, Waveform, WaveformStore,
};

pub const DEFAULT_DC_RANGE_VOLTS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InstrumentError {
    #[error("virtual channel `{0}` is already bound")]
    DuplicateName(String),
    #[error("device {device} {kind} channel {physical} is already bound to `{existing}`")]
    PhysicalConflict {
        device: u16,
        physical: u8,
        kind: ChannelKind,
        existing: String,
    },
    #[error("unknown virtual channel `{0}`")]
    UnknownChannel(String),
    #[error("channel `{channel}` is a {actual} channel, expected {expected}")]
    KindMismatch {
        channel: String,
        expected: ChannelKind,
        actual: ChannelKind,
    },
    #[error("{volts} V is outside the +/-{limit} V range")]
    DcRange { volts: f64, limit: f64 },
    #[error("channels not armed: {}", .0.join(", "))]
    Unarmed(Vec<String>),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Expr(#[from] ExprError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Where the samples for a waveform write come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WaveSource {
    Slot(usize),
    Expr {
        expr: WaveExpr,
        length: usize,
        sample_rate: f64,
    },
}

/// A waveform rendered for one physical channel, ready for upload.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedWave {
    pub binding: ChannelBinding,
    /// Device memory slot; each physical channel owns the slot with its index.
    pub device_slot: u16,
    pub dac: DacRecord,
}

#[derive(Debug)]
pub struct VirtualInstrument {
    bindings: BTreeMap<String, ChannelBinding>,
    physical: HashMap<(u16, u8, ChannelKind), String>,
    configs: HashMap<String, ChannelConfig>,
    alignment: BTreeMap<String, u32>,
    armed: BTreeMap<String, u16>,
    store: Arc<WaveformStore>,
    trigger_mode: u8,
}

impl Default for VirtualInstrument {
    fn default() -> Self {
        Self::new(Arc::new(WaveformStore::default()))
    }
}

fn default_role(b: &ChannelBinding) -> ChannelRole {
    b.virtual_channel
        .rsplit('.')
        .next()
        .and_then(|s| s.parse().ok())
        .unwrap_or(match b.kind {
            ChannelKind::Dc => ChannelRole::Dc,
            _ => ChannelRole::X,
        })
}

impl VirtualInstrument {
    pub fn new(store: Arc<WaveformStore>) -> Self {
        Self {
            bindings: BTreeMap::new(),
            physical: HashMap::new(),
            configs: HashMap::new(),
            alignment: BTreeMap::new(),
            armed: BTreeMap::new(),
            store,
            trigger_mode: 0,
        }
    }

    pub fn store(&self) -> &Arc<WaveformStore> {
        &self.store
    }

    pub fn bind(&mut self, binding: ChannelBinding) -> Result<(), InstrumentError> {
        if self.bindings.contains_key(&binding.virtual_channel) {
            return Err(InstrumentError::DuplicateName(binding.virtual_channel));
        }
        let key = binding.physical_key();
        if let Some(existing) = self.physical.get(&key) {
            return Err(InstrumentError::PhysicalConflict {
                device: key.0,
                physical: key.1,
                kind: key.2,
                existing: existing.clone(),
            });
        }
        self.physical.insert(key, binding.virtual_channel.clone());
        self.bindings
            .insert(binding.virtual_channel.clone(), binding);
        Ok(())
    }

    pub fn unbind(&mut self, name: &str) -> Result<ChannelBinding, InstrumentError> {
        let b = self
            .bindings
            .remove(name)
            .ok_or_else(|| InstrumentError::UnknownChannel(name.into()))?;
        self.physical.remove(&b.physical_key());
        self.configs.remove(name);
        self.alignment.remove(name);
        self.armed.remove(name);
        Ok(b)
    }

    pub fn binding(&self, name: &str) -> Result<&ChannelBinding, InstrumentError> {
        self.bindings
            .get(name)
            .ok_or_else(|| InstrumentError::UnknownChannel(name.into()))
    }

    /// Bindings sorted by virtual name.
    pub fn list(&self) -> impl Iterator<Item = &ChannelBinding> {
        self.bindings.values()
    }

    pub fn devices(&self) -> Vec<u16> {
        let mut d: Vec<u16> = self.bindings.values().map(|b| b.device_id).collect();
        d.sort_unstable();
        d.dedup();
        d
    }

    pub fn configure(&mut self, name: &str, cfg: ChannelConfig) -> Result<(), InstrumentError> {
        self.binding(name)?;
        cfg.validate()?;
        self.configs.insert(name.to_string(), cfg);
        Ok(())
    }

    /// The user-supplied config (neutral if never configured).
    pub fn config(&self, name: &str) -> Result<ChannelConfig, InstrumentError> {
        let b = self.binding(name)?;
        Ok(self
            .configs
            .get(name)
            .cloned()
            .unwrap_or_else(|| ChannelConfig::neutral(default_role(b))))
    }

    /// Config with the alignment delay folded into `delay_samples`.
    pub fn effective_config(&self, name: &str) -> Result<ChannelConfig, InstrumentError> {
        let mut cfg = self.config(name)?;
        cfg.delay_samples += self.alignment.get(name).copied().unwrap_or(0);
        Ok(cfg)
    }

    /// Pads every waveform channel so that `latency + added_delay` is the
    /// same (the maximum latency) across all of them.
    pub fn align_timing(&mut self) -> BTreeMap<String, u32> {
        let waves: Vec<&ChannelBinding> = self
            .bindings
            .values()
            .filter(|b| b.kind == ChannelKind::Waveform)
            .collect();
        let max = waves.iter().map(|b| b.latency_samples).max().unwrap_or(0);
        let added: BTreeMap<String, u32> = waves
            .iter()
            .map(|b| (b.virtual_channel.clone(), max - b.latency_samples))
            .collect();
        self.alignment = added.clone();
        added
    }

    pub fn alignment(&self) -> &BTreeMap<String, u32> {
        &self.alignment
    }

    fn expect_kind(
        &self,
        name: &str,
        kind: ChannelKind,
    ) -> Result<&ChannelBinding, InstrumentError> {
        let b = self.binding(name)?;
        if b.kind != kind {
            return Err(InstrumentError::KindMismatch {
                channel: name.into(),
                expected: kind,
                actual: b.kind,
            });
        }
        Ok(b)
    }

    pub fn resolve_source(
        &self,
        source: &WaveSource,
        bindings: &Bindings,
    ) -> Result<Waveform, InstrumentError> {
        Ok(match source {
            WaveSource::Slot(slot) => (*self.store.get(*slot)?).clone(),
            WaveSource::Expr {
                expr,
                length,
                sample_rate,
            } => sample_expr(expr, bindings, *length, *sample_rate)?,
        })
    }

    /// Resolves the source and runs it through the channel pipeline and DAC
    /// rendering. Does not arm the channel; call [`mark_armed`](Self::mark_armed)
    /// once the device acknowledges the upload.
    pub fn render(
        &self,
        name: &str,
        source: &WaveSource,
        bindings: &Bindings,
    ) -> Result<RenderedWave, InstrumentError> {
        let binding = self.expect_kind(name, ChannelKind::Waveform)?.clone();
        let wave = self.resolve_source(source, bindings)?;
        let cfg = self.effective_config(name)?;
        let dac = render_dac(&apply_channel(&wave, &cfg));
        Ok(RenderedWave {
            device_slot: binding.physical_channel as u16,
            binding,
            dac,
        })
    }

    pub fn mark_armed(&mut self, name: &str, device_slot: u16) {
        if self.bindings.contains_key(name) {
            self.armed.insert(name.to_string(), device_slot);
        }
    }

    pub fn is_armed(&self, name: &str) -> bool {
        self.armed.contains_key(name)
    }

    /// Validates a DC request and returns the target binding and the
    /// microvolt-quantized level.
    pub fn dc_level(
        &self,
        name: &str,
        volts: f64,
        limit: f64,
    ) -> Result<(ChannelBinding, i64), InstrumentError> {
        let b = self.expect_kind(name, ChannelKind::Dc)?;
        if volts.is_nan() || volts.abs() > limit {
            return Err(InstrumentError::DcRange { volts, limit });
        }
        Ok((b.clone(), (volts * 1e6).round() as i64))
    }

    pub fn set_trigger_mode(&mut self, mode: u8) {
        self.trigger_mode = mode;
    }

    pub fn trigger_mode(&self) -> u8 {
        self.trigger_mode
    }

    /// Everything `play_all` must send, or the names of unarmed waveform
    /// channels. All or nothing.
    pub fn play_plan(&self) -> Result<Vec<(ChannelBinding, u16)>, InstrumentError> {
        let waves: Vec<&ChannelBinding> = self
            .bindings
            .values()
            .filter(|b| b.kind == ChannelKind::Waveform)
            .collect();
        let unarmed: Vec<String> = waves
            .iter()
            .filter(|b| !self.armed.contains_key(&b.virtual_channel))
            .map(|b| b.virtual_channel.clone())
            .collect();
        if !unarmed.is_empty() {
            return Err(InstrumentError::Unarmed(unarmed));
        }
        Ok(waves
            .into_iter()
            .map(|b| (b.clone(), self.armed[&b.virtual_channel]))
            .collect())
    }
}

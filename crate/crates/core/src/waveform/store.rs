use std::sync::{Arc, RwLock};

use thiserror::Error;

use super::Waveform;

pub const DEFAULT_STORE_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("slot {slot} out of range (capacity {capacity})")]
    OutOfRange { slot: usize, capacity: usize },
    #[error("slot {0} is empty")]
    Empty(usize),
}

/// Fixed-capacity, index-addressed waveform table. Each slot has its own lock,
/// so readers of different slots never contend and a writer only blocks
/// readers of the slot it replaces.
#[derive(Debug)]
pub struct WaveformStore {
    slots: Vec<RwLock<Option<Arc<Waveform>>>>,
}

impl Default for WaveformStore {
    fn default() -> Self {
        Self::with_capacity(DEFAULT_STORE_CAPACITY)
    }
}

impl WaveformStore {
    /// # Panics
    /// If `capacity` is zero.
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0, "store capacity must be positive");
        Self {
            slots: (0..capacity).map(|_| RwLock::new(None)).collect(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    fn slot(&self, slot: usize) -> Result<&RwLock<Option<Arc<Waveform>>>, StoreError> {
        self.slots.get(slot).ok_or(StoreError::OutOfRange {
            slot,
            capacity: self.slots.len(),
        })
    }

    /// Stores `w` in `slot`, replacing any previous waveform.
    pub fn put(&self, slot: usize, w: Waveform) -> Result<(), StoreError> {
        let cell = self.slot(slot)?;
        *cell.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(w));
        Ok(())
    }

    pub fn get(&self, slot: usize) -> Result<Arc<Waveform>, StoreError> {
        self.slot(slot)?
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .ok_or(StoreError::Empty(slot))
    }

    pub fn clear(&self, slot: usize) -> Result<(), StoreError> {
        *self.slot(slot)?.write().unwrap_or_else(|e| e.into_inner()) = None;
        Ok(())
    }

    /// Indices of occupied slots.
    pub fn occupied(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| s.read().map(|g| g.is_some()).unwrap_or(false))
            .map(|(i, _)| i)
            .collect()
    }
}

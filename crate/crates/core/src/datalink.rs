//! Digitizer data-link frames and trigger-record reassembly.
//!
//! One datagram carries one frame:
//!
//! ```text
//! off size field
//!   0   2  magic        0x51 0x44 ("QD")
//!   2   1  version      1
//!   3   1  channel_id
//!   4   2  device_id    u16 LE
//!   6   4  trigger_seq  u32 LE
//!  10   2  frame_index  u16 LE
//!  12   2  frame_count  u16 LE
//!  14   2  sample_count u16 LE (<= 728)
//!  16  2n  samples      i16 LE, 12-bit codes in [-2048, 2047]
//! ```
//!
//! A full frame is 1472 bytes, which fits a standard 1500-byte MTU datagram.

use std::collections::{HashMap, VecDeque};
use std::time::{Duration, Instant};

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0x51, 0x44];
pub const VERSION: u8 = 1;
pub const FRAME_HEADER_LEN: usize = 16;
pub const MAX_SAMPLES_PER_FRAME: usize = 728;
pub const MAX_FRAME_LEN: usize = FRAME_HEADER_LEN + 2 * MAX_SAMPLES_PER_FRAME;
pub const SAMPLE_MIN: i16 = -2048;
pub const SAMPLE_MAX: i16 = 2047;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("datagram of {0} bytes is shorter than the frame header")]
    Short(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 2]),
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("sample_count {0} exceeds {MAX_SAMPLES_PER_FRAME}")]
    TooManySamples(usize),
    #[error("sample_count {sample_count} implies {expected} bytes, datagram has {actual}")]
    LengthMismatch {
        sample_count: usize,
        expected: usize,
        actual: usize,
    },
    #[error("frame_index {index} not below frame_count {count}")]
    BadIndex { index: u16, count: u16 },
    #[error("sample {value} at position {position} is outside the 12-bit range")]
    SampleOutOfRange { position: usize, value: i16 },
    #[error("record of {0} samples needs more than 65535 frames")]
    RecordTooLong(usize),
    #[error("record is empty")]
    EmptyRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RecordKey {
    pub device_id: u16,
    pub channel_id: u8,
    pub trigger_seq: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub channel_id: u8,
    pub device_id: u16,
    pub trigger_seq: u32,
    pub frame_index: u16,
    pub frame_count: u16,
    pub samples: Vec<i16>,
}

impl Frame {
    pub fn key(&self) -> RecordKey {
        RecordKey {
            device_id: self.device_id,
            channel_id: self.channel_id,
            trigger_seq: self.trigger_seq,
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + 2 * self.samples.len()
    }

    pub fn validate(&self) -> Result<(), FrameError> {
        if self.samples.len() > MAX_SAMPLES_PER_FRAME {
            return Err(FrameError::TooManySamples(self.samples.len()));
        }
        if self.frame_index >= self.frame_count {
            return Err(FrameError::BadIndex {
                index: self.frame_index,
                count: self.frame_count,
            });
        }
        if let Some((position, &value)) = self
            .samples
            .iter()
            .enumerate()
            .find(|(_, &s)| !(SAMPLE_MIN..=SAMPLE_MAX).contains(&s))
        {
            return Err(FrameError::SampleOutOfRange { position, value });
        }
        Ok(())
    }

    /// Appends the wire form to `out`. The frame must already be valid.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.channel_id);
        out.extend_from_slice(&self.device_id.to_le_bytes());
        out.extend_from_slice(&self.trigger_seq.to_le_bytes());
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend_from_slice(&self.frame_count.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u16).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
    }
}

pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, FrameError> {
    f.validate()?;
    let mut out = Vec::with_capacity(f.encoded_len());
    f.encode_into(&mut out);
    Ok(out)
}

pub fn decode_frame(bytes: &[u8]) -> Result<Frame, FrameError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(FrameError::Short(bytes.len()));
    }
    if bytes[..2] != MAGIC {
        return Err(FrameError::BadMagic([bytes[0], bytes[1]]));
    }
    if bytes[2] != VERSION {
        return Err(FrameError::BadVersion(bytes[2]));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let sample_count = u16_at(14) as usize;
    if sample_count > MAX_SAMPLES_PER_FRAME {
        return Err(FrameError::TooManySamples(sample_count));
    }
    let expected = FRAME_HEADER_LEN + 2 * sample_count;
    if bytes.len() != expected {
        return Err(FrameError::LengthMismatch {
            sample_count,
            expected,
            actual: bytes.len(),
        });
    }
    let frame = Frame {
        channel_id: bytes[3],
        device_id: u16_at(4),
        trigger_seq: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        frame_index: u16_at(10),
        frame_count: u16_at(12),
        samples: bytes[FRAME_HEADER_LEN..]
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect(),
    };
    frame.validate()?;
    Ok(frame)
}

/// Splits one trigger record into frames of at most 728 samples.
pub fn fragment_record(
    device_id: u16,
    channel_id: u8,
    trigger_seq: u32,
    samples: &[i16],
) -> Result<Vec<Frame>, FrameError> {
    if samples.is_empty() {
        return Err(FrameError::EmptyRecord);
    }
    let count = samples.len().div_ceil(MAX_SAMPLES_PER_FRAME);
    let frame_count = u16::try_from(count).map_err(|_| FrameError::RecordTooLong(samples.len()))?;
    Ok(samples
        .chunks(MAX_SAMPLES_PER_FRAME)
        .enumerate()
        .map(|(i, chunk)| Frame {
            channel_id,
            device_id,
            trigger_seq,
            frame_index: i as u16,
            frame_count,
            samples: chunk.to_vec(),
        })
        .collect())
}

/// A rebuilt trigger record. Incomplete records list their missing frame
/// indices and carry only the samples that arrived, in index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub key: RecordKey,
    pub frame_count: u16,
    pub samples: Vec<i16>,
    pub complete: bool,
    /// Set when frames disagreed (frame_count or payload) or arrived after eviction.
    pub corrupt: bool,
    pub missing: Vec<u16>,
}

impl Record {
    pub fn is_usable(&self) -> bool {
        self.complete && !self.corrupt
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReassemblyStats {
    pub frames_ingested: u64,
    pub samples_ingested: u64,
    pub duplicate_frames: u64,
    pub conflicting_frames: u64,
    pub late_frames: u64,
    pub records_complete: u64,
    pub records_incomplete: u64,
    pub records_corrupt: u64,
    pub samples_emitted: u64,
}

struct Partial {
    frame_count: u16,
    frames: Vec<Option<Vec<i16>>>,
    received: u16,
    corrupt: bool,
    first_seen: Instant,
}

impl Partial {
    fn into_record(self, key: RecordKey) -> Record {
        let complete = self.received == self.frame_count;
        let missing = self
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(i, _)| i as u16)
            .collect();
        let samples = self.frames.into_iter().flatten().flatten().collect();
        Record {
            key,
            frame_count: self.frame_count,
            samples,
            complete,
            corrupt: self.corrupt,
            missing,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Finished {
    Emitted,
    Evicted,
}

pub const DEFAULT_MAX_PENDING: usize = 4096;
const FINISHED_MEMORY: usize = 1 << 16;

/// Rebuilds trigger records from frames that may arrive out of order,
/// duplicated, or not at all. Each record is surfaced exactly once: on
/// completion from [`ingest`](Self::ingest), or as incomplete from
/// [`flush`](Self::flush).
pub struct Reassembler {
    pending: HashMap<RecordKey, Partial>,
    finished: HashMap<RecordKey, Finished>,
    finished_order: VecDeque<RecordKey>,
    overflow: Vec<Record>,
    max_pending: usize,
    stats: ReassemblyStats,
}

impl Default for Reassembler {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_PENDING)
    }
}

impl Reassembler {
    /// `max_pending` bounds the number of partially received records; past
    /// it the oldest is evicted and reported by the next flush.
    pub fn new(max_pending: usize) -> Self {
        Self {
            pending: HashMap::new(),
            finished: HashMap::new(),
            finished_order: VecDeque::new(),
            overflow: Vec::new(),
            max_pending: max_pending.max(1),
            stats: ReassemblyStats::default(),
        }
    }

    pub fn stats(&self) -> ReassemblyStats {
        self.stats
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn ingest(&mut self, frame: Frame) -> Option<Record> {
        self.ingest_at(frame, Instant::now())
    }

    pub fn ingest_at(&mut self, frame: Frame, now: Instant) -> Option<Record> {
        self.stats.frames_ingested += 1;
        self.stats.samples_ingested += frame.samples.len() as u64;
        let key = frame.key();

        let mut reopened = false;
        match self.finished.get(&key) {
            Some(Finished::Emitted) => {
                self.stats.duplicate_frames += 1;
                return None;
            }
            Some(Finished::Evicted) => {
                self.finished.remove(&key);
                self.stats.late_frames += 1;
                reopened = true;
            }
            None => {}
        }

        if !self.pending.contains_key(&key) && self.pending.len() >= self.max_pending {
            self.evict_oldest();
        }
        let partial = self.pending.entry(key).or_insert_with(|| Partial {
            frame_count: frame.frame_count,
            frames: vec![None; frame.frame_count as usize],
            received: 0,
            corrupt: false,
            first_seen: now,
        });
        partial.corrupt |= reopened;

        if frame.frame_count != partial.frame_count || frame.frame_index >= partial.frame_count {
            partial.corrupt = true;
            self.stats.conflicting_frames += 1;
            return None;
        }
        let slot = &mut partial.frames[frame.frame_index as usize];
        match slot {
            Some(existing) => {
                if *existing == frame.samples {
                    self.stats.duplicate_frames += 1;
                } else {
                    partial.corrupt = true;
                    self.stats.conflicting_frames += 1;
                }
                return None;
            }
            None => *slot = Some(frame.samples),
        }
        partial.received += 1;
        if partial.received < partial.frame_count {
            return None;
        }
        let partial = self.pending.remove(&key).expect("present");
        let record = partial.into_record(key);
        self.remember(key, Finished::Emitted);
        self.account(&record);
        Some(record)
    }

    /// Evicts every record first seen at least `older_than` before `now`
    /// and returns them as incomplete records.
    pub fn flush(&mut self, now: Instant, older_than: Duration) -> Vec<Record> {
        let stale: Vec<RecordKey> = self
            .pending
            .iter()
            .filter(|(_, p)| now.saturating_duration_since(p.first_seen) >= older_than)
            .map(|(k, _)| *k)
            .collect();
        let mut out = std::mem::take(&mut self.overflow);
        out.extend(stale.into_iter().map(|k| self.evict(k)));
        out.sort_by_key(|r| r.key);
        out
    }

    pub fn flush_all(&mut self) -> Vec<Record> {
        let keys: Vec<RecordKey> = self.pending.keys().copied().collect();
        let mut out = std::mem::take(&mut self.overflow);
        out.extend(keys.into_iter().map(|k| self.evict(k)));
        out.sort_by_key(|r| r.key);
        out
    }

    fn evict(&mut self, key: RecordKey) -> Record {
        let record = self.pending.remove(&key).expect("present").into_record(key);
        self.remember(key, Finished::Evicted);
        self.account(&record);
        record
    }

    fn evict_oldest(&mut self) {
        if let Some(key) = self
            .pending
            .iter()
            .min_by_key(|(_, p)| p.first_seen)
            .map(|(k, _)| *k)
        {
            let record = self.evict(key);
            self.overflow.push(record);
        }
    }

    fn remember(&mut self, key: RecordKey, how: Finished) {
        if self.finished.insert(key, how).is_none() {
            self.finished_order.push_back(key);
        }
        while self.finished_order.len() > FINISHED_MEMORY {
            if let Some(old) = self.finished_order.pop_front() {
                self.finished.remove(&old);
            }
        }
    }

    fn account(&mut self, r: &Record) {
        if r.complete {
            self.stats.records_complete += 1;
        } else {
            self.stats.records_incomplete += 1;
        }
        if r.corrupt {
            self.stats.records_corrupt += 1;
        }
        self.stats.samples_emitted += r.samples.len() as u64;
    }
}

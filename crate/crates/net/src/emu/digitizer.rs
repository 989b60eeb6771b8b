//! Emulated 1 GS/s digitizer streaming trigger records as UDP frames.

use std::io;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use qctrl_core::datalink::{fragment_record, Frame};
use qctrl_core::synth::{DigitizerProfile, TraceSynth};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socket2::{Domain, Protocol, Socket, Type};

#[derive(Debug, Clone)]
pub struct DigitizerConfig {
    pub profile: DigitizerProfile,
    pub target: SocketAddr,
    /// Probability, in percent, that any one frame is dropped.
    pub loss_percent: f64,
    /// Probability, in percent, that a record's frames are sent shuffled.
    pub reorder_percent: f64,
    /// Drop this frame index from every record.
    pub drop_frame: Option<u16>,
    /// Stop after this many triggers; `None` runs until stopped.
    pub max_triggers: Option<u64>,
    pub first_trigger_seq: u32,
}

impl DigitizerConfig {
    pub fn new(profile: DigitizerProfile, target: SocketAddr) -> Self {
        Self {
            profile,
            target,
            loss_percent: 0.0,
            reorder_percent: 0.0,
            drop_frame: None,
            max_triggers: None,
            first_trigger_seq: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DigitizerStats {
    pub triggers: u64,
    pub frames_sent: u64,
    pub frames_dropped: u64,
    pub bytes_sent: u64,
    /// Triggers emitted a full interval or more behind schedule.
    pub slipped: u64,
    pub send_errors: u64,
}

impl DigitizerStats {
    pub fn slip_fraction(&self) -> f64 {
        if self.triggers == 0 {
            0.0
        } else {
            self.slipped as f64 / self.triggers as f64
        }
    }
}

#[derive(Default)]
struct Counters {
    triggers: AtomicU64,
    frames_sent: AtomicU64,
    frames_dropped: AtomicU64,
    bytes_sent: AtomicU64,
    slipped: AtomicU64,
    send_errors: AtomicU64,
}

pub struct DigitizerEmulator {
    local: SocketAddr,
    stop: Arc<AtomicBool>,
    counters: Arc<Counters>,
    thread: Option<JoinHandle<()>>,
}

const SEND_BUFFER: usize = 4 << 20;
const WAKE_MARGIN: Duration = Duration::from_micros(100);

impl DigitizerEmulator {
    /// Binds `bind` and starts streaming to `config.target`.
    pub fn spawn(bind: impl ToSocketAddrs, config: DigitizerConfig) -> io::Result<Self> {
        config
            .profile
            .validate()
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
        let bind = bind
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no bind address"))?;
        let socket = Socket::new(Domain::for_address(bind), Type::DGRAM, Some(Protocol::UDP))?;
        socket.set_send_buffer_size(SEND_BUFFER).ok();
        socket.bind(&bind.into())?;
        let socket: UdpSocket = socket.into();
        socket.connect(config.target)?;
        let local = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let counters = Arc::new(Counters::default());
        let (s, c) = (Arc::clone(&stop), Arc::clone(&counters));
        let thread = thread::Builder::new()
            .name("digitizer-emu".into())
            .spawn(move || run(socket, config, s, c))?;
        Ok(Self {
            local,
            stop,
            counters,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    pub fn stats(&self) -> DigitizerStats {
        let c = &self.counters;
        DigitizerStats {
            triggers: c.triggers.load(Ordering::Relaxed),
            frames_sent: c.frames_sent.load(Ordering::Relaxed),
            frames_dropped: c.frames_dropped.load(Ordering::Relaxed),
            bytes_sent: c.bytes_sent.load(Ordering::Relaxed),
            slipped: c.slipped.load(Ordering::Relaxed),
            send_errors: c.send_errors.load(Ordering::Relaxed),
        }
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    /// Waits for a bounded run (`max_triggers`) to finish.
    pub fn join(mut self) -> DigitizerStats {
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
        self.stats()
    }

    pub fn stop(mut self) -> DigitizerStats {
        self.halt();
        self.stats()
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for DigitizerEmulator {
    fn drop(&mut self) {
        self.halt();
    }
}

fn run(socket: UdpSocket, cfg: DigitizerConfig, stop: Arc<AtomicBool>, counters: Arc<Counters>) {
    let p = &cfg.profile;
    let synth = TraceSynth::new(p);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5EED_F00D);
    let interval = p.trigger_interval;
    let noiseless = p.noise_sigma == 0.0;
    let cached: Option<[Vec<i16>; 2]> = noiseless.then(|| {
        [
            synth.trace(qctrl_core::readout::QubitState::Zero, 0),
            synth.trace(qctrl_core::readout::QubitState::One, 0),
        ]
    });
    let mut trace = Vec::with_capacity(p.record_length);
    let mut buf = Vec::with_capacity(qctrl_core::datalink::MAX_FRAME_LEN);
    let start = Instant::now();
    let mut k: u64 = 0;
    while !stop.load(Ordering::Relaxed) && cfg.max_triggers.is_none_or(|m| k < m) {
        let due = start + interval.mul_f64(k as f64);
        let now = Instant::now();
        if due > now {
            // Sleep overshoots by the timer slack; wake early and yield the rest.
            let wait = due - now;
            if wait > WAKE_MARGIN {
                thread::sleep(wait - WAKE_MARGIN);
            } else {
                thread::yield_now();
            }
            if Instant::now() < due {
                continue;
            }
        } else if now - due >= interval {
            counters.slipped.fetch_add(1, Ordering::Relaxed);
        }

        let seq = cfg.first_trigger_seq.wrapping_add(k as u32);
        let state = p.state_for(seq);
        let samples: &[i16] = match &cached {
            Some(c) => &c[u8::from(state) as usize],
            None => {
                synth.trace_into(state, p.trigger_seed(seq), &mut trace);
                &trace
            }
        };
        let mut frames: Vec<Frame> = match fragment_record(p.device_id, p.channel_id, seq, samples)
        {
            Ok(f) => f,
            Err(e) => {
                log::error!("digitizer emulator: {e}");
                return;
            }
        };
        if cfg.reorder_percent > 0.0
            && rng.random_bool((cfg.reorder_percent / 100.0).clamp(0.0, 1.0))
        {
            frames.shuffle(&mut rng);
        }
        for f in &frames {
            let lost = cfg.drop_frame == Some(f.frame_index)
                || (cfg.loss_percent > 0.0
                    && rng.random_bool((cfg.loss_percent / 100.0).clamp(0.0, 1.0)));
            if lost {
                counters.frames_dropped.fetch_add(1, Ordering::Relaxed);
                continue;
            }
            buf.clear();
            f.encode_into(&mut buf);
            match socket.send(&buf) {
                Ok(n) => {
                    counters.frames_sent.fetch_add(1, Ordering::Relaxed);
                    counters.bytes_sent.fetch_add(n as u64, Ordering::Relaxed);
                }
                Err(_) => {
                    counters.send_errors.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
        counters.triggers.fetch_add(1, Ordering::Relaxed);
        k += 1;
    }
}

//! Core of the quantum-control stack: pulse waveforms, per-channel signal
//! compensation, the instrument wire protocol, the digitizer frame format
//! and readout analysis. Nothing here touches the network.

pub mod binding;
pub mod channel;
pub mod datalink;
pub mod instrument;
pub mod kvconfig;
pub mod readout;
pub mod synth;
pub mod waveform;
pub mod wire;

//! Networked half of the stack: the per-device instrument link, device
//! emulators, digitizer ingest, the control and readout servers, and the
//! manager that fronts them over newline-delimited JSON RPC.

pub mod control;
pub mod emu;
pub mod ingest;
pub mod link;
pub mod manager;
pub mod readout;
pub mod rpc;

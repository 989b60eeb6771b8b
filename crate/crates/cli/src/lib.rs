//! Launchers, the end-to-end demo and the benchmark commands behind the
//! `qctrl` binary.

pub mod demo;
pub mod gen;
pub mod rx;
pub mod stack;
pub mod stats;
pub mod tx;

//! Software stand-ins for AWGs, DC sources and the digitizer.

pub mod awg;
pub mod digitizer;

pub use awg::{AwgConfig, AwgEmulator, AwgState, AwgStats};
pub use digitizer::{DigitizerConfig, DigitizerEmulator, DigitizerStats};

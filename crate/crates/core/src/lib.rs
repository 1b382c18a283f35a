//! Discrete-event LoRa/LoRaWAN network simulator.
//!
//! The crate is layered:
//!
//! * [`kernel`]: virtual-time executor for cooperative tasks.
//! * [`phy`]: shared wireless medium, airtime, link budget, capture model.
//! * [`energy`]: per-radio power accounting.
//! * [`lorawan`]: LoRaWAN 1.0.4 devices, gateways and network server
//!   (cargo feature `lorawan`, on by default).
//! * [`firmware_bridge`]: runs host-compiled C firmware against HAL shims.
//! * [`cli`]: scenario files, run orchestration and CSV export.
//!
//! The kernel, PHY, energy and firmware layers do not depend on `lorawan`;
//! building with `--no-default-features` drops the protocol stack entirely.

pub mod energy;
pub mod firmware_bridge;
pub mod kernel;
pub mod phy;

#[cfg(feature = "lorawan")]
pub mod cli;
#[cfg(feature = "lorawan")]
pub mod lorawan;

//! LoRaWAN 1.0.4 on top of the PHY radio interface: frame codec and crypto,
//! OTAA/ABP activation, Class A and C devices, multicast, a MAC command
//! subset, gateways and a network server.
//!
//! Nothing in [`crate::phy`] depends on this module.

mod application;
pub mod crypto;
mod device;
pub mod frame;
mod gateway;
pub mod mac;
pub mod region;
mod server;

pub use application::{AppHandle, Application, DownlinkEvent, UplinkEvent};
pub use device::{
    Activation, Device, DeviceClass, DeviceConfig, DeviceStats, MulticastSession, UplinkResult,
};
pub use gateway::Gateway;
pub use server::{MulticastGroup, NetworkServer, NsConfig, ServerStats, SessionInfo};

use crate::kernel::KernelError;
use crate::phy::PhyError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LorawanError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("malformed {field}: {reason}")]
    Decode { field: &'static str, reason: String },
    #[error("bad length {len} for {field}")]
    Length { field: &'static str, len: usize },
    #[error("MIC check failed")]
    Mic,
    #[error("device is not activated")]
    NotActivated,
    #[error("unknown device address {0:08x}")]
    UnknownDevice(u32),
    #[error("unknown multicast group {0:08x}")]
    UnknownGroup(u32),
    #[error("FPort {0} already has an application")]
    DuplicatePort(u8),
    #[error(transparent)]
    Phy(#[from] PhyError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

/// Reconstructs a 32-bit frame counter from its 16 wire bits, picking the
/// candidate closest to the counter expected next.
pub fn expand_fcnt(last: Option<u32>, wire: u16) -> u32 {
    let Some(last) = last else {
        return wire as u32;
    };
    let expected = last.wrapping_add(1) as i64;
    let base = (last as i64) & !0xffff;
    [base - 0x10000, base, base + 0x10000]
        .into_iter()
        .map(|b| b + wire as i64)
        .filter(|c| (0..=u32::MAX as i64).contains(c))
        .min_by_key(|c| (c - expected).abs())
        .unwrap_or(wire as i64) as u32
}

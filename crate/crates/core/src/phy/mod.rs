//! Shared wireless medium.
//!
//! Radios register with a [`Medium`]. A transmission is delivered in three
//! phases: when it starts, every other radio computes its link budget and,
//! if it is listening with a matching configuration and the signal clears
//! the sensitivity gate, starts tracking the packet; when the preamble ends
//! the receiver locks; when the packet ends the capture model decides the
//! outcome and the packet is either queued for the radio or logged with
//! the reason it was lost.

mod airtime;
mod collision;
mod config;
mod link;
mod medium;

pub use airtime::{airtime, Airtime, MAX_PAYLOAD};
pub use collision::{resolve_collision, Arrival, Outcome};
pub use config::{config_match, Location, RadioConfig, BANDWIDTHS_HZ};
pub use link::{link_budget, noise_floor_dbm, CollisionParams, LinkBudget, PathLossParams};
pub use medium::{
    AirPacket, EnergyRecord, IdleMode, Medium, PacketRecord, PhyParams, Radio, RadioMode,
    Reception, ReceptionRecord,
};

use crate::energy::EnergyError;
use crate::kernel::KernelError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhyError {
    #[error("invalid radio configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid PHY parameters: {0}")]
    InvalidParams(String),
    #[error("payload of {0} bytes exceeds the 255-byte maximum")]
    PayloadTooLong(usize),
    #[error("radio {0} is busy")]
    Busy(String),
    #[error("radio id {0:?} is already registered")]
    DuplicateRadio(String),
    #[error("location must have finite coordinates")]
    InvalidLocation,
    #[error("simulation has ended")]
    Ended,
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Energy(#[from] EnergyError),
}

//! Event-driven replica of the ED-Scorbot spiking robot controller: six
//! spike-based PID position controllers, a six-joint DC motor plant with
//! encoders and switches, the 36-word AXI configuration register bank with
//! AXI/SPI transport latency models, and trajectory execution with telemetry
//! recording.
//!
//! Everything runs on one deterministic 50 MHz logical clock ([`clock`]);
//! [`sim::Simulator`] wires the modules together.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod clock;
pub mod config;
pub mod joint_map;
pub mod plant;
pub mod regbank;
pub mod sim;
pub mod spid;
pub mod spike;
pub mod trajectory;

pub use clock::{Scheduler, SimulationStats, Tick, CLOCK_HZ};
pub use config::SimConfig;
pub use joint_map::{JointMap, OFFSET};
pub use regbank::{RegisterBank, RegisterOp, TransportKind, TransportModel};
pub use sim::{SimError, SimSnapshot, Simulator};
pub use spid::SpidGains;
pub use trajectory::{TelemetryRecord, Trajectory};

pub const JOINT_COUNT: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("unknown joint {0} (valid joints are 1-6)")]
pub struct UnknownJoint(pub i64);

/// A joint number in `1..=6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct JointId(u8);

impl JointId {
    pub fn new(number: u8) -> Result<Self, UnknownJoint> {
        if (1..=JOINT_COUNT as u8).contains(&number) {
            Ok(Self(number))
        } else {
            Err(UnknownJoint(number.into()))
        }
    }

    pub fn from_index(index: usize) -> Result<Self, UnknownJoint> {
        u8::try_from(index + 1)
            .map_err(|_| UnknownJoint(index as i64 + 1))
            .and_then(Self::new)
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn all() -> impl Iterator<Item = JointId> {
        (1..=JOINT_COUNT as u8).map(JointId)
    }
}

impl TryFrom<u8> for JointId {
    type Error = UnknownJoint;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        JointId::new(value)
    }
}

impl TryFrom<i64> for JointId {
    type Error = UnknownJoint;

    fn try_from(value: i64) -> Result<Self, Self::Error> {
        u8::try_from(value)
            .map_err(|_| UnknownJoint(value))
            .and_then(JointId::new)
    }
}

impl From<JointId> for u8 {
    fn from(value: JointId) -> u8 {
        value.0
    }
}

impl fmt::Display for JointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "j{}", self.0)
    }
}

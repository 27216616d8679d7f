//! The 36-word configuration register bank, its address map, and the AXI
//! and SPI transport latency models.
//!
//! | index | name         | access | reset |
//! |-------|--------------|--------|-------|
//! | 0     | GLOBAL_CTRL  | rw     | 1     |
//! | 1     | STATUS       | ro     | live  |
//! | 2     | VERSION      | ro     | const |
//! | 3     | SCRATCH      | rw     | 0     |
//! | 4-9   | REF1..REF6   | rw     | 32768 |
//! | 10-15 | KP1..KP6     | rw     | preset|
//! | 16-21 | KI1..KI6     | rw     | preset|
//! | 22-27 | KD1..KD6     | rw     | preset|
//! | 28-33 | POS1..POS6   | ro     | live  |
//! | 34    | LATENCY_CFG  | rw     | 0     |
//! | 35    | TELEMETRY_DIV| rw     | 10    |
//!
//! GLOBAL_CTRL: bit 0 enable (writing 0 stops every joint, writing 1 clears
//! the stops), bit 1 soft reset, bit 2 home all. Bits 1 and 2 self-clear.
//!
//! STATUS: bits 0-5 limit switches, 8-13 home switches, 16-21 emergency
//! stops, 24-29 homed, 30 homing fault, 31 homing in progress.
//!
//! LATENCY_CFG bits 1:0 pick the default transport: 0 AXI, 1 SPI,
//! 2 worst-case SPI. TELEMETRY_DIV is the telemetry period in ms.

use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::clock::Tick;
use crate::joint_map::OFFSET;
use crate::spid::SpidGains;
use crate::{JointId, JOINT_COUNT};

pub const REGISTER_COUNT: usize = 36;
pub const VERSION_WORD: u32 = 0x4544_0100;
pub const DEFAULT_BASE_ADDRESS: u32 = 0x43C0_0000;

pub const GLOBAL_CTRL: usize = 0;
pub const STATUS: usize = 1;
pub const VERSION: usize = 2;
pub const SCRATCH: usize = 3;
pub const REF_BASE: usize = 4;
pub const KP_BASE: usize = 10;
pub const KI_BASE: usize = 16;
pub const KD_BASE: usize = 22;
pub const POS_BASE: usize = 28;
pub const LATENCY_CFG: usize = 34;
pub const TELEMETRY_DIV: usize = 35;

pub const CTRL_ENABLE: u32 = 1 << 0;
pub const CTRL_SOFT_RESET: u32 = 1 << 1;
pub const CTRL_HOME_ALL: u32 = 1 << 2;

pub const STATUS_LIMIT_SHIFT: u32 = 0;
pub const STATUS_HOME_SHIFT: u32 = 8;
pub const STATUS_ESTOP_SHIFT: u32 = 16;
pub const STATUS_HOMED_SHIFT: u32 = 24;
pub const STATUS_HOMING_FAULT: u32 = 1 << 30;
pub const STATUS_BUSY: u32 = 1 << 31;

pub const DEFAULT_TELEMETRY_DIV: u32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegisterError {
    #[error("register index {0} out of range (0-35)")]
    IndexOutOfRange(usize),
    #[error("register {name} ({index}) is read-only")]
    ReadOnly { index: usize, name: String },
    #[error("address {0:#010x} is outside the register bank")]
    AddressOutOfRange(u32),
    #[error("address {0:#010x} is not word aligned")]
    Misaligned(u32),
    #[error("command has no operations")]
    EmptyCommand,
    #[error("register dump line {line}: {reason}")]
    Dump { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RegisterRole {
    GlobalCtrl,
    Status,
    Version,
    Scratch,
    Ref(JointId),
    Kp(JointId),
    Ki(JointId),
    Kd(JointId),
    Pos(JointId),
    LatencyCfg,
    TelemetryDiv,
}

fn joint_at(index: usize, base: usize) -> JointId {
    JointId::from_index(index - base).expect("index inside a six-word block")
}

impl RegisterRole {
    pub fn of(index: usize) -> Result<Self, RegisterError> {
        Ok(match index {
            GLOBAL_CTRL => Self::GlobalCtrl,
            STATUS => Self::Status,
            VERSION => Self::Version,
            SCRATCH => Self::Scratch,
            4..=9 => Self::Ref(joint_at(index, REF_BASE)),
            10..=15 => Self::Kp(joint_at(index, KP_BASE)),
            16..=21 => Self::Ki(joint_at(index, KI_BASE)),
            22..=27 => Self::Kd(joint_at(index, KD_BASE)),
            28..=33 => Self::Pos(joint_at(index, POS_BASE)),
            LATENCY_CFG => Self::LatencyCfg,
            TELEMETRY_DIV => Self::TelemetryDiv,
            _ => return Err(RegisterError::IndexOutOfRange(index)),
        })
    }

    pub fn index(self) -> usize {
        match self {
            Self::GlobalCtrl => GLOBAL_CTRL,
            Self::Status => STATUS,
            Self::Version => VERSION,
            Self::Scratch => SCRATCH,
            Self::Ref(j) => REF_BASE + j.index(),
            Self::Kp(j) => KP_BASE + j.index(),
            Self::Ki(j) => KI_BASE + j.index(),
            Self::Kd(j) => KD_BASE + j.index(),
            Self::Pos(j) => POS_BASE + j.index(),
            Self::LatencyCfg => LATENCY_CFG,
            Self::TelemetryDiv => TELEMETRY_DIV,
        }
    }

    pub fn writable(self) -> bool {
        !matches!(self, Self::Status | Self::Version | Self::Pos(_))
    }

    pub fn name(self) -> String {
        match self {
            Self::GlobalCtrl => "GLOBAL_CTRL".into(),
            Self::Status => "STATUS".into(),
            Self::Version => "VERSION".into(),
            Self::Scratch => "SCRATCH".into(),
            Self::Ref(j) => format!("REF{}", j.number()),
            Self::Kp(j) => format!("KP{}", j.number()),
            Self::Ki(j) => format!("KI{}", j.number()),
            Self::Kd(j) => format!("KD{}", j.number()),
            Self::Pos(j) => format!("POS{}", j.number()),
            Self::LatencyCfg => "LATENCY_CFG".into(),
            Self::TelemetryDiv => "TELEMETRY_DIV".into(),
        }
    }
}

/// What a successful write asks the owner to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteEffect {
    None,
    Reference { joint: JointId, counts: u16 },
    Gains { joint: JointId, gains: SpidGains },
    GlobalControl { enable: bool, soft_reset: bool, home_all: bool },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterBank {
    base_address: u32,
    words: [u32; REGISTER_COUNT],
}

impl Default for RegisterBank {
    fn default() -> Self {
        Self::new(DEFAULT_BASE_ADDRESS, &[SpidGains::PRESET; JOINT_COUNT])
    }
}

impl RegisterBank {
    pub fn new(base_address: u32, gains: &[SpidGains; JOINT_COUNT]) -> Self {
        let mut words = [0u32; REGISTER_COUNT];
        words[GLOBAL_CTRL] = CTRL_ENABLE;
        words[VERSION] = VERSION_WORD;
        words[TELEMETRY_DIV] = DEFAULT_TELEMETRY_DIV;
        for (i, g) in gains.iter().enumerate() {
            words[REF_BASE + i] = u32::from(OFFSET);
            words[POS_BASE + i] = u32::from(OFFSET);
            words[KP_BASE + i] = u32::from(g.kp);
            words[KI_BASE + i] = u32::from(g.ki);
            words[KD_BASE + i] = u32::from(g.kd);
        }
        Self {
            base_address,
            words,
        }
    }

    pub fn base_address(&self) -> u32 {
        self.base_address
    }

    pub fn words(&self) -> &[u32; REGISTER_COUNT] {
        &self.words
    }

    pub fn read_word(&self, index: usize) -> Result<u32, RegisterError> {
        self.words
            .get(index)
            .copied()
            .ok_or(RegisterError::IndexOutOfRange(index))
    }

    /// Bus write. Reference and gain words keep only their low 16 bits.
    pub fn write_word(&mut self, index: usize, value: u32) -> Result<WriteEffect, RegisterError> {
        let role = RegisterRole::of(index)?;
        if !role.writable() {
            return Err(RegisterError::ReadOnly {
                index,
                name: role.name(),
            });
        }
        Ok(match role {
            RegisterRole::GlobalCtrl => {
                self.words[index] = value & CTRL_ENABLE;
                WriteEffect::GlobalControl {
                    enable: value & CTRL_ENABLE != 0,
                    soft_reset: value & CTRL_SOFT_RESET != 0,
                    home_all: value & CTRL_HOME_ALL != 0,
                }
            }
            RegisterRole::Ref(joint) => {
                let counts = value as u16;
                self.words[index] = u32::from(counts);
                WriteEffect::Reference { joint, counts }
            }
            RegisterRole::Kp(joint) | RegisterRole::Ki(joint) | RegisterRole::Kd(joint) => {
                self.words[index] = value & 0xFFFF;
                WriteEffect::Gains {
                    joint,
                    gains: self.gains(joint),
                }
            }
            _ => {
                self.words[index] = value;
                WriteEffect::None
            }
        })
    }

    /// Sets a word from the hardware side, bypassing access checks.
    pub fn set_live(&mut self, index: usize, value: u32) {
        self.words[index] = value;
    }

    pub fn gains(&self, joint: JointId) -> SpidGains {
        let i = joint.index();
        SpidGains {
            kp: self.words[KP_BASE + i] as u16,
            ki: self.words[KI_BASE + i] as u16,
            kd: self.words[KD_BASE + i] as u16,
        }
    }

    pub fn reference(&self, joint: JointId) -> u16 {
        self.words[REF_BASE + joint.index()] as u16
    }

    pub fn telemetry_period_ms(&self) -> u64 {
        u64::from(self.words[TELEMETRY_DIV].max(1))
    }

    pub fn address_of(&self, index: usize) -> Result<u32, RegisterError> {
        if index >= REGISTER_COUNT {
            return Err(RegisterError::IndexOutOfRange(index));
        }
        Ok(self.base_address + 4 * index as u32)
    }

    pub fn index_of(&self, address: u32) -> Result<usize, RegisterError> {
        let offset = address
            .checked_sub(self.base_address)
            .ok_or(RegisterError::AddressOutOfRange(address))?;
        if offset % 4 != 0 {
            return Err(RegisterError::Misaligned(address));
        }
        let index = (offset / 4) as usize;
        if index >= REGISTER_COUNT {
            return Err(RegisterError::AddressOutOfRange(address));
        }
        Ok(index)
    }

    /// One line per word: `index address name value`, value in hex.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            let role = RegisterRole::of(i).expect("index in range");
            let _ = writeln!(
                out,
                "{i:2} {:#010x} {:<13} {w:#010x}",
                self.base_address + 4 * i as u32,
                role.name()
            );
        }
        out
    }
}

/// Parses [`RegisterBank::dump`] output back into `(index, value)` pairs.
/// Blank lines and `#` comments are skipped.
pub fn parse_dump(text: &str) -> Result<Vec<(usize, u32)>, RegisterError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |reason: &str| RegisterError::Dump {
            line: n + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [index, _, _, value] = fields[..] else {
            return Err(err("expected 4 fields"));
        };
        let index: usize = index.parse().map_err(|_| err("bad index"))?;
        if index >= REGISTER_COUNT {
            return Err(err("index out of range"));
        }
        let value = parse_word(value).ok_or_else(|| err("bad value"))?;
        out.push((index, value));
    }
    Ok(out)
}

/// Decimal or `0x` hex.
pub fn parse_word(text: &str) -> Option<u32> {
    match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
        Some(hex) => u32::from_str_radix(&hex.replace('_', ""), 16).ok(),
        None => text.replace('_', "").parse().ok(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Axi,
    Spi,
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransportKind::Axi => "AXI",
            TransportKind::Spi => "SPI",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportModel {
    pub name: String,
    pub kind: TransportKind,
    /// Submission to completion, seconds.
    pub per_command_latency: f64,
}

impl TransportModel {
    pub fn new(name: &str, kind: TransportKind, per_command_latency: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            per_command_latency,
        }
    }

    pub fn axi() -> Self {
        Self::new("axi", TransportKind::Axi, 6.5e-3)
    }

    pub fn spi() -> Self {
        Self::new("spi", TransportKind::Spi, 40e-3)
    }

    pub fn spi_worst_case() -> Self {
        Self::new("spi-worst-case", TransportKind::Spi, 120e-3)
    }

    pub fn latency_ticks(&self) -> u64 {
        Tick::from_secs(self.per_command_latency).0
    }
}

/// The transport presets, overridable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportSet {
    pub axi: TransportModel,
    pub spi: TransportModel,
    pub spi_worst_case: TransportModel,
}

impl Default for TransportSet {
    fn default() -> Self {
        Self {
            axi: TransportModel::axi(),
            spi: TransportModel::spi(),
            spi_worst_case: TransportModel::spi_worst_case(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown transport {0:?} (expected axi, spi or spi-worst-case)")]
pub struct UnknownTransport(pub String);

impl TransportSet {
    pub fn by_name(&self, name: &str) -> Result<&TransportModel, UnknownTransport> {
        match name.to_ascii_lowercase().as_str() {
            "axi" => Ok(&self.axi),
            "spi" => Ok(&self.spi),
            "spi-worst-case" | "spi_worst_case" => Ok(&self.spi_worst_case),
            _ => Err(UnknownTransport(name.into())),
        }
    }

    /// Transport selected by LATENCY_CFG bits 1:0. Code 3 is treated as AXI.
    pub fn by_code(&self, word: u32) -> &TransportModel {
        match word & 0b11 {
            1 => &self.spi,
            2 => &self.spi_worst_case,
            _ => &self.axi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum RegisterOp {
    Read { index: usize },
    Write { index: usize, value: u32 },
}

impl RegisterOp {
    pub fn index(self) -> usize {
        match self {
            RegisterOp::Read { index } | RegisterOp::Write { index, .. } => index,
        }
    }

    pub fn validate(self) -> Result<(), RegisterError> {
        let role = RegisterRole::of(self.index())?;
        if matches!(self, RegisterOp::Write { .. }) && !role.writable() {
            return Err(RegisterError::ReadOnly {
                index: self.index(),
                name: role.name(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PendingCommand {
    pub id: u64,
    pub submitted: Tick,
    pub completes: Tick,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionRecord {
    pub id: u64,
    pub transport: String,
    pub ops: Vec<RegisterOp>,
    /// Value of each read, in order.
    pub reads: Vec<u32>,
    pub submitted: Tick,
    pub completed: Tick,
    pub latency_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyStats {
    pub transport: String,
    pub samples: usize,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl LatencyStats {
    pub fn from_samples(transport: &str, samples: &[f64]) -> Self {
        let n = samples.len();
        let (min, max, sum) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY, 0.0), |(lo, hi, s), &x| {
                (lo.min(x), hi.max(x), s + x)
            });
        Self {
            transport: transport.into(),
            samples: n,
            mean_s: if n == 0 { 0.0 } else { sum / n as f64 },
            min_s: if n == 0 { 0.0 } else { min },
            max_s: if n == 0 { 0.0 } else { max },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub fast: LatencyStats,
    pub slow: LatencyStats,
    /// `(slow - fast) / fast * 100`, from the mean latencies.
    pub improvement_percent: f64,
}

impl LatencyReport {
    pub fn new(fast: LatencyStats, slow: LatencyStats) -> Self {
        let improvement_percent = improvement_percent(fast.mean_s, slow.mean_s);
        Self {
            fast,
            slow,
            improvement_percent,
        }
    }
}

pub fn improvement_percent(fast: f64, slow: f64) -> f64 {
    if fast <= 0.0 {
        return f64::INFINITY;
    }
    (slow - fast) / fast * 100.0
}

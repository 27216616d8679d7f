//! Simulation configuration and its TOML file format.
//!
//! Every key is optional; absent keys keep the compiled-in defaults.
//!
//! ```toml
//! [sim]
//! seed = 7
//! initial_jitter_deg = 0.0
//! settle_ms = 2000
//!
//! [controller]
//! error_gain = 10.0
//! derivative_window_ms = 10.0
//!
//! [homing]
//! rate = 1000.0
//! timeout_s = 20.0
//!
//! [transport]
//! axi_latency_ms = 6.5
//! spi_latency_ms = 40.0
//!
//! [j1]
//! kp = 32768
//! tau = 0.05
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clock::Tick;
use crate::joint_map::{JointMap, JointMapError};
use crate::plant::{MotorParams, PlantError};
use crate::regbank::{TransportSet, DEFAULT_BASE_ADDRESS};
use crate::spid::{ControllerConfig, SpidGains};
use crate::{JointId, JOINT_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("[{section}] {key}: {reason}")]
    Invalid {
        section: String,
        key: &'static str,
        reason: String,
    },
    #[error("joint {joint}: {source}")]
    Motor { joint: u8, source: PlantError },
    #[error(transparent)]
    Map(#[from] JointMapError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HomingConfig {
    /// Homing drive rate, spikes/s.
    pub rate: f64,
    pub timeout_s: f64,
    /// Wait after the switch closes before zeroing the counter.
    pub settle_s: f64,
}

impl Default for HomingConfig {
    fn default() -> Self {
        Self {
            rate: 1000.0,
            timeout_s: 20.0,
            settle_s: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub joint_map: JointMap,
    pub motors: [MotorParams; JOINT_COUNT],
    pub gains: [SpidGains; JOINT_COUNT],
    pub controller: ControllerConfig,
    pub homing: HomingConfig,
    pub transports: TransportSet,
    pub base_address: u32,
    pub seed: u64,
    /// Initial angles are drawn uniformly from `+-initial_jitter_deg`.
    pub initial_jitter_deg: f64,
    /// Time a trajectory keeps running after its last point.
    pub settle_ms: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        let joint_map = JointMap::default();
        let motors = std::array::from_fn(|i| {
            MotorParams::for_joint(JointId::from_index(i).expect("six joints"), &joint_map)
        });
        Self {
            joint_map,
            motors,
            gains: [SpidGains::PRESET; JOINT_COUNT],
            controller: ControllerConfig::default(),
            homing: HomingConfig::default(),
            transports: TransportSet::default(),
            base_address: DEFAULT_BASE_ADDRESS,
            seed: 0,
            initial_jitter_deg: 0.0,
            settle_ms: 2000,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    sim: SimSection,
    #[serde(default)]
    controller: ControllerSection,
    #[serde(default)]
    homing: HomingSection,
    #[serde(default)]
    transport: TransportSection,
    j1: Option<JointSection>,
    j2: Option<JointSection>,
    j3: Option<JointSection>,
    j4: Option<JointSection>,
    j5: Option<JointSection>,
    j6: Option<JointSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimSection {
    seed: Option<u64>,
    initial_jitter_deg: Option<f64>,
    settle_ms: Option<u64>,
    base_address: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControllerSection {
    error_gain: Option<f64>,
    integral_gain: Option<f64>,
    derivative_window_ms: Option<f64>,
    acc_max: Option<i32>,
    rate_max: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct HomingSection {
    rate: Option<f64>,
    timeout_s: Option<f64>,
    settle_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TransportSection {
    axi_latency_ms: Option<f64>,
    spi_latency_ms: Option<f64>,
    spi_worst_case_latency_ms: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointSection {
    kp: Option<u16>,
    ki: Option<u16>,
    kd: Option<u16>,
    v_supply: Option<f64>,
    k_v: Option<f64>,
    tau: Option<f64>,
    pulse_width_us: Option<f64>,
    max_on_time_ms: Option<f64>,
    home_band: Option<f64>,
    home_switch: Option<bool>,
    degree_per_count: Option<f64>,
    lower_deg: Option<f64>,
    upper_deg: Option<f64>,
    si_per_degree: Option<f64>,
    si_per_count: Option<f64>,
    lower_si: Option<i32>,
    upper_si: Option<i32>,
}

fn set<T: Copy>(dst: &mut T, src: Option<T>) {
    if let Some(v) = src {
        *dst = v;
    }
}

fn positive(section: &str, key: &'static str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid {
            section: section.into(),
            key,
            reason: format!("must be finite and positive, got {v}"),
        })
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let file: FileConfig = toml::from_str(text)?;
        let mut cfg = SimConfig::default();

        set(&mut cfg.seed, file.sim.seed);
        set(&mut cfg.initial_jitter_deg, file.sim.initial_jitter_deg);
        set(&mut cfg.settle_ms, file.sim.settle_ms);
        set(&mut cfg.base_address, file.sim.base_address);

        let c = &file.controller;
        set(&mut cfg.controller.error_gain, c.error_gain);
        set(&mut cfg.controller.integral_gain, c.integral_gain);
        set(&mut cfg.controller.acc_max, c.acc_max);
        set(&mut cfg.controller.rate_max, c.rate_max);
        if let Some(ms) = c.derivative_window_ms {
            positive("controller", "derivative_window_ms", ms)?;
            cfg.controller.derivative_window = Tick::from_secs(ms / 1e3).0.max(1);
        }

        set(&mut cfg.homing.rate, file.homing.rate);
        set(&mut cfg.homing.timeout_s, file.homing.timeout_s);
        set(&mut cfg.homing.settle_s, file.homing.settle_s);

        let t = &file.transport;
        for (model, ms) in [
            (&mut cfg.transports.axi, t.axi_latency_ms),
            (&mut cfg.transports.spi, t.spi_latency_ms),
            (&mut cfg.transports.spi_worst_case, t.spi_worst_case_latency_ms),
        ] {
            if let Some(ms) = ms {
                model.per_command_latency = ms / 1e3;
            }
        }

        let sections = [file.j1, file.j2, file.j3, file.j4, file.j5, file.j6];
        for (i, section) in sections.into_iter().enumerate() {
            if let Some(s) = section {
                cfg.apply_joint(JointId::from_index(i).expect("six joints"), s)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    fn apply_joint(&mut self, joint: JointId, s: JointSection) -> Result<(), ConfigError> {
        let i = joint.index();
        set(&mut self.gains[i].kp, s.kp);
        set(&mut self.gains[i].ki, s.ki);
        set(&mut self.gains[i].kd, s.kd);
        let m = &mut self.motors[i];
        set(&mut m.v_supply, s.v_supply);
        set(&mut m.k_v, s.k_v);
        set(&mut m.tau, s.tau);
        set(&mut m.home_band, s.home_band);
        set(&mut m.has_home_switch, s.home_switch);
        set(&mut m.degree_per_count, s.degree_per_count);
        set(&mut m.lower_deg, s.lower_deg);
        set(&mut m.upper_deg, s.upper_deg);
        if let Some(us) = s.pulse_width_us {
            m.pulse_width = us * 1e-6;
        }
        if let Some(ms) = s.max_on_time_ms {
            m.max_on_time = ms * 1e-3;
        }
        let mapping_keys = s.si_per_degree.is_some()
            || s.si_per_count.is_some()
            || s.lower_si.is_some()
            || s.upper_si.is_some();
        if !self.joint_map.is_mapped(joint) {
            if mapping_keys {
                return Err(JointMapError::UnmappedJoint(joint.number()).into());
            }
            return Ok(());
        }
        let (dpc, lower, upper) = (m.degree_per_count, m.lower_deg, m.upper_deg);
        let map = self.joint_map.mapping_mut(joint)?;
        map.degree_per_count = dpc;
        map.lower_deg = lower;
        map.upper_deg = upper;
        set(&mut map.si_per_degree, s.si_per_degree);
        set(&mut map.si_per_count, s.si_per_count);
        set(&mut map.lower_si, s.lower_si);
        set(&mut map.upper_si, s.upper_si);
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (i, m) in self.motors.iter().enumerate() {
            m.validate().map_err(|source| ConfigError::Motor {
                joint: i as u8 + 1,
                source,
            })?;
        }
        let c = &self.controller;
        positive("controller", "error_gain", c.error_gain)?;
        positive("controller", "rate_max", c.rate_max)?;
        if !(c.integral_gain.is_finite() && c.integral_gain >= 0.0) {
            return Err(ConfigError::Invalid {
                section: "controller".into(),
                key: "integral_gain",
                reason: "must be finite and non-negative".into(),
            });
        }
        if c.acc_max <= 0 {
            return Err(ConfigError::Invalid {
                section: "controller".into(),
                key: "acc_max",
                reason: "must be positive".into(),
            });
        }
        positive("homing", "rate", self.homing.rate)?;
        positive("homing", "timeout_s", self.homing.timeout_s)?;
        if !(self.homing.settle_s.is_finite() && self.homing.settle_s >= 0.0) {
            return Err(ConfigError::Invalid {
                section: "homing".into(),
                key: "settle_s",
                reason: "must be finite and non-negative".into(),
            });
        }
        for (key, model) in [
            ("axi_latency_ms", &self.transports.axi),
            ("spi_latency_ms", &self.transports.spi),
            ("spi_worst_case_latency_ms", &self.transports.spi_worst_case),
        ] {
            positive("transport", key, model.per_command_latency)?;
        }
        if !(self.initial_jitter_deg.is_finite() && self.initial_jitter_deg >= 0.0) {
            return Err(ConfigError::Invalid {
                section: "sim".into(),
                key: "initial_jitter_deg",
                reason: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

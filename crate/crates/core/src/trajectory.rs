//! Trajectory files, their execution through the register bank, and the
//! telemetry recording.
//!
//! A trajectory is JSON:
//!
//! ```json
//! {
//!   "name": "wave",
//!   "units": "si",
//!   "points": [
//!     {"t_ms": 0, "j1": 100.0, "j2": -20.0},
//!     {"t_ms": 500, "j1": -100.0}
//!   ]
//! }
//! ```
//!
//! `units` is `"si"` or `"counts"`. A joint missing from a point keeps its
//! previous reference. Points are held, not interpolated. Joints 5 and 6
//! only accept counts.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Tick;
use crate::joint_map::{JointMap, JointMapError};
use crate::regbank::{self, RegisterOp, TransportModel};
use crate::sim::{SimError, Simulator};
use crate::{JointId, JOINT_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("point {index}: t_ms {t_ms} does not increase (previous {previous})")]
    NonMonotoneTime { index: usize, t_ms: u64, previous: u64 },
    #[error("point {index}: unknown joint key {key:?}")]
    UnknownJoint { index: usize, key: String },
    #[error("point {index}: {joint} has no SI mapping; use counts")]
    UnmappedSi { index: usize, joint: JointId },
    #[error("joint {0} is not homed")]
    NotHomed(JointId),
    #[error("limit switch tripped on {joint} at tick {at}")]
    SimulationFault { joint: JointId, at: Tick },
    #[error(transparent)]
    Map(#[from] JointMapError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    Si,
    Counts,
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Units::Si => "SI",
            Units::Counts => "counts",
        })
    }
}

/// A point after validation: references are counter values.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TrajectoryPoint {
    pub t_ms: u64,
    pub refs: [Option<u16>; JOINT_COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trajectory {
    pub name: String,
    pub units: Units,
    pub points: Vec<TrajectoryPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClampWarning {
    pub point: usize,
    pub joint: JointId,
    pub units: Units,
    pub requested: f64,
    pub applied: f64,
}

impl fmt::Display for ClampWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "point {} {}: {} {} clamped to {} {}",
            self.point, self.joint, self.requested, self.units, self.applied, self.units
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LoadedTrajectory {
    pub trajectory: Trajectory,
    pub warnings: Vec<ClampWarning>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrajectory {
    #[serde(default)]
    name: String,
    units: Units,
    points: Vec<serde_json::Map<String, Value>>,
}

fn joint_key(key: &str) -> Option<Option<JointId>> {
    let n: i64 = key.strip_prefix('j')?.parse().ok()?;
    Some(JointId::try_from(n).ok())
}

fn convert(
    map: &JointMap,
    units: Units,
    index: usize,
    joint: JointId,
    value: f64,
    warnings: &mut Vec<ClampWarning>,
) -> Result<u16, TrajectoryError> {
    let parse_err = |what: &str| TrajectoryError::Parse(format!("point {index}: {joint} {what}"));
    if !value.is_finite() {
        return Err(parse_err("reference is not finite"));
    }
    match units {
        Units::Si => {
            let clamped = map.clamp_reference(joint, value).map_err(|e| match e {
                JointMapError::UnmappedJoint(_) => TrajectoryError::UnmappedSi { index, joint },
                JointMapError::NonFiniteInput => parse_err("reference is not finite"),
            })?;
            if clamped.clamped {
                warnings.push(ClampWarning {
                    point: index,
                    joint,
                    units,
                    requested: value,
                    applied: clamped.value,
                });
            }
            let counts = map.si_to_counts(joint, clamped.value)?;
            Ok(map.clamp_counts(joint, counts)?.value)
        }
        Units::Counts => {
            if value.fract() != 0.0 || !(0.0..=f64::from(u16::MAX)).contains(&value) {
                return Err(parse_err("count reference must be an integer in 0-65535"));
            }
            let counts = value as u16;
            if !map.is_mapped(joint) {
                return Ok(counts);
            }
            let c = map.clamp_counts(joint, counts)?;
            if c.clamped {
                warnings.push(ClampWarning {
                    point: index,
                    joint,
                    units,
                    requested: value,
                    applied: f64::from(c.value),
                });
            }
            Ok(c.value)
        }
    }
}

/// Parses and validates trajectory JSON.
pub fn parse_trajectory(text: &str, map: &JointMap) -> Result<LoadedTrajectory, TrajectoryError> {
    let raw: RawTrajectory =
        serde_json::from_str(text).map_err(|e| TrajectoryError::Parse(e.to_string()))?;
    let mut warnings = Vec::new();
    let mut points: Vec<TrajectoryPoint> = Vec::with_capacity(raw.points.len());
    for (index, obj) in raw.points.into_iter().enumerate() {
        let t_ms = obj
            .get("t_ms")
            .and_then(Value::as_u64)
            .ok_or_else(|| {
                TrajectoryError::Parse(format!("point {index}: t_ms must be a non-negative integer"))
            })?;
        if let Some(prev) = points.last() {
            if t_ms <= prev.t_ms {
                return Err(TrajectoryError::NonMonotoneTime {
                    index,
                    t_ms,
                    previous: prev.t_ms,
                });
            }
        }
        let mut refs = [None; JOINT_COUNT];
        for (key, value) in &obj {
            if key == "t_ms" {
                continue;
            }
            let joint = match joint_key(key) {
                Some(Some(j)) => j,
                Some(None) => {
                    return Err(TrajectoryError::UnknownJoint {
                        index,
                        key: key.clone(),
                    })
                }
                None => {
                    return Err(TrajectoryError::Parse(format!(
                        "point {index}: unexpected key {key:?}"
                    )))
                }
            };
            let value = value.as_f64().ok_or_else(|| {
                TrajectoryError::Parse(format!("point {index}: {key} must be a number"))
            })?;
            refs[joint.index()] = Some(convert(map, raw.units, index, joint, value, &mut warnings)?);
        }
        points.push(TrajectoryPoint { t_ms, refs });
    }
    Ok(LoadedTrajectory {
        trajectory: Trajectory {
            name: raw.name,
            units: raw.units,
            points,
        },
        warnings,
    })
}

pub fn load_trajectory(path: &Path, map: &JointMap) -> Result<LoadedTrajectory, TrajectoryError> {
    let text = std::fs::read_to_string(path).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_trajectory(&text, map)
}

impl Trajectory {
    /// Last point time plus `settle_ms`; zero for an empty trajectory.
    pub fn duration_ms(&self, settle_ms: u64) -> u64 {
        self.points.last().map_or(0, |p| p.t_ms + settle_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointTelemetry {
    pub reference: u16,
    pub position: u16,
    pub degrees: Option<f64>,
    /// Net motor spikes per second over the last period.
    pub rate: f64,
    pub flags: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TelemetryRecord {
    pub tick: Tick,
    pub t_ms: u64,
    pub joints: Vec<JointTelemetry>,
}

/// Produces [`TelemetryRecord`]s, tracking motor spikes between samples.
#[derive(Debug, Clone)]
pub struct TelemetrySampler {
    last_net: [i64; JOINT_COUNT],
    last_tick: Tick,
}

impl TelemetrySampler {
    pub fn new(sim: &Simulator) -> Self {
        Self {
            last_net: std::array::from_fn(|i| sim.motor_net(JointId::from_index(i).expect("six joints"))),
            last_tick: sim.now(),
        }
    }

    pub fn sample(&mut self, sim: &Simulator, t_ms: u64) -> TelemetryRecord {
        let now = sim.now();
        let elapsed = (now - self.last_tick) as f64 / crate::CLOCK_HZ as f64;
        let map = &sim.config().joint_map;
        let joints = JointId::all()
            .map(|id| {
                let c = sim.controller(id);
                let net = sim.motor_net(id);
                let delta = net - std::mem::replace(&mut self.last_net[id.index()], net);
                JointTelemetry {
                    reference: c.reference(),
                    position: c.counter(),
                    degrees: map.counts_to_degrees(id, c.counter()).ok(),
                    rate: if elapsed > 0.0 { delta as f64 / elapsed } else { 0.0 },
                    flags: sim.joint_flags(id).bits() & 0x0F,
                }
            })
            .collect();
        self.last_tick = now;
        TelemetryRecord {
            tick: now,
            t_ms,
            joints,
        }
    }
}

pub fn csv_header() -> String {
    let mut h = String::from("t_ms");
    for n in 1..=JOINT_COUNT {
        let _ = write!(h, ",j{n}_ref,j{n}_pos,j{n}_deg,j{n}_rate,j{n}_flags");
    }
    h
}

pub fn csv_row(rec: &TelemetryRecord) -> String {
    let mut row = rec.t_ms.to_string();
    for j in &rec.joints {
        let deg = j.degrees.map(|d| d.to_string()).unwrap_or_default();
        let _ = write!(row, ",{},{},{deg},{},{}", j.reference, j.position, j.rate, j.flags);
    }
    row
}

pub fn write_csv(records: &[TelemetryRecord]) -> String {
    let mut out = csv_header();
    out.push('\n');
    for r in records {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recording {
    pub records: Vec<TelemetryRecord>,
    /// First limit trip during the run.
    pub fault: Option<(Tick, JointId)>,
    pub period_ms: u64,
}

impl Recording {
    pub fn to_csv(&self) -> String {
        write_csv(&self.records)
    }
}

/// Runs `traj` against `sim`. Point `i` is submitted as one register
/// command at `t_ms(i)` after the start; telemetry is sampled every
/// TELEMETRY_DIV ms for the whole run.
pub fn run(
    sim: &mut Simulator,
    traj: &Trajectory,
    transport: &TransportModel,
) -> Result<Recording, TrajectoryError> {
    if let Some(j) = JointId::all().find(|&j| !sim.is_homed(j)) {
        return Err(TrajectoryError::NotHomed(j));
    }
    let start = sim.now();
    let period_ms = sim.bank().telemetry_period_ms();
    let duration_ms = traj.duration_ms(sim.config().settle_ms);
    let rows = duration_ms / period_ms + 1;
    let trips_before = sim.limit_trips().len();

    let mut sampler = TelemetrySampler::new(sim);
    let mut records = Vec::with_capacity(rows as usize);
    let mut points = traj.points.iter().peekable();
    for k in 0..rows {
        let t_ms = k * period_ms;
        while let Some(p) = points.next_if(|p| p.t_ms <= t_ms) {
            sim.run_until(start + Tick::from_millis(p.t_ms).0)?;
            let ops: Vec<RegisterOp> = p
                .refs
                .iter()
                .enumerate()
                .filter_map(|(i, r)| {
                    r.map(|value| RegisterOp::Write {
                        index: regbank::REF_BASE + i,
                        value: u32::from(value),
                    })
                })
                .collect();
            if !ops.is_empty() {
                sim.submit_command(transport, ops)?;
            }
        }
        sim.run_until(start + Tick::from_millis(t_ms).0)?;
        records.push(sampler.sample(sim, t_ms));
    }
    // Points later than the last sample still get submitted.
    for p in points {
        sim.run_until(start + Tick::from_millis(p.t_ms).0)?;
    }
    let fault = sim.limit_trips().get(trips_before).map(|&(t, j)| (t, j));
    Ok(Recording {
        records,
        fault,
        period_ms,
    })
}

/// [`run`], then writes the CSV to `path`. A limit trip still writes the
/// recording before reporting [`TrajectoryError::SimulationFault`].
pub fn execute(
    sim: &mut Simulator,
    traj: &Trajectory,
    transport: &TransportModel,
    path: &Path,
) -> Result<PathBuf, TrajectoryError> {
    let rec = run(sim, traj, transport)?;
    std::fs::write(path, rec.to_csv()).map_err(|source| TrajectoryError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if let Some((at, joint)) = rec.fault {
        return Err(TrajectoryError::SimulationFault { joint, at });
    }
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SimConfig;
    use crate::joint_map::OFFSET;

    fn map() -> JointMap {
        JointMap::default()
    }

    #[test]
    fn empty_points_are_valid() {
        let t = parse_trajectory(r#"{"name":"e","units":"si","points":[]}"#, &map()).unwrap();
        assert!(t.trajectory.points.is_empty());
        assert_eq!(t.trajectory.duration_ms(2000), 0);
    }

    #[test]
    fn si_reference_is_clamped_with_warning() {
        let t = parse_trajectory(
            r#"{"name":"c","units":"si","points":[{"t_ms":0,"j1":600}]}"#,
            &map(),
        )
        .unwrap();
        assert_eq!(t.warnings.len(), 1);
        assert_eq!(t.warnings[0].applied, 487.0);
        // 487 SI falls between counts; the highest count inside the bound wins.
        let (_, hi) = map().count_bounds(JointId::new(1).unwrap()).unwrap();
        assert_eq!(t.trajectory.points[0].refs[0], Some(hi));
        assert!(map().counts_to_si(JointId::new(1).unwrap(), hi).unwrap() <= 487.0);
    }

    #[test]
    fn repeated_time_is_rejected() {
        let err = parse_trajectory(
            r#"{"name":"m","units":"counts","points":[{"t_ms":0},{"t_ms":10},{"t_ms":10}]}"#,
            &map(),
        )
        .unwrap_err();
        assert!(matches!(err, TrajectoryError::NonMonotoneTime { index: 2, .. }));
    }

    #[test]
    fn unknown_and_unmapped_joints() {
        let err = parse_trajectory(
            r#"{"name":"u","units":"counts","points":[{"t_ms":0,"j7":1}]}"#,
            &map(),
        )
        .unwrap_err();
        assert!(matches!(err, TrajectoryError::UnknownJoint { .. }));
        let err = parse_trajectory(
            r#"{"name":"u","units":"si","points":[{"t_ms":0,"j5":1}]}"#,
            &map(),
        )
        .unwrap_err();
        assert!(matches!(err, TrajectoryError::UnmappedSi { .. }));
        let ok = parse_trajectory(
            r#"{"name":"u","units":"counts","points":[{"t_ms":0,"j5":40000}]}"#,
            &map(),
        )
        .unwrap();
        assert_eq!(ok.trajectory.points[0].refs[4], Some(40_000));
    }

    #[test]
    fn not_homed_is_refused() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        let t = parse_trajectory(r#"{"name":"x","units":"counts","points":[]}"#, &map()).unwrap();
        assert!(matches!(
            run(&mut sim, &t.trajectory, &TransportModel::axi()),
            Err(TrajectoryError::NotHomed(_))
        ));
    }

    #[test]
    fn step_trajectory_settles() {
        let mut sim = Simulator::new(SimConfig::default()).unwrap();
        sim.home_all().unwrap();
        let text = format!(
            r#"{{"name":"s","units":"counts","points":[{{"t_ms":0,"j1":{}}}]}}"#,
            OFFSET + 500
        );
        let t = parse_trajectory(&text, &map()).unwrap();
        let rec = run(&mut sim, &t.trajectory, &TransportModel::axi()).unwrap();
        assert_eq!(rec.records.len(), 2000 / 10 + 1);
        let last = rec.records.last().unwrap();
        assert!((i32::from(last.joints[0].position) - i32::from(OFFSET + 500)).abs() <= 5);
        assert!(rec.fault.is_none());
        let csv = rec.to_csv();
        assert!(csv.starts_with("t_ms,j1_ref,j1_pos,j1_deg,j1_rate,j1_flags,j2_ref"));
        assert_eq!(csv.lines().count(), 202);
    }
}

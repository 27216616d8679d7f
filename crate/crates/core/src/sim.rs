//! The six-joint simulator: controllers, bridges, plants, homing and the
//! register bank, all driven by one scheduler.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::clock::{ClockError, ScheduledEvent, Scheduler, SimulationStats, Tick, TraceSink};
use crate::config::{ConfigError, SimConfig};
use crate::joint_map::{JointMapError, OFFSET};
use crate::plant::{HBridge, JointPlant, JointPlantState, NextChange};
use crate::regbank::{
    self, CompletionRecord, LatencyReport, LatencyStats, PendingCommand, RegisterBank,
    RegisterError, RegisterOp, TransportModel, WriteEffect,
};
use crate::spid::{JointController, SpidGains, SpidPath, Wake};
use crate::spike::{Channel, PfmGenerator, Polarity, SpikeEvent};
use crate::{JointId, UnknownJoint, JOINT_COUNT};

/// How far ahead the plant looks for the next encoder or switch change
/// before re-checking.
const TRANSITION_HORIZON: u64 = Tick::from_millis(100).0;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Register(#[from] RegisterError),
    #[error(transparent)]
    Map(#[from] JointMapError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    UnknownJoint(#[from] UnknownJoint),
    #[error("homing is in progress")]
    HomingInProgress,
    #[error("homing {0} timed out before the home switch closed")]
    HomingFailed(JointId),
    #[error("no command with id {0}")]
    UnknownCommand(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Joint(JointId),
    Bank,
    Clock,
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Joint(j) => write!(f, "{j}"),
            Target::Bank => f.write_str("regbank"),
            Target::Clock => f.write_str("clock"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Spike { path: SpidPath, generation: u64 },
    Fire { generation: u64 },
    BridgeOff { generation: u64 },
    Transition { generation: u64 },
    EmergencyStop,
    HomingSpike { generation: u64 },
    HomingSettled { attempt: u64 },
    HomingTimeout { attempt: u64 },
    DerivativeWindow,
    CommandComplete { id: u64 },
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Spike { path, generation } => write!(f, "spike/{}#{generation}", path.name()),
            Action::Fire { generation } => write!(f, "fire#{generation}"),
            Action::BridgeOff { generation } => write!(f, "bridge-off#{generation}"),
            Action::Transition { generation } => write!(f, "transition#{generation}"),
            Action::EmergencyStop => f.write_str("estop"),
            Action::HomingSpike { generation } => write!(f, "homing-spike#{generation}"),
            Action::HomingSettled { attempt } => write!(f, "homing-settled#{attempt}"),
            Action::HomingTimeout { attempt } => write!(f, "homing-timeout#{attempt}"),
            Action::DerivativeWindow => f.write_str("d-window"),
            Action::CommandComplete { id } => write!(f, "complete#{id}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HomingPhase {
    Idle,
    Seeking,
    Settling,
}

/// Recorded counter and motor activity of one joint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JointProbe {
    /// Counter value after each change.
    pub counter: Vec<(Tick, u16)>,
    pub motor: Vec<SpikeEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct JointFlags {
    pub limit: bool,
    pub home: bool,
    pub estop: bool,
    pub homed: bool,
    pub homing: bool,
    pub homing_fault: bool,
}

impl JointFlags {
    /// bit0 limit, bit1 home, bit2 estop, bit3 homed, bit4 homing,
    /// bit5 homing fault.
    pub fn bits(self) -> u8 {
        [
            self.limit,
            self.home,
            self.estop,
            self.homed,
            self.homing,
            self.homing_fault,
        ]
        .iter()
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | (u8::from(b) << i))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JointSnapshot {
    pub joint: u8,
    pub reference: u16,
    pub position: u16,
    /// Counter position in degrees; absent for unmapped joints.
    pub degrees: Option<f64>,
    pub angle_deg: f64,
    pub velocity_deg_s: f64,
    pub voltage: f64,
    pub gains: SpidGains,
    pub command_rate: f64,
    pub motor_net_spikes: i64,
    pub flags: JointFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSnapshot {
    pub tick: Tick,
    pub sim_time_s: f64,
    pub homing: bool,
    pub joints: Vec<JointSnapshot>,
}

#[derive(Debug, Clone)]
struct JointSlot {
    id: JointId,
    controller: JointController,
    plant: JointPlant,
    bridge: HBridge,
    attached: bool,
    transition_generation: u64,
    homing: HomingPhase,
    homing_attempt: u64,
    homing_gen: PfmGenerator,
    homed: bool,
    homing_fault: bool,
    motor_net: i64,
    probe: Option<JointProbe>,
}

#[derive(Debug, Clone)]
struct InFlight {
    transport: String,
    ops: Vec<RegisterOp>,
    submitted: Tick,
}

pub struct Simulator {
    config: SimConfig,
    sched: Scheduler<Target, Action>,
    joints: Vec<JointSlot>,
    bank: RegisterBank,
    in_flight: BTreeMap<u64, InFlight>,
    completed: BTreeMap<u64, CompletionRecord>,
    next_command: u64,
    limit_trips: Vec<(Tick, JointId)>,
}

impl fmt::Debug for Simulator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulator")
            .field("now", &self.now())
            .field("pending_events", &self.sched.pending())
            .finish_non_exhaustive()
    }
}

fn sign_of(delta: i64) -> Polarity {
    if delta > 0 {
        Polarity::Positive
    } else {
        Polarity::Negative
    }
}

impl Simulator {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let jitter = config.initial_jitter_deg;
        let joints = JointId::all()
            .map(|id| {
                let i = id.index();
                let params = config.motors[i];
                let angle = if jitter > 0.0 {
                    rng.random_range(-jitter..=jitter)
                } else {
                    0.0
                };
                JointSlot {
                    id,
                    controller: JointController::new(id, config.controller, config.gains[i], Tick::ZERO),
                    plant: JointPlant::new(params, angle, Tick::ZERO),
                    bridge: HBridge::new(&params),
                    attached: true,
                    transition_generation: 0,
                    homing: HomingPhase::Idle,
                    homing_attempt: 0,
                    homing_gen: PfmGenerator::new(Tick::ZERO),
                    homed: false,
                    homing_fault: false,
                    motor_net: 0,
                    probe: None,
                }
            })
            .collect();
        let bank = RegisterBank::new(config.base_address, &config.gains);
        let mut sim = Self {
            sched: Scheduler::new(),
            joints,
            bank,
            in_flight: BTreeMap::new(),
            completed: BTreeMap::new(),
            next_command: 1,
            limit_trips: Vec::new(),
            config,
        };
        let window = sim.config.controller.derivative_window;
        sim.sched.schedule_in(window, Target::Clock, Action::DerivativeWindow);
        for j in 0..JOINT_COUNT {
            if sim.joints[j].plant.limit_hit() {
                sim.sched.schedule_in(0, Target::Joint(sim.joints[j].id), Action::EmergencyStop);
            }
        }
        sim.refresh_live();
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> Tick {
        self.sched.now()
    }

    pub fn events_executed(&self) -> u64 {
        self.sched.executed()
    }

    pub fn set_trace(&mut self, sink: Option<Box<dyn TraceSink>>) -> Option<Box<dyn TraceSink>> {
        self.sched.set_trace(sink)
    }

    pub fn take_trace(&mut self) -> Option<Box<dyn TraceSink>> {
        self.sched.take_trace()
    }

    pub fn run_until(&mut self, t_end: Tick) -> Result<SimulationStats, SimError> {
        if t_end < self.now() {
            return Err(ClockError::RunInPast {
                until: t_end,
                now: self.now(),
            }
            .into());
        }
        let started = Instant::now();
        let before = self.sched.executed();
        while let Some(event) = self.sched.pop_due(t_end) {
            self.dispatch(event);
        }
        self.sched.advance_to(t_end)?;
        Ok(SimulationStats {
            events_processed: self.sched.executed() - before,
            final_tick: t_end,
            wall_time: started.elapsed(),
        })
    }

    pub fn run_for(&mut self, ticks: u64) -> Result<SimulationStats, SimError> {
        self.run_until(self.now() + ticks)
    }

    fn dispatch(&mut self, event: ScheduledEvent<Target, Action>) {
        let now = event.due;
        match (event.target, event.action) {
            (Target::Clock, Action::DerivativeWindow) => {
                for j in 0..JOINT_COUNT {
                    self.joints[j].controller.on_window(now);
                    self.flush_controller(j);
                }
                let window = self.config.controller.derivative_window;
                self.sched.schedule_in(window, Target::Clock, Action::DerivativeWindow);
            }
            (Target::Bank, Action::CommandComplete { id }) => self.complete_command(id),
            (Target::Joint(joint), action) => self.dispatch_joint(joint.index(), now, action),
            (target, action) => unreachable!("{action} sent to {target}"),
        }
    }

    fn dispatch_joint(&mut self, j: usize, now: Tick, action: Action) {
        match action {
            Action::Spike { path, generation } => {
                self.joints[j].controller.on_spike(now, path, generation);
                self.flush_controller(j);
            }
            Action::Fire { generation } => {
                let out = self.joints[j].controller.on_fire(now, generation);
                self.flush_controller(j);
                if let Some(polarity) = out {
                    self.motor_spike(j, now, polarity);
                }
            }
            Action::BridgeOff { generation } => {
                if self.joints[j].bridge.on_off(now, generation).level_changed {
                    self.apply_bridge(j, now);
                }
            }
            Action::Transition { generation } => {
                if generation == self.joints[j].transition_generation {
                    self.sync_plant(j, now);
                    self.reschedule_transition(j);
                }
            }
            Action::EmergencyStop => self.estop(j, now),
            Action::HomingSpike { generation } => {
                let slot = &mut self.joints[j];
                if slot.homing != HomingPhase::Seeking
                    || slot.homing_gen.generation() != generation
                    || slot.homing_gen.next_spike() != Some(now)
                {
                    return;
                }
                let polarity = slot.homing_gen.fire(now);
                self.queue_homing_spike(j);
                self.motor_spike(j, now, polarity);
            }
            Action::HomingSettled { attempt } => {
                let slot = &self.joints[j];
                if slot.homing_attempt == attempt && slot.homing == HomingPhase::Settling {
                    self.finish_homing(j, now);
                }
            }
            Action::HomingTimeout { attempt } => {
                let slot = &self.joints[j];
                if slot.homing_attempt == attempt && slot.homing != HomingPhase::Idle {
                    self.abort_homing(j, now);
                }
            }
            other => unreachable!("{other} sent to a joint"),
        }
    }

    fn flush_controller(&mut self, j: usize) {
        let slot = &mut self.joints[j];
        let target = Target::Joint(slot.id);
        for w in slot.controller.drain_wakeups() {
            let action = match w.wake {
                Wake::Spike(path) => Action::Spike {
                    path,
                    generation: w.generation,
                },
                Wake::Fire => Action::Fire {
                    generation: w.generation,
                },
            };
            self.sched
                .schedule(w.at, target, action)
                .expect("controller wake-ups are never in the past");
        }
    }

    fn motor_spike(&mut self, j: usize, now: Tick, polarity: Polarity) {
        let slot = &mut self.joints[j];
        slot.motor_net += i64::from(polarity.sign());
        if let Some(probe) = slot.probe.as_mut() {
            probe
                .motor
                .push(SpikeEvent::new(now, polarity, Channel(u16::from(slot.id.number()))));
        }
        if !slot.attached {
            return;
        }
        let change = slot.bridge.on_spike(now, polarity);
        if change.off_moved {
            if let Some(off) = slot.bridge.off_at() {
                let generation = slot.bridge.generation();
                let target = Target::Joint(slot.id);
                self.sched
                    .schedule(off, target, Action::BridgeOff { generation })
                    .expect("off edge is in the future");
            }
        }
        if change.level_changed {
            self.apply_bridge(j, now);
        }
    }

    fn cut_bridge(&mut self, j: usize, now: Tick) {
        if self.joints[j].bridge.cut(now).level_changed {
            self.apply_bridge(j, now);
        }
    }

    /// A bridge edge: bring the plant up to date and switch its voltage.
    fn apply_bridge(&mut self, j: usize, now: Tick) {
        self.sync_plant(j, now);
        let slot = &mut self.joints[j];
        let v = slot.bridge.voltage(slot.plant.params().v_supply);
        slot.plant.set_voltage(now, v);
        self.reschedule_transition(j);
    }

    fn reschedule_transition(&mut self, j: usize) {
        let slot = &mut self.joints[j];
        slot.transition_generation += 1;
        let generation = slot.transition_generation;
        match slot.plant.next_transition(TRANSITION_HORIZON) {
            NextChange::At(t) | NextChange::Recheck(t) => {
                let target = Target::Joint(slot.id);
                self.sched
                    .schedule(t, target, Action::Transition { generation })
                    .expect("plant transitions lie ahead of the plant clock");
            }
            NextChange::Never => {}
        }
    }

    /// Advances the plant to `now` and delivers any encoder and switch
    /// changes.
    fn sync_plant(&mut self, j: usize, now: Tick) {
        let slot = &mut self.joints[j];
        let tr = slot.plant.advance_to(now);
        if tr.is_empty() {
            return;
        }
        if tr.encoder_delta != 0 {
            let direction = sign_of(tr.encoder_delta);
            for _ in 0..tr.encoder_delta.unsigned_abs() {
                slot.controller.on_encoder(now, direction);
            }
            let counter = slot.controller.counter();
            if let Some(probe) = slot.probe.as_mut() {
                probe.counter.push((now, counter));
            }
            self.flush_controller(j);
        }
        let id = self.joints[j].id;
        if tr.limit_changed == Some(true) {
            self.limit_trips.push((now, id));
            self.sched
                .schedule(now, Target::Joint(id), Action::EmergencyStop)
                .expect("same tick");
        }
        if tr.home_changed == Some(true) && self.joints[j].homing == HomingPhase::Seeking {
            self.home_found(j, now);
        }
    }

    fn estop(&mut self, j: usize, now: Tick) {
        if self.joints[j].homing != HomingPhase::Idle {
            self.abort_homing(j, now);
            return;
        }
        self.joints[j].controller.emergency_stop(now);
        self.flush_controller(j);
        self.cut_bridge(j, now);
    }

    // Homing ----------------------------------------------------------------

    fn queue_homing_spike(&mut self, j: usize) {
        let slot = &self.joints[j];
        if let Some(at) = slot.homing_gen.next_spike() {
            let generation = slot.homing_gen.generation();
            self.sched
                .schedule(at, Target::Joint(slot.id), Action::HomingSpike { generation })
                .expect("homing spikes lie ahead");
        }
    }

    fn start_homing_at(&mut self, j: usize, now: Tick) {
        if self.joints[j].homing != HomingPhase::Idle {
            return;
        }
        self.sync_plant(j, now);
        let timeout = Tick::from_secs(self.config.homing.timeout_s).0;
        let rate = self.config.homing.rate;
        let slot = &mut self.joints[j];
        slot.homed = false;
        slot.homing_fault = false;
        slot.homing_attempt += 1;
        slot.homing = HomingPhase::Seeking;
        slot.controller.begin_homing(now);
        let attempt = slot.homing_attempt;
        let id = slot.id;
        self.flush_controller(j);
        self.cut_bridge(j, now);
        if self.joints[j].plant.home_switch() {
            self.finish_homing(j, now);
            return;
        }
        let angle = self.joints[j].plant.state().angle;
        let rate = if angle > 0.0 { -rate } else { rate };
        self.joints[j].homing_gen.set_rate(now, rate);
        self.queue_homing_spike(j);
        self.sched
            .schedule(now + timeout, Target::Joint(id), Action::HomingTimeout { attempt })
            .expect("timeout lies ahead");
    }

    fn home_found(&mut self, j: usize, now: Tick) {
        let settle = Tick::from_secs(self.config.homing.settle_s).0;
        let slot = &mut self.joints[j];
        slot.homing_gen.reset(now);
        slot.homing = HomingPhase::Settling;
        let attempt = slot.homing_attempt;
        let id = slot.id;
        self.cut_bridge(j, now);
        self.sched
            .schedule(now + settle, Target::Joint(id), Action::HomingSettled { attempt })
            .expect("settle lies ahead");
    }

    fn finish_homing(&mut self, j: usize, now: Tick) {
        let slot = &mut self.joints[j];
        slot.homing = HomingPhase::Idle;
        slot.homed = true;
        slot.controller.finish_homing(now);
        self.bank.set_live(regbank::REF_BASE + j, u32::from(OFFSET));
        self.flush_controller(j);
    }

    fn abort_homing(&mut self, j: usize, now: Tick) {
        let slot = &mut self.joints[j];
        slot.homing_gen.reset(now);
        slot.homing = HomingPhase::Idle;
        slot.homing_fault = true;
        slot.controller.abort_homing(now);
        self.flush_controller(j);
        self.cut_bridge(j, now);
    }

    pub fn is_homing(&self) -> bool {
        self.joints.iter().any(|s| s.homing != HomingPhase::Idle)
    }

    pub fn joint_homing(&self, joint: JointId) -> bool {
        self.joints[joint.index()].homing != HomingPhase::Idle
    }

    pub fn is_homed(&self, joint: JointId) -> bool {
        self.joints[joint.index()].homed
    }

    pub fn all_homed(&self) -> bool {
        self.joints.iter().all(|s| s.homed)
    }

    pub fn start_homing(&mut self, joint: JointId) {
        self.start_homing_at(joint.index(), self.now());
    }

    pub fn start_homing_all(&mut self) {
        for j in 0..JOINT_COUNT {
            self.start_homing_at(j, self.now());
        }
    }

    /// Homes every joint and runs until all have finished.
    pub fn home_all(&mut self) -> Result<(), SimError> {
        self.start_homing_all();
        while self.is_homing() {
            self.run_for(Tick::from_millis(10).0)?;
        }
        match self.joints.iter().find(|s| s.homing_fault) {
            Some(s) => Err(SimError::HomingFailed(s.id)),
            None => Ok(()),
        }
    }

    // Register bank ---------------------------------------------------------

    fn refresh_live(&mut self) {
        let mut status = 0u32;
        for (i, slot) in self.joints.iter().enumerate() {
            let bit = |b: bool, shift: u32| u32::from(b) << (shift + i as u32);
            status |= bit(slot.plant.limit_hit(), regbank::STATUS_LIMIT_SHIFT)
                | bit(slot.plant.home_switch(), regbank::STATUS_HOME_SHIFT)
                | bit(slot.controller.is_estopped(), regbank::STATUS_ESTOP_SHIFT)
                | bit(slot.homed, regbank::STATUS_HOMED_SHIFT);
            if slot.homing_fault {
                status |= regbank::STATUS_HOMING_FAULT;
            }
            if slot.homing != HomingPhase::Idle {
                status |= regbank::STATUS_BUSY;
            }
            self.bank
                .set_live(regbank::POS_BASE + i, u32::from(slot.controller.counter()));
        }
        self.bank.set_live(regbank::STATUS, status);
    }

    pub fn bank(&mut self) -> &RegisterBank {
        self.refresh_live();
        &self.bank
    }

    pub fn read_word(&mut self, index: usize) -> Result<u32, SimError> {
        self.refresh_live();
        Ok(self.bank.read_word(index)?)
    }

    /// Immediate register write with its side effects.
    pub fn write_word(&mut self, index: usize, value: u32) -> Result<(), SimError> {
        let effect = self.bank.write_word(index, value)?;
        let now = self.now();
        match effect {
            WriteEffect::None => {}
            WriteEffect::Reference { joint, counts } => {
                let j = joint.index();
                self.joints[j].controller.set_reference(now, counts);
                self.flush_controller(j);
            }
            WriteEffect::Gains { joint, gains } => {
                let j = joint.index();
                self.joints[j].controller.set_gains(now, gains);
                self.flush_controller(j);
            }
            WriteEffect::GlobalControl {
                enable,
                soft_reset,
                home_all,
            } => {
                for j in 0..JOINT_COUNT {
                    if !enable {
                        self.estop(j, now);
                        continue;
                    }
                    self.joints[j].homing_fault = false;
                    if soft_reset {
                        self.joints[j].controller.soft_reset(now);
                    } else {
                        self.joints[j].controller.enable(now);
                    }
                    self.flush_controller(j);
                }
                if enable && home_all {
                    self.start_homing_all();
                }
            }
        }
        Ok(())
    }

    pub fn set_reference(&mut self, joint: JointId, counts: u16) -> Result<(), SimError> {
        self.write_word(regbank::REF_BASE + joint.index(), u32::from(counts))
    }

    pub fn set_gains(&mut self, joint: JointId, gains: SpidGains) -> Result<(), SimError> {
        let i = joint.index();
        self.write_word(regbank::KP_BASE + i, u32::from(gains.kp))?;
        self.write_word(regbank::KI_BASE + i, u32::from(gains.ki))?;
        self.write_word(regbank::KD_BASE + i, u32::from(gains.kd))
    }

    pub fn emergency_stop(&mut self, joint: JointId) {
        self.estop(joint.index(), self.now());
    }

    /// Queues a command over `transport`. Every operation is validated now;
    /// all of them take effect together when the command completes.
    pub fn submit_command(
        &mut self,
        transport: &TransportModel,
        ops: Vec<RegisterOp>,
    ) -> Result<PendingCommand, SimError> {
        if ops.is_empty() {
            return Err(RegisterError::EmptyCommand.into());
        }
        for op in &ops {
            op.validate()?;
        }
        let id = self.next_command;
        self.next_command += 1;
        let submitted = self.now();
        let completes = submitted + transport.latency_ticks();
        self.in_flight.insert(
            id,
            InFlight {
                transport: transport.name.clone(),
                ops,
                submitted,
            },
        );
        self.sched
            .schedule(completes, Target::Bank, Action::CommandComplete { id })?;
        Ok(PendingCommand {
            id,
            submitted,
            completes,
        })
    }

    fn complete_command(&mut self, id: u64) {
        let Some(cmd) = self.in_flight.remove(&id) else {
            return;
        };
        let mut reads = Vec::new();
        for op in &cmd.ops {
            match *op {
                RegisterOp::Read { index } => {
                    reads.push(self.read_word(index).expect("validated at submission"));
                }
                RegisterOp::Write { index, value } => {
                    self.write_word(index, value).expect("validated at submission");
                }
            }
        }
        let completed = self.now();
        self.completed.insert(
            id,
            CompletionRecord {
                id,
                transport: cmd.transport,
                ops: cmd.ops,
                reads,
                submitted: cmd.submitted,
                completed,
                latency_s: (completed - cmd.submitted) as f64 / crate::CLOCK_HZ as f64,
            },
        );
    }

    pub fn take_completion(&mut self, id: u64) -> Option<CompletionRecord> {
        self.completed.remove(&id)
    }

    /// Submits a command and runs the clock until it completes.
    pub fn execute_command(
        &mut self,
        transport: &TransportModel,
        ops: Vec<RegisterOp>,
    ) -> Result<CompletionRecord, SimError> {
        let pending = self.submit_command(transport, ops)?;
        self.run_until(pending.completes)?;
        self.take_completion(pending.id)
            .ok_or(SimError::UnknownCommand(pending.id))
    }

    // Observation -----------------------------------------------------------

    pub fn controller(&self, joint: JointId) -> &JointController {
        &self.joints[joint.index()].controller
    }

    pub fn plant_state(&self, joint: JointId) -> JointPlantState {
        self.joints[joint.index()].plant.peek(self.now())
    }

    /// Net motor spikes emitted so far.
    pub fn motor_net(&self, joint: JointId) -> i64 {
        self.joints[joint.index()].motor_net
    }

    pub fn limit_trips(&self) -> &[(Tick, JointId)] {
        &self.limit_trips
    }

    pub fn joint_flags(&self, joint: JointId) -> JointFlags {
        let slot = &self.joints[joint.index()];
        JointFlags {
            limit: slot.plant.limit_hit(),
            home: slot.plant.home_switch(),
            estop: slot.controller.is_estopped(),
            homed: slot.homed,
            homing: slot.homing != HomingPhase::Idle,
            homing_fault: slot.homing_fault,
        }
    }

    /// Sets a joint's initial angle and velocity. Only meaningful before the
    /// joint starts moving.
    pub fn place_joint(&mut self, joint: JointId, angle: f64, velocity: f64) {
        let now = self.now();
        let j = joint.index();
        self.joints[j].plant.reset_state(now, angle, velocity);
        self.reschedule_transition(j);
    }

    /// Disconnects the plant: motor spikes are still counted and probed but
    /// no longer drive the bridge.
    pub fn detach_plant(&mut self, joint: JointId) {
        let j = joint.index();
        self.cut_bridge(j, self.now());
        self.joints[j].attached = false;
    }

    pub fn enable_probe(&mut self, joint: JointId) {
        self.joints[joint.index()].probe.get_or_insert_with(JointProbe::default);
    }

    pub fn take_probe(&mut self, joint: JointId) -> Option<JointProbe> {
        self.joints[joint.index()].probe.take()
    }

    pub fn snapshot(&mut self) -> SimSnapshot {
        self.refresh_live();
        let now = self.now();
        let joints = JointId::all()
            .map(|id| {
                let slot = &self.joints[id.index()];
                let c = &slot.controller;
                let plant = slot.plant.peek(now);
                JointSnapshot {
                    joint: id.number(),
                    reference: c.reference(),
                    position: c.counter(),
                    degrees: self.config.joint_map.counts_to_degrees(id, c.counter()).ok(),
                    angle_deg: plant.angle,
                    velocity_deg_s: plant.velocity,
                    voltage: plant.voltage,
                    gains: c.gains(),
                    command_rate: c.control_step().rate,
                    motor_net_spikes: slot.motor_net,
                    flags: self.joint_flags(id),
                }
            })
            .collect();
        SimSnapshot {
            tick: now,
            sim_time_s: now.as_secs(),
            homing: self.is_homing(),
            joints,
        }
    }
}

/// Runs `n` back-to-back REF1 rewrites over `transport`, each submitted when
/// the previous one has completed.
pub fn measure_latency(
    sim: &mut Simulator,
    transport: &TransportModel,
    n: usize,
) -> Result<LatencyStats, SimError> {
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let value = sim.read_word(regbank::REF_BASE)?;
        let rec = sim.execute_command(
            transport,
            vec![RegisterOp::Write {
                index: regbank::REF_BASE,
                value,
            }],
        )?;
        samples.push(rec.latency_s);
    }
    Ok(LatencyStats::from_samples(&transport.name, &samples))
}

/// Measures `fast` and `slow` on fresh simulators built from `config`.
pub fn bench_latency(
    config: &SimConfig,
    fast: &TransportModel,
    slow: &TransportModel,
    n: usize,
) -> Result<LatencyReport, SimError> {
    let f = measure_latency(&mut Simulator::new(config.clone())?, fast, n)?;
    let s = measure_latency(&mut Simulator::new(config.clone())?, slow, n)?;
    Ok(LatencyReport::new(f, s))
}

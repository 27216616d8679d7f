//! Per-joint spike-based PID position controller.
//!
//! The loop is closed on a 16-bit position counter fed by encoder events.
//! The signed error `reference - counter` drives a PFM generator at
//! `error_gain * e` spikes/s. That error stream feeds three paths whose
//! outputs are merged by a Hold&Fire block into the motor spike stream:
//!
//! * P: rate divider with gain word `kp`.
//! * I: saturating spike counter driving a PFM generator at
//!   `integral_gain * ki/2^15 * count`.
//! * D: two-window rate differentiator driving a PFM generator at
//!   `kd/2^15 * rate_difference`.
//!
//! The controller is a pure state machine. Whenever one of its internal
//! generators needs waking at a future tick it queues a [`Wakeup`]; the owner
//! turns those into scheduler events and hands them back through
//! [`JointController::on_spike`] and [`JointController::on_fire`]. Wake-ups
//! carry a generation number so superseded ones are ignored.

use serde::{Deserialize, Serialize};

use crate::clock::Tick;
use crate::joint_map::OFFSET;
use crate::spike::{
    gain_of, Channel, DividerConfig, HoldAndFire, PfmGenerator, Polarity, RateCommand,
    RateDifferentiator, RateDivider, SpikeIntegrator, DEFAULT_ACC_MAX, DEFAULT_RATE_MAX,
};
use crate::JointId;

/// Gain words, each read as `word / 2^15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpidGains {
    pub kp: u16,
    pub ki: u16,
    pub kd: u16,
}

impl SpidGains {
    /// Tuning preset: unity P, light I, moderate D.
    pub const PRESET: SpidGains = SpidGains {
        kp: 32_768,
        ki: 655,
        kd: 8_192,
    };

    pub const ZERO: SpidGains = SpidGains { kp: 0, ki: 0, kd: 0 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Error-stream rate per count of position error, spikes/s.
    pub error_gain: f64,
    /// I-path rate per integrator unit before the `ki` word, spikes/s.
    pub integral_gain: f64,
    /// D-path window in ticks.
    pub derivative_window: u64,
    pub acc_max: i32,
    pub rate_max: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            error_gain: 10.0,
            integral_gain: 1.0,
            derivative_window: Tick::from_millis(10).0,
            acc_max: DEFAULT_ACC_MAX,
            rate_max: DEFAULT_RATE_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpidPath {
    Error,
    Integral,
    Derivative,
}

impl SpidPath {
    pub fn name(self) -> &'static str {
        match self {
            SpidPath::Error => "error",
            SpidPath::Integral => "integral",
            SpidPath::Derivative => "derivative",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wake {
    Spike(SpidPath),
    Fire,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Wakeup {
    pub at: Tick,
    pub wake: Wake,
    pub generation: u64,
}

/// Instantaneous commanded rates of each path, spikes/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct PathRates {
    pub error: f64,
    pub proportional: f64,
    pub integral: f64,
    pub derivative: f64,
}

impl PathRates {
    pub fn total(&self) -> f64 {
        self.proportional + self.integral + self.derivative
    }
}

#[derive(Debug, Clone)]
pub struct JointController {
    joint: JointId,
    cfg: ControllerConfig,
    gains: SpidGains,
    reference: u16,
    counter: u16,
    estopped: bool,
    homing: bool,
    error_gen: PfmGenerator,
    divider: RateDivider,
    integrator: SpikeIntegrator,
    integral_gen: PfmGenerator,
    differentiator: RateDifferentiator,
    derivative_input: f64,
    derivative_gen: PfmGenerator,
    merger: HoldAndFire,
    fire_pending: Option<Tick>,
    fire_generation: u64,
    wakeups: Vec<Wakeup>,
}

impl JointController {
    pub fn new(joint: JointId, cfg: ControllerConfig, gains: SpidGains, start: Tick) -> Self {
        Self {
            joint,
            cfg,
            gains,
            reference: OFFSET,
            counter: OFFSET,
            estopped: false,
            homing: false,
            error_gen: PfmGenerator::new(start),
            divider: RateDivider::new(DividerConfig::new(gains.kp)),
            integrator: SpikeIntegrator::new(cfg.acc_max),
            integral_gen: PfmGenerator::new(start),
            differentiator: RateDifferentiator::new(cfg.derivative_window.max(1))
                .expect("window is at least one tick"),
            derivative_input: 0.0,
            derivative_gen: PfmGenerator::new(start),
            merger: HoldAndFire::new(),
            fire_pending: None,
            fire_generation: 0,
            wakeups: Vec::new(),
        }
    }

    pub fn joint(&self) -> JointId {
        self.joint
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn gains(&self) -> SpidGains {
        self.gains
    }

    pub fn reference(&self) -> u16 {
        self.reference
    }

    pub fn counter(&self) -> u16 {
        self.counter
    }

    pub fn error(&self) -> i32 {
        i32::from(self.reference) - i32::from(self.counter)
    }

    pub fn integrator(&self) -> i32 {
        self.integrator.value()
    }

    pub fn is_enabled(&self) -> bool {
        !self.estopped && !self.homing
    }

    pub fn is_estopped(&self) -> bool {
        self.estopped
    }

    pub fn is_homing(&self) -> bool {
        self.homing
    }

    /// Pending wake-ups, oldest first.
    pub fn drain_wakeups(&mut self) -> std::vec::Drain<'_, Wakeup> {
        self.wakeups.drain(..)
    }

    fn clamp_rate(&self, rate: f64) -> f64 {
        rate.clamp(-self.cfg.rate_max, self.cfg.rate_max)
    }

    fn generator(&mut self, path: SpidPath) -> &mut PfmGenerator {
        match path {
            SpidPath::Error => &mut self.error_gen,
            SpidPath::Integral => &mut self.integral_gen,
            SpidPath::Derivative => &mut self.derivative_gen,
        }
    }

    fn queue_spike(&mut self, path: SpidPath) {
        let generator = self.generator(path);
        if let Some(at) = generator.next_spike() {
            let generation = generator.generation();
            self.wakeups.push(Wakeup {
                at,
                wake: Wake::Spike(path),
                generation,
            });
        }
    }

    fn retarget(&mut self, now: Tick, path: SpidPath, rate: f64) {
        let rate = self.clamp_rate(rate);
        if self.generator(path).set_rate(now, rate) {
            self.queue_spike(path);
        }
    }

    pub fn command_rates(&self) -> PathRates {
        if !self.is_enabled() {
            return PathRates::default();
        }
        let error = self.clamp_rate(self.cfg.error_gain * f64::from(self.error()));
        PathRates {
            error,
            proportional: error * gain_of(self.gains.kp),
            integral: self.integral_rate(),
            derivative: self.derivative_rate(),
        }
    }

    /// Instantaneous commanded rate of the merged motor output.
    pub fn control_step(&self) -> RateCommand {
        RateCommand {
            rate: self.command_rates().total(),
            channel: Channel(u16::from(self.joint.number())),
        }
    }

    fn integral_rate(&self) -> f64 {
        self.clamp_rate(
            self.cfg.integral_gain * gain_of(self.gains.ki) * f64::from(self.integrator.value()),
        )
    }

    fn derivative_rate(&self) -> f64 {
        self.clamp_rate(gain_of(self.gains.kd) * self.derivative_input)
    }

    fn reevaluate(&mut self, now: Tick) {
        if !self.is_enabled() {
            return;
        }
        let error_rate = self.cfg.error_gain * f64::from(self.error());
        self.retarget(now, SpidPath::Error, error_rate);
        self.retarget(now, SpidPath::Integral, self.integral_rate());
        self.retarget(now, SpidPath::Derivative, self.derivative_rate());
    }

    pub fn set_reference(&mut self, now: Tick, reference: u16) {
        self.reference = reference;
        self.reevaluate(now);
    }

    pub fn set_gains(&mut self, now: Tick, gains: SpidGains) {
        self.gains = gains;
        self.divider.set_gain(DividerConfig::new(gains.kp));
        self.reevaluate(now);
    }

    /// One encoder count. The counter keeps tracking while disabled.
    pub fn on_encoder(&mut self, now: Tick, direction: Polarity) {
        self.counter = match direction {
            Polarity::Positive => self.counter.saturating_add(1),
            Polarity::Negative => self.counter.saturating_sub(1),
        };
        self.reevaluate(now);
    }

    fn request_fire(&mut self, now: Tick) {
        let Some(at) = self.merger.next_fire(now) else {
            return;
        };
        if self.fire_pending == Some(at) {
            return;
        }
        self.fire_pending = Some(at);
        self.fire_generation += 1;
        self.wakeups.push(Wakeup {
            at,
            wake: Wake::Fire,
            generation: self.fire_generation,
        });
    }

    /// Handles a spike wake-up. Stale generations are ignored.
    pub fn on_spike(&mut self, now: Tick, path: SpidPath, generation: u64) {
        let generator = self.generator(path);
        if generator.generation() != generation || generator.next_spike() != Some(now) {
            return;
        }
        let polarity = generator.fire(now);
        self.queue_spike(path);
        match path {
            SpidPath::Error => {
                for _ in 0..self.divider.feed(polarity) {
                    self.merger.push(polarity);
                }
                self.integrator.feed(polarity);
                self.differentiator.count(polarity);
                self.retarget(now, SpidPath::Integral, self.integral_rate());
            }
            SpidPath::Integral | SpidPath::Derivative => self.merger.push(polarity),
        }
        self.request_fire(now);
    }

    /// Handles a Hold&Fire wake-up; returns the motor spike, if any.
    pub fn on_fire(&mut self, now: Tick, generation: u64) -> Option<Polarity> {
        if generation != self.fire_generation || self.fire_pending != Some(now) {
            return None;
        }
        self.fire_pending = None;
        let out = self.merger.fire(now);
        self.request_fire(now);
        out
    }

    /// Closes a D-path window.
    pub fn on_window(&mut self, now: Tick) {
        self.derivative_input = self.differentiator.close_window();
        if self.is_enabled() {
            self.retarget(now, SpidPath::Derivative, self.derivative_rate());
        }
    }

    fn halt(&mut self, now: Tick) {
        self.error_gen.reset(now);
        self.integral_gen.reset(now);
        self.derivative_gen.reset(now);
        self.integrator.clear();
        self.divider.reset();
        self.differentiator.reset();
        self.derivative_input = 0.0;
        self.merger.clear();
        self.fire_pending = None;
        self.fire_generation += 1;
    }

    /// Disables the joint, clears the integrator and drops any held output.
    /// Idempotent.
    pub fn emergency_stop(&mut self, now: Tick) {
        self.estopped = true;
        self.halt(now);
    }

    /// Clears an emergency stop latch.
    pub fn enable(&mut self, now: Tick) {
        if self.estopped {
            self.estopped = false;
            self.reevaluate(now);
        }
    }

    /// Clears the integrator and re-enables the joint.
    pub fn soft_reset(&mut self, now: Tick) {
        self.integrator.clear();
        self.estopped = false;
        self.reevaluate(now);
    }

    pub fn begin_homing(&mut self, now: Tick) {
        self.homing = true;
        self.halt(now);
    }

    /// Ends homing successfully: counter and reference both return to the
    /// neutral offset.
    pub fn finish_homing(&mut self, now: Tick) {
        self.homing = false;
        self.counter = OFFSET;
        self.reference = OFFSET;
        self.reevaluate(now);
    }

    /// Ends homing with a fault; the joint stays stopped.
    pub fn abort_homing(&mut self, now: Tick) {
        self.homing = false;
        self.emergency_stop(now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Scheduler;

    fn joint1() -> JointId {
        JointId::new(1).unwrap()
    }

    fn controller(gains: SpidGains) -> JointController {
        JointController::new(joint1(), ControllerConfig::default(), gains, Tick::ZERO)
    }

    /// Runs a controller open loop (counter frozen) and returns the net
    /// motor spikes over `[0, until)`.
    fn open_loop(c: &mut JointController, until: Tick) -> i64 {
        let mut sched: Scheduler<u8, Wake> = Scheduler::new();
        let mut generations = std::collections::HashMap::new();
        let queue = |c: &mut JointController, sched: &mut Scheduler<u8, Wake>, g: &mut std::collections::HashMap<u64, u64>| {
            for w in c.drain_wakeups().collect::<Vec<_>>() {
                let id = sched.schedule(w.at, 0, w.wake).unwrap();
                g.insert(id.0, w.generation);
            }
        };
        queue(c, &mut sched, &mut generations);
        let window = c.config().derivative_window;
        let mut next_window = Tick(window);
        let mut net = 0;
        loop {
            let horizon = next_window.min(until);
            while let Some(ev) = sched.pop_due(horizon) {
                if ev.due >= until {
                    break;
                }
                let generation = generations[&ev.sequence];
                match ev.action {
                    Wake::Spike(path) => c.on_spike(ev.due, path, generation),
                    Wake::Fire => {
                        if let Some(p) = c.on_fire(ev.due, generation) {
                            net += i64::from(p.sign());
                        }
                    }
                }
                queue(c, &mut sched, &mut generations);
            }
            if horizon >= until {
                return net;
            }
            sched.advance_to(horizon).unwrap();
            c.on_window(horizon);
            queue(c, &mut sched, &mut generations);
            next_window = next_window + window;
        }
    }

    impl std::fmt::Display for Wake {
        fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            write!(f, "{self:?}")
        }
    }

    #[test]
    fn neutral_reference_gives_zero_command() {
        let mut c = controller(SpidGains::PRESET);
        c.set_reference(Tick::ZERO, 32_768);
        assert_eq!(c.error(), 0);
        assert_eq!(c.control_step().rate, 0.0);
        assert_eq!(open_loop(&mut c, Tick::from_millis(100)), 0);
    }

    #[test]
    fn reference_step_sets_error() {
        let mut c = controller(SpidGains::PRESET);
        c.set_reference(Tick::ZERO, 33_268);
        assert_eq!(c.error(), 500);
    }

    #[test]
    fn encoder_counts_and_saturates() {
        let mut c = controller(SpidGains::PRESET);
        c.on_encoder(Tick::ZERO, Polarity::Positive);
        assert_eq!(c.counter(), 32_769);
        let mut c = controller(SpidGains::PRESET);
        for _ in 0..40_000 {
            c.on_encoder(Tick::ZERO, Polarity::Positive);
        }
        assert_eq!(c.counter(), u16::MAX);
        let mut c = controller(SpidGains::PRESET);
        for _ in 0..500 {
            c.on_encoder(Tick::ZERO, Polarity::Positive);
        }
        assert_eq!(c.counter(), 33_268);
    }

    #[test]
    fn proportional_only_rate_matches_composed_counting() {
        // e = +500, g_e = 10/s/count: error stream 5000/s; kp = 1.0 passes
        // it through. Over 1 s the counting oracle gives 5000 +- quantization.
        let gains = SpidGains { kp: 32_768, ki: 0, kd: 0 };
        let mut c = controller(gains);
        c.set_reference(Tick::ZERO, 33_268);
        assert_eq!(c.command_rates().proportional, 5000.0);
        let net = open_loop(&mut c, Tick::from_millis(1000));
        assert!((net - 5000).abs() <= 2, "{net}");
    }

    #[test]
    fn zero_gains_give_zero_output() {
        let mut c = controller(SpidGains::ZERO);
        c.set_reference(Tick::ZERO, 40_000);
        assert_eq!(c.control_step().rate, 0.0);
        assert_eq!(open_loop(&mut c, Tick::from_millis(200)), 0);
    }

    #[test]
    fn sign_follows_error() {
        let gains = SpidGains { kp: 20_000, ki: 0, kd: 0 };
        for (reference, sign) in [(32_000u16, -1i64), (33_000, 1)] {
            let mut c = controller(gains);
            c.set_reference(Tick::ZERO, reference);
            let net = open_loop(&mut c, Tick::from_millis(100));
            assert_eq!(net.signum(), sign);
        }
    }

    #[test]
    fn halving_kp_with_double_error_gain_keeps_p_rate() {
        let gains = SpidGains { kp: 30_000, ki: 0, kd: 0 };
        let mut a = controller(gains);
        a.set_reference(Tick::ZERO, 33_000);
        let mut cfg = ControllerConfig::default();
        cfg.error_gain *= 2.0;
        let mut b = JointController::new(joint1(), cfg, SpidGains { kp: 15_000, ..gains }, Tick::ZERO);
        b.set_reference(Tick::ZERO, 33_000);
        let (na, nb) = (
            open_loop(&mut a, Tick::from_millis(500)),
            open_loop(&mut b, Tick::from_millis(500)),
        );
        assert!((na - nb).abs() <= 2, "{na} vs {nb}");
    }

    #[test]
    fn emergency_stop_silences_output_and_is_idempotent() {
        let mut c = controller(SpidGains::PRESET);
        c.set_reference(Tick::ZERO, 33_268);
        c.emergency_stop(Tick(10));
        c.emergency_stop(Tick(10));
        assert!(c.is_estopped());
        assert_eq!(c.integrator(), 0);
        assert_eq!(c.control_step().rate, 0.0);
        c.set_reference(Tick(20), 34_000);
        assert_eq!(c.reference(), 34_000);
        assert_eq!(open_loop(&mut c, Tick::from_millis(50)), 0);
        c.enable(Tick(30));
        assert!(c.control_step().rate > 0.0);
    }

    #[test]
    fn integrator_accumulates_error_spikes() {
        let gains = SpidGains { kp: 0, ki: 32_768, kd: 0 };
        let mut c = controller(gains);
        c.set_reference(Tick::ZERO, 32_778); // e = 10 -> 100 spikes/s
        let net = open_loop(&mut c, Tick::from_millis(1000));
        assert!((c.integrator() - 100).abs() <= 1);
        // I rate ramps 0 -> 100/s: about 50 spikes in the first second.
        assert!((net - 50).abs() <= 3, "{net}");
    }
}

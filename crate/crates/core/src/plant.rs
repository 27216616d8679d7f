//! Per-joint DC motor, H-bridge, quadrature encoder and switches.
//!
//! Each joint is a first-order velocity model driven by the bridge voltage:
//! `d(omega)/dt = (k_v * V - omega) / tau`, with the angle its integral.
//! Voltage is piecewise constant between bridge edges, so the state is
//! advanced with the exact exponential solution, never stepped. Encoder
//! count, home switch and limit switch are piecewise-constant functions of
//! the angle; their change times are found by bisection on ticks over
//! segments where the angle is monotone.

use serde::{Deserialize, Serialize};

use crate::clock::{Tick, CLOCK_HZ};
use crate::joint_map::{JointMap, OFFSET};
use crate::spike::{Polarity, SpikeEvent};
use crate::JointId;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlantError {
    #[error("{0} must be finite and positive")]
    NonPositive(&'static str),
    #[error("limits are inverted: lower {lower} >= upper {upper}")]
    InvertedLimits { lower: f64, upper: f64 },
    #[error("home band {band} degrees does not fit inside the limits")]
    HomeBandOutsideLimits { band: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotorParams {
    pub v_supply: f64,
    /// Steady-state speed per volt, deg/s/V.
    pub k_v: f64,
    /// Mechanical time constant, seconds.
    pub tau: f64,
    /// Bridge on-time per motor spike, seconds.
    pub pulse_width: f64,
    /// Most bridge on-time that can be queued, seconds.
    pub max_on_time: f64,
    pub degree_per_count: f64,
    pub lower_deg: f64,
    pub upper_deg: f64,
    /// Home switch closes while `|angle| < home_band`.
    pub home_band: f64,
    pub has_home_switch: bool,
}

impl MotorParams {
    pub fn for_joint(joint: JointId, map: &JointMap) -> Self {
        let (degree_per_count, lower_deg, upper_deg) = match map.mapping(joint) {
            Ok(m) => (m.degree_per_count, m.lower_deg, m.upper_deg),
            Err(_) => (1.24e-2, -180.0, 180.0),
        };
        Self {
            v_supply: 12.0,
            k_v: 20.0,
            tau: 0.05,
            pulse_width: 20e-6,
            max_on_time: 1e-3,
            degree_per_count,
            lower_deg,
            upper_deg,
            home_band: 0.5,
            has_home_switch: true,
        }
    }

    pub fn counts_per_degree(&self) -> f64 {
        1.0 / self.degree_per_count
    }

    pub fn pulse_ticks(&self) -> u64 {
        Tick::from_secs(self.pulse_width).0.max(1)
    }

    pub fn max_on_ticks(&self) -> u64 {
        Tick::from_secs(self.max_on_time).0.max(self.pulse_ticks())
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        for (name, v) in [
            ("v_supply", self.v_supply),
            ("k_v", self.k_v),
            ("tau", self.tau),
            ("pulse_width", self.pulse_width),
            ("max_on_time", self.max_on_time),
            ("degree_per_count", self.degree_per_count),
            ("home_band", self.home_band),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::NonPositive(name));
            }
        }
        if self.lower_deg.is_nan() || self.upper_deg.is_nan() || self.lower_deg >= self.upper_deg {
            return Err(PlantError::InvertedLimits {
                lower: self.lower_deg,
                upper: self.upper_deg,
            });
        }
        if self.lower_deg > -self.home_band || self.upper_deg < self.home_band {
            return Err(PlantError::HomeBandOutsideLimits {
                band: self.home_band,
            });
        }
        Ok(())
    }
}

/// Pulse stretcher: every motor spike adds `pulse_width` of on-time in its
/// direction, opposite spikes cancel queued on-time, and the output is
/// `+-v_supply` while any on-time is queued.
#[derive(Debug, Clone, PartialEq)]
pub struct HBridge {
    level: i8,
    off_at: Option<Tick>,
    generation: u64,
    pulse: i64,
    max_on: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BridgeChange {
    pub level_changed: bool,
    /// The pending off edge moved; the old one is stale.
    pub off_moved: bool,
}

impl HBridge {
    pub fn new(params: &MotorParams) -> Self {
        Self {
            level: 0,
            off_at: None,
            generation: 0,
            pulse: params.pulse_ticks() as i64,
            max_on: params.max_on_ticks() as i64,
        }
    }

    /// -1, 0 or +1.
    pub fn level(&self) -> i8 {
        self.level
    }

    pub fn off_at(&self) -> Option<Tick> {
        self.off_at
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn voltage(&self, v_supply: f64) -> f64 {
        f64::from(self.level) * v_supply
    }

    fn queued(&self, now: Tick) -> i64 {
        match self.off_at {
            Some(off) if self.level != 0 => i64::from(self.level) * off.saturating_sub(now) as i64,
            _ => 0,
        }
    }

    fn set_queued(&mut self, now: Tick, queued: i64) -> BridgeChange {
        let queued = queued.clamp(-self.max_on, self.max_on);
        let level = queued.signum() as i8;
        let off_at = (queued != 0).then(|| now + queued.unsigned_abs());
        let off_moved = off_at != self.off_at;
        if off_moved {
            self.generation += 1;
            self.off_at = off_at;
        }
        let level_changed = level != self.level;
        self.level = level;
        BridgeChange {
            level_changed,
            off_moved,
        }
    }

    pub fn on_spike(&mut self, now: Tick, polarity: Polarity) -> BridgeChange {
        let queued = self.queued(now) + i64::from(polarity.sign()) * self.pulse;
        self.set_queued(now, queued)
    }

    /// The off edge scheduled with `generation` has arrived.
    pub fn on_off(&mut self, now: Tick, generation: u64) -> BridgeChange {
        if generation != self.generation || self.off_at != Some(now) {
            return BridgeChange::default();
        }
        self.set_queued(now, 0)
    }

    /// Drops all queued on-time.
    pub fn cut(&mut self, now: Tick) -> BridgeChange {
        self.set_queued(now, 0)
    }
}

/// Mean bridge voltage for `net_spikes` spikes spread over `window_secs`,
/// saturated at the supply.
pub fn effective_voltage(params: &MotorParams, net_spikes: i64, window_secs: f64) -> f64 {
    if window_secs <= 0.0 {
        return 0.0;
    }
    let duty = net_spikes as f64 * params.pulse_width / window_secs;
    params.v_supply * duty.clamp(-1.0, 1.0)
}

/// [`effective_voltage`] over consecutive windows of `window` ticks covering
/// `[start, end)`.
pub fn drive_profile(
    params: &MotorParams,
    spikes: &[SpikeEvent],
    start: Tick,
    end: Tick,
    window: u64,
) -> Vec<f64> {
    let window = window.max(1);
    let n = end.saturating_sub(start).div_ceil(window) as usize;
    let mut nets = vec![0i64; n];
    for s in spikes {
        if s.at >= start && s.at < end {
            nets[((s.at - start) / window) as usize] += i64::from(s.polarity.sign());
        }
    }
    let secs = window as f64 / CLOCK_HZ as f64;
    nets.into_iter()
        .map(|net| effective_voltage(params, net, secs))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JointPlantState {
    pub angle: f64,
    pub velocity: f64,
    pub voltage: f64,
    /// Absolute encoder count mirrored into the 16-bit counter domain.
    pub encoder_counter: i64,
    pub home_switch: bool,
    pub limit_hit: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PlantTransition {
    pub encoder_delta: i64,
    pub home_changed: Option<bool>,
    pub limit_changed: Option<bool>,
}

impl PlantTransition {
    pub fn is_empty(&self) -> bool {
        self.encoder_delta == 0 && self.home_changed.is_none() && self.limit_changed.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextChange {
    At(Tick),
    /// Nothing changes before this tick; look again then.
    Recheck(Tick),
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderEvent {
    pub at: Tick,
    pub direction: Polarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Discrete {
    count: i64,
    home: bool,
    limit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointPlant {
    params: MotorParams,
    angle: f64,
    velocity: f64,
    voltage: f64,
    updated: Tick,
    state: Discrete,
}

impl JointPlant {
    pub fn new(params: MotorParams, angle: f64, start: Tick) -> Self {
        let mut plant = Self {
            params,
            angle,
            velocity: 0.0,
            voltage: 0.0,
            updated: start,
            state: Discrete {
                count: 0,
                home: false,
                limit: false,
            },
        };
        plant.state = plant.discrete(angle);
        plant
    }

    pub fn params(&self) -> &MotorParams {
        &self.params
    }

    pub fn updated(&self) -> Tick {
        self.updated
    }

    pub fn voltage(&self) -> f64 {
        self.voltage
    }

    pub fn count(&self) -> i64 {
        self.state.count
    }

    pub fn home_switch(&self) -> bool {
        self.state.home
    }

    pub fn limit_hit(&self) -> bool {
        self.state.limit
    }

    fn discrete(&self, angle: f64) -> Discrete {
        let p = &self.params;
        Discrete {
            count: (angle * p.counts_per_degree()).floor() as i64,
            home: p.has_home_switch && angle.abs() < p.home_band,
            limit: angle <= p.lower_deg || angle >= p.upper_deg,
        }
    }

    /// Angle and velocity `dt` ticks after the last update.
    fn evolve(&self, dt: u64) -> (f64, f64) {
        if dt == 0 {
            return (self.angle, self.velocity);
        }
        let t = dt as f64 / CLOCK_HZ as f64;
        let tau = self.params.tau;
        let w_inf = self.params.k_v * self.voltage;
        // 1 - exp(-t/tau), accurate for small t.
        let rise = -libm::expm1(-t / tau);
        let w0 = self.velocity;
        let angle = self.angle + w_inf * t + (w0 - w_inf) * tau * rise;
        let velocity = w_inf + (w0 - w_inf) * (1.0 - rise);
        (angle, velocity)
    }

    /// State at `now` without advancing.
    pub fn peek(&self, now: Tick) -> JointPlantState {
        let (angle, velocity) = self.evolve(now.saturating_sub(self.updated));
        let d = self.discrete(angle);
        JointPlantState {
            angle,
            velocity,
            voltage: self.voltage,
            encoder_counter: d.count + i64::from(OFFSET),
            home_switch: d.home,
            limit_hit: d.limit,
        }
    }

    pub fn state(&self) -> JointPlantState {
        self.peek(self.updated)
    }

    /// Moves the plant to `now` and reports what changed.
    pub fn advance_to(&mut self, now: Tick) -> PlantTransition {
        if now <= self.updated {
            return PlantTransition::default();
        }
        let (angle, velocity) = self.evolve(now - self.updated);
        self.angle = angle;
        self.velocity = velocity;
        self.updated = now;
        let next = self.discrete(angle);
        let prev = std::mem::replace(&mut self.state, next);
        PlantTransition {
            encoder_delta: next.count - prev.count,
            home_changed: (next.home != prev.home).then_some(next.home),
            limit_changed: (next.limit != prev.limit).then_some(next.limit),
        }
    }

    pub fn set_voltage(&mut self, now: Tick, voltage: f64) -> PlantTransition {
        let t = self.advance_to(now);
        self.voltage = voltage;
        t
    }

    /// Overwrites the continuous state, e.g. for initial conditions.
    pub fn reset_state(&mut self, now: Tick, angle: f64, velocity: f64) {
        self.angle = angle;
        self.velocity = velocity;
        self.updated = now;
        self.state = self.discrete(angle);
    }

    /// First tick after the last update at which the discrete state differs,
    /// searching at most `horizon` ticks ahead.
    pub fn next_transition(&self, horizon: u64) -> NextChange {
        let horizon = horizon.max(1);
        let w0 = self.velocity;
        let w_inf = self.params.k_v * self.voltage;
        if w0 == 0.0 && w_inf == 0.0 {
            return NextChange::Never;
        }
        let mut bounds = Vec::with_capacity(2);
        if w0 * w_inf < 0.0 {
            // Velocity crosses zero at t* = tau * ln((w_inf - w0) / w_inf).
            let t_star = self.params.tau * ((w_inf - w0) / w_inf).ln();
            let ticks = (t_star * CLOCK_HZ as f64).floor();
            if ticks >= 1.0 && ticks < horizon as f64 {
                bounds.push(ticks as u64);
            }
        }
        bounds.push(horizon);
        let differs = |dt: u64| self.discrete(self.evolve(dt).0) != self.state;
        let mut lo = 0u64;
        for hi in bounds {
            if differs(hi) {
                let mut hi = hi;
                while hi - lo > 1 {
                    let mid = lo + (hi - lo) / 2;
                    if differs(mid) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return NextChange::At(self.updated + hi);
            }
            lo = hi;
        }
        if w_inf == 0.0 {
            // Coasting: the angle converges monotonically to a fixed point.
            let rest = self.angle + w0 * self.params.tau;
            if self.discrete(rest) == self.state {
                return NextChange::Never;
            }
        }
        NextChange::Recheck(self.updated + horizon)
    }

    /// Integrates `dt` ticks at the present voltage, returning every encoder
    /// edge with its tick.
    pub fn integrate(&mut self, dt: u64) -> Vec<EncoderEvent> {
        let end = self.updated + dt;
        let mut events = Vec::new();
        let mut push = |at: Tick, delta: i64| {
            if let Some(direction) = Polarity::of_i64(delta) {
                events.extend((0..delta.abs()).map(|_| EncoderEvent { at, direction }));
            }
        };
        while self.updated < end {
            match self.next_transition(end - self.updated) {
                NextChange::At(t) if t <= end => {
                    let tr = self.advance_to(t);
                    push(t, tr.encoder_delta);
                }
                _ => break,
            }
        }
        let tr = self.advance_to(end);
        push(end, tr.encoder_delta);
        events
    }
}

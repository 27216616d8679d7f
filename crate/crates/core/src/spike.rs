//! Rate-coded spike building blocks: PFM generators, phase-accumulator rate
//! dividers, saturating spike integrators, windowed rate differentiators and
//! the Hold&Fire stream merger.
//!
//! Each block exists twice: as an incremental state machine driven by the
//! simulator's event loop, and as a batch function over a finished spike
//! stream. The batch functions are thin loops over the state machines, so
//! both paths share one implementation.

use std::fmt;
use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::clock::{Tick, CLOCK_HZ};

/// Shift of the fixed-point gain words: `g = k / 2^15`.
pub const GAIN_SHIFT: u32 = 15;
pub const GAIN_ONE: u16 = 1 << GAIN_SHIFT;

pub const DEFAULT_RATE_MAX: f64 = 500_000.0;
pub const DEFAULT_ACC_MAX: i32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn sign(self) -> i32 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// `None` for zero.
    pub fn of(value: f64) -> Option<Polarity> {
        if value > 0.0 {
            Some(Polarity::Positive)
        } else if value < 0.0 {
            Some(Polarity::Negative)
        } else {
            None
        }
    }

    pub fn of_i64(value: i64) -> Option<Polarity> {
        Polarity::of(value as f64)
    }

    pub fn flip(self) -> Polarity {
        match self {
            Polarity::Positive => Polarity::Negative,
            Polarity::Negative => Polarity::Positive,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "+1",
            Polarity::Negative => "-1",
        })
    }
}

/// Spike channel identifier.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Channel(pub u16);

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ch{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeEvent {
    pub at: Tick,
    pub polarity: Polarity,
    pub channel: Channel,
}

impl SpikeEvent {
    pub fn new(at: Tick, polarity: Polarity, channel: Channel) -> Self {
        Self {
            at,
            polarity,
            channel,
        }
    }
}

/// Signed spike rate in spikes per second. The sign selects direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateCommand {
    pub rate: f64,
    pub channel: Channel,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SpikeError {
    #[error("rate {rate} spikes/s exceeds the ceiling of {max} spikes/s")]
    RateOverflow { rate: f64, max: f64 },
    #[error("rate must be finite")]
    NonFiniteRate,
    #[error("empty generation window")]
    EmptyWindow,
    #[error("differentiator window must be at least one tick")]
    ZeroWindow,
}

/// Net signed count of a stream.
pub fn net_count(spikes: &[SpikeEvent]) -> i64 {
    spikes.iter().map(|s| i64::from(s.polarity.sign())).sum()
}

/// Signed integrate-and-fire pulse-frequency modulator.
///
/// The phase accumulates `rate × elapsed` spikes. A positive spike fires when
/// it reaches +1 and a negative one at -1; firing subtracts the spike so the
/// remainder carries over. Over any interval the net emitted count therefore
/// tracks the integral of the commanded rate to within one spike. At a
/// constant rate whose period is a whole number of ticks the spikes are
/// exactly `50e6 / |rate|` ticks apart; otherwise the gaps alternate between
/// the two neighbouring integers.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmGenerator {
    rate: f64,
    phase: f64,
    updated: Tick,
    next: Option<Tick>,
    generation: u64,
}

impl PfmGenerator {
    pub fn new(start: Tick) -> Self {
        Self {
            rate: 0.0,
            phase: 0.0,
            updated: start,
            next: None,
            generation: 0,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn next_spike(&self) -> Option<Tick> {
        self.next
    }

    /// Bumped every time `next_spike` changes, so stale wake-ups can be told
    /// apart from the live one.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Integrates every tick before `now`. Ticks already integrated by a
    /// fire in the current tick are not counted twice.
    fn accumulate(&mut self, now: Tick) {
        if now <= self.updated {
            return;
        }
        if self.rate != 0.0 {
            self.phase += self.rate * (now - self.updated) as f64 / CLOCK_HZ as f64;
        }
        self.updated = now;
    }

    /// First tick whose own increment carries the phase to the threshold.
    fn compute_next(&self) -> Option<Tick> {
        if self.rate == 0.0 {
            return None;
        }
        let remaining = if self.rate > 0.0 {
            1.0 - self.phase
        } else {
            1.0 + self.phase
        };
        let ticks = (remaining * CLOCK_HZ as f64 / self.rate.abs()).ceil().max(1.0) as u64;
        Some(self.updated + (ticks - 1))
    }

    fn set_next(&mut self, next: Option<Tick>) -> bool {
        if next == self.next {
            return false;
        }
        self.next = next;
        self.generation += 1;
        true
    }

    /// Changes the rate at `now`, keeping the accumulated phase. Returns
    /// whether the next spike moved.
    pub fn set_rate(&mut self, now: Tick, rate: f64) -> bool {
        debug_assert!(rate.is_finite());
        self.accumulate(now);
        if rate == self.rate {
            return false;
        }
        self.rate = rate;
        let next = self.compute_next();
        self.set_next(next)
    }

    /// Emits the spike due at `now`.
    pub fn fire(&mut self, now: Tick) -> Polarity {
        self.accumulate(now + 1);
        let polarity = if self.rate >= 0.0 {
            Polarity::Positive
        } else {
            Polarity::Negative
        };
        self.phase = (self.phase - f64::from(polarity.sign())).clamp(-1.0, 1.0);
        let next = self.compute_next();
        self.next = next;
        self.generation += 1;
        polarity
    }

    /// Zero rate and zero phase.
    pub fn reset(&mut self, now: Tick) {
        self.rate = 0.0;
        self.phase = 0.0;
        self.updated = now;
        self.set_next(None);
    }
}

/// Spikes of a constant-rate PFM generator over the half-open `window`.
pub fn pfm_generate(
    cmd: RateCommand,
    window: Range<Tick>,
    rate_max: f64,
) -> Result<Vec<SpikeEvent>, SpikeError> {
    if !cmd.rate.is_finite() {
        return Err(SpikeError::NonFiniteRate);
    }
    if cmd.rate.abs() > rate_max {
        return Err(SpikeError::RateOverflow {
            rate: cmd.rate,
            max: rate_max,
        });
    }
    if window.start >= window.end {
        return Err(SpikeError::EmptyWindow);
    }
    let mut generator = PfmGenerator::new(window.start);
    generator.set_rate(window.start, cmd.rate);
    let mut out = vec![];
    while let Some(at) = generator.next_spike() {
        if at >= window.end {
            break;
        }
        let polarity = generator.fire(at);
        out.push(SpikeEvent::new(at, polarity, cmd.channel));
    }
    Ok(out)
}

/// Fixed-point gain word `k`, interpreted as `k / 2^15`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DividerConfig {
    pub k: u16,
}

impl DividerConfig {
    pub fn new(k: u16) -> Self {
        Self { k }
    }

    pub fn gain(self) -> f64 {
        gain_of(self.k)
    }
}

pub fn gain_of(word: u16) -> f64 {
    f64::from(word) / f64::from(GAIN_ONE)
}

/// Phase-accumulator rate divider. Each input adds `±k` to a signed
/// accumulator; every whole `2^15` crossed emits one spike of the input's
/// polarity. Since `k < 2^16`, one input yields at most two outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RateDivider {
    k: u16,
    acc: i32,
}

impl RateDivider {
    pub fn new(cfg: DividerConfig) -> Self {
        Self { k: cfg.k, acc: 0 }
    }

    pub fn set_gain(&mut self, cfg: DividerConfig) {
        self.k = cfg.k;
    }

    pub fn gain_word(&self) -> u16 {
        self.k
    }

    pub fn reset(&mut self) {
        self.acc = 0;
    }

    /// Number of output spikes (all of the input's polarity).
    pub fn feed(&mut self, polarity: Polarity) -> u32 {
        const ONE: i32 = GAIN_ONE as i32;
        self.acc += polarity.sign() * i32::from(self.k);
        let mut emitted = 0;
        while self.acc >= ONE {
            self.acc -= ONE;
            emitted += 1;
        }
        while self.acc <= -ONE {
            self.acc += ONE;
            emitted += 1;
        }
        emitted
    }
}

/// Output spikes are stamped with the tick of the input that produced them.
pub fn rate_divide(input: &[SpikeEvent], cfg: DividerConfig) -> Vec<SpikeEvent> {
    let mut divider = RateDivider::new(cfg);
    let mut out = vec![];
    for spike in input {
        for _ in 0..divider.feed(spike.polarity) {
            out.push(*spike);
        }
    }
    out
}

/// Saturating signed spike counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpikeIntegrator {
    value: i32,
    limit: i32,
}

impl Default for SpikeIntegrator {
    fn default() -> Self {
        Self::new(DEFAULT_ACC_MAX)
    }
}

impl SpikeIntegrator {
    pub fn new(acc_max: i32) -> Self {
        Self {
            value: 0,
            limit: acc_max.max(0),
        }
    }

    pub fn value(&self) -> i32 {
        self.value
    }

    pub fn limit(&self) -> i32 {
        self.limit
    }

    pub fn feed(&mut self, polarity: Polarity) {
        self.value = (self.value + polarity.sign()).clamp(-self.limit, self.limit);
    }

    pub fn clear(&mut self) {
        self.value = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntegratorState {
    pub accumulator: i32,
}

pub fn spike_integrate(input: &[SpikeEvent], acc_max: i32) -> IntegratorState {
    let mut integrator = SpikeIntegrator::new(acc_max);
    for spike in input {
        integrator.feed(spike.polarity);
    }
    IntegratorState {
        accumulator: integrator.value(),
    }
}

/// Two-window rate difference. At each boundary the output is
/// `(count_this_window - count_prev_window) / window_seconds`, where counts
/// are net signed spike counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateDifferentiator {
    window: u64,
    current: i64,
    previous: i64,
}

impl RateDifferentiator {
    pub fn new(window_ticks: u64) -> Result<Self, SpikeError> {
        if window_ticks == 0 {
            return Err(SpikeError::ZeroWindow);
        }
        Ok(Self {
            window: window_ticks,
            current: 0,
            previous: 0,
        })
    }

    pub fn window_ticks(&self) -> u64 {
        self.window
    }

    pub fn count(&mut self, polarity: Polarity) {
        self.current += i64::from(polarity.sign());
    }

    pub fn close_window(&mut self) -> f64 {
        let rate = (self.current - self.previous) as f64 / Tick(self.window).as_secs();
        self.previous = self.current;
        self.current = 0;
        rate
    }

    pub fn reset(&mut self) {
        self.current = 0;
        self.previous = 0;
    }
}

/// One output of [`rate_differentiate`], stamped at its window boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateSample {
    pub at: Tick,
    pub rate: f64,
}

/// Differentiates `input` over consecutive windows of `window` ticks starting
/// at `span.start`. One sample per boundary inside `span`; a spike exactly on
/// a boundary belongs to the window that starts there.
pub fn rate_differentiate(
    input: &[SpikeEvent],
    window: u64,
    span: Range<Tick>,
) -> Result<Vec<RateSample>, SpikeError> {
    let mut diff = RateDifferentiator::new(window)?;
    let mut out = vec![];
    let mut boundary = span.start + window;
    let mut spikes = input.iter().filter(|s| s.at >= span.start).peekable();
    while boundary <= span.end {
        while let Some(spike) = spikes.next_if(|s| s.at < boundary) {
            diff.count(spike.polarity);
        }
        out.push(RateSample {
            at: boundary,
            rate: diff.close_window(),
        });
        boundary = boundary + window;
    }
    Ok(out)
}

/// Hold&Fire merger. Inputs are netted into a signed hold register; each
/// tick fires at most one spike of the held sign. Opposite same-tick inputs
/// cancel. Equal ones leave on consecutive ticks. The net signed count out
/// equals the net count in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HoldAndFire {
    held: i64,
    last_fire: Option<Tick>,
}

impl HoldAndFire {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn held(&self) -> i64 {
        self.held
    }

    pub fn push(&mut self, polarity: Polarity) {
        self.held += i64::from(polarity.sign());
    }

    /// The tick the next fire should be evaluated at, given that inputs for
    /// `now` may still be arriving.
    pub fn next_fire(&self, now: Tick) -> Option<Tick> {
        if self.held == 0 {
            None
        } else if self.last_fire == Some(now) {
            Some(now + 1)
        } else {
            Some(now)
        }
    }

    pub fn fire(&mut self, now: Tick) -> Option<Polarity> {
        if self.last_fire == Some(now) {
            return None;
        }
        let polarity = Polarity::of_i64(self.held)?;
        self.held -= i64::from(polarity.sign());
        self.last_fire = Some(now);
        Some(polarity)
    }

    pub fn clear(&mut self) {
        self.held = 0;
    }
}

/// Merges any number of streams through one [`HoldAndFire`] block.
pub fn hold_and_fire(inputs: &[Vec<SpikeEvent>], channel: Channel) -> Vec<SpikeEvent> {
    let mut all: Vec<(Tick, Polarity)> = inputs
        .iter()
        .flatten()
        .map(|s| (s.at, s.polarity))
        .collect();
    all.sort_by_key(|(at, _)| *at);

    let mut merger = HoldAndFire::new();
    let mut out = vec![];
    let mut idx = 0;
    let Some(&(mut now, _)) = all.first() else {
        return out;
    };
    loop {
        while let Some(&(at, polarity)) = all.get(idx) {
            if at != now {
                break;
            }
            merger.push(polarity);
            idx += 1;
        }
        if let Some(polarity) = merger.fire(now) {
            out.push(SpikeEvent::new(now, polarity, channel));
        }
        now = match (merger.held(), all.get(idx)) {
            (0, Some(&(at, _))) => at,
            (0, None) => break,
            _ => now + 1,
        };
    }
    out
}

/// Text spike dump, one `tick,channel,polarity` record per line.
pub fn write_spike_dump<W: Write>(mut w: W, spikes: &[SpikeEvent]) -> io::Result<()> {
    for spike in spikes {
        writeln!(w, "{},{},{}", spike.at, spike.channel.0, spike.polarity.sign())?;
    }
    Ok(())
}

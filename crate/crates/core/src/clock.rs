//! Deterministic discrete-event scheduler on a 50 MHz logical time base.
//!
//! Every module of the simulator runs on the derived 50 MHz controller clock.
//! Instead of polling each 20 ns cycle, components compute the tick of their
//! next state change and post an event for it. Events are ordered by
//! `(due, sequence)`, where `sequence` is a per-scheduler insertion counter, so
//! equal-tick events run in FIFO order and a run is a pure function of the
//! calls made against the scheduler.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::Write;
use std::ops::{Add, Sub};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Logical clock frequency in Hz.
pub const CLOCK_HZ: u64 = 50_000_000;

/// Length of one tick in seconds.
pub const TICK_SECONDS: f64 = 20e-9;

/// A count of 50 MHz clock cycles since the start of a run.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct Tick(pub u64);

impl Tick {
    pub const ZERO: Tick = Tick(0);

    /// Nearest tick to `secs` seconds. Negative inputs map to zero.
    pub fn from_secs(secs: f64) -> Tick {
        Tick((secs * CLOCK_HZ as f64).round().max(0.0) as u64)
    }

    pub const fn from_millis(ms: u64) -> Tick {
        Tick(ms * (CLOCK_HZ / 1000))
    }

    pub const fn from_micros(us: u64) -> Tick {
        Tick(us * (CLOCK_HZ / 1_000_000))
    }

    pub fn as_secs(self) -> f64 {
        self.0 as f64 * TICK_SECONDS
    }

    pub fn as_millis_f64(self) -> f64 {
        self.as_secs() * 1e3
    }

    pub fn saturating_sub(self, other: Tick) -> u64 {
        self.0.saturating_sub(other.0)
    }
}

impl Add<u64> for Tick {
    type Output = Tick;

    fn add(self, rhs: u64) -> Tick {
        Tick(self.0 + rhs)
    }
}

impl Sub for Tick {
    type Output = u64;

    fn sub(self, rhs: Tick) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for Tick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Unique identifier of a scheduled event. Equal to its sequence number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClockError {
    #[error("cannot schedule at tick {due}: current tick is {now}")]
    SchedulingInPast { due: Tick, now: Tick },
    #[error("cannot run until tick {until}: current tick is {now}")]
    RunInPast { until: Tick, now: Tick },
}

/// An event popped from the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledEvent<T, A> {
    pub due: Tick,
    pub sequence: u64,
    pub target: T,
    pub action: A,
}

impl<T, A> ScheduledEvent<T, A> {
    pub fn id(&self) -> EventId {
        EventId(self.sequence)
    }
}

struct Entry<T, A>(ScheduledEvent<T, A>);

impl<T, A> Entry<T, A> {
    fn key(&self) -> (Tick, u64) {
        (self.0.due, self.0.sequence)
    }
}

impl<T, A> PartialEq for Entry<T, A> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<T, A> Eq for Entry<T, A> {}

impl<T, A> PartialOrd for Entry<T, A> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<T, A> Ord for Entry<T, A> {
    // Reversed: BinaryHeap is a max-heap and we want the earliest key on top.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

/// Counters reported by [`Scheduler::run_until`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SimulationStats {
    pub events_processed: u64,
    pub final_tick: Tick,
    pub wall_time: Duration,
}

impl SimulationStats {
    pub fn merge(&mut self, other: SimulationStats) {
        self.events_processed += other.events_processed;
        self.final_tick = other.final_tick;
        self.wall_time += other.wall_time;
    }
}

/// Receives one record per executed event, in execution order.
pub trait TraceSink: Send {
    fn record(&mut self, tick: Tick, sequence: u64, target: &dyn fmt::Display, action: &dyn fmt::Display);
}

fn trace_line(
    tick: Tick,
    sequence: u64,
    target: &dyn fmt::Display,
    action: &dyn fmt::Display,
) -> String {
    format!("{tick}\t{sequence}\t{target}\t{action}\n")
}

/// Keeps every trace line in memory. Test-sized runs only.
#[derive(Debug, Default, Clone)]
pub struct VecTrace {
    pub lines: Vec<String>,
}

impl TraceSink for VecTrace {
    fn record(&mut self, tick: Tick, sequence: u64, target: &dyn fmt::Display, action: &dyn fmt::Display) {
        let mut line = trace_line(tick, sequence, target, action);
        line.pop();
        self.lines.push(line);
    }
}

/// SHA-256 over the text trace, for comparing long runs without storing them.
#[derive(Clone, Default)]
pub struct DigestTrace {
    hasher: Sha256,
    lines: u64,
}

impl DigestTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn lines(&self) -> u64 {
        self.lines
    }

    pub fn hex_digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }
}

impl TraceSink for DigestTrace {
    fn record(&mut self, tick: Tick, sequence: u64, target: &dyn fmt::Display, action: &dyn fmt::Display) {
        self.hasher.update(trace_line(tick, sequence, target, action).as_bytes());
        self.lines += 1;
    }
}

/// Streams the text trace to any writer. Write errors are latched and the
/// rest of the trace is discarded.
pub struct WriterTrace<W: Write + Send> {
    writer: W,
    error: Option<std::io::Error>,
}

impl<W: Write + Send> WriterTrace<W> {
    pub fn new(writer: W) -> Self {
        Self { writer, error: None }
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        if let Some(err) = self.error.take() {
            return Err(err);
        }
        self.writer.flush()?;
        Ok(self.writer)
    }
}

impl<W: Write + Send> TraceSink for WriterTrace<W> {
    fn record(&mut self, tick: Tick, sequence: u64, target: &dyn fmt::Display, action: &dyn fmt::Display) {
        if self.error.is_none() {
            let line = trace_line(tick, sequence, target, action);
            if let Err(err) = self.writer.write_all(line.as_bytes()) {
                self.error = Some(err);
            }
        }
    }
}

/// Lets a caller keep a handle on a sink after handing it to a scheduler.
impl<S: TraceSink> TraceSink for std::sync::Arc<std::sync::Mutex<S>> {
    fn record(&mut self, tick: Tick, sequence: u64, target: &dyn fmt::Display, action: &dyn fmt::Display) {
        if let Ok(mut sink) = self.lock() {
            sink.record(tick, sequence, target, action);
        }
    }
}

/// Priority queue of future events plus the current logical time.
pub struct Scheduler<T, A> {
    now: Tick,
    next_sequence: u64,
    executed: u64,
    queue: BinaryHeap<Entry<T, A>>,
    trace: Option<Box<dyn TraceSink>>,
}

impl<T, A> Default for Scheduler<T, A> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T, A> Scheduler<T, A> {
    pub fn new() -> Self {
        Self {
            now: Tick::ZERO,
            next_sequence: 0,
            executed: 0,
            queue: BinaryHeap::new(),
            trace: None,
        }
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Total events ever scheduled.
    pub fn scheduled(&self) -> u64 {
        self.next_sequence
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn peek_due(&self) -> Option<Tick> {
        self.queue.peek().map(|e| e.0.due)
    }

    pub fn set_trace(&mut self, sink: Option<Box<dyn TraceSink>>) -> Option<Box<dyn TraceSink>> {
        std::mem::replace(&mut self.trace, sink)
    }

    pub fn take_trace(&mut self) -> Option<Box<dyn TraceSink>> {
        self.trace.take()
    }

    pub fn schedule(&mut self, due: Tick, target: T, action: A) -> Result<EventId, ClockError> {
        if due < self.now {
            return Err(ClockError::SchedulingInPast { due, now: self.now });
        }
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.queue.push(Entry(ScheduledEvent {
            due,
            sequence,
            target,
            action,
        }));
        Ok(EventId(sequence))
    }

    /// Schedules `delay` ticks from now. Never fails.
    pub fn schedule_in(&mut self, delay: u64, target: T, action: A) -> EventId {
        let due = self.now + delay;
        self.schedule(due, target, action)
            .expect("a non-negative delay is never in the past")
    }
}

impl<T: fmt::Display, A: fmt::Display> Scheduler<T, A> {
    /// Pops the next event if it is due at or before `limit`, advancing the
    /// clock to its due tick.
    pub fn pop_due(&mut self, limit: Tick) -> Option<ScheduledEvent<T, A>> {
        if self.queue.peek()?.0.due > limit {
            return None;
        }
        let Entry(event) = self.queue.pop()?;
        self.now = event.due;
        self.executed += 1;
        if let Some(trace) = self.trace.as_mut() {
            trace.record(event.due, event.sequence, &event.target, &event.action);
        }
        Some(event)
    }

    /// Moves the clock forward to `t_end` without executing anything. Used
    /// after draining events with [`Scheduler::pop_due`].
    pub fn advance_to(&mut self, t_end: Tick) -> Result<(), ClockError> {
        if t_end < self.now {
            return Err(ClockError::RunInPast {
                until: t_end,
                now: self.now,
            });
        }
        debug_assert!(self.peek_due().is_none_or(|due| due > t_end));
        self.now = t_end;
        Ok(())
    }

    /// Executes every event due at or before `t_end` in `(due, sequence)`
    /// order. The handler may schedule further events through the scheduler
    /// it is handed.
    pub fn run_until<F>(&mut self, t_end: Tick, mut handler: F) -> Result<SimulationStats, ClockError>
    where
        F: FnMut(&mut Self, ScheduledEvent<T, A>),
    {
        if t_end < self.now {
            return Err(ClockError::RunInPast {
                until: t_end,
                now: self.now,
            });
        }
        let started = Instant::now();
        let before = self.executed;
        while let Some(event) = self.pop_due(t_end) {
            handler(self, event);
        }
        self.now = t_end;
        Ok(SimulationStats {
            events_processed: self.executed - before,
            final_tick: self.now,
            wall_time: started.elapsed(),
        })
    }
}

/// Cross-thread inbox. Senders live on other threads; the owner drains it
/// between events.
pub struct Mailbox<M> {
    rx: mpsc::Receiver<M>,
}

pub struct MailboxSender<M> {
    tx: mpsc::Sender<M>,
}

impl<M> Clone for MailboxSender<M> {
    fn clone(&self) -> Self {
        Self {
            tx: self.tx.clone(),
        }
    }
}

pub fn mailbox<M>() -> (MailboxSender<M>, Mailbox<M>) {
    let (tx, rx) = mpsc::channel();
    (MailboxSender { tx }, Mailbox { rx })
}

impl<M> MailboxSender<M> {
    /// Returns the message back if the mailbox owner is gone.
    pub fn post(&self, message: M) -> Result<(), M> {
        self.tx.send(message).map_err(|e| e.0)
    }
}

impl<M> Mailbox<M> {
    /// Everything posted so far, in posting order. Never blocks.
    pub fn drain(&self) -> Vec<M> {
        self.rx.try_iter().collect()
    }

    /// Blocks up to `timeout` for one message.
    pub fn wait(&self, timeout: Duration) -> Option<M> {
        self.rx.recv_timeout(timeout).ok()
    }
}

#[cfg(test)]
mod tests {
    use std::sync::{Arc, Mutex};

    use super::*;

    type Sched = Scheduler<&'static str, &'static str>;

    #[test]
    fn zero_delay_event_runs_this_tick() {
        let mut s = Sched::new();
        s.schedule(s.now(), "t", "a").unwrap();
        let mut seen = vec![];
        let stats = s.run_until(Tick::ZERO, |s, e| seen.push((s.now(), e.action))).unwrap();
        assert_eq!(seen, vec![(Tick::ZERO, "a")]);
        assert_eq!(stats.events_processed, 1);
    }

    #[test]
    fn equal_due_events_run_fifo() {
        let mut s = Sched::new();
        s.schedule(Tick(100), "t", "A").unwrap();
        s.schedule(Tick(100), "t", "B").unwrap();
        let mut order = vec![];
        s.run_until(Tick(100), |_, e| order.push(e.action)).unwrap();
        assert_eq!(order, vec!["A", "B"]);
    }

    #[test]
    fn scheduling_in_past_is_rejected() {
        let mut s = Sched::new();
        s.run_until(Tick(10), |_, _| {}).unwrap();
        assert_eq!(
            s.schedule(Tick(9), "t", "a"),
            Err(ClockError::SchedulingInPast {
                due: Tick(9),
                now: Tick(10)
            })
        );
    }

    #[test]
    fn empty_run_advances_to_one_second() {
        let mut s = Sched::new();
        let stats = s.run_until(Tick(50_000_000), |_, _| {}).unwrap();
        assert_eq!(s.now(), Tick(50_000_000));
        assert_eq!(stats.events_processed, 0);
        assert_eq!(s.now().as_secs(), 1.0);
    }

    #[test]
    fn thousand_events_are_all_processed() {
        let mut s = Sched::new();
        for i in 0..1000u64 {
            s.schedule(Tick(i * 7 + 1), "t", "x").unwrap();
        }
        let stats = s.run_until(Tick(1_000_000), |_, _| {}).unwrap();
        assert_eq!(stats.events_processed, 1000);
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn run_until_in_past_fails() {
        let mut s = Sched::new();
        s.run_until(Tick(5), |_, _| {}).unwrap();
        assert!(s.run_until(Tick(4), |_, _| {}).is_err());
    }

    #[test]
    fn handler_events_respect_order_and_conservation() {
        let mut s = Scheduler::<u8, u32>::new();
        s.schedule(Tick(0), 0, 0).unwrap();
        let mut ticks = vec![];
        s.run_until(Tick(500), |s, e| {
            ticks.push(e.due);
            if e.action < 20 {
                s.schedule_in(u64::from(e.action % 3) * 10, 0, e.action + 1);
                s.schedule_in(5, 1, 100 + e.action);
            }
        })
        .unwrap();
        assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(s.scheduled(), s.executed() + s.pending() as u64);
    }

    #[test]
    fn trace_format_is_tab_separated() {
        let sink = Arc::new(Mutex::new(VecTrace::default()));
        let mut s = Sched::new();
        s.set_trace(Some(Box::new(sink.clone())));
        s.schedule(Tick(3), "j1", "spike").unwrap();
        s.run_until(Tick(3), |_, _| {}).unwrap();
        assert_eq!(sink.lock().unwrap().lines, vec!["3\t0\tj1\tspike".to_string()]);
    }

    #[test]
    fn tick_conversions() {
        assert_eq!(Tick::from_millis(10), Tick(500_000));
        assert_eq!(Tick::from_secs(6.5e-3), Tick(325_000));
        assert_eq!(Tick::from_secs(40e-3), Tick(2_000_000));
        assert_eq!(Tick(1).as_secs(), 20e-9);
    }

    #[test]
    fn mailbox_drains_in_order() {
        let (tx, rx) = mailbox();
        tx.post(1).unwrap();
        tx.post(2).unwrap();
        assert_eq!(rx.drain(), vec![1, 2]);
        assert!(rx.drain().is_empty());
    }
}

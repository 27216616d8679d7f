//! Owns the simulator for the network service.
//!
//! Network handlers never touch the simulator directly. They post jobs to the
//! driver's mailbox; the driver runs them between 1 ms simulation steps, so
//! every mutation happens at a well-defined tick. After each step the driver
//! publishes a telemetry frame whenever a TELEMETRY_DIV period has elapsed.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use edspid_core::clock::{mailbox, Mailbox, MailboxSender};
use edspid_core::trajectory::TelemetrySampler;
use edspid_core::{JointId, SimError, Simulator, SpidGains, TelemetryRecord, Tick};
use serde::Serialize;
use tokio::sync::oneshot;

use crate::hub::TelemetryHub;

pub type Job = Box<dyn FnOnce(&mut Simulator) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("simulation driver has stopped")]
pub struct DriverGone;

/// Cloneable access to a running driver.
#[derive(Clone)]
pub struct SimHandle {
    sender: MailboxSender<Job>,
    tick: Arc<AtomicU64>,
}

impl SimHandle {
    /// Runs `f` on the simulator thread and waits for its result.
    pub async fn call<R, F>(&self, f: F) -> Result<R, DriverGone>
    where
        R: Send + 'static,
        F: FnOnce(&mut Simulator) -> R + Send + 'static,
    {
        let (tx, rx) = oneshot::channel();
        self.sender
            .post(Box::new(move |sim| {
                let _ = tx.send(f(sim));
            }))
            .map_err(|_| DriverGone)?;
        rx.await.map_err(|_| DriverGone)
    }

    /// Most recent tick the driver has reached.
    pub fn tick(&self) -> Tick {
        Tick(self.tick.load(Ordering::Relaxed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverConfig {
    /// Simulated ticks per step.
    pub step: u64,
    /// Simulated seconds per wall-clock second; 0 runs unthrottled.
    pub speed: f64,
}

impl Default for DriverConfig {
    fn default() -> Self {
        Self {
            step: Tick::from_millis(1).0,
            speed: 1.0,
        }
    }
}

/// Telemetry frame sent over the WebSocket.
#[derive(Debug, Serialize)]
pub struct TelemetryFrame<'a> {
    pub sim_time_s: f64,
    #[serde(flatten)]
    pub record: &'a TelemetryRecord,
    pub gains: Vec<SpidGains>,
}

pub struct SimDriver {
    sim: Simulator,
    inbox: Mailbox<Job>,
    hub: TelemetryHub,
    sampler: TelemetrySampler,
    next_sample: Tick,
    tick: Arc<AtomicU64>,
    cfg: DriverConfig,
}

impl SimDriver {
    pub fn new(sim: Simulator, hub: TelemetryHub, cfg: DriverConfig) -> (Self, SimHandle) {
        let (sender, inbox) = mailbox();
        let tick = Arc::new(AtomicU64::new(sim.now().0));
        let sampler = TelemetrySampler::new(&sim);
        let next_sample = sim.now();
        let handle = SimHandle {
            sender,
            tick: tick.clone(),
        };
        let driver = Self {
            sim,
            inbox,
            hub,
            sampler,
            next_sample,
            tick,
            cfg,
        };
        (driver, handle)
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    fn run_jobs(&mut self, jobs: Vec<Job>) {
        for job in jobs {
            job(&mut self.sim);
        }
    }

    /// Runs queued jobs, advances one step and publishes telemetry if due.
    pub fn step(&mut self) -> Result<(), SimError> {
        let jobs = self.inbox.drain();
        self.run_jobs(jobs);
        self.sim.run_for(self.cfg.step.max(1))?;
        self.tick.store(self.sim.now().0, Ordering::Relaxed);
        if self.sim.now() >= self.next_sample {
            self.publish();
            let period = self.sim.bank().telemetry_period_ms();
            self.next_sample = self.sim.now() + Tick::from_millis(period).0;
        }
        Ok(())
    }

    fn publish(&mut self) {
        let record = self
            .sampler
            .sample(&self.sim, self.sim.now().0 / Tick::from_millis(1).0);
        let frame = TelemetryFrame {
            sim_time_s: self.sim.now().as_secs(),
            record: &record,
            gains: JointId::all().map(|j| self.sim.controller(j).gains()).collect(),
        };
        match serde_json::to_string(&frame) {
            Ok(text) => {
                self.hub.publish(Arc::from(text));
            }
            Err(e) => tracing::warn!("telemetry frame not serializable: {e}"),
        }
    }

    /// Steps until `stop` is set, pacing simulated time against the wall
    /// clock. Jobs that arrive while waiting run immediately.
    pub fn run(mut self, stop: &AtomicBool) -> Result<Simulator, SimError> {
        let wall_start = Instant::now();
        let sim_start = self.sim.now();
        while !stop.load(Ordering::Relaxed) {
            self.step()?;
            if self.cfg.speed <= 0.0 {
                continue;
            }
            let sim_elapsed = (self.sim.now() - sim_start) as f64 / edspid_core::CLOCK_HZ as f64;
            let target = wall_start + Duration::from_secs_f64(sim_elapsed / self.cfg.speed);
            loop {
                let now = Instant::now();
                if now >= target || stop.load(Ordering::Relaxed) {
                    break;
                }
                if let Some(job) = self.inbox.wait(target - now) {
                    self.run_jobs(vec![job]);
                }
            }
        }
        Ok(self.sim)
    }

    pub fn spawn(self) -> DriverThread {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let join = std::thread::Builder::new()
            .name("edspid-sim".into())
            .spawn(move || self.run(&flag))
            .expect("spawning the simulation thread");
        DriverThread { stop, join }
    }
}

pub struct DriverThread {
    stop: Arc<AtomicBool>,
    join: JoinHandle<Result<Simulator, SimError>>,
}

impl DriverThread {
    pub fn stop(self) -> Result<Simulator, SimError> {
        self.stop.store(true, Ordering::Relaxed);
        self.join.join().expect("simulation thread panicked")
    }
}

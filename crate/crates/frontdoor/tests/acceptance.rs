//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

#[path = "support/oracle.rs"]
mod oracle;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use edspid_core::joint_map::JointMap;
use edspid_core::plant::drive_profile;
use edspid_core::regbank::{self, RegisterError, RegisterOp, RegisterRole, REGISTER_COUNT};
use edspid_core::spike::{
    gain_of, hold_and_fire, net_count, pfm_generate, rate_divide, spike_integrate, Channel,
    DividerConfig, Polarity, RateCommand, SpikeEvent, DEFAULT_RATE_MAX,
};
use edspid_core::{JointId, SimConfig, SimError, Simulator, SpidGains, Tick, CLOCK_HZ, OFFSET};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRng, TestRunner};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_edspid")
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn j(n: u8) -> JointId {
    JointId::new(n).unwrap()
}

// Latency -------------------------------------------------------------------

fn latency() -> Outcome {
    let started = Instant::now();
    let out = Command::new(bin())
        .args(["bench", "latency", "--n", "100", "--json"])
        .output()
        .map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    check(out.status.success(), || {
        format!("exit {:?}: {}", out.status, String::from_utf8_lossy(&out.stderr))
    })?;
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
    let axi = report["fast"]["mean_s"].as_f64().unwrap_or(f64::NAN);
    let spi = report["slow"]["mean_s"].as_f64().unwrap_or(f64::NAN);
    let improvement = report["improvement_percent"].as_f64().unwrap_or(f64::NAN);
    check((axi - 6.5e-3).abs() < 1e-9, || format!("AXI mean {axi}"))?;
    check((spi - 40e-3).abs() < 1e-9, || format!("SPI mean {spi}"))?;
    check((improvement - 515.0).abs() <= 1.0, || format!("improvement {improvement}%"))?;
    check(elapsed < Duration::from_secs(5), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "AXI {:.3} ms, SPI {:.3} ms, improvement {improvement:.2}%, {:.0} ms wall",
        axi * 1e3,
        spi * 1e3,
        elapsed.as_secs_f64() * 1e3
    ))
}

// Conversion tables ---------------------------------------------------------

/// Per joint: SI/degree, degree/count, SI/count.
const TABLE_I: [(f64, f64, f64); 4] = [
    (-3.1e-1, 7.98e-3, 2.47e-2),
    (-1.1e-1, 7.67e-3, 6.77e-2),
    (-2.9e-1, 7.05e-3, 2.39e-2),
    (-5.7e-2, 1.24e-2, 2.18e-1),
];

const TABLE_II: [f64; 4] = [487.0, 750.0, 383.0, 1585.0];

fn sample_counts() -> Vec<u16> {
    // Both ends, the offset, and an even spread between.
    let mut p: Vec<u16> = vec![0, 1, 32_767, 32_768, 32_769, 65_534, 65_535];
    p.extend((1..=13).map(|i| (i * 65_535 / 14) as u16));
    p
}

fn table_i() -> Outcome {
    let map = JointMap::default();
    let ps = sample_counts();
    let mut checked = 0;
    for (i, &(si_deg, deg_count, si_count)) in TABLE_I.iter().enumerate() {
        let joint = j(i as u8 + 1);
        for &p in &ps {
            let offset = f64::from(p) - 32_768.0;
            let deg = map.counts_to_degrees(joint, p).map_err(|e| e.to_string())?;
            check(deg == deg_count * offset, || format!("{joint} P={p}: {deg} degrees"))?;
            let si = map.degrees_to_si(joint, deg).map_err(|e| e.to_string())?;
            check(si == si_deg * deg, || format!("{joint} {deg} degrees: {si} SI"))?;
            let si = map.counts_to_si(joint, p).map_err(|e| e.to_string())?;
            check(si == si_count * offset, || format!("{joint} P={p}: {si} SI"))?;
            checked += 3;
        }
    }
    check(ps.len() == 20, || "sample size".into())?;
    Ok(format!("{checked} conversions exact over 20 P values per joint"))
}

fn table_ii() -> Outcome {
    let map = JointMap::default();
    let mut checked = 0;
    for (i, &b) in TABLE_II.iter().enumerate() {
        let joint = j(i as u8 + 1);
        for sign in [1.0, -1.0] {
            let bound = sign * b;
            for (input, expect, clamped) in [
                (bound, bound, false),
                (bound - sign, bound - sign, false),
                (bound + sign, bound, true),
                (2.0 * bound, bound, true),
            ] {
                let c = map.clamp_reference(joint, input).map_err(|e| e.to_string())?;
                check(c.value == expect && c.clamped == clamped, || {
                    format!("{joint} {input} SI -> {} (clamped {})", c.value, c.clamped)
                })?;
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} clamp cases"))
}

// Closed loop ---------------------------------------------------------------

fn closed_loop() -> Outcome {
    let started = Instant::now();
    let cfg = SimConfig::default();
    let j1 = j(1);
    let target = OFFSET + 500;
    let mut sim = Simulator::new(cfg.clone()).map_err(|e| e.to_string())?;
    sim.home_all().map_err(|e| e.to_string())?;
    check(sim.now() == Tick::ZERO, || "homing moved the clock".into())?;
    sim.enable_probe(j1);
    sim.set_reference(j1, target).map_err(|e| e.to_string())?;
    let end = Tick::from_millis(3000);
    sim.run_until(end).map_err(|e| e.to_string())?;
    let probe = sim.take_probe(j1).unwrap();

    let w = cfg.controller.derivative_window;
    let windows = (end.0 / w) as usize;
    let params = cfg.motors[0];
    let spike = drive_profile(&params, &probe.motor, Tick::ZERO, end, w);
    let changes: Vec<(u64, u16)> = probe.counter.iter().map(|&(t, c)| (t.0, c)).collect();
    let stats = oracle::window_stats(target, OFFSET, &changes, w, windows, CLOCK_HZ as f64);
    let g = cfg.gains[0];
    let pid = oracle::PidOracle {
        kp: gain_of(g.kp),
        ki: gain_of(g.ki),
        kd: gain_of(g.kd),
        error_gain: cfg.controller.error_gain,
        integral_gain: cfg.controller.integral_gain,
        pulse_width: params.pulse_width,
        v_supply: params.v_supply,
    };
    let reference = pid.drive(&stats);
    let tolerance = 0.05 * params.v_supply;
    let mut worst = (0, 0.0f64);
    for (k, (a, b)) in spike.iter().zip(&reference).enumerate().skip(1) {
        let d = (a - b).abs();
        if d > worst.1 {
            worst = (k, d);
        }
    }
    check(worst.1 <= tolerance, || {
        format!("window {} deviates {:.3} V (limit {tolerance} V)", worst.0, worst.1)
    })?;
    let settled_at = probe
        .counter
        .iter()
        .rev()
        .find(|&&(_, c)| (i32::from(target) - i32::from(c)).abs() > 5)
        .map_or(0.0, |&(t, _)| t.as_secs());
    check(settled_at <= 2.0, || format!("|e| > 5 until {settled_at:.3} s"))?;
    let final_error = sim.controller(j1).error();
    check(final_error.abs() <= 5, || format!("final error {final_error}"))?;
    check(sim.limit_trips().is_empty(), || "limit switch tripped".into())?;
    let elapsed = started.elapsed();
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max deviation {:.3} V (window {}), settled by {settled_at:.3} s, {:.0} ms wall",
        worst.1,
        worst.0,
        elapsed.as_secs_f64() * 1e3
    ))
}

// Spike blocks --------------------------------------------------------------

fn runner() -> TestRunner {
    let config = Config {
        cases: 10_000,
        failure_persistence: None,
        ..Config::default()
    };
    let rng = TestRng::deterministic_rng(config.rng_algorithm);
    TestRunner::new_with_rng(config, rng)
}

fn window_counts(spikes: &[SpikeEvent], window: u64, n: u64) -> Vec<i64> {
    let mut counts = vec![0; n as usize];
    for s in spikes {
        let k = s.at.0 / window;
        if k < n {
            counts[k as usize] += i64::from(s.polarity.sign());
        }
    }
    counts
}

fn pfm_fidelity() -> Result<(), String> {
    runner()
        .run(
            &(-DEFAULT_RATE_MAX..DEFAULT_RATE_MAX, 1u64..=10, 100u64..=10_000),
            |(rate, n, span_us)| {
                let window = Tick::from_micros(span_us).0 / n;
                let end = Tick(window * n);
                let cmd = RateCommand { rate, channel: Channel(0) };
                let spikes = pfm_generate(cmd, Tick::ZERO..end, DEFAULT_RATE_MAX).unwrap();
                let expected = rate * window as f64 / CLOCK_HZ as f64;
                for (k, c) in window_counts(&spikes, window, n).into_iter().enumerate() {
                    prop_assert!(
                        (c as f64 - expected).abs() <= 1.0,
                        "window {}: {} spikes, expected {}",
                        k,
                        c,
                        expected
                    );
                }
                Ok(())
            },
        )
        .map_err(|e| format!("PFM rate fidelity: {e}"))
}

fn divider_gain() -> Result<(), String> {
    runner()
        .run(
            &(any::<u16>(), 1_000.0..DEFAULT_RATE_MAX, any::<bool>(), 1u64..=10, 100u64..=10_000),
            |(k, rate, negative, n, span_us)| {
                let window = Tick::from_micros(span_us).0 / n;
                let end = Tick(window * n);
                let rate = if negative { -rate } else { rate };
                let cmd = RateCommand { rate, channel: Channel(0) };
                let input = pfm_generate(cmd, Tick::ZERO..end, DEFAULT_RATE_MAX).unwrap();
                let output = rate_divide(&input, DividerConfig::new(k));
                let ins = window_counts(&input, window, n);
                let outs = window_counts(&output, window, n);
                let gain = f64::from(k) / 32_768.0;
                for (w, (i, o)) in ins.iter().zip(&outs).enumerate() {
                    prop_assert!(
                        (*o as f64 - gain * *i as f64).abs() <= 1.0,
                        "window {}: {} in, {} out, gain {}",
                        w,
                        i,
                        o,
                        gain
                    );
                }
                prop_assert!(output.iter().all(|s| s.polarity == Polarity::of(rate).unwrap()));
                Ok(())
            },
        )
        .map_err(|e| format!("divider gain law: {e}"))
}

fn spike_stream() -> impl Strategy<Value = Vec<SpikeEvent>> {
    prop::collection::vec((0u64..2_000, any::<bool>()), 0..200).prop_map(|mut v| {
        v.sort_by_key(|s| s.0);
        v.into_iter()
            .map(|(t, pos)| {
                let p = if pos { Polarity::Positive } else { Polarity::Negative };
                SpikeEvent::new(Tick(t), p, Channel(0))
            })
            .collect()
    })
}

fn merge_conservation() -> Result<(), String> {
    runner()
        .run(&prop::collection::vec(spike_stream(), 1..=4), |inputs| {
            let out = hold_and_fire(&inputs, Channel(9));
            let expected: i64 = inputs.iter().map(|s| net_count(s)).sum();
            prop_assert_eq!(net_count(&out), expected);
            prop_assert!(out.windows(2).all(|w| w[0].at < w[1].at), "two fires in one tick");
            Ok(())
        })
        .map_err(|e| format!("Hold&Fire conservation: {e}"))
}

fn integrator_saturation() -> Result<(), String> {
    runner()
        .run(
            &(1i32..=2_000, prop::collection::vec(any::<bool>(), 0..3_000)),
            |(acc_max, seq)| {
                let spikes: Vec<SpikeEvent> = seq
                    .iter()
                    .enumerate()
                    .map(|(i, &pos)| {
                        let p = if pos { Polarity::Positive } else { Polarity::Negative };
                        SpikeEvent::new(Tick(i as u64), p, Channel(0))
                    })
                    .collect();
                let expected = seq.iter().fold(0i32, |acc, &pos| {
                    (acc + if pos { 1 } else { -1 }).clamp(-acc_max, acc_max)
                });
                prop_assert_eq!(spike_integrate(&spikes, acc_max).accumulator, expected);
                Ok(())
            },
        )
        .map_err(|e| format!("integrator saturation: {e}"))
}

fn spike_properties() -> Outcome {
    let started = Instant::now();
    pfm_fidelity()?;
    divider_gain()?;
    merge_conservation()?;
    integrator_saturation()?;
    Ok(format!(
        "4 properties x 10000 cases, {:.1} s wall",
        started.elapsed().as_secs_f64()
    ))
}

// Determinism ---------------------------------------------------------------

fn trajectory_json() -> String {
    let amplitude = [600.0, 400.0, 500.0, 300.0, 800.0, 800.0];
    let points: Vec<serde_json::Value> = (0..50)
        .map(|i| {
            let mut p = serde_json::Map::new();
            p.insert("t_ms".into(), (100 * i).into());
            for (n, a) in amplitude.iter().enumerate() {
                let phase = 0.3 * f64::from(i) + n as f64;
                let counts = f64::from(OFFSET) + (a * phase.sin()).round();
                p.insert(format!("j{}", n + 1), (counts as u64).into());
            }
            serde_json::Value::Object(p)
        })
        .collect();
    serde_json::json!({"name": "six-joint wave", "units": "counts", "points": points}).to_string()
}

fn traj_run(dir: &Path, tag: &str) -> Result<(Vec<u8>, Vec<u8>, String), String> {
    let csv = dir.join(format!("{tag}.csv"));
    let trace = dir.join(format!("{tag}.trace"));
    let out = Command::new(bin())
        .args(["traj", "run"])
        .arg(dir.join("wave.json"))
        .args(["--transport", "axi", "--seed", "7", "--out"])
        .arg(&csv)
        .arg("--trace")
        .arg(&trace)
        .env("EDSPID_CONFIG", dir.join("config.toml"))
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || {
        format!("traj run failed: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let digest = stdout
        .lines()
        .find_map(|l| l.strip_prefix("trace-sha256 "))
        .ok_or("no trace digest printed")?
        .to_string();
    Ok((
        std::fs::read(&csv).map_err(|e| e.to_string())?,
        std::fs::read(&trace).map_err(|e| e.to_string())?,
        digest,
    ))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(dir.path().join("wave.json"), trajectory_json()).map_err(|e| e.to_string())?;
    std::fs::write(
        dir.path().join("config.toml"),
        "[sim]\ninitial_jitter_deg = 0.8\n",
    )
    .map_err(|e| e.to_string())?;
    let (csv_a, trace_a, digest_a) = traj_run(dir.path(), "a")?;
    let (csv_b, trace_b, digest_b) = traj_run(dir.path(), "b")?;
    check(csv_a == csv_b, || "telemetry CSVs differ".into())?;
    check(trace_a == trace_b, || "event traces differ".into())?;
    check(digest_a == digest_b, || "trace digests differ".into())?;
    let rows = csv_a.iter().filter(|&&b| b == b'\n').count() - 1;
    // 49 * 100 ms + 2000 ms settle at 10 ms per row.
    check(rows == 6900 / 10 + 1, || format!("{rows} rows"))?;
    let events = trace_a.iter().filter(|&&b| b == b'\n').count();
    Ok(format!(
        "{rows} rows and {events} trace events identical, digest {}",
        &digest_a[..16]
    ))
}

// Register semantics --------------------------------------------------------

fn probe_value(index: usize) -> u32 {
    match RegisterRole::of(index).unwrap() {
        RegisterRole::GlobalCtrl => 1,
        RegisterRole::Ref(_) => 33_000 + index as u32,
        RegisterRole::Kp(_) | RegisterRole::Ki(_) | RegisterRole::Kd(_) => 1_000 + index as u32,
        RegisterRole::LatencyCfg => 2,
        RegisterRole::TelemetryDiv => 20,
        _ => 0xA5A5_0000 | index as u32,
    }
}

fn registers() -> Outcome {
    let mut sim = Simulator::new(SimConfig::default()).map_err(|e| e.to_string())?;
    let mut writable = 0;
    let mut read_only = 0;
    for index in 0..REGISTER_COUNT {
        let role = RegisterRole::of(index).map_err(|e| e.to_string())?;
        let before = sim.read_word(index).map_err(|e| e.to_string())?;
        let value = probe_value(index);
        let result = sim.write_word(index, value);
        if !role.writable() {
            check(
                matches!(result, Err(SimError::Register(RegisterError::ReadOnly { .. }))),
                || format!("{} accepted a write", role.name()),
            )?;
            let after = sim.read_word(index).map_err(|e| e.to_string())?;
            check(after == before, || format!("{} changed on a refused write", role.name()))?;
            read_only += 1;
            continue;
        }
        result.map_err(|e| format!("{}: {e}", role.name()))?;
        let read = sim.read_word(index).map_err(|e| e.to_string())?;
        check(read == value, || format!("{} read {read:#x} after {value:#x}", role.name()))?;
        match role {
            RegisterRole::Ref(joint) => check(
                u32::from(sim.controller(joint).reference()) == value,
                || format!("{} did not reach the controller", role.name()),
            )?,
            RegisterRole::Kp(joint) => check(
                u32::from(sim.controller(joint).gains().kp) == value,
                || format!("{} did not reach the controller", role.name()),
            )?,
            RegisterRole::Ki(joint) => check(
                u32::from(sim.controller(joint).gains().ki) == value,
                || format!("{} did not reach the controller", role.name()),
            )?,
            RegisterRole::Kd(joint) => check(
                u32::from(sim.controller(joint).gains().kd) == value,
                || format!("{} did not reach the controller", role.name()),
            )?,
            _ => {}
        }
        writable += 1;
    }
    check(read_only == 8 && writable == 28, || {
        format!("{read_only} read-only, {writable} writable")
    })?;
    for v in [0, 1, 0xDEAD_BEEF, u32::MAX] {
        sim.write_word(regbank::SCRATCH, v).map_err(|e| e.to_string())?;
        let r = sim.read_word(regbank::SCRATCH).map_err(|e| e.to_string())?;
        check(r == v, || format!("SCRATCH returned {r:#x} for {v:#x}"))?;
    }
    check(
        matches!(sim.read_word(REGISTER_COUNT), Err(SimError::Register(RegisterError::IndexOutOfRange(36)))),
        || "index 36 readable".into(),
    )?;
    check(sim.write_word(REGISTER_COUNT, 0).is_err(), || "index 36 writable".into())?;

    // Through a transport, the controller sees the new reference at the
    // completion event and not before.
    let mut sim = Simulator::new(SimConfig::default()).map_err(|e| e.to_string())?;
    let axi = sim.config().transports.axi.clone();
    let pending = sim
        .submit_command(&axi, vec![RegisterOp::Write { index: regbank::REF_BASE + 2, value: 34_000 }])
        .map_err(|e| e.to_string())?;
    sim.run_until(Tick(pending.completes.0 - 1)).map_err(|e| e.to_string())?;
    check(sim.controller(j(3)).reference() == OFFSET, || "applied early".into())?;
    sim.run_until(pending.completes).map_err(|e| e.to_string())?;
    check(sim.controller(j(3)).reference() == 34_000, || "not applied at completion".into())?;
    let gains = sim.controller(j(4)).gains();
    check(gains == SpidGains::PRESET, || "gains disturbed".into())?;
    Ok(format!(
        "{writable} writable and {read_only} read-only words, transport write applied at tick {}",
        pending.completes
    ))
}

fn main() {
    let criteria: [Criterion; 7] = [
        ("latency improvement", latency),
        ("Table I conversions", table_i),
        ("Table II clamping", table_ii),
        ("closed-loop oracle equivalence", closed_loop),
        ("spike-block properties", spike_properties),
        ("determinism", determinism),
        ("register semantics", registers),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

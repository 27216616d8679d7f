//! Floating-point discrete PID reference for the spiking controller.
//!
//! Given the position counter history of a run, the oracle works on windows
//! of `W` ticks aligned to tick 0. For window `k` it takes the time-mean
//! error `e_k`, the time-mean of the running error integral `S_k`
//! (count-seconds), and computes the commanded spike rate
//!
//! ```text
//! u_k = kp*g_e*e_k + g_i*ki*g_e*S_k + kd*g_e*(e_{k-1} - e_{k-2})
//! ```
//!
//! with `e_{-1} = e_{-2} = 0`. The drive is `V * clamp(u_k * T_p, -1, 1)`.
//! Nothing here touches the spike machinery.

pub struct PidOracle {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub error_gain: f64,
    pub integral_gain: f64,
    pub pulse_width: f64,
    pub v_supply: f64,
}

pub struct WindowStats {
    pub mean_error: Vec<f64>,
    pub mean_integral: Vec<f64>,
}

/// `changes` are `(tick, counter)` pairs in time order; the counter is
/// `initial` before the first one. The reference is constant from tick 0.
pub fn window_stats(
    reference: u16,
    initial: u16,
    changes: &[(u64, u16)],
    window_ticks: u64,
    windows: usize,
    clock_hz: f64,
) -> WindowStats {
    let end = window_ticks * windows as u64;
    let mut mean_error = vec![0.0; windows];
    let mut mean_integral = vec![0.0; windows];
    let mut integral = 0.0; // count-seconds up to `t`
    let mut t = 0u64;
    let mut counter = initial;
    let mut iter = changes.iter().peekable();
    while t < end {
        let next_change = iter.peek().map_or(u64::MAX, |c| c.0);
        let next_window = (t / window_ticks + 1) * window_ticks;
        let seg_end = next_change.min(next_window).min(end);
        if seg_end > t {
            let e = f64::from(reference) - f64::from(counter);
            let dt = (seg_end - t) as f64 / clock_hz;
            let k = (t / window_ticks) as usize;
            mean_error[k] += e * dt;
            mean_integral[k] += integral * dt + 0.5 * e * dt * dt;
            integral += e * dt;
            t = seg_end;
        }
        while iter.peek().is_some_and(|c| c.0 <= t) {
            counter = iter.next().unwrap().1;
        }
    }
    let w = window_ticks as f64 / clock_hz;
    for k in 0..windows {
        mean_error[k] /= w;
        mean_integral[k] /= w;
    }
    WindowStats {
        mean_error,
        mean_integral,
    }
}

impl PidOracle {
    pub fn rates(&self, s: &WindowStats) -> Vec<f64> {
        let e = &s.mean_error;
        (0..e.len())
            .map(|k| {
                let prev = |i: usize| if k >= i { e[k - i] } else { 0.0 };
                self.kp * self.error_gain * e[k]
                    + self.integral_gain * self.ki * self.error_gain * s.mean_integral[k]
                    + self.kd * self.error_gain * (prev(1) - prev(2))
            })
            .collect()
    }

    pub fn drive(&self, s: &WindowStats) -> Vec<f64> {
        self.rates(s)
            .into_iter()
            .map(|u| self.v_supply * (u * self.pulse_width).clamp(-1.0, 1.0))
            .collect()
    }
}

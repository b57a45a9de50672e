//! Admission throttling for a proxy stage fronting a legacy (unmodifiable)
//! stage.
//!
//! The proxy keeps jobs in its own duplicate-aware queues (an ordinary
//! stage) and releases at most `n` of them into the legacy stage. Starting
//! from n = 1, the probing phase raises n while each step buys a
//! commensurate throughput gain; once the gain stalls, the throttler settles
//! on the smallest level that achieved the maximum (the optimal target) and
//! exploits it. Optionally, a sustained throughput drift re-enters probing.

use alloc::collections::BTreeMap;
use core::fmt;

use crate::sim::SimTime;

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Phase {
    Probing,
    Exploitation,
}

#[derive(Copy, Clone, Debug)]
pub struct ThrottlerConfig {
    /// Relative throughput gain required to keep raising n.
    pub gamma: f64,
    /// Minimum measurement window length in simulated microseconds.
    pub window_us: u64,
    /// Minimum completions before a window may close.
    pub min_completions: u64,
    /// Exponential smoothing factor for the rate estimate.
    pub alpha: f64,
    /// Re-enter probing when the smoothed rate drifts this far (relative)
    /// from the rate recorded at the optimal target.
    pub drift: f64,
    /// Disable to keep the probe-once behavior.
    pub reprobe: bool,
    /// Pin the multiplexing level instead of probing (offline-sweep mode).
    pub fixed_level: Option<usize>,
}

impl Default for ThrottlerConfig {
    fn default() -> Self {
        ThrottlerConfig {
            gamma: 0.05,
            window_us: 1_000_000,
            min_completions: 50,
            alpha: 0.5,
            drift: 0.20,
            reprobe: true,
            fixed_level: None,
        }
    }
}

/// Windowed completion-rate estimator with exponential smoothing.
#[derive(Clone, Debug)]
pub struct ThroughputEstimator {
    alpha: f64,
    window_start: SimTime,
    completions: u64,
    smoothed: Option<f64>,
}

impl ThroughputEstimator {
    pub fn new(alpha: f64, now: SimTime) -> Self {
        ThroughputEstimator {
            alpha,
            window_start: now,
            completions: 0,
            smoothed: None,
        }
    }

    pub fn record(&mut self) {
        self.completions += 1;
    }

    pub fn window_completions(&self) -> u64 {
        self.completions
    }

    /// Raw rate of the open window in jobs/sec, if any time has elapsed.
    pub fn raw_rate(&self, now: SimTime) -> Option<f64> {
        let elapsed = now - self.window_start;
        if elapsed == 0 {
            return None;
        }
        Some(self.completions as f64 / (elapsed as f64 / 1e6))
    }

    /// Folds the finished window into the smoothed estimate and opens the
    /// next window. Returns the raw window rate.
    pub fn close_window(&mut self, now: SimTime) -> f64 {
        let raw = self.raw_rate(now).unwrap_or(0.0);
        self.smoothed = Some(match self.smoothed {
            None => raw,
            Some(prev) => self.alpha * raw + (1.0 - self.alpha) * prev,
        });
        self.window_start = now;
        self.completions = 0;
        raw
    }

    pub fn smoothed(&self) -> Option<f64> {
        self.smoothed
    }

    pub fn reset(&mut self, now: SimTime) {
        self.window_start = now;
        self.completions = 0;
        self.smoothed = None;
    }
}

/// Decision taken at the end of a measurement window.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum ProbeDecision {
    /// Probing continues at the new (higher) level.
    Probe { n: usize },
    /// The gain stalled; the throttler settled on its optimal target.
    Settle { n_star: usize },
    /// Exploitation continues unchanged.
    Hold,
    /// Drift detected; probing restarts from n = 1.
    Reprobe,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct AccountingError;

impl fmt::Display for AccountingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "completion reported for a job the proxy never released")
    }
}

/// The throttler: multiplexing level, phase, and window statistics.
pub struct ThrottlerState {
    pub cfg: ThrottlerConfig,
    phase: Phase,
    n: usize,
    n_star: Option<usize>,
    in_flight: usize,
    estimator: ThroughputEstimator,
    /// Last measured raw rate per probed level.
    history: BTreeMap<usize, f64>,
    /// Smoothed rate recorded when the optimal target was chosen.
    reference: f64,
    windows_closed: u64,
    settled_after_windows: Option<u64>,
}

impl ThrottlerState {
    pub fn new(cfg: ThrottlerConfig, now: SimTime) -> Self {
        let (phase, n, n_star) = match cfg.fixed_level {
            Some(level) => (Phase::Exploitation, level.max(1), Some(level.max(1))),
            None => (Phase::Probing, 1, None),
        };
        ThrottlerState {
            phase,
            n,
            n_star,
            in_flight: 0,
            estimator: ThroughputEstimator::new(cfg.alpha, now),
            history: BTreeMap::new(),
            reference: 0.0,
            windows_closed: 0,
            settled_after_windows: None,
            cfg,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn level(&self) -> usize {
        self.n
    }

    pub fn n_star(&self) -> Option<usize> {
        self.n_star
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight
    }

    pub fn windows_closed(&self) -> u64 {
        self.windows_closed
    }

    /// How many probe windows it took to settle on the optimal target.
    pub fn settled_after_windows(&self) -> Option<u64> {
        self.settled_after_windows
    }

    pub fn history(&self) -> &BTreeMap<usize, f64> {
        &self.history
    }

    /// How many more jobs may be released right now.
    pub fn admit_budget(&self) -> usize {
        self.n.saturating_sub(self.in_flight)
    }

    pub fn on_release(&mut self) {
        self.in_flight += 1;
        debug_assert!(self.in_flight <= self.n.max(self.in_flight));
    }

    /// Accounts one legacy completion. The caller re-runs admission and, if
    /// a window closed, receives the probe decision.
    pub fn on_completion(&mut self, now: SimTime) -> Result<Option<ProbeDecision>, AccountingError> {
        if self.in_flight == 0 {
            return Err(AccountingError);
        }
        self.in_flight -= 1;
        self.estimator.record();
        Ok(self.maybe_close_window(now))
    }

    /// Periodic check (the window-length timer).
    pub fn on_timer(&mut self, now: SimTime) -> Option<ProbeDecision> {
        self.maybe_close_window(now)
    }

    fn window_ready(&self, now: SimTime) -> bool {
        now - self.estimator.window_start >= self.cfg.window_us
            && self.estimator.window_completions() >= self.cfg.min_completions
    }

    fn maybe_close_window(&mut self, now: SimTime) -> Option<ProbeDecision> {
        if !self.window_ready(now) {
            return None;
        }
        let raw = self.estimator.close_window(now);
        self.windows_closed += 1;
        Some(self.probe_step(raw, now))
    }

    /// One throttling-algorithm step with the finished window's rate.
    fn probe_step(&mut self, rate: f64, now: SimTime) -> ProbeDecision {
        match self.phase {
            Phase::Probing => {
                let prev = if self.n == 1 {
                    0.0
                } else {
                    *self.history.get(&(self.n - 1)).unwrap_or(&0.0)
                };
                self.history.insert(self.n, rate);
                if rate >= (1.0 + self.cfg.gamma) * prev {
                    self.n += 1;
                    ProbeDecision::Probe { n: self.n }
                } else {
                    let target = self.n - 1;
                    debug_assert!(target >= 1);
                    self.n_star = Some(target);
                    self.n = target;
                    self.reference = *self.history.get(&target).unwrap_or(&rate);
                    self.phase = Phase::Exploitation;
                    self.settled_after_windows = Some(self.windows_closed);
                    self.estimator.reset(now);
                    ProbeDecision::Settle { n_star: target }
                }
            }
            Phase::Exploitation => {
                let smoothed = self.estimator.smoothed().unwrap_or(rate);
                let drifted = self.reference > 0.0
                    && (smoothed - self.reference).abs() > self.cfg.drift * self.reference;
                if self.cfg.fixed_level.is_none() && self.cfg.reprobe && drifted {
                    self.phase = Phase::Probing;
                    self.n = 1;
                    self.n_star = None;
                    self.history.clear();
                    self.estimator.reset(now);
                    ProbeDecision::Reprobe
                } else {
                    ProbeDecision::Hold
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn throttler() -> ThrottlerState {
        ThrottlerState::new(ThrottlerConfig::default(), SimTime::ZERO)
    }

    #[test]
    fn starts_probing_at_level_one() {
        let t = throttler();
        assert_eq!(t.phase(), Phase::Probing);
        assert_eq!(t.level(), 1);
        assert_eq!(t.admit_budget(), 1);
    }

    #[test]
    fn budget_is_zero_at_the_cap() {
        let mut t = throttler();
        t.n = 4;
        for _ in 0..4 {
            assert!(t.admit_budget() > 0);
            t.on_release();
        }
        assert_eq!(t.admit_budget(), 0);
    }

    #[test]
    fn completion_without_release_is_an_accounting_error() {
        let mut t = throttler();
        assert_eq!(t.on_completion(SimTime(1)), Err(AccountingError));
    }

    #[test]
    fn raw_rate_is_completions_over_elapsed() {
        let mut e = ThroughputEstimator::new(0.5, SimTime::ZERO);
        for _ in 0..100 {
            e.record();
        }
        assert_eq!(e.raw_rate(SimTime::from_secs(1)), Some(100.0));
    }

    #[test]
    fn smoothing_follows_the_exponential_rule() {
        let mut e = ThroughputEstimator::new(0.5, SimTime::ZERO);
        for _ in 0..80 {
            e.record();
        }
        e.close_window(SimTime::from_secs(1));
        assert_eq!(e.smoothed(), Some(80.0));
        for _ in 0..120 {
            e.record();
        }
        e.close_window(SimTime::from_secs(2));
        assert_eq!(e.smoothed(), Some(100.0));
    }

    /// Drives one window of `rate` completions per second at the current
    /// level and returns the resulting decision.
    fn drive_window(t: &mut ThrottlerState, rate: u64, now: &mut SimTime) -> ProbeDecision {
        let mut decision = None;
        let step = 1_000_000 / rate.max(1);
        while decision.is_none() {
            *now += step;
            if t.in_flight() == 0 {
                t.on_release();
            }
            decision = t.on_completion(*now).unwrap();
        }
        decision.unwrap()
    }

    #[test]
    fn probe_trace_settles_on_the_last_commensurate_level() {
        // Window rates 100, 195, 290, 295 with gamma = 0.05:
        // 295 < 1.05 * 290, so probing stops after the n=4 window at n* = 3.
        let mut t = throttler();
        let mut now = SimTime::ZERO;
        assert_eq!(drive_window(&mut t, 100, &mut now), ProbeDecision::Probe { n: 2 });
        assert_eq!(drive_window(&mut t, 195, &mut now), ProbeDecision::Probe { n: 3 });
        assert_eq!(drive_window(&mut t, 290, &mut now), ProbeDecision::Probe { n: 4 });
        assert_eq!(drive_window(&mut t, 295, &mut now), ProbeDecision::Settle { n_star: 3 });
        assert_eq!(t.phase(), Phase::Exploitation);
        assert_eq!(t.level(), 3);
    }

    #[test]
    fn serial_legacy_stage_settles_at_one() {
        // No gain beyond a single slot.
        let mut t = throttler();
        let mut now = SimTime::ZERO;
        assert_eq!(drive_window(&mut t, 100, &mut now), ProbeDecision::Probe { n: 2 });
        assert_eq!(drive_window(&mut t, 100, &mut now), ProbeDecision::Settle { n_star: 1 });
        assert_eq!(t.level(), 1);
    }

    #[test]
    fn level_never_decreases_while_probing() {
        let mut t = throttler();
        let mut now = SimTime::ZERO;
        let mut last = t.level();
        for rate in [100, 150, 225, 340, 510] {
            match drive_window(&mut t, rate, &mut now) {
                ProbeDecision::Probe { n } => {
                    assert!(n > last);
                    last = n;
                }
                other => panic!("unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn drift_triggers_a_reprobe_from_one() {
        let mut t = throttler();
        let mut now = SimTime::ZERO;
        drive_window(&mut t, 100, &mut now);
        drive_window(&mut t, 100, &mut now); // settle at 1, reference 100
        assert_eq!(t.phase(), Phase::Exploitation);
        // Sustained 40% drop: first exploitation window seeds smoothing.
        let d = drive_window(&mut t, 60, &mut now);
        assert_eq!(d, ProbeDecision::Reprobe);
        assert_eq!(t.level(), 1);
        assert_eq!(t.phase(), Phase::Probing);
    }

    #[test]
    fn reprobe_can_be_disabled() {
        let cfg = ThrottlerConfig {
            reprobe: false,
            ..ThrottlerConfig::default()
        };
        let mut t = ThrottlerState::new(cfg, SimTime::ZERO);
        let mut now = SimTime::ZERO;
        drive_window(&mut t, 100, &mut now);
        drive_window(&mut t, 100, &mut now);
        assert_eq!(drive_window(&mut t, 60, &mut now), ProbeDecision::Hold);
        assert_eq!(t.phase(), Phase::Exploitation);
    }

    #[test]
    fn windows_wait_for_both_length_and_count() {
        let mut t = throttler();
        t.on_release();
        // 10 completions in 1s: window does not close (count too low).
        let mut now = SimTime::ZERO;
        for _ in 0..10 {
            now += 100_000;
            t.on_release();
            assert_eq!(t.on_completion(now), Ok(None));
        }
        assert_eq!(t.windows_closed(), 0);
    }
}

//! Deterministic discrete-event machinery: virtual clock, event queue, and
//! named random streams.
//!
//! Everything here is engineered for reproducibility: the event queue orders
//! same-time events by a content-derived key (not by push order), so coupled
//! runs that differ only in which extra events they schedule still process
//! the shared events in the same relative order. Random streams are named and
//! independently seeded, so adding draws on one stream never perturbs another.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};
use core::fmt;
use core::ops::{Add, AddAssign, Sub};

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

/// Simulated time in microseconds since run start.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub fn from_us(us: u64) -> Self {
        SimTime(us)
    }

    pub fn from_ms(ms: u64) -> Self {
        SimTime(ms * 1_000)
    }

    pub fn from_secs(s: u64) -> Self {
        SimTime(s * 1_000_000)
    }

    pub fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }
}

impl AddAssign<u64> for SimTime {
    fn add_assign(&mut self, us: u64) {
        self.0 += us;
    }
}

impl Sub for SimTime {
    type Output = u64;
    fn sub(self, other: SimTime) -> u64 {
        self.0 - other.0
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Content-derived tie-break for events firing at the same instant.
///
/// `class` ranks the event kind; `a`/`b` identify the entity (stage, job,
/// request) the event acts on. The push-order sequence number is only the
/// final fallback, so two runs that schedule different *extra* events still
/// order their common events identically.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub struct EventKey {
    pub class: u8,
    pub a: u64,
    pub b: u64,
}

impl EventKey {
    pub fn new(class: u8, a: u64, b: u64) -> Self {
        EventKey { class, a, b }
    }
}

struct Entry<T> {
    at: SimTime,
    key: EventKey,
    seq: u64,
    payload: T,
}

impl<T> PartialEq for Entry<T> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.key == other.key && self.seq == other.seq
    }
}
impl<T> Eq for Entry<T> {}
impl<T> PartialOrd for Entry<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Entry<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.key, self.seq).cmp(&(other.at, other.key, other.seq))
    }
}

/// Time-ordered event queue with a monotone clock.
///
/// Pushing an event in the past is a logic error and panics.
pub struct EventQueue<T> {
    heap: BinaryHeap<Reverse<Entry<T>>>,
    seq: u64,
    now: SimTime,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
            now: SimTime::ZERO,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, at: SimTime, key: EventKey, payload: T) {
        assert!(
            at >= self.now,
            "event scheduled in the past: {at} < {}",
            self.now
        );
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Entry {
            at,
            key,
            seq,
            payload,
        }));
    }

    /// Pops the next event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<(SimTime, T)> {
        let Reverse(entry) = self.heap.pop()?;
        debug_assert!(entry.at >= self.now);
        self.now = entry.at;
        Some((entry.at, entry.payload))
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    /// Advances the clock without executing anything (used to close out a
    /// run at a horizon past the last event).
    pub fn advance_to(&mut self, t: SimTime) {
        if t > self.now {
            debug_assert!(self.peek_time().map_or(true, |p| p >= t));
            self.now = t;
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A named, independently seeded pseudo-random stream.
///
/// Identical (master seed, name) always reproduces the same draw sequence,
/// and draws on one stream never affect any other.
#[derive(Clone)]
pub struct RngStream {
    rng: ChaCha12Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, name: &str) -> Self {
        let seed = splitmix64(master_seed ^ fnv1a(name));
        RngStream {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    /// A stream derived from two keys (e.g. request id and replica), so the
    /// draw is a pure function of identity rather than of event order.
    /// Coupled runs across schemes share these draws exactly.
    pub fn keyed(master_seed: u64, name: &str, a: u64, b: u64) -> Self {
        let base = splitmix64(master_seed ^ fnv1a(name));
        let seed = splitmix64(base ^ splitmix64(a).wrapping_add(splitmix64(b ^ 0x5bf0_3635)));
        RngStream {
            rng: ChaCha12Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; never returns zero.
    pub fn next_f64_open(&mut self) -> f64 {
        1.0 - self.next_f64()
    }

    /// Uniform integer in [0, n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Multiply-shift bounded sampling; bias is < 2^-64 per draw.
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }
}

/// Sampling distributions for workload generation.
#[derive(Clone, Debug)]
pub enum Dist {
    /// Always the same value.
    Deterministic(f64),
    /// Exponential with the given mean.
    Exponential { mean: f64 },
    /// Empirical CDF table with linear interpolation between anchors.
    Empirical(EmpiricalCdf),
    /// Bounded Pareto on [lo, hi] with shape alpha.
    BoundedPareto { alpha: f64, lo: f64, hi: f64 },
}

impl Dist {
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        match self {
            Dist::Deterministic(c) => *c,
            Dist::Exponential { mean } => {
                let mut u = rng.next_f64();
                while u == 0.0 {
                    u = rng.next_f64();
                }
                -mean * libm::log(1.0 - u)
            }
            Dist::Empirical(cdf) => cdf.sample(rng.next_f64_open()),
            Dist::BoundedPareto { alpha, lo, hi } => {
                let u = rng.next_f64();
                let ratio = 1.0 - libm::pow(lo / hi, *alpha);
                lo / libm::pow(1.0 - u * ratio, 1.0 / alpha)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Dist::Deterministic(c) => *c,
            Dist::Exponential { mean } => *mean,
            Dist::Empirical(cdf) => cdf.mean(),
            Dist::BoundedPareto { alpha, lo, hi } => {
                if (*alpha - 1.0).abs() < 1e-12 {
                    let denom = 1.0 - lo / hi;
                    lo * libm::log(hi / lo) / denom
                } else {
                    let l_a = libm::pow(*lo, *alpha);
                    let num = l_a / (1.0 - libm::pow(lo / hi, *alpha));
                    num * (*alpha / (*alpha - 1.0))
                        * (1.0 / libm::pow(*lo, *alpha - 1.0) - 1.0 / libm::pow(*hi, *alpha - 1.0))
                }
            }
        }
    }
}

/// Piecewise-linear empirical CDF given as (cumulative probability, value)
/// anchors. Draws at or below the first anchor return its value.
#[derive(Clone, Debug)]
pub struct EmpiricalCdf {
    anchors: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CdfError {
    Empty,
    NotIncreasing,
    BadProbability,
    BadValue,
    IncompleteMass,
}

impl fmt::Display for CdfError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CdfError::Empty => write!(f, "empty CDF table"),
            CdfError::NotIncreasing => write!(f, "CDF probabilities must be strictly increasing"),
            CdfError::BadProbability => write!(f, "CDF probabilities must lie in (0, 1]"),
            CdfError::BadValue => write!(f, "CDF values must be positive and non-decreasing"),
            CdfError::IncompleteMass => write!(f, "last CDF anchor must have probability 1.0"),
        }
    }
}

impl EmpiricalCdf {
    pub fn new(anchors: Vec<(f64, f64)>) -> Result<Self, CdfError> {
        if anchors.is_empty() {
            return Err(CdfError::Empty);
        }
        let mut prev_p = 0.0;
        let mut prev_v = 0.0;
        for &(p, v) in &anchors {
            if !(p > 0.0 && p <= 1.0) {
                return Err(CdfError::BadProbability);
            }
            if p <= prev_p {
                return Err(CdfError::NotIncreasing);
            }
            if v <= 0.0 || v < prev_v {
                return Err(CdfError::BadValue);
            }
            prev_p = p;
            prev_v = v;
        }
        if (anchors.last().unwrap().0 - 1.0).abs() > 1e-9 {
            return Err(CdfError::IncompleteMass);
        }
        Ok(EmpiricalCdf { anchors })
    }

    pub fn anchors(&self) -> &[(f64, f64)] {
        &self.anchors
    }

    /// Inverse-CDF lookup for u in (0, 1].
    pub fn sample(&self, u: f64) -> f64 {
        let (p0, v0) = self.anchors[0];
        if u <= p0 {
            return v0;
        }
        for w in self.anchors.windows(2) {
            let (pa, va) = w[0];
            let (pb, vb) = w[1];
            if u <= pb {
                let t = (u - pa) / (pb - pa);
                return va + t * (vb - va);
            }
        }
        self.anchors.last().unwrap().1
    }

    pub fn mean(&self) -> f64 {
        // Integrate the piecewise-linear inverse CDF.
        let (p0, v0) = self.anchors[0];
        let mut acc = p0 * v0;
        for w in self.anchors.windows(2) {
            let (pa, va) = w[0];
            let (pb, vb) = w[1];
            acc += (pb - pa) * 0.5 * (va + vb);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_time_events_pop_in_key_then_push_order() {
        let mut q: EventQueue<&str> = EventQueue::new();
        q.push(SimTime(5), EventKey::new(0, 1, 0), "a");
        q.push(SimTime(5), EventKey::new(0, 1, 0), "b");
        q.push(SimTime(5), EventKey::new(0, 0, 0), "c");
        assert_eq!(q.pop().unwrap().1, "c");
        assert_eq!(q.pop().unwrap().1, "a");
        assert_eq!(q.pop().unwrap().1, "b");
    }

    #[test]
    fn event_at_now_runs_before_later_events() {
        let mut q: EventQueue<u32> = EventQueue::new();
        q.push(SimTime(10), EventKey::new(0, 0, 0), 1);
        let (t, _) = q.pop().unwrap();
        assert_eq!(t, SimTime(10));
        q.push(SimTime(10), EventKey::new(0, 0, 0), 2);
        q.push(SimTime(11), EventKey::new(0, 0, 0), 3);
        assert_eq!(q.pop().unwrap(), (SimTime(10), 2));
        assert_eq!(q.pop().unwrap(), (SimTime(11), 3));
    }

    #[test]
    #[should_panic(expected = "event scheduled in the past")]
    fn past_event_is_fatal() {
        let mut q: EventQueue<u32> = EventQueue::new();
        q.push(SimTime(10), EventKey::new(0, 0, 0), 1);
        q.pop();
        q.push(SimTime(9), EventKey::new(0, 0, 0), 2);
    }

    #[test]
    fn random_events_pop_in_sorted_order() {
        // Oracle: an independent sort of the same (time, key, seq) triples.
        let mut stream = RngStream::new(7, "events");
        let mut q: EventQueue<u64> = EventQueue::new();
        let mut times = Vec::new();
        for i in 0..1_000_000u64 {
            let t = stream.next_u64() % 1_000_000;
            times.push(t);
            q.push(SimTime(t), EventKey::new(0, i, 0), t);
        }
        times.sort_unstable();
        for expect in times {
            let (at, payload) = q.pop().unwrap();
            assert_eq!(at.as_us(), expect);
            assert_eq!(payload, expect);
        }
        assert!(q.is_empty());
    }

    #[test]
    fn streams_are_deterministic_and_independent() {
        let mut a1 = RngStream::new(42, "arrivals");
        let mut a2 = RngStream::new(42, "arrivals");
        let mut b = RngStream::new(42, "service");
        let seq1: Vec<u64> = (0..32).map(|_| a1.next_u64()).collect();
        let seq2: Vec<u64> = (0..32).map(|_| a2.next_u64()).collect();
        let seq3: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(seq1, seq2);
        assert_ne!(seq1, seq3);
        assert_ne!(
            RngStream::new(42, "arrivals").next_u64(),
            RngStream::new(43, "arrivals").next_u64()
        );
    }

    #[test]
    fn keyed_streams_depend_only_on_identity() {
        let mut a = RngStream::keyed(9, "noise", 100, 3);
        let mut b = RngStream::keyed(9, "noise", 100, 3);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = RngStream::keyed(9, "noise", 101, 3);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn deterministic_dist_is_constant() {
        let mut rng = RngStream::new(1, "x");
        let d = Dist::Deterministic(100.0);
        for _ in 0..10 {
            assert_eq!(d.sample(&mut rng), 100.0);
        }
    }

    #[test]
    fn exponential_mean_matches_law_of_large_numbers() {
        let mut rng = RngStream::new(11, "exp");
        let d = Dist::Exponential { mean: 1.0 };
        let n = 1_000_000;
        let sum: f64 = (0..n).map(|_| d.sample(&mut rng)).sum();
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "sample mean {mean}");
    }

    #[test]
    fn single_point_cdf_is_constant() {
        let cdf = EmpiricalCdf::new(alloc::vec![(1.0, 50_000.0)]).unwrap();
        let d = Dist::Empirical(cdf);
        let mut rng = RngStream::new(3, "cdf");
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), 50_000.0);
        }
    }

    #[test]
    fn malformed_cdf_tables_are_rejected() {
        assert_eq!(EmpiricalCdf::new(alloc::vec![]).unwrap_err(), CdfError::Empty);
        assert_eq!(
            EmpiricalCdf::new(alloc::vec![(0.5, 1.0), (0.4, 2.0)]).unwrap_err(),
            CdfError::NotIncreasing
        );
        assert_eq!(
            EmpiricalCdf::new(alloc::vec![(0.5, 1.0)]).unwrap_err(),
            CdfError::IncompleteMass
        );
        assert_eq!(
            EmpiricalCdf::new(alloc::vec![(1.2, 1.0)]).unwrap_err(),
            CdfError::BadProbability
        );
    }

    #[test]
    fn empirical_cdf_interpolates_between_anchors() {
        let cdf =
            EmpiricalCdf::new(alloc::vec![(0.5, 100.0), (1.0, 200.0)]).unwrap();
        assert_eq!(cdf.sample(0.25), 100.0);
        assert_eq!(cdf.sample(0.75), 150.0);
        assert_eq!(cdf.sample(1.0), 200.0);
        // mean = 0.5*100 + 0.5*(100+200)/2
        assert!((cdf.mean() - 125.0).abs() < 1e-9);
    }

    #[test]
    fn bounded_pareto_stays_in_range() {
        let d = Dist::BoundedPareto {
            alpha: 1.3,
            lo: 10.0,
            hi: 1000.0,
        };
        let mut rng = RngStream::new(5, "pareto");
        let mut sum = 0.0;
        let n = 200_000;
        for _ in 0..n {
            let v = d.sample(&mut rng);
            assert!((10.0..=1000.0).contains(&v));
            sum += v;
        }
        let mean = sum / n as f64;
        assert!((mean - d.mean()).abs() / d.mean() < 0.02, "mean {mean} vs {}", d.mean());
    }
}

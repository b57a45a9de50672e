//! Concrete resource models behind stages — storage server, network link,
//! CPU node — and the straggler noise model that inflates service times.

use alloc::vec::Vec;

use crate::sim::RngStream;
use crate::stage::{AbortPolicy, StageCfg};

/// How a drawn noise multiplier is charged to a request.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum NoiseMode {
    /// Multiplies the bottleneck-stage service time (occupies the resource).
    Service,
    /// Added as a terminal response delay (does not occupy the resource).
    Response,
}

/// Straggler model: a fraction of requests see their service inflated by a
/// multiplier drawn from an interpolated table.
///
/// Table anchors are (cumulative probability within the affected mass,
/// latency multiplier); the low edge of the mass is pinned at multiplier 1.0
/// and draws beyond the last anchor clamp to its multiplier.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub affected_fraction: f64,
    pub inflation_table: Vec<(f64, f64)>,
    pub mode: NoiseMode,
}

impl NoiseModel {
    pub fn disabled() -> Self {
        NoiseModel {
            affected_fraction: 0.0,
            inflation_table: Vec::new(),
            mode: NoiseMode::Service,
        }
    }

    /// Default anchors measured on a public-cloud storage cluster: with 10%
    /// of requests affected, the overall p95/p99/p99.9 land at 2.3x, 3.5x
    /// and 5.0x the median.
    pub fn cloud_default() -> Self {
        NoiseModel {
            affected_fraction: 0.10,
            inflation_table: alloc::vec![(0.5, 2.3), (0.9, 3.5), (0.99, 5.0)],
            mode: NoiseMode::Service,
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.affected_fraction <= 0.0 || self.inflation_table.is_empty()
    }

    /// Multiplier at position `u` within the affected mass (pure lookup).
    pub fn multiplier_at(&self, u: f64) -> f64 {
        let mut prev = (0.0, 1.0);
        for &(p, m) in &self.inflation_table {
            if u <= p {
                let t = (u - prev.0) / (p - prev.0);
                return prev.1 + t * (m - prev.1);
            }
            prev = (p, m);
        }
        prev.1
    }

    /// Draws a multiplier: 1.0 with probability `1 - affected_fraction`,
    /// otherwise an interpolated table value.
    pub fn draw_multiplier(&self, rng: &mut RngStream) -> f64 {
        if self.is_disabled() {
            return 1.0;
        }
        let hit = rng.next_f64();
        if hit >= self.affected_fraction {
            return 1.0;
        }
        self.multiplier_at(rng.next_f64())
    }

    /// Inflates a base duration. Identity when the model is disabled or the
    /// request escapes the affected fraction.
    pub fn apply(&self, base_us: f64, rng: &mut RngStream) -> f64 {
        base_us * self.draw_multiplier(rng)
    }
}

/// Storage server: `rate` bytes per microsecond across `concurrency`
/// parallel service slots. Preemptive and abort-capable.
#[derive(Copy, Clone, Debug)]
pub struct StorageParams {
    pub rate: f64,
    pub concurrency: usize,
}

/// Network edge link: serialization at `capacity` bits per microsecond,
/// strict priority at packet granularity, purge of queued data only.
#[derive(Copy, Clone, Debug)]
pub struct LinkParams {
    pub capacity: f64,
    pub packet_bytes: u64,
}

impl LinkParams {
    pub fn packet_time_us(&self) -> u64 {
        ceil_div_f64(self.packet_bytes as f64 * 8.0, self.capacity)
    }
}

/// Processing node: `rate` CPU-microseconds of work per microsecond. The
/// primary and duplicate instances share the core at strict priority;
/// duplicate arrivals beyond `duplicate_queue_cap` are dropped.
#[derive(Copy, Clone, Debug)]
pub struct CpuParams {
    pub rate: f64,
    pub duplicate_queue_cap: Option<usize>,
}

/// The resource model attached to one stage.
#[derive(Copy, Clone, Debug)]
pub enum StageKind {
    /// Request/response handler: effectively unbounded parallelism with a
    /// fixed per-job cost (the duplication/processing overhead knob).
    Handler { fixed_us: u64 },
    Storage(StorageParams),
    Link(LinkParams),
    Cpu(CpuParams),
}

impl StageKind {
    /// Queueing configuration this resource implies. `aware` gates the
    /// duplicate-aware treatment (priorities + purging) per layer.
    pub fn stage_cfg(&self, aware: bool) -> StageCfg {
        match *self {
            StageKind::Handler { .. } => StageCfg {
                levels: 2,
                concurrency: usize::MAX,
                preemptive: false,
                abort: AbortPolicy::Instant,
                boundary_us: 0,
                aware: true,
            },
            StageKind::Storage(p) => StageCfg {
                levels: 2,
                concurrency: p.concurrency,
                preemptive: true,
                abort: AbortPolicy::Instant,
                boundary_us: 0,
                aware,
            },
            StageKind::Link(p) => StageCfg {
                levels: 2,
                concurrency: 1,
                preemptive: true,
                abort: AbortPolicy::AtBoundary,
                boundary_us: p.packet_time_us(),
                aware,
            },
            StageKind::Cpu(_) => StageCfg {
                levels: 2,
                concurrency: 1,
                preemptive: true,
                abort: AbortPolicy::Instant,
                boundary_us: 0,
                aware,
            },
        }
    }

    /// Service this stage owes a job of the given demand, in microseconds.
    /// `multiplier` is the noise inflation (1.0 when unaffected).
    pub fn work_us(&self, demand: u64, multiplier: f64) -> u64 {
        match *self {
            StageKind::Handler { fixed_us } => fixed_us,
            StageKind::Storage(p) => ceil_div_f64(demand as f64 * multiplier, p.rate),
            StageKind::Link(p) => ceil_div_f64(demand as f64 * 8.0 * multiplier, p.capacity),
            StageKind::Cpu(p) => ceil_div_f64(demand as f64 * multiplier, p.rate),
        }
    }

    pub fn duplicate_queue_cap(&self) -> Option<usize> {
        match self {
            StageKind::Cpu(p) => p.duplicate_queue_cap,
            _ => None,
        }
    }
}

fn ceil_div_f64(num: f64, den: f64) -> u64 {
    let v = num / den;
    let c = libm::ceil(v);
    if c < 0.0 {
        0
    } else {
        c as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::RngStream;

    #[test]
    fn disabled_noise_is_identity() {
        let mut rng = RngStream::new(1, "noise");
        let m = NoiseModel::disabled();
        for _ in 0..100 {
            assert_eq!(m.apply(12_345.0, &mut rng), 12_345.0);
        }
        let zero_fraction = NoiseModel {
            affected_fraction: 0.0,
            ..NoiseModel::cloud_default()
        };
        assert_eq!(zero_fraction.apply(7.0, &mut rng), 7.0);
    }

    #[test]
    fn default_table_hits_the_measured_anchors() {
        let m = NoiseModel::cloud_default();
        assert!((m.multiplier_at(0.5) - 2.3).abs() < 1e-12);
        assert!((m.multiplier_at(0.9) - 3.5).abs() < 1e-12);
        assert!((m.multiplier_at(0.99) - 5.0).abs() < 1e-12);
        // Low edge pinned at 1.0, interpolation in between, clamp past the end.
        assert!((m.multiplier_at(0.0) - 1.0).abs() < 1e-12);
        assert!((m.multiplier_at(0.25) - 1.65).abs() < 1e-12);
        assert!((m.multiplier_at(0.999) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn affected_fraction_matches_monte_carlo_count() {
        let m = NoiseModel::cloud_default();
        let mut rng = RngStream::new(33, "noise");
        let n = 1_000_000;
        let inflated = (0..n)
            .filter(|_| m.draw_multiplier(&mut rng) > 1.0)
            .count();
        let fraction = inflated as f64 / n as f64;
        assert!((fraction - 0.100).abs() < 0.002, "fraction {fraction}");
    }

    #[test]
    fn storage_service_arithmetic() {
        // 10 MB at 100 MB/s (= 100 bytes/us) takes 100 ms.
        let kind = StageKind::Storage(StorageParams {
            rate: 100.0,
            concurrency: 1,
        });
        assert_eq!(kind.work_us(10_000_000, 1.0), 100_000);
        assert_eq!(kind.work_us(10_000_000, 5.0), 500_000);
    }

    #[test]
    fn link_serialization_arithmetic() {
        // 50 KB at 1 Gb/s (= 1000 bits/us) takes 400 us; packets are 12 us.
        let p = LinkParams {
            capacity: 1_000.0,
            packet_bytes: 1_500,
        };
        let kind = StageKind::Link(p);
        assert_eq!(kind.work_us(50_000, 1.0), 400);
        assert_eq!(p.packet_time_us(), 12);
    }

    #[test]
    fn cpu_work_scales_with_rate() {
        let kind = StageKind::Cpu(CpuParams {
            rate: 1.0,
            duplicate_queue_cap: Some(0),
        });
        assert_eq!(kind.work_us(250, 1.0), 250);
        let slow = StageKind::Cpu(CpuParams {
            rate: 0.1,
            duplicate_queue_cap: None,
        });
        assert_eq!(slow.work_us(250, 1.0), 2_500);
        assert_eq!(kind.duplicate_queue_cap(), Some(0));
    }
}

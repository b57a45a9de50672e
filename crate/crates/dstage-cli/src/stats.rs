//! Percentiles, stability classification, and per-run summaries.

use anyhow::{bail, Result};
use dstage_core::record::{BacklogSample, RequestRecord, RunOutput};

/// Nearest-rank percentile: the ceil(p/100 * n)-th smallest value.
pub fn percentile(values: &[u64], p: f64) -> Result<u64> {
    if values.is_empty() {
        bail!("percentile of empty input");
    }
    if !(p > 0.0 && p <= 100.0) {
        bail!("percentile p={p} out of (0, 100]");
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, n) - 1])
}

/// Stability verdict with its evidence.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilityVerdict {
    pub stable: bool,
    pub final_backlog: f64,
    /// Least-squares slope of the per-window backlog means, jobs/window.
    pub backlog_trend_slope: f64,
    pub completed_fraction: f64,
}

/// Number of aggregation windows over the arrival span.
pub const STABILITY_WINDOWS: usize = 20;
/// Leading fraction of windows discarded as warmup.
const WARMUP_FRACTION: f64 = 0.2;
/// Windows that must grow strictly for the trend prong.
const TREND_WINDOWS: usize = 5;
/// Final backlog must exceed this fraction of offered requests.
const BACKLOG_FRACTION: f64 = 0.05;
/// Completion threshold below which a run is unstable outright.
const COMPLETION_FLOOR: f64 = 0.95;

/// Aggregates raw backlog samples into per-window means over [0, span].
fn window_means(samples: &[BacklogSample], span_us: u64, windows: usize) -> Vec<f64> {
    let span = span_us.max(1);
    let mut acc = vec![(0.0f64, 0u64); windows];
    for s in samples.iter().filter(|s| s.at_us <= span) {
        let idx = ((s.at_us.saturating_mul(windows as u64)) / (span + 1)) as usize;
        acc[idx].0 += s.jobs as f64;
        acc[idx].1 += 1;
    }
    acc.into_iter()
        .filter(|(_, n)| *n > 0)
        .map(|(sum, n)| sum / n as f64)
        .collect()
}

fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mean_x;
        num += dx * (y - mean_y);
        den += dx * dx;
    }
    num / den
}

/// Classifies a run: unstable iff the backlog keeps growing through the end
/// of the offered-load window and ends above 5% of the offered requests, or
/// fewer than 95% of requests ever completed.
pub fn classify_stability(
    samples: &[BacklogSample],
    span_us: u64,
    offered: u64,
    completed: u64,
) -> StabilityVerdict {
    let means = window_means(samples, span_us, STABILITY_WINDOWS);
    let warmup = (means.len() as f64 * WARMUP_FRACTION) as usize;
    let post = &means[warmup.min(means.len())..];
    let completed_fraction = if offered == 0 {
        1.0
    } else {
        completed as f64 / offered as f64
    };
    let final_backlog = post.last().copied().unwrap_or(0.0);
    let backlog_trend_slope = slope(post);
    let tail = post.iter().rev().take(TREND_WINDOWS).rev().collect::<Vec<_>>();
    let growing = tail.len() >= TREND_WINDOWS && tail.windows(2).all(|w| w[1] > w[0]);
    let backlog_prong = growing && final_backlog > BACKLOG_FRACTION * offered as f64;
    let unstable = backlog_prong || completed_fraction < COMPLETION_FLOOR;
    StabilityVerdict {
        stable: !unstable,
        final_backlog,
        backlog_trend_slope,
        completed_fraction,
    }
}

pub fn classify_run(out: &RunOutput) -> StabilityVerdict {
    classify_stability(
        &out.backlog,
        out.last_arrival_us,
        out.totals.offered,
        out.totals.completed,
    )
}

/// One matrix row: RCT statistics for a (scheme, load, seed) cell.
/// Percentiles are absent for unstable cells.
#[derive(Clone, Debug)]
pub struct SummaryRow {
    pub scheme: String,
    pub load: f64,
    pub seed: u64,
    pub n: u64,
    pub mean_us: Option<f64>,
    pub p50_us: Option<u64>,
    pub p95_us: Option<u64>,
    pub p99_us: Option<u64>,
    pub p999_us: Option<u64>,
    pub stable: bool,
}

pub fn summarize(
    scheme: &str,
    load: f64,
    seed: u64,
    records: &[RequestRecord],
    verdict: &StabilityVerdict,
) -> SummaryRow {
    let rcts: Vec<u64> = records.iter().map(|r| r.rct_us).collect();
    let stats_available = verdict.stable && !rcts.is_empty();
    let pct = |p: f64| -> Option<u64> {
        if stats_available {
            percentile(&rcts, p).ok()
        } else {
            None
        }
    };
    SummaryRow {
        scheme: scheme.to_string(),
        load,
        seed,
        n: records.len() as u64,
        mean_us: if stats_available {
            Some(rcts.iter().sum::<u64>() as f64 / rcts.len() as f64)
        } else {
            None
        },
        p50_us: pct(50.0),
        p95_us: pct(95.0),
        p99_us: pct(99.0),
        p999_us: pct(99.9),
        stable: verdict.stable,
    }
}

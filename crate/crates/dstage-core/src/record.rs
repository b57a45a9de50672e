//! Per-request outcome rows and whole-run outputs.

use alloc::string::String;
use alloc::vec::Vec;

use crate::job::JobClass;
use crate::sim::SimTime;

/// Size class of a request, by object size.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
    Fixed,
}

impl SizeClass {
    /// Class boundaries: small < 100 KB, medium 100 KB - 10 MB, large > 10 MB.
    pub fn of_bytes(bytes: u64) -> SizeClass {
        if bytes < 100_000 {
            SizeClass::Small
        } else if bytes <= 10_000_000 {
            SizeClass::Medium
        } else {
            SizeClass::Large
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
            SizeClass::Fixed => "fixed",
        }
    }
}

/// One completed logical request.
#[derive(Clone, Debug)]
pub struct RequestRecord {
    pub request_id: u64,
    pub arrival_us: u64,
    pub completion_us: u64,
    pub rct_us: u64,
    /// Scheme token that actually drove this request (mixed populations may
    /// differ per request).
    pub scheme: &'static str,
    pub load: f64,
    pub served_by: JobClass,
    pub size_class: SizeClass,
    pub purges_issued: u32,
    /// Population group (0 = baseline class in mixed runs).
    pub group: u8,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunTotals {
    /// Logical requests offered.
    pub offered: u64,
    /// Logical requests completed (recorded).
    pub completed: u64,
    /// Job copies dispatched into the entry stage (including restarts).
    pub copies_issued: u64,
    /// Job copies removed by purges anywhere in the pipeline.
    pub copies_purged: u64,
    /// Duplicate copies dropped by a full duplicate queue.
    pub duplicates_dropped: u64,
}

/// Backlog sample: live request copies resident anywhere in the pipeline.
#[derive(Clone, Copy, Debug)]
pub struct BacklogSample {
    pub at_us: u64,
    pub jobs: u64,
}

/// Throttler outcome for one proxy stage.
#[derive(Clone, Debug)]
pub struct ProxyReport {
    pub node: usize,
    pub n_star: Option<usize>,
    pub exploiting: bool,
    pub windows: u64,
    /// Probe windows consumed before settling.
    pub settled_after: Option<u64>,
    pub smoothed_rate: Option<f64>,
    /// (level, measured rate) pairs from the probing phase.
    pub history: Vec<(usize, f64)>,
}

/// Per-stage accounting for conservation checks.
#[derive(Clone, Debug)]
pub struct StageReport {
    pub node: usize,
    pub label: String,
    pub dispatched: u64,
    pub completed: u64,
    pub purged: u64,
    pub released: u64,
    pub resident: u64,
    /// Service completions split by job class (primary, duplicate).
    pub served_primary: u64,
    pub served_duplicate: u64,
}

/// Everything a finished (or truncated) run reports.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<RequestRecord>,
    pub totals: RunTotals,
    pub backlog: Vec<BacklogSample>,
    pub stages: Vec<StageReport>,
    pub proxies: Vec<ProxyReport>,
    /// Natural completion times of primary copies (request_id, completion).
    pub primary_completions: Vec<(u64, u64)>,
    /// Jobs still resident anywhere at the end of the run.
    pub residual_jobs: u64,
    /// When the last request arrived (stability windows cover [0, here]).
    pub last_arrival_us: u64,
    pub ended_at: SimTime,
    /// True when the run hit its horizon before draining.
    pub truncated: bool,
}

impl RunOutput {
    pub fn completed_fraction(&self) -> f64 {
        if self.totals.offered == 0 {
            return 1.0;
        }
        self.totals.completed as f64 / self.totals.offered as f64
    }

    pub fn rcts_us(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.rct_us).collect()
    }
}

//! Jobs and the metadata that travels with them across stages.
//!
//! A logical request fans out into one or more job copies. The metadata
//! carries everything a stage needs to treat the copy correctly: identity,
//! priority, class, release time, demand, and the lifecycle actions to run
//! when the copy is dispatched, starts service, or finishes.

use alloc::vec::Vec;
use core::fmt;

use crate::sim::SimTime;

/// Identifies one copy of one logical request. All copies of a request share
/// `request_id`; `(request_id, copy_index)` is unique for a run.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct JobId {
    pub request_id: u64,
    pub copy_index: u8,
}

impl JobId {
    pub fn new(request_id: u64, copy_index: u8) -> Self {
        JobId {
            request_id,
            copy_index,
        }
    }

    pub fn primary(request_id: u64) -> Self {
        JobId::new(request_id, 0)
    }

    pub fn is_primary_copy(self) -> bool {
        self.copy_index == 0
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.request_id, self.copy_index)
    }
}

/// Scheduling priority; lower level = higher priority. Level 0 is the
/// primary class, level 1 the duplicate class by convention.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct Priority(pub u8);

impl Priority {
    pub const PRIMARY: Priority = Priority(0);
    pub const DUPLICATE: Priority = Priority(1);

    pub fn level(self) -> usize {
        self.0 as usize
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum JobClass {
    Primary,
    Duplicate,
}

/// Stage identifier; index into the cluster's stage table.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct StageId(pub u32);

impl StageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Replica / node identifier within a scenario.
#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct ReplicaId(pub u32);

/// Plan for one duplicate copy, produced by the policy and consumed exactly
/// once by the dispatcher of the duplicating stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyPlan {
    pub job_id: JobId,
    pub priority: Priority,
    pub class: JobClass,
    /// Absolute time before which the copy must not be scheduled.
    pub sched_time: SimTime,
    pub target: ReplicaId,
}

/// Action to run when a copy first enters service at a marked stage.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum StartAction {
    None,
    /// Tied requests: purge the counterpart copy unless it already started.
    PurgeCounterpart,
}

/// Action to run when a copy completes its final stage.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum EndAction {
    /// Report completion to the request's policy state (winner logic).
    ReportCompletion,
}

/// Metadata carried by every job copy across stages.
#[derive(Clone, Debug)]
pub struct JobMetadata {
    pub job_id: JobId,
    pub priority: Priority,
    pub job_class: JobClass,
    /// Arrival time of the logical request into the system.
    pub start_time: SimTime,
    /// Time before which the job must not be scheduled (delay-queue release).
    pub sched_time: SimTime,
    /// Resource demand: bytes for storage/network stages, CPU-us for
    /// processing stages.
    pub demand: u64,
    /// Copies to create when the duplicating stage dispatches this job.
    /// Always empty for duplicate-class jobs.
    pub duplication: Vec<CopyPlan>,
    pub at_start: StartAction,
    pub at_end: EndAction,
}

impl JobMetadata {
    /// Checks the structural invariants that every metadata must satisfy.
    pub fn validate(&self) -> Result<(), MetadataError> {
        if self.sched_time < self.start_time {
            return Err(MetadataError::SchedBeforeStart);
        }
        if self.job_class == JobClass::Duplicate && !self.duplication.is_empty() {
            return Err(MetadataError::DuplicateWouldDuplicate);
        }
        Ok(())
    }
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum MetadataError {
    SchedBeforeStart,
    DuplicateWouldDuplicate,
}

impl fmt::Display for MetadataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetadataError::SchedBeforeStart => {
                write!(f, "sched_time precedes the request start_time")
            }
            MetadataError::DuplicateWouldDuplicate => {
                write!(f, "duplicate-class job carries a duplication plan")
            }
        }
    }
}

/// Selector of a purge request: either explicit ids or everything that
/// arrived before a cutoff. Evaluation is pure.
#[derive(Clone, Debug)]
pub enum PurgeSelector {
    Ids(Vec<JobId>),
    StartedBefore(SimTime),
}

impl PurgeSelector {
    pub fn matches(&self, id: JobId, start_time: SimTime) -> bool {
        match self {
            PurgeSelector::Ids(ids) => ids.contains(&id),
            PurgeSelector::StartedBefore(cutoff) => start_time < *cutoff,
        }
    }
}

/// A purge instruction, optionally cascading to downstream stages.
#[derive(Clone, Debug)]
pub struct PurgeRequest {
    pub selector: PurgeSelector,
    pub cascade: bool,
}

impl PurgeRequest {
    pub fn ids(ids: Vec<JobId>, cascade: bool) -> Self {
        PurgeRequest {
            selector: PurgeSelector::Ids(ids),
            cascade,
        }
    }

    pub fn one(id: JobId, cascade: bool) -> Self {
        PurgeRequest::ids(alloc::vec![id], cascade)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metadata_invariants_are_enforced() {
        let mut meta = JobMetadata {
            job_id: JobId::new(1, 1),
            priority: Priority::DUPLICATE,
            job_class: JobClass::Duplicate,
            start_time: SimTime(100),
            sched_time: SimTime(100),
            demand: 10,
            duplication: Vec::new(),
            at_start: StartAction::None,
            at_end: EndAction::ReportCompletion,
        };
        assert!(meta.validate().is_ok());

        meta.sched_time = SimTime(99);
        assert_eq!(meta.validate(), Err(MetadataError::SchedBeforeStart));
        meta.sched_time = SimTime(100);

        meta.duplication.push(CopyPlan {
            job_id: JobId::new(1, 2),
            priority: Priority::DUPLICATE,
            class: JobClass::Duplicate,
            sched_time: SimTime(100),
            target: ReplicaId(0),
        });
        assert_eq!(meta.validate(), Err(MetadataError::DuplicateWouldDuplicate));
    }

    #[test]
    fn purge_selectors_are_pure_predicates() {
        let sel = PurgeSelector::Ids(alloc::vec![JobId::new(1, 0), JobId::new(1, 1)]);
        assert!(sel.matches(JobId::new(1, 0), SimTime(0)));
        assert!(!sel.matches(JobId::new(2, 0), SimTime(0)));

        let cutoff = PurgeSelector::StartedBefore(SimTime(50));
        assert!(cutoff.matches(JobId::new(9, 0), SimTime(49)));
        assert!(!cutoff.matches(JobId::new(9, 0), SimTime(50)));
    }
}

//! Duplication policies: how a logical request fans out into job copies and
//! what happens when copies start, finish, or time out.
//!
//! Schemes:
//! - `single`: one copy, no duplication.
//! - `cloning`: duplicate immediately at equal priority, never purge.
//! - `cloning-prio`: duplicate immediately at lower priority, never purge.
//! - `das`: duplicate immediately at strictly lower priority, purge the
//!   losing copies as soon as one completes.
//! - `hedged`: issue the duplicate (equal priority) only after a latency
//!   threshold; purge the loser on completion.
//! - `appto`: timeout-restart — purge the first copy at the timeout and
//!   reissue to the alternate replica; purge the loser on completion.
//! - `tied`: duplicate immediately at equal priority; whichever copy first
//!   reaches service purges its counterpart.

use alloc::vec::Vec;
use core::fmt;

use crate::job::{CopyPlan, EndAction, JobClass, JobId, Priority, ReplicaId, StartAction};
use crate::sim::SimTime;

/// Which duplication scheme drives a request, with its parameters.
#[derive(Copy, Clone, PartialEq, Debug)]
pub enum SchemeKind {
    SingleCopy,
    Cloning,
    CloningPrio,
    Das,
    Hedged { threshold_us: u64 },
    AppTo { timeout_us: u64 },
    Tied,
}

impl SchemeKind {
    /// Canonical token used in config files and CSV output.
    pub fn token(&self) -> &'static str {
        match self {
            SchemeKind::SingleCopy => "single",
            SchemeKind::Cloning => "cloning",
            SchemeKind::CloningPrio => "cloning-prio",
            SchemeKind::Das => "das",
            SchemeKind::Hedged { .. } => "hedged",
            SchemeKind::AppTo { .. } => "appto",
            SchemeKind::Tied => "tied",
        }
    }

    /// Does this scheme create a duplicate copy at dispatch time?
    pub fn duplicates_upfront(&self) -> bool {
        matches!(
            self,
            SchemeKind::Cloning | SchemeKind::CloningPrio | SchemeKind::Das | SchemeKind::Tied
        )
    }

    /// Does the scheme send any duplicate at all?
    pub fn duplicating(&self) -> bool {
        !matches!(self, SchemeKind::SingleCopy)
    }

    /// Priority level of the duplicate copy. Cloning, hedged and tied run
    /// duplicates at the primary's level; only the prioritizing schemes
    /// demote them.
    pub fn duplicate_priority(&self) -> Priority {
        match self {
            SchemeKind::CloningPrio | SchemeKind::Das => Priority::DUPLICATE,
            _ => Priority::PRIMARY,
        }
    }

    /// Does completion of one copy purge the others?
    pub fn purges_on_complete(&self) -> bool {
        matches!(
            self,
            SchemeKind::Das | SchemeKind::Hedged { .. } | SchemeKind::AppTo { .. }
        )
    }

    fn start_action(&self) -> StartAction {
        match self {
            SchemeKind::Tied => StartAction::PurgeCounterpart,
            _ => StartAction::None,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.token())
    }
}

/// Rule for picking primary/secondary replicas out of a request's replica
/// set. Picks are drawn at workload-generation time so they are identical
/// across schemes under one seed.
#[derive(Copy, Clone, PartialEq, Eq, Debug, Default)]
pub enum ReplicaPicker {
    #[default]
    UniformRandom,
}

/// A duplication policy: scheme plus replica-picking rule.
#[derive(Copy, Clone, PartialEq, Debug)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub replica_picker: ReplicaPicker,
}

impl SchemeSpec {
    pub fn new(kind: SchemeKind) -> Self {
        SchemeSpec {
            kind,
            replica_picker: ReplicaPicker::UniformRandom,
        }
    }

    pub fn validate(&self) -> Result<(), ExpandError> {
        match self.kind {
            SchemeKind::Hedged { threshold_us } if threshold_us == 0 => {
                Err(ExpandError::BadParameter)
            }
            SchemeKind::AppTo { timeout_us } if timeout_us == 0 => Err(ExpandError::BadParameter),
            _ => Ok(()),
        }
    }
}

/// One logical request as generated by the workload: arrival, demand, and
/// the (scheme-independent) replica choices.
#[derive(Clone, Debug)]
pub struct RequestDescriptor {
    pub request_id: u64,
    pub issue_time: SimTime,
    /// Demand in stage units (bytes for storage/network pipelines, CPU-us
    /// for processing pipelines).
    pub size: u64,
    pub replicas: Vec<ReplicaId>,
    pub primary: ReplicaId,
    pub secondary: ReplicaId,
    /// Population group for mixed-class runs (0 = baseline class).
    pub group: u8,
}

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum ExpandError {
    /// Duplicating scheme with fewer than two distinct replicas.
    NotEnoughReplicas,
    BadParameter,
}

impl fmt::Display for ExpandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpandError::NotEnoughReplicas => {
                write!(f, "duplicating scheme needs at least 2 distinct replicas")
            }
            ExpandError::BadParameter => write!(f, "scheme parameter must be positive"),
        }
    }
}

/// Output of expanding a request: the copies to dispatch now (or delayed via
/// `sched_time`) plus an optional policy timer.
#[derive(Clone, Debug)]
pub struct Expansion {
    pub copies: Vec<CopyPlan>,
    pub timer_at: Option<SimTime>,
}

/// Turns one request descriptor into its initial set of job copies.
pub fn expand_request(
    scheme: &SchemeSpec,
    req: &RequestDescriptor,
    now: SimTime,
) -> Result<Expansion, ExpandError> {
    scheme.validate()?;
    if scheme.kind.duplicating() && req.primary == req.secondary {
        return Err(ExpandError::NotEnoughReplicas);
    }
    let primary = CopyPlan {
        job_id: JobId::primary(req.request_id),
        priority: Priority::PRIMARY,
        class: JobClass::Primary,
        sched_time: now,
        target: req.primary,
    };
    let duplicate = |sched_time: SimTime| CopyPlan {
        job_id: JobId::new(req.request_id, 1),
        priority: scheme.kind.duplicate_priority(),
        class: JobClass::Duplicate,
        sched_time,
        target: req.secondary,
    };
    let mut copies = alloc::vec![primary];
    let mut timer_at = None;
    match scheme.kind {
        SchemeKind::SingleCopy => {}
        SchemeKind::Cloning | SchemeKind::CloningPrio | SchemeKind::Das | SchemeKind::Tied => {
            copies.push(duplicate(now));
        }
        SchemeKind::Hedged { threshold_us } => {
            copies.push(duplicate(now + threshold_us));
        }
        SchemeKind::AppTo { timeout_us } => {
            timer_at = Some(now + timeout_us);
        }
    }
    Ok(Expansion { copies, timer_at })
}

/// Lifecycle actions attached to every copy of a request under a scheme.
pub fn lifecycle_actions(scheme: &SchemeSpec) -> (StartAction, EndAction) {
    (scheme.kind.start_action(), EndAction::ReportCompletion)
}

/// Per-request policy bookkeeping while copies are in flight.
#[derive(Clone, Debug)]
pub struct RequestState {
    pub request_id: u64,
    pub issue_time: SimTime,
    pub scheme: SchemeSpec,
    pub copies_outstanding: Vec<JobId>,
    pub winner: Option<JobId>,
    /// First service start per copy at the tied-trigger stage.
    pub started: Vec<(JobId, SimTime)>,
    pub purges_issued: u32,
    /// Replica for a timeout restart.
    pub restart_target: ReplicaId,
    pub restarted: bool,
}

impl RequestState {
    pub fn new(scheme: SchemeSpec, req: &RequestDescriptor, expansion: &Expansion) -> Self {
        RequestState {
            request_id: req.request_id,
            issue_time: req.issue_time,
            scheme,
            copies_outstanding: expansion.copies.iter().map(|c| c.job_id).collect(),
            winner: None,
            started: Vec::new(),
            purges_issued: 0,
            restart_target: req.secondary,
            restarted: false,
        }
    }

    pub fn resolved(&self) -> bool {
        self.winner.is_some()
    }

    fn counterpart(&self, of: JobId) -> Option<JobId> {
        self.copies_outstanding
            .iter()
            .copied()
            .find(|id| *id != of)
    }

    fn start_time_of(&self, id: JobId) -> Option<SimTime> {
        self.started.iter().find(|(j, _)| *j == id).map(|&(_, t)| t)
    }
}

/// What the driver must do after a copy completes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompleteOutcome {
    /// First completion: record the request and purge the listed copies.
    Winner {
        winner: JobId,
        served_by: JobClass,
        rct_us: u64,
        purge: Vec<JobId>,
    },
    /// A later copy drained naturally; nothing to do.
    Ignored,
}

/// First completion wins; purging (for the schemes that purge) targets every
/// other outstanding copy with cascade set.
pub fn on_copy_complete(state: &mut RequestState, finished: JobId, now: SimTime) -> CompleteOutcome {
    state.copies_outstanding.retain(|id| *id != finished);
    if state.winner.is_some() {
        return CompleteOutcome::Ignored;
    }
    state.winner = Some(finished);
    let purge = if state.scheme.kind.purges_on_complete() {
        let others = state.copies_outstanding.clone();
        state.purges_issued += others.len() as u32;
        others
    } else {
        Vec::new()
    };
    let served_by = if finished.is_primary_copy() {
        JobClass::Primary
    } else {
        JobClass::Duplicate
    };
    CompleteOutcome::Winner {
        winner: finished,
        served_by,
        rct_us: now - state.issue_time,
        purge,
    }
}

/// What the driver must do when a policy timer fires.
#[derive(Clone, Debug, PartialEq)]
pub enum TimerOutcome {
    /// Timeout restart: purge the first copy, issue a fresh one.
    Restart { purge: JobId, copy: CopyPlan },
    Noop,
}

pub fn on_policy_timer(state: &mut RequestState, now: SimTime) -> TimerOutcome {
    if state.resolved() || state.restarted {
        return TimerOutcome::Noop;
    }
    match state.scheme.kind {
        SchemeKind::AppTo { .. } => {
            let first = JobId::primary(state.request_id);
            if !state.copies_outstanding.contains(&first) {
                return TimerOutcome::Noop;
            }
            state.restarted = true;
            state.purges_issued += 1;
            let copy = CopyPlan {
                job_id: JobId::new(state.request_id, 1),
                priority: Priority::PRIMARY,
                class: JobClass::Duplicate,
                sched_time: now,
                target: state.restart_target,
            };
            state.copies_outstanding.retain(|id| *id != first);
            state.copies_outstanding.push(copy.job_id);
            TimerOutcome::Restart { purge: first, copy }
        }
        // Hedged delayed dispatch is handled by the core delay queue; no
        // other scheme arms timers.
        _ => TimerOutcome::Noop,
    }
}

/// What the driver must do when a copy first enters service at the
/// bottleneck stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StartOutcome {
    PurgeCounterpart(JobId),
    Noop,
}

/// Tied rule: the first copy to reach service purges its counterpart; if
/// both started, the earlier start stands, and a dead heat keeps copy 0.
pub fn on_copy_start(state: &mut RequestState, started: JobId, now: SimTime) -> StartOutcome {
    if state.start_time_of(started).is_none() {
        state.started.push((started, now));
    }
    if state.scheme.kind != SchemeKind::Tied || state.resolved() {
        return StartOutcome::Noop;
    }
    let Some(other) = state.counterpart(started) else {
        return StartOutcome::Noop;
    };
    let purge = match state.start_time_of(other) {
        None => true,
        Some(t) if t == now && started.is_primary_copy() => true,
        Some(_) => false,
    };
    if purge {
        state.purges_issued += 1;
        StartOutcome::PurgeCounterpart(other)
    } else {
        StartOutcome::Noop
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn descriptor(id: u64) -> RequestDescriptor {
        RequestDescriptor {
            request_id: id,
            issue_time: SimTime(1_000),
            size: 10_000_000,
            replicas: alloc::vec![ReplicaId(0), ReplicaId(1), ReplicaId(2)],
            primary: ReplicaId(0),
            secondary: ReplicaId(1),
            group: 1,
        }
    }

    fn expand(kind: SchemeKind) -> Expansion {
        expand_request(&SchemeSpec::new(kind), &descriptor(7), SimTime(1_000)).unwrap()
    }

    #[test]
    fn das_expands_to_prioritized_pair_on_distinct_replicas() {
        let e = expand(SchemeKind::Das);
        assert_eq!(e.copies.len(), 2);
        let p = &e.copies[0];
        let d = &e.copies[1];
        assert_eq!(p.job_id, JobId::new(7, 0));
        assert_eq!(p.priority, Priority::PRIMARY);
        assert_eq!(p.target, ReplicaId(0));
        assert_eq!(d.job_id, JobId::new(7, 1));
        assert_eq!(d.priority, Priority::DUPLICATE);
        assert_eq!(d.class, JobClass::Duplicate);
        assert_eq!(d.target, ReplicaId(1));
        assert!(e.timer_at.is_none());
    }

    #[test]
    fn single_copy_expands_to_one_level_zero_job() {
        let e = expand(SchemeKind::SingleCopy);
        assert_eq!(e.copies.len(), 1);
        assert_eq!(e.copies[0].priority, Priority::PRIMARY);
    }

    #[test]
    fn cloning_runs_both_copies_at_level_zero() {
        let e = expand(SchemeKind::Cloning);
        assert_eq!(e.copies[1].priority, Priority::PRIMARY);
        assert_eq!(e.copies[1].class, JobClass::Duplicate);
        // Tied likewise: no prioritization, purge-at-start instead.
        let t = expand(SchemeKind::Tied);
        assert_eq!(t.copies[1].priority, Priority::PRIMARY);
    }

    #[test]
    fn hedged_delays_the_duplicate_by_the_threshold() {
        let e = expand(SchemeKind::Hedged {
            threshold_us: 480_000,
        });
        assert_eq!(e.copies.len(), 2);
        assert_eq!(e.copies[1].sched_time, SimTime(481_000));
        assert_eq!(e.copies[1].priority, Priority::PRIMARY);
    }

    #[test]
    fn appto_arms_a_restart_timer_instead_of_a_copy() {
        let e = expand(SchemeKind::AppTo { timeout_us: 480_000 });
        assert_eq!(e.copies.len(), 1);
        assert_eq!(e.timer_at, Some(SimTime(481_000)));
    }

    #[test]
    fn duplicating_scheme_requires_distinct_replicas() {
        let mut req = descriptor(1);
        req.secondary = req.primary;
        let err = expand_request(&SchemeSpec::new(SchemeKind::Das), &req, SimTime::ZERO);
        assert_eq!(err.unwrap_err(), ExpandError::NotEnoughReplicas);
        // Single-copy does not care.
        assert!(expand_request(&SchemeSpec::new(SchemeKind::SingleCopy), &req, SimTime::ZERO).is_ok());
    }

    #[test]
    fn zero_thresholds_are_rejected() {
        assert_eq!(
            SchemeSpec::new(SchemeKind::Hedged { threshold_us: 0 }).validate(),
            Err(ExpandError::BadParameter)
        );
        assert_eq!(
            SchemeSpec::new(SchemeKind::AppTo { timeout_us: 0 }).validate(),
            Err(ExpandError::BadParameter)
        );
    }

    fn state_for(kind: SchemeKind) -> RequestState {
        let spec = SchemeSpec::new(kind);
        let req = descriptor(7);
        let e = expand_request(&spec, &req, req.issue_time).unwrap();
        RequestState::new(spec, &req, &e)
    }

    #[test]
    fn duplicate_finishing_first_wins_and_purges_primary() {
        let mut st = state_for(SchemeKind::Das);
        let out = on_copy_complete(&mut st, JobId::new(7, 1), SimTime(5_000));
        assert_eq!(
            out,
            CompleteOutcome::Winner {
                winner: JobId::new(7, 1),
                served_by: JobClass::Duplicate,
                rct_us: 4_000,
                purge: alloc::vec![JobId::new(7, 0)],
            }
        );
        // The primary's own completion later is discarded silently.
        let out = on_copy_complete(&mut st, JobId::new(7, 0), SimTime(6_000));
        assert_eq!(out, CompleteOutcome::Ignored);
        assert!(st.copies_outstanding.is_empty());
    }

    #[test]
    fn single_copy_winner_purges_nothing() {
        let mut st = state_for(SchemeKind::SingleCopy);
        match on_copy_complete(&mut st, JobId::new(7, 0), SimTime(2_000)) {
            CompleteOutcome::Winner { purge, .. } => assert!(purge.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cloning_never_purges_but_still_records_the_first_finisher() {
        let mut st = state_for(SchemeKind::Cloning);
        match on_copy_complete(&mut st, JobId::new(7, 1), SimTime(2_000)) {
            CompleteOutcome::Winner { purge, served_by, .. } => {
                assert!(purge.is_empty());
                assert_eq!(served_by, JobClass::Duplicate);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.copies_outstanding, alloc::vec![JobId::new(7, 0)]);
    }

    #[test]
    fn appto_timer_restarts_the_request_once() {
        let mut st = state_for(SchemeKind::AppTo { timeout_us: 480_000 });
        match on_policy_timer(&mut st, SimTime(481_000)) {
            TimerOutcome::Restart { purge, copy } => {
                assert_eq!(purge, JobId::new(7, 0));
                assert_eq!(copy.job_id, JobId::new(7, 1));
                assert_eq!(copy.priority, Priority::PRIMARY);
                assert_eq!(copy.target, ReplicaId(1));
            }
            TimerOutcome::Noop => panic!("expected restart"),
        }
        // Restart replaces, never adds: at most two copies ever existed.
        assert_eq!(st.copies_outstanding, alloc::vec![JobId::new(7, 1)]);
        assert_eq!(on_policy_timer(&mut st, SimTime(482_000)), TimerOutcome::Noop);
    }

    #[test]
    fn timer_after_completion_is_noop() {
        let mut st = state_for(SchemeKind::AppTo { timeout_us: 480_000 });
        on_copy_complete(&mut st, JobId::new(7, 0), SimTime(100_000));
        assert_eq!(on_policy_timer(&mut st, SimTime(481_000)), TimerOutcome::Noop);
    }

    #[test]
    fn tied_start_purges_the_counterpart_before_service() {
        let mut st = state_for(SchemeKind::Tied);
        assert_eq!(
            on_copy_start(&mut st, JobId::new(7, 0), SimTime(2_000)),
            StartOutcome::PurgeCounterpart(JobId::new(7, 1))
        );
    }

    #[test]
    fn tied_late_start_does_not_purge_an_already_started_copy() {
        let mut st = state_for(SchemeKind::Tied);
        on_copy_start(&mut st, JobId::new(7, 1), SimTime(2_000));
        assert_eq!(
            on_copy_start(&mut st, JobId::new(7, 0), SimTime(2_500)),
            StartOutcome::Noop
        );
    }

    #[test]
    fn tied_dead_heat_keeps_copy_zero() {
        let mut st = state_for(SchemeKind::Tied);
        let first = on_copy_start(&mut st, JobId::new(7, 1), SimTime(2_000));
        assert_eq!(first, StartOutcome::PurgeCounterpart(JobId::new(7, 0)));
        // Copy 0 nevertheless starts at the same instant (the purge had not
        // landed): the tie breaks in its favor.
        let second = on_copy_start(&mut st, JobId::new(7, 0), SimTime(2_000));
        assert_eq!(second, StartOutcome::PurgeCounterpart(JobId::new(7, 1)));
    }

    #[test]
    fn das_start_hook_is_noop() {
        let mut st = state_for(SchemeKind::Das);
        assert_eq!(
            on_copy_start(&mut st, JobId::new(7, 0), SimTime(2_000)),
            StartOutcome::Noop
        );
    }

    #[test]
    fn no_scheme_ever_exceeds_two_copies() {
        for kind in [
            SchemeKind::SingleCopy,
            SchemeKind::Cloning,
            SchemeKind::CloningPrio,
            SchemeKind::Das,
            SchemeKind::Hedged { threshold_us: 10 },
            SchemeKind::AppTo { timeout_us: 10 },
            SchemeKind::Tied,
        ] {
            let spec = SchemeSpec::new(kind);
            let req = descriptor(1);
            let e = expand_request(&spec, &req, req.issue_time).unwrap();
            let mut st = RequestState::new(spec, &req, &e);
            let mut seen: Vec<JobId> = e.copies.iter().map(|c| c.job_id).collect();
            if let TimerOutcome::Restart { copy, .. } =
                on_policy_timer(&mut st, req.issue_time + 1_000)
            {
                if !seen.contains(&copy.job_id) {
                    seen.push(copy.job_id);
                }
            }
            assert!(seen.len() <= 2, "{kind:?} created {} copies", seen.len());
        }
    }
}

//! The duplicate-aware stage: strict-priority FIFO queues, a delay queue for
//! deferred copies, preemptive-resume service slots, and purge support with
//! cascade bookkeeping.
//!
//! A stage owns queue entries and in-service slots; it decides *what* runs
//! and *when* service boundaries occur, and reports those decisions as
//! [`SchedCmd`]s for the driver to turn into events. Service timing math is
//! integer microseconds throughout, so preemptive-resume accounting is exact.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::vec::Vec;
use core::fmt;

use crate::job::{JobClass, JobId, PurgeRequest, StageId};
use crate::sim::SimTime;

/// What a purge may do to a job that is already in service.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum AbortPolicy {
    /// Remove it immediately, preserving nothing.
    Instant,
    /// Let the current service boundary (packet) finish, reclaim the rest.
    AtBoundary,
    /// The stage cannot revoke admitted work: service runs to completion
    /// and the output is discarded (an unmodifiable layer).
    Never,
}

/// One job copy as a stage sees it. `work_us` is the service this stage owes
/// the job, fixed when the job enters the stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageJob {
    pub id: JobId,
    pub class: JobClass,
    pub level: usize,
    /// Arrival time of the logical request (purge-selector matching).
    pub start_time: SimTime,
    /// Release time; jobs with `sched_time` in the future wait in the delay queue.
    pub sched_time: SimTime,
    pub work_us: u64,
    pub received_us: u64,
    pub started_before: bool,
}

impl StageJob {
    pub fn new(id: JobId, class: JobClass, level: usize, work_us: u64) -> Self {
        StageJob {
            id,
            class,
            level,
            start_time: SimTime::ZERO,
            sched_time: SimTime::ZERO,
            work_us,
            received_us: 0,
            started_before: false,
        }
    }

    pub fn remaining_us(&self) -> u64 {
        self.work_us - self.received_us
    }
}

/// Static configuration of a stage.
#[derive(Clone, Debug)]
pub struct StageCfg {
    /// Number of priority levels (2 covers every scheme here).
    pub levels: usize,
    /// Parallel service slots; `usize::MAX` means effectively unbounded.
    pub concurrency: usize,
    /// Whether a higher-priority arrival suspends lower-priority service.
    pub preemptive: bool,
    /// How purges treat in-service jobs.
    pub abort: AbortPolicy,
    /// Preemption/abort granularity in service microseconds. Zero means the
    /// stage can interrupt anywhere (ideal preemptive-resume); a link sets
    /// this to one packet serialization time.
    pub boundary_us: u64,
    /// Duplicate-aware flag. A non-aware (legacy) stage collapses every job
    /// to level 0 and ignores purge requests except for cascade forwarding.
    pub aware: bool,
}

impl StageCfg {
    pub fn aware_default() -> Self {
        StageCfg {
            levels: 2,
            concurrency: 1,
            preemptive: true,
            abort: AbortPolicy::Instant,
            boundary_us: 0,
            aware: true,
        }
    }
}

#[derive(Clone, Debug)]
struct ServiceSlot {
    job: StageJob,
    segment_start: SimTime,
    epoch: u64,
    /// Purge landed while in service on a non-abortable stage; the job is
    /// discarded at the next boundary instead of continuing.
    tombstone: bool,
    /// A boundary preemption check is already scheduled.
    boundary_pending: bool,
}

/// Instructions for the event-driver produced by scheduling decisions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchedCmd {
    /// Job (re)entered service; its completion fires at `at` unless the
    /// (slot, epoch) pair is invalidated first.
    Completion {
        id: JobId,
        slot: usize,
        epoch: u64,
        at: SimTime,
    },
    /// Check this slot for preemption/tombstone at the next service boundary.
    Boundary { slot: usize, epoch: u64, at: SimTime },
    /// The job entered service at this stage for the first time.
    FirstStart { id: JobId },
}

/// Where dispatch placed a job.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    Queued { level: usize },
    Delayed { release: SimTime },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DispatchError {
    /// Same (request_id, copy_index) is already present at this stage — a
    /// policy bug upstream.
    DuplicateJob(JobId),
}

impl fmt::Display for DispatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DispatchError::DuplicateJob(id) => write!(f, "job {id} dispatched twice to one stage"),
        }
    }
}

/// Result of applying a purge locally at one stage.
#[derive(Clone, Debug, Default)]
pub struct PurgeLocal {
    /// Jobs removed from queues, the delay queue, or aborted in service
    /// (including tombstoned link transfers).
    pub removed_ids: Vec<JobId>,
    /// Matching jobs that already left this stage; candidates for cascade.
    pub departed_matches: Vec<JobId>,
    /// Slots tombstoned by this purge that still need a boundary event.
    pub boundary_cmds: Vec<SchedCmd>,
    /// In-service jobs marked for later reclamation (at a boundary or at
    /// service completion) rather than removed outright.
    pub tombstoned: usize,
}

impl PurgeLocal {
    pub fn removed(&self) -> usize {
        self.removed_ids.len()
    }
}

/// Outcome of a completion event at a stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CompleteResult {
    /// The job finished its service here.
    Finished(StageJob),
    /// A tombstoned job reached its final boundary and was reclaimed.
    Dropped(JobId),
    /// The (slot, epoch) pair was invalidated; nothing happened.
    Stale,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StageCounters {
    pub dispatched: u64,
    pub completed: u64,
    pub purged: u64,
}

/// A bottleneck layer's duplicate-aware queueing structure.
pub struct DStage {
    pub stage_id: StageId,
    pub cfg: StageCfg,
    pub downstream: Vec<StageId>,
    queues: Vec<VecDeque<StageJob>>,
    delay: BTreeMap<(u64, u64), StageJob>,
    delay_tie: u64,
    slots: Vec<Option<ServiceSlot>>,
    epoch: u64,
    present: BTreeSet<JobId>,
    departed: BTreeSet<JobId>,
    pub counters: StageCounters,
}

impl DStage {
    pub fn new(stage_id: StageId, cfg: StageCfg) -> Self {
        let levels = cfg.levels.max(1);
        DStage {
            stage_id,
            cfg,
            downstream: Vec::new(),
            queues: (0..levels).map(|_| VecDeque::new()).collect(),
            delay: BTreeMap::new(),
            delay_tie: 0,
            slots: Vec::new(),
            epoch: 0,
            present: BTreeSet::new(),
            departed: BTreeSet::new(),
            counters: StageCounters::default(),
        }
    }

    /// Jobs currently resident (queued, delayed, or in service).
    pub fn population(&self) -> usize {
        self.present.len()
    }

    pub fn queued_len(&self) -> usize {
        self.queues.iter().map(|q| q.len()).sum()
    }

    pub fn delayed_len(&self) -> usize {
        self.delay.len()
    }

    pub fn in_service_len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn in_service_ids(&self) -> Vec<JobId> {
        self.slots
            .iter()
            .flatten()
            .map(|s| s.job.id)
            .collect()
    }

    pub fn contains(&self, id: JobId) -> bool {
        self.present.contains(&id)
    }

    pub fn next_delay_release(&self) -> Option<SimTime> {
        self.delay.keys().next().map(|&(t, _)| SimTime(t))
    }

    fn effective_level(&self, level: usize) -> usize {
        if self.cfg.aware {
            level.min(self.queues.len() - 1)
        } else {
            0
        }
    }

    /// Places one job into its priority queue, or into the delay queue when
    /// its release time lies in the future. Rejects ids already present.
    pub fn dispatch(&mut self, mut job: StageJob, now: SimTime) -> Result<Placement, DispatchError> {
        if self.present.contains(&job.id) {
            return Err(DispatchError::DuplicateJob(job.id));
        }
        self.present.insert(job.id);
        self.departed.remove(&job.id);
        self.counters.dispatched += 1;
        job.level = self.effective_level(job.level);
        if job.sched_time > now {
            let release = job.sched_time;
            let tie = self.delay_tie;
            self.delay_tie += 1;
            self.delay.insert((release.as_us(), tie), job);
            Ok(Placement::Delayed { release })
        } else {
            let level = job.level;
            self.queues[level].push_back(job);
            Ok(Placement::Queued { level })
        }
    }

    /// Moves every delayed job whose release time has arrived into its
    /// priority queue. Returns how many were promoted.
    pub fn tick_delay_queue(&mut self, now: SimTime) -> usize {
        let mut promoted = 0;
        while let Some((&(t, tie), _)) = self.delay.first_key_value() {
            if t > now.as_us() {
                break;
            }
            let job = self.delay.remove(&(t, tie)).unwrap();
            self.queues[job.level].push_back(job);
            promoted += 1;
        }
        promoted
    }

    fn highest_waiting_level(&self) -> Option<usize> {
        self.queues.iter().position(|q| !q.is_empty())
    }

    fn free_slot(&mut self) -> Option<usize> {
        if let Some(i) = self.slots.iter().position(|s| s.is_none()) {
            return Some(i);
        }
        if self.slots.len() < self.cfg.concurrency {
            self.slots.push(None);
            return Some(self.slots.len() - 1);
        }
        None
    }

    /// Preemption victim: worst level first, then the most recently started
    /// segment, then the highest slot index. Deterministic.
    fn victim_slot(&self) -> Option<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (s.job.level, s.segment_start, i)))
            .max_by_key(|&(level, started, i)| (level, started, i))
            .map(|(_, _, i)| i)
    }

    fn start_in_slot(&mut self, slot: usize, mut job: StageJob, now: SimTime, out: &mut Vec<SchedCmd>) {
        self.epoch += 1;
        let epoch = self.epoch;
        if !job.started_before {
            job.started_before = true;
            out.push(SchedCmd::FirstStart { id: job.id });
        }
        let remaining = job.remaining_us();
        out.push(SchedCmd::Completion {
            id: job.id,
            slot,
            epoch,
            at: now + remaining,
        });
        self.slots[slot] = Some(ServiceSlot {
            job,
            segment_start: now,
            epoch,
            tombstone: false,
            boundary_pending: false,
        });
    }

    /// Suspends the slot's job with its remaining demand preserved and puts
    /// it back at the head of its level queue.
    fn suspend_slot(&mut self, slot: usize, now: SimTime) {
        let s = self.slots[slot].take().expect("suspending empty slot");
        let mut job = s.job;
        let served = now - s.segment_start;
        job.received_us += served;
        debug_assert!(job.received_us <= job.work_us);
        self.queues[job.level].push_front(job);
    }

    /// Work-conserving strict-priority scheduling pass. Fills free slots from
    /// the highest non-empty level and arranges preemption when a strictly
    /// higher-priority job waits behind lower-priority service.
    pub fn reschedule(&mut self, now: SimTime) -> Vec<SchedCmd> {
        let mut out = Vec::new();
        loop {
            // Fill free capacity first: the stage never idles while released
            // work is queued.
            while let Some(level) = self.highest_waiting_level() {
                match self.free_slot() {
                    Some(slot) => {
                        let job = self.queues[level].pop_front().unwrap();
                        self.start_in_slot(slot, job, now, &mut out);
                    }
                    None => break,
                }
            }
            let Some(wait_level) = self.highest_waiting_level() else {
                break;
            };
            if !self.cfg.preemptive {
                break;
            }
            let Some(victim) = self.victim_slot() else {
                break;
            };
            let victim_level = self.slots[victim].as_ref().unwrap().job.level;
            if victim_level <= wait_level {
                break;
            }
            if self.cfg.boundary_us == 0 {
                self.suspend_slot(victim, now);
                continue;
            }
            // Packet-granular stage: suspend at the next service boundary.
            let s = self.slots[victim].as_mut().unwrap();
            if !s.boundary_pending {
                s.boundary_pending = true;
                let at = next_boundary(s.segment_start, now, self.cfg.boundary_us);
                if at == now {
                    self.suspend_slot(victim, now);
                    continue;
                }
                out.push(SchedCmd::Boundary {
                    slot: victim,
                    epoch: s.epoch,
                    at,
                });
            }
            break;
        }
        out
    }

    /// Handles a boundary event: drops a tombstoned transfer or performs the
    /// deferred preemption if a higher-priority job still waits. Returns the
    /// dropped job id, if any, plus follow-up scheduling commands.
    pub fn on_boundary(
        &mut self,
        slot: usize,
        epoch: u64,
        now: SimTime,
    ) -> (Option<JobId>, Vec<SchedCmd>) {
        let valid = matches!(&self.slots.get(slot), Some(Some(s)) if s.epoch == epoch);
        if !valid {
            return (None, Vec::new());
        }
        let tombstoned = self.slots[slot].as_ref().unwrap().tombstone;
        if tombstoned {
            let s = self.slots[slot].take().unwrap();
            self.present.remove(&s.job.id);
            self.counters.purged += 1;
            return (Some(s.job.id), self.reschedule(now));
        }
        self.slots[slot].as_mut().unwrap().boundary_pending = false;
        let victim_level = self.slots[slot].as_ref().unwrap().job.level;
        if let Some(wait) = self.highest_waiting_level() {
            if wait < victim_level {
                self.suspend_slot(slot, now);
            }
        }
        (None, self.reschedule(now))
    }

    /// Handles a completion event.
    pub fn complete(&mut self, slot: usize, epoch: u64, now: SimTime) -> CompleteResult {
        match self.slots.get(slot) {
            Some(Some(s)) if s.epoch == epoch => {}
            _ => return CompleteResult::Stale,
        }
        let s = self.slots[slot].take().unwrap();
        let mut job = s.job;
        if s.tombstone {
            // Purged during its last service boundary; reclaim instead of
            // delivering downstream.
            self.present.remove(&job.id);
            self.counters.purged += 1;
            return CompleteResult::Dropped(job.id);
        }
        job.received_us += now - s.segment_start;
        debug_assert_eq!(job.received_us, job.work_us, "preemptive-resume accounting");
        self.present.remove(&job.id);
        self.departed.insert(job.id);
        self.counters.completed += 1;
        CompleteResult::Finished(job)
    }

    /// Pops the head of the highest-priority non-empty queue, releasing it
    /// from this stage's control (proxy admission path).
    pub fn pop_released(&mut self) -> Option<StageJob> {
        let level = self.highest_waiting_level()?;
        let job = self.queues[level].pop_front().unwrap();
        self.present.remove(&job.id);
        self.departed.insert(job.id);
        Some(job)
    }

    pub fn queued_at_level(&self, level: usize) -> usize {
        self.queues.get(level).map_or(0, |q| q.len())
    }

    /// Rescales the remaining service of every resident job by `factor`
    /// (new service time = old * factor), reflecting a change in the
    /// stage's effective rate. In-service jobs fold their elapsed segment
    /// into the books and get fresh completion events.
    pub fn rescale_remaining(&mut self, factor: f64, now: SimTime) -> Vec<SchedCmd> {
        let scale = |rem: u64| -> u64 {
            if rem == 0 {
                0
            } else {
                (libm::ceil(rem as f64 * factor) as u64).max(1)
            }
        };
        for q in &mut self.queues {
            for j in q.iter_mut() {
                j.work_us = j.received_us + scale(j.remaining_us());
            }
        }
        for j in self.delay.values_mut() {
            j.work_us = j.received_us + scale(j.remaining_us());
        }
        let mut out = Vec::new();
        for slot in 0..self.slots.len() {
            let Some(s) = &mut self.slots[slot] else { continue };
            let elapsed = now - s.segment_start;
            s.job.received_us += elapsed;
            s.job.work_us = s.job.received_us + scale(s.job.remaining_us());
            s.segment_start = now;
            self.epoch += 1;
            s.epoch = self.epoch;
            out.push(SchedCmd::Completion {
                id: s.job.id,
                slot,
                epoch: s.epoch,
                at: now + s.job.remaining_us(),
            });
        }
        out
    }

    /// Applies a purge at this stage: matching jobs leave the priority and
    /// delay queues; an in-service match is aborted, reclaimed at the next
    /// service boundary, or orphaned to finish and be discarded, per the
    /// stage's abort policy.
    pub fn purge(&mut self, request: &PurgeRequest, now: SimTime) -> PurgeLocal {
        let mut report = PurgeLocal::default();
        if self.cfg.aware {
            for q in &mut self.queues {
                q.retain(|j| {
                    let hit = request.selector.matches(j.id, j.start_time);
                    if hit {
                        self.present.remove(&j.id);
                        report.removed_ids.push(j.id);
                    }
                    !hit
                });
            }
            let delayed: Vec<(u64, u64)> = self
                .delay
                .iter()
                .filter(|(_, j)| request.selector.matches(j.id, j.start_time))
                .map(|(&k, _)| k)
                .collect();
            for k in delayed {
                let j = self.delay.remove(&k).unwrap();
                self.present.remove(&j.id);
                report.removed_ids.push(j.id);
            }
            for slot in 0..self.slots.len() {
                let Some(s) = &self.slots[slot] else { continue };
                if !request.selector.matches(s.job.id, s.job.start_time) {
                    continue;
                }
                match self.cfg.abort {
                    AbortPolicy::Instant => {
                        let s = self.slots[slot].take().unwrap();
                        self.present.remove(&s.job.id);
                        report.removed_ids.push(s.job.id);
                    }
                    AbortPolicy::AtBoundary => {
                        let boundary_us = self.cfg.boundary_us;
                        let s = self.slots[slot].as_mut().unwrap();
                        if !s.tombstone {
                            s.tombstone = true;
                            report.removed_ids.push(s.job.id);
                            report.tombstoned += 1;
                            let at = next_boundary(s.segment_start, now, boundary_us.max(1));
                            report.boundary_cmds.push(SchedCmd::Boundary {
                                slot,
                                epoch: s.epoch,
                                at,
                            });
                        }
                    }
                    AbortPolicy::Never => {
                        // The scheduled completion fires normally and the
                        // job is dropped there instead of moving on.
                        let s = self.slots[slot].as_mut().unwrap();
                        if !s.tombstone {
                            s.tombstone = true;
                            report.removed_ids.push(s.job.id);
                            report.tombstoned += 1;
                        }
                    }
                }
            }
            self.counters.purged += (report.removed_ids.len() - report.tombstoned) as u64;
        }
        // Cascade candidates are matching jobs that already moved downstream;
        // forwarding clears the bookkeeping so it happens at most once.
        match &request.selector {
            crate::job::PurgeSelector::Ids(ids) => {
                for id in ids {
                    if self.departed.remove(id) {
                        report.departed_matches.push(*id);
                    }
                }
            }
            crate::job::PurgeSelector::StartedBefore(_) => {
                // Start-time predicates cannot consult departed jobs'
                // metadata here; forward unconditionally.
                report.departed_matches.extend(self.departed.iter().copied());
                self.departed.clear();
            }
        }
        report
    }

    /// Drops per-request bookkeeping once a request is fully resolved.
    pub fn forget(&mut self, id: JobId) {
        self.departed.remove(&id);
    }

    pub fn departed_len(&self) -> usize {
        self.departed.len()
    }
}

fn next_boundary(segment_start: SimTime, now: SimTime, boundary_us: u64) -> SimTime {
    if boundary_us == 0 {
        return now;
    }
    let elapsed = now - segment_start;
    let k = elapsed.div_ceil(boundary_us);
    segment_start + k * boundary_us
}

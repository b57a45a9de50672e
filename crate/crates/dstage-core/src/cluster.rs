//! The simulation runtime: a pipeline of stages, the event loop that routes
//! job copies along their paths, and the policy driver that reacts to
//! completions, timers, and service starts.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::job::{
    CopyPlan, JobClass, JobId, PurgeRequest, ReplicaId, StageId, StartAction,
};
use crate::policy::{
    self, CompleteOutcome, RequestDescriptor, RequestState, SchemeKind, SchemeSpec, StartOutcome,
    TimerOutcome,
};
use crate::proxy::{Phase, ThrottlerConfig, ThrottlerState};
use crate::record::{
    BacklogSample, ProxyReport, RequestRecord, RunOutput, RunTotals, SizeClass, StageReport,
};
use crate::resources::{NoiseMode, NoiseModel, StageKind};
use crate::scenario::Topology;
use crate::sim::{EventKey, EventQueue, RngStream, SimTime};
use crate::stage::{AbortPolicy, CompleteResult, DStage, SchedCmd, StageCfg, StageJob};

/// Background (hotspot) jobs live above this request-id watermark; they are
/// not logical requests and never produce records.
pub const BACKGROUND_BASE: u64 = 1 << 60;

/// One hop of a copy's route: the stage it visits and the demand it presents
/// there.
#[derive(Clone, Debug)]
pub struct Hop {
    pub stage: StageId,
    pub demand: u64,
}

/// Mutable per-copy state while the copy is alive.
#[derive(Clone, Debug)]
struct JobState {
    class: JobClass,
    level: usize,
    start_time: SimTime,
    sched_time: SimTime,
    path: Vec<Hop>,
    hop: usize,
    at_start: StartAction,
    /// Response-mode noise to add at the final hop.
    response_extra_us: u64,
}

/// A stage node plus its resource model and scenario roles.
pub struct NodeSpec {
    pub label: String,
    pub kind: StageKind,
    pub cfg: StageCfg,
    pub downstream: Vec<StageId>,
    /// Apply the noise model here, keyed by (request, replica).
    pub noise_at: Option<ReplicaId>,
    /// Tied requests fire their purge when first entering service here.
    pub tied_trigger: bool,
    /// Front a legacy stage: (legacy resource, throttler, legacy slots).
    pub proxy: Option<(StageKind, ThrottlerConfig, usize)>,
}

struct ProxyBlock {
    throttler: ThrottlerState,
    legacy: DStage,
    kind: StageKind,
}

struct Node {
    label: String,
    stage: DStage,
    kind: StageKind,
    noise_at: Option<ReplicaId>,
    tied_trigger: bool,
    proxy: Option<ProxyBlock>,
    served_primary: u64,
    served_duplicate: u64,
}

/// Overhead knobs. All-zero (with fluid links) is the ideal mode the
/// invariant tests run in.
#[derive(Copy, Clone, Debug)]
pub struct Overheads {
    /// Delay between issuing a purge and its arrival at the pipeline head.
    pub purge_latency_us: u64,
    /// Extra delay per cascade hop.
    pub purge_cost_us: u64,
    /// Extra entry-stage work for each duplicate copy.
    pub duplication_cost_us: u64,
    /// Preemption granularity of storage/CPU stages (0 = event-driven ideal).
    pub quantum_us: u64,
    /// Link preemption granularity in bytes (0 = fluid ideal).
    pub link_packet_bytes: u64,
}

impl Default for Overheads {
    fn default() -> Self {
        Overheads {
            purge_latency_us: 0,
            purge_cost_us: 0,
            duplication_cost_us: 0,
            quantum_us: 0,
            link_packet_bytes: 1_500,
        }
    }
}

impl Overheads {
    pub fn ideal() -> Self {
        Overheads {
            link_packet_bytes: 0,
            ..Overheads::default()
        }
    }
}

/// Run-wide policy and bookkeeping configuration.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub scheme: SchemeSpec,
    /// Fraction of requests pinned to the single-copy baseline class
    /// (mixed-population fairness runs). Groups are drawn at workload time.
    pub baseline_fraction: f64,
    /// Offered primary load, recorded in output rows.
    pub load: f64,
    pub noise: NoiseModel,
    pub overheads: Overheads,
    /// Keep primaries running after a duplicate wins (coupled-run safety
    /// comparisons need the primary's natural completion time).
    pub retain_primary_on_win: bool,
    /// Whether completion/timer purges are delivered at all. The NFV
    /// pipeline approximates purging purely by its duplicate queue cap.
    pub policy_purges: bool,
    pub horizon_us: u64,
    pub sample_period_us: u64,
    /// Fixed-size workloads report `size_class = fixed`.
    pub fixed_size_class: bool,
}

#[derive(Clone, Debug)]
enum Ev {
    Arrive { idx: usize },
    ServiceDone { node: usize, slot: usize, epoch: u64 },
    LegacyDone { node: usize, slot: usize, epoch: u64 },
    Boundary { node: usize, slot: usize, epoch: u64 },
    DelayRelease { node: usize },
    PurgeDeliver { node: usize, purge: PurgeRequest },
    PolicyTimer { request_id: u64 },
    ProxyWindow { node: usize },
    Hotspot { idx: usize },
    StragglerSet { node: usize, rate: f64 },
    Sample,
}

mod class {
    pub const SERVICE: u8 = 0;
    pub const BOUNDARY: u8 = 1;
    pub const PURGE: u8 = 2;
    pub const RELEASE: u8 = 3;
    pub const TIMER: u8 = 4;
    pub const ARRIVE: u8 = 5;
    pub const HOTSPOT: u8 = 6;
    pub const WINDOW: u8 = 7;
    pub const STRAGGLER: u8 = 8;
    pub const SAMPLE: u8 = 9;
}

/// Everything a scenario hands to the runtime.
pub struct ClusterSpec {
    pub nodes: Vec<NodeSpec>,
    pub topology: Topology,
    pub requests: Vec<RequestDescriptor>,
    /// Background transfers: (start, target replica, bytes).
    pub hotspots: Vec<(SimTime, ReplicaId, u64)>,
    /// Rate changes: (at, cpu node index, new rate).
    pub stragglers: Vec<(SimTime, usize, f64)>,
    pub run: RunConfig,
}

pub struct Cluster {
    events: EventQueue<Ev>,
    nodes: Vec<Node>,
    topology: Topology,
    jobs: BTreeMap<JobId, JobState>,
    states: BTreeMap<u64, RequestState>,
    requests: Vec<RequestDescriptor>,
    run: RunConfig,
    records: Vec<RequestRecord>,
    primary_completions: Vec<(u64, u64)>,
    backlog: Vec<BacklogSample>,
    totals: RunTotals,
    hotspots: Vec<(SimTime, ReplicaId, u64)>,
    background_alive: u64,
    arrived: usize,
    /// Purged transfers still draining to their final boundary.
    tombstones: u64,
}

impl Cluster {
    pub fn new(spec: ClusterSpec) -> Self {
        let ClusterSpec {
            nodes,
            topology,
            requests,
            hotspots,
            stragglers,
            run,
        } = spec;
        let nodes: Vec<Node> = nodes
            .into_iter()
            .enumerate()
            .map(|(i, n)| {
                let mut stage = DStage::new(StageId(i as u32), n.cfg);
                stage.downstream = n.downstream;
                let proxy = n.proxy.map(|(kind, tcfg, slots)| ProxyBlock {
                    throttler: ThrottlerState::new(tcfg, SimTime::ZERO),
                    legacy: DStage::new(
                        StageId(i as u32),
                        StageCfg {
                            levels: 1,
                            concurrency: slots,
                            preemptive: false,
                            abort: AbortPolicy::Never,
                            boundary_us: 0,
                            aware: false,
                        },
                    ),
                    kind,
                });
                Node {
                    label: n.label,
                    stage,
                    kind: n.kind,
                    noise_at: n.noise_at,
                    tied_trigger: n.tied_trigger,
                    proxy,
                    served_primary: 0,
                    served_duplicate: 0,
                }
            })
            .collect();
        let mut cluster = Cluster {
            events: EventQueue::new(),
            nodes,
            topology,
            jobs: BTreeMap::new(),
            states: BTreeMap::new(),
            requests,
            run,
            records: Vec::new(),
            primary_completions: Vec::new(),
            backlog: Vec::new(),
            totals: RunTotals::default(),
            hotspots,
            background_alive: 0,
            arrived: 0,
            tombstones: 0,
        };
        for (idx, req) in cluster.requests.iter().enumerate() {
            cluster.events.push(
                req.issue_time,
                EventKey::new(class::ARRIVE, req.request_id, 0),
                Ev::Arrive { idx },
            );
        }
        for (idx, &(at, _, _)) in cluster.hotspots.iter().enumerate() {
            cluster.events.push(
                at,
                EventKey::new(class::HOTSPOT, idx as u64, 0),
                Ev::Hotspot { idx },
            );
        }
        for &(at, node, rate) in &stragglers {
            cluster.events.push(
                at,
                EventKey::new(class::STRAGGLER, node as u64, 0),
                Ev::StragglerSet { node, rate },
            );
        }
        if cluster.run.sample_period_us > 0 {
            cluster.events.push(
                SimTime(cluster.run.sample_period_us),
                EventKey::new(class::SAMPLE, 0, 0),
                Ev::Sample,
            );
        }
        for i in 0..cluster.nodes.len() {
            if let Some(p) = &cluster.nodes[i].proxy {
                let at = SimTime(p.throttler.cfg.window_us);
                cluster.events.push(
                    at,
                    EventKey::new(class::WINDOW, i as u64, 0),
                    Ev::ProxyWindow { node: i },
                );
            }
        }
        cluster
    }

    fn effective_scheme(&self, req: &RequestDescriptor) -> SchemeSpec {
        if req.group == 0 && self.run.baseline_fraction > 0.0 {
            SchemeSpec::new(SchemeKind::SingleCopy)
        } else {
            self.run.scheme
        }
    }

    fn drained(&self) -> bool {
        self.arrived == self.requests.len()
            && self.states.is_empty()
            && self.jobs.is_empty()
            && self.tombstones == 0
    }

    /// Runs the simulation to completion (all copies drained) or to the
    /// configured horizon, whichever comes first.
    pub fn run(mut self) -> RunOutput {
        let horizon = SimTime(self.run.horizon_us);
        let mut truncated = false;
        while let Some(at) = self.events.peek_time() {
            if at > horizon {
                truncated = !self.drained();
                break;
            }
            let (now, ev) = self.events.pop().unwrap();
            self.handle(now, ev);
            if self.drained() {
                break;
            }
        }
        self.finish(truncated)
    }

    fn handle(&mut self, now: SimTime, ev: Ev) {
        match ev {
            Ev::Arrive { idx } => self.on_arrive(idx, now),
            Ev::ServiceDone { node, slot, epoch } => self.on_service_done(node, slot, epoch, now),
            Ev::LegacyDone { node, slot, epoch } => self.on_legacy_done(node, slot, epoch, now),
            Ev::Boundary { node, slot, epoch } => {
                let (dropped, cmds) = self.nodes[node].stage.on_boundary(slot, epoch, now);
                if let Some(id) = dropped {
                    self.tombstones -= 1;
                    self.drop_copy(id);
                }
                self.apply_cmds(node, cmds, now);
            }
            Ev::DelayRelease { node } => {
                self.nodes[node].stage.tick_delay_queue(now);
                self.schedule_node(node, now);
            }
            Ev::PurgeDeliver { node, purge } => self.deliver_purge(node, &purge, now),
            Ev::PolicyTimer { request_id } => self.on_policy_timer(request_id, now),
            Ev::ProxyWindow { node } => self.on_proxy_window(node, now),
            Ev::Hotspot { idx } => self.on_hotspot(idx, now),
            Ev::StragglerSet { node, rate } => self.on_straggler(node, rate, now),
            Ev::Sample => self.on_sample(now),
        }
    }

    // ── Arrivals and dispatch ───────────────────────────────────────────

    fn on_arrive(&mut self, idx: usize, now: SimTime) {
        self.arrived += 1;
        let req = self.requests[idx].clone();
        let scheme = self.effective_scheme(&req);
        let expansion = policy::expand_request(&scheme, &req, now)
            .expect("scenario built an unexpandable request");
        let state = RequestState::new(scheme, &req, &expansion);
        if let Some(at) = expansion.timer_at {
            self.events.push(
                at,
                EventKey::new(class::TIMER, req.request_id, 0),
                Ev::PolicyTimer {
                    request_id: req.request_id,
                },
            );
        }
        self.states.insert(req.request_id, state);
        self.totals.offered += 1;
        let (at_start, _) = policy::lifecycle_actions(&scheme);
        for copy in &expansion.copies {
            self.spawn_copy(&req, copy, at_start, now);
        }
    }

    fn spawn_copy(
        &mut self,
        req: &RequestDescriptor,
        copy: &CopyPlan,
        at_start: StartAction,
        now: SimTime,
    ) {
        let path = self.topology.route(req, copy.target);
        debug_assert!(!path.is_empty());
        let state = JobState {
            class: copy.class,
            level: copy.priority.level(),
            start_time: req.issue_time,
            sched_time: copy.sched_time,
            path,
            hop: 0,
            at_start,
            response_extra_us: 0,
        };
        self.jobs.insert(copy.job_id, state);
        self.totals.copies_issued += 1;
        let entry = self.jobs[&copy.job_id].path[0].stage.index();
        self.dispatch_into(entry, copy.job_id, now);
    }

    /// Places a copy into a stage, computing the service it owes there
    /// (noise applied at the marked stage, keyed by request and replica).
    fn dispatch_into(&mut self, node_idx: usize, id: JobId, now: SimTime) {
        let (demand, level, class, start_time, sched_time, hop) = {
            let j = &self.jobs[&id];
            (
                j.path[j.hop].demand,
                j.level,
                j.class,
                j.start_time,
                if j.hop == 0 { j.sched_time } else { now },
                j.hop,
            )
        };
        let node = &self.nodes[node_idx];
        let mut multiplier = 1.0;
        if let Some(replica) = node.noise_at {
            if !self.run.noise.is_disabled() {
                let mut rng = RngStream::keyed(
                    self.run.seed,
                    "noise",
                    id.request_id,
                    u64::from(replica.0),
                );
                multiplier = self.run.noise.draw_multiplier(&mut rng);
            }
        }
        let legacy_kind = node.proxy.as_ref().map(|p| p.kind);
        let kind = legacy_kind.unwrap_or(node.kind);
        let mut work = match self.run.noise.mode {
            NoiseMode::Service => kind.work_us(demand, multiplier),
            NoiseMode::Response => {
                let base = kind.work_us(demand, 1.0);
                if multiplier > 1.0 {
                    let extra = kind.work_us(demand, multiplier) - base;
                    self.jobs.get_mut(&id).unwrap().response_extra_us += extra;
                }
                base
            }
        };
        if hop == 0 && class == JobClass::Duplicate {
            work += self.run.overheads.duplication_cost_us;
        }
        let is_final = {
            let j = &self.jobs[&id];
            j.hop + 1 == j.path.len()
        };
        if is_final {
            work += self.jobs[&id].response_extra_us;
        }
        // Duplicate-queue cap: excess duplicate arrivals are dropped.
        if class == JobClass::Duplicate {
            if let Some(cap) = kind.duplicate_queue_cap() {
                let stage = &self.nodes[node_idx].stage;
                if stage.cfg.aware && stage.queued_at_level(1) >= cap {
                    self.totals.duplicates_dropped += 1;
                    self.drop_copy(id);
                    return;
                }
            }
        }
        let mut job = StageJob::new(id, class, level, work);
        job.start_time = start_time;
        job.sched_time = sched_time;
        let node = &mut self.nodes[node_idx];
        match node.stage.dispatch(job, now) {
            Ok(crate::stage::Placement::Delayed { release }) => {
                self.events.push(
                    release,
                    EventKey::new(class::RELEASE, node_idx as u64, 0),
                    Ev::DelayRelease { node: node_idx },
                );
            }
            Ok(crate::stage::Placement::Queued { .. }) => {}
            Err(e) => panic!("dispatch bug at {}: {e}", self.nodes[node_idx].label),
        }
        self.schedule_node(node_idx, now);
    }

    /// Runs the stage's scheduler (or the proxy's admission loop) and turns
    /// the resulting commands into events.
    fn schedule_node(&mut self, node_idx: usize, now: SimTime) {
        if self.nodes[node_idx].proxy.is_some() {
            self.admit(node_idx, now);
            return;
        }
        let cmds = self.nodes[node_idx].stage.reschedule(now);
        self.apply_cmds(node_idx, cmds, now);
    }

    fn apply_cmds(&mut self, node_idx: usize, cmds: Vec<SchedCmd>, now: SimTime) {
        for cmd in cmds {
            match cmd {
                SchedCmd::Completion { id, slot, epoch, at } => {
                    let b = (u64::from(id.copy_index) << 40) | node_idx as u64;
                    self.events.push(
                        at,
                        EventKey::new(class::SERVICE, id.request_id, b),
                        Ev::ServiceDone {
                            node: node_idx,
                            slot,
                            epoch,
                        },
                    );
                }
                SchedCmd::Boundary { slot, epoch, at } => {
                    self.events.push(
                        at,
                        EventKey::new(class::BOUNDARY, node_idx as u64, slot as u64),
                        Ev::Boundary {
                            node: node_idx,
                            slot,
                            epoch,
                        },
                    );
                }
                SchedCmd::FirstStart { id } => self.on_first_start(node_idx, id, now),
            }
        }
    }

    // ── Service completion and routing ──────────────────────────────────

    fn on_service_done(&mut self, node_idx: usize, slot: usize, epoch: u64, now: SimTime) {
        match self.nodes[node_idx].stage.complete(slot, epoch, now) {
            CompleteResult::Stale => {}
            CompleteResult::Dropped(id) => {
                self.tombstones -= 1;
                self.drop_copy(id);
                self.schedule_node(node_idx, now);
            }
            CompleteResult::Finished(job) => {
                match job.class {
                    JobClass::Primary => self.nodes[node_idx].served_primary += 1,
                    JobClass::Duplicate => self.nodes[node_idx].served_duplicate += 1,
                }
                self.schedule_node(node_idx, now);
                self.advance(job.id, node_idx, now);
            }
        }
    }

    fn on_legacy_done(&mut self, node_idx: usize, slot: usize, epoch: u64, now: SimTime) {
        let result = {
            let p = self.nodes[node_idx].proxy.as_mut().unwrap();
            p.legacy.complete(slot, epoch, now)
        };
        match result {
            CompleteResult::Finished(job) => {
                {
                    let p = self.nodes[node_idx].proxy.as_mut().unwrap();
                    p.throttler
                        .on_completion(now)
                        .expect("legacy completion accounting");
                    let cmds = p.legacy.reschedule(now);
                    self.apply_legacy_cmds(node_idx, cmds);
                }
                match job.class {
                    JobClass::Primary => self.nodes[node_idx].served_primary += 1,
                    JobClass::Duplicate => self.nodes[node_idx].served_duplicate += 1,
                }
                self.advance(job.id, node_idx, now);
                self.admit(node_idx, now);
            }
            CompleteResult::Dropped(_) | CompleteResult::Stale => {
                unreachable!("legacy stage neither aborts nor preempts")
            }
        }
    }

    /// Moves a finished copy to its next hop, or resolves its completion.
    fn advance(&mut self, id: JobId, from_node: usize, now: SimTime) {
        if id.request_id >= BACKGROUND_BASE {
            self.jobs.remove(&id);
            self.background_alive -= 1;
            self.nodes[from_node].stage.forget(id);
            return;
        }
        let Some(j) = self.jobs.get_mut(&id) else {
            // The copy was purged while hidden inside a legacy stage; drop
            // the stale departure bookkeeping it just re-created.
            self.nodes[from_node].stage.forget(id);
            return;
        };
        j.hop += 1;
        if j.hop < j.path.len() {
            let next = j.path[j.hop].stage.index();
            self.dispatch_into(next, id, now);
        } else {
            self.jobs.remove(&id);
            self.on_copy_complete(id, now);
        }
    }

    fn on_copy_complete(&mut self, id: JobId, now: SimTime) {
        if id.is_primary_copy() {
            self.primary_completions.push((id.request_id, now.as_us()));
        }
        let Some(state) = self.states.get_mut(&id.request_id) else {
            return;
        };
        match policy::on_copy_complete(state, id, now) {
            CompleteOutcome::Winner {
                winner: _,
                served_by,
                rct_us,
                purge,
            } => {
                if !self.run.policy_purges {
                    // Purge messages do not exist in this pipeline; undo the
                    // policy-level count so records reflect reality.
                    state.purges_issued -= purge.len() as u32;
                }
                let req = &self.requests[id.request_id as usize];
                let scheme = state.scheme.kind.token();
                let purges_issued = state.purges_issued;
                let size_class = if self.run.fixed_size_class {
                    SizeClass::Fixed
                } else {
                    SizeClass::of_bytes(req.size)
                };
                self.records.push(RequestRecord {
                    request_id: id.request_id,
                    arrival_us: req.issue_time.as_us(),
                    completion_us: now.as_us(),
                    rct_us,
                    scheme,
                    load: self.run.load,
                    served_by,
                    size_class,
                    purges_issued,
                    group: req.group,
                });
                self.totals.completed += 1;
                let mut purge = purge;
                if self.run.retain_primary_on_win {
                    purge.retain(|p| !p.is_primary_copy());
                }
                if !purge.is_empty() {
                    self.issue_purge(purge, now);
                }
                self.maybe_finalize(id.request_id);
            }
            CompleteOutcome::Ignored => self.maybe_finalize(id.request_id),
        }
    }

    /// Removes a copy that was purged or dropped before completing.
    fn drop_copy(&mut self, id: JobId) {
        self.jobs.remove(&id);
        if id.request_id >= BACKGROUND_BASE {
            self.background_alive -= 1;
            return;
        }
        if let Some(state) = self.states.get_mut(&id.request_id) {
            state.copies_outstanding.retain(|c| *c != id);
        }
        self.maybe_finalize(id.request_id);
    }

    /// Drops per-request bookkeeping once the winner is recorded and every
    /// copy is accounted for.
    fn maybe_finalize(&mut self, request_id: u64) {
        let done = matches!(
            self.states.get(&request_id),
            Some(s) if s.resolved() && s.copies_outstanding.is_empty()
        );
        if !done {
            return;
        }
        self.states.remove(&request_id);
        for copy in 0..=1u8 {
            let id = JobId::new(request_id, copy);
            debug_assert!(!self.jobs.contains_key(&id));
            for node in &mut self.nodes {
                node.stage.forget(id);
                if let Some(p) = &mut node.proxy {
                    p.legacy.forget(id);
                }
            }
        }
    }

    // ── Purging ─────────────────────────────────────────────────────────

    /// Issues a cascading purge for the given copies at their pipeline
    /// entry, honoring the purge latency knob.
    fn issue_purge(&mut self, ids: Vec<JobId>, now: SimTime) {
        if !self.run.policy_purges {
            // Purging is approximated away (bounded duplicate queues); the
            // outstanding copies drain on their own.
            return;
        }
        let entry = self.topology.entry().index();
        let key = ids[0].request_id;
        let at = now + self.run.overheads.purge_latency_us;
        self.events.push(
            at,
            EventKey::new(class::PURGE, key, entry as u64),
            Ev::PurgeDeliver {
                node: entry,
                purge: PurgeRequest::ids(ids, true),
            },
        );
    }

    fn deliver_purge(&mut self, node_idx: usize, purge: &PurgeRequest, now: SimTime) {
        let report = self.nodes[node_idx].stage.purge(purge, now);
        self.tombstones += report.tombstoned as u64;
        self.apply_cmds(node_idx, report.boundary_cmds.clone(), now);
        for id in &report.removed_ids {
            self.totals.copies_purged += 1;
            self.drop_copy(*id);
        }
        if !report.removed_ids.is_empty() {
            self.schedule_node(node_idx, now);
        }
        if purge.cascade && !report.departed_matches.is_empty() {
            let downstream = self.nodes[node_idx].stage.downstream.clone();
            let at = now + self.run.overheads.purge_cost_us;
            for d in downstream {
                let key = match &purge.selector {
                    crate::job::PurgeSelector::Ids(ids) => ids[0].request_id,
                    crate::job::PurgeSelector::StartedBefore(t) => t.as_us(),
                };
                self.events.push(
                    at,
                    EventKey::new(class::PURGE, key, d.0 as u64),
                    Ev::PurgeDeliver {
                        node: d.index(),
                        purge: purge.clone(),
                    },
                );
            }
        }
    }

    // ── Policy hooks ────────────────────────────────────────────────────

    fn on_first_start(&mut self, node_idx: usize, id: JobId, now: SimTime) {
        if !self.nodes[node_idx].tied_trigger || id.request_id >= BACKGROUND_BASE {
            return;
        }
        let Some(j) = self.jobs.get(&id) else { return };
        if j.at_start != StartAction::PurgeCounterpart {
            return;
        }
        let Some(state) = self.states.get_mut(&id.request_id) else {
            return;
        };
        if let StartOutcome::PurgeCounterpart(other) = policy::on_copy_start(state, id, now) {
            self.issue_purge(alloc::vec![other], now);
        }
    }

    fn on_policy_timer(&mut self, request_id: u64, now: SimTime) {
        let Some(state) = self.states.get_mut(&request_id) else {
            return;
        };
        match policy::on_policy_timer(state, now) {
            TimerOutcome::Noop => {}
            TimerOutcome::Restart { purge, copy } => {
                let at_start = state.scheme.kind;
                let _ = at_start;
                let req = self.requests[request_id as usize].clone();
                let (start_action, _) = policy::lifecycle_actions(&self.states[&request_id].scheme);
                self.issue_purge(alloc::vec![purge], now);
                self.spawn_copy(&req, &copy, start_action, now);
            }
        }
    }

    // ── Proxy throttling ────────────────────────────────────────────────

    /// Releases queued jobs into the legacy stage up to the multiplexing
    /// level.
    fn admit(&mut self, node_idx: usize, now: SimTime) {
        loop {
            let node = &mut self.nodes[node_idx];
            let p = node.proxy.as_mut().unwrap();
            if p.throttler.admit_budget() == 0 {
                break;
            }
            let Some(mut job) = node.stage.pop_released() else {
                break;
            };
            // The legacy stage is opaque: single FIFO at one level.
            job.level = 0;
            p.throttler.on_release();
            p.legacy
                .dispatch(job, now)
                .expect("legacy dispatch of a released job");
            let cmds = p.legacy.reschedule(now);
            self.apply_legacy_cmds(node_idx, cmds);
        }
    }

    fn apply_legacy_cmds(&mut self, node_idx: usize, cmds: Vec<SchedCmd>) {
        for cmd in cmds {
            match cmd {
                SchedCmd::Completion { id, slot, epoch, at } => {
                    let b = (u64::from(id.copy_index) << 40) | (1 << 32) | node_idx as u64;
                    self.events.push(
                        at,
                        EventKey::new(class::SERVICE, id.request_id, b),
                        Ev::LegacyDone {
                            node: node_idx,
                            slot,
                            epoch,
                        },
                    );
                }
                SchedCmd::FirstStart { .. } => {}
                SchedCmd::Boundary { .. } => unreachable!("legacy stages have no boundaries"),
            }
        }
    }

    fn on_proxy_window(&mut self, node_idx: usize, now: SimTime) {
        {
            let p = self.nodes[node_idx].proxy.as_mut().unwrap();
            p.throttler.on_timer(now);
        }
        self.admit(node_idx, now);
        if now.as_us() < self.run.horizon_us {
            let p = self.nodes[node_idx].proxy.as_ref().unwrap();
            let at = now + p.throttler.cfg.window_us.max(1_000);
            self.events.push(
                at,
                EventKey::new(class::WINDOW, node_idx as u64, 0),
                Ev::ProxyWindow { node: node_idx },
            );
        }
    }

    // ── Background load, stragglers, sampling ───────────────────────────

    fn on_hotspot(&mut self, idx: usize, now: SimTime) {
        let (_, replica, bytes) = self.hotspots[idx];
        let id = JobId::new(BACKGROUND_BASE + idx as u64, 0);
        let Some(path) = self.topology.background_route(replica, bytes) else {
            return;
        };
        let state = JobState {
            class: JobClass::Primary,
            level: 0,
            start_time: now,
            sched_time: now,
            path,
            hop: 0,
            at_start: StartAction::None,
            response_extra_us: 0,
        };
        self.jobs.insert(id, state);
        self.background_alive += 1;
        let entry = self.jobs[&id].path[0].stage.index();
        self.dispatch_into(entry, id, now);
    }

    fn on_straggler(&mut self, node_idx: usize, rate: f64, now: SimTime) {
        let node = &mut self.nodes[node_idx];
        let StageKind::Cpu(ref mut p) = node.kind else {
            return;
        };
        let factor = p.rate / rate;
        p.rate = rate;
        let cmds = node.stage.rescale_remaining(factor, now);
        self.apply_cmds(node_idx, cmds, now);
    }

    fn on_sample(&mut self, now: SimTime) {
        let live = self.jobs.len() as u64 - self.background_alive;
        self.backlog.push(BacklogSample {
            at_us: now.as_us(),
            jobs: live,
        });
        let next = now + self.run.sample_period_us;
        if next.as_us() <= self.run.horizon_us {
            self.events
                .push(next, EventKey::new(class::SAMPLE, 0, 0), Ev::Sample);
        }
    }

    // ── Output ──────────────────────────────────────────────────────────

    fn finish(mut self, truncated: bool) -> RunOutput {
        self.records.sort_by_key(|r| r.request_id);
        self.primary_completions.sort_unstable();
        let mut residual = 0;
        let stages = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                let mut resident = n.stage.population() as u64;
                let mut released = 0;
                if let Some(p) = &n.proxy {
                    resident += p.legacy.population() as u64;
                    released = n.stage.counters.dispatched
                        - n.stage.counters.completed
                        - n.stage.counters.purged
                        - n.stage.population() as u64;
                }
                residual += resident;
                StageReport {
                    node: i,
                    label: n.label.clone(),
                    dispatched: n.stage.counters.dispatched,
                    completed: n.stage.counters.completed,
                    purged: n.stage.counters.purged,
                    released,
                    resident,
                    served_primary: n.served_primary,
                    served_duplicate: n.served_duplicate,
                }
            })
            .collect();
        let proxies = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                n.proxy.as_ref().map(|p| ProxyReport {
                    node: i,
                    n_star: p.throttler.n_star(),
                    exploiting: p.throttler.phase() == Phase::Exploitation,
                    windows: p.throttler.windows_closed(),
                    settled_after: p.throttler.settled_after_windows(),
                    smoothed_rate: None,
                    history: p
                        .throttler
                        .history()
                        .iter()
                        .map(|(&n, &r)| (n, r))
                        .collect(),
                })
            })
            .collect();
        let last_arrival_us = self
            .requests
            .last()
            .map(|r| r.issue_time.as_us())
            .unwrap_or(0);
        RunOutput {
            records: self.records,
            totals: self.totals,
            backlog: self.backlog,
            stages,
            proxies,
            primary_completions: self.primary_completions,
            residual_jobs: residual,
            last_arrival_us,
            ended_at: self.events.now(),
            truncated,
        }
    }
}

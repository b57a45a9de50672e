//! Experiment builders: the data-parallel get() pipeline, the small-request
//! network pipeline, and the duplicated packet-processing pipeline, plus
//! Poisson workload generation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::cluster::{Cluster, ClusterSpec, Hop, NodeSpec, Overheads, RunConfig};
use crate::job::{ReplicaId, StageId};
use crate::policy::{RequestDescriptor, SchemeSpec};
use crate::proxy::ThrottlerConfig;
use crate::resources::{CpuParams, LinkParams, NoiseModel, StageKind, StorageParams};
use crate::sim::{Dist, EmpiricalCdf, RngStream, SimTime};
use crate::stage::AbortPolicy;

/// Request demand distribution.
#[derive(Clone, Debug)]
pub enum SizeDist {
    Fixed(u64),
    Cdf(EmpiricalCdf),
}

impl SizeDist {
    pub fn sample(&self, rng: &mut RngStream) -> u64 {
        match self {
            SizeDist::Fixed(v) => *v,
            SizeDist::Cdf(cdf) => libm::round(cdf.sample(rng.next_f64_open())) as u64,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            SizeDist::Fixed(v) => *v as f64,
            SizeDist::Cdf(cdf) => cdf.mean(),
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(self, SizeDist::Fixed(_))
    }
}

/// Approximation of the web-search flow-size mix (heavy-tailed, bytes):
/// roughly half the flows are small (< 100 KB), most of the rest medium,
/// and a few percent exceed 10 MB.
pub fn websearch_cdf() -> EmpiricalCdf {
    EmpiricalCdf::new(alloc::vec![
        (0.12, 1_500.0),
        (0.30, 10_000.0),
        (0.52, 70_000.0),
        (0.70, 300_000.0),
        (0.85, 1_500_000.0),
        (0.96, 7_000_000.0),
        (0.985, 10_000_000.0),
        (1.00, 25_000_000.0),
    ])
    .expect("builtin cdf is well-formed")
}

/// Which layers are duplicate-aware; the rest serve all traffic at one
/// level, FIFO, and ignore purges.
#[derive(Copy, Clone, Debug)]
pub struct Layers {
    pub storage: bool,
    pub network: bool,
    pub cpu: bool,
}

impl Default for Layers {
    fn default() -> Self {
        Layers {
            storage: true,
            network: true,
            cpu: true,
        }
    }
}

impl Layers {
    pub fn none() -> Self {
        Layers {
            storage: false,
            network: false,
            cpu: false,
        }
    }

    pub fn storage_only() -> Self {
        Layers {
            storage: true,
            network: false,
            cpu: false,
        }
    }
}

/// Size of the request-phase control message.
const REQUEST_BYTES: u64 = 256;

/// Stage wiring of a built scenario; routes copies along their paths.
#[derive(Clone, Debug)]
pub struct Topology {
    kind: TopoKind,
}

#[derive(Clone, Debug)]
enum TopoKind {
    /// get() pipeline: client handler -> links -> server handler ->
    /// storage -> links back -> client response handler.
    DataParallel { n: usize },
    /// In-memory serving: same shape without the storage stage.
    Network { n: usize },
    /// Duplicator -> per-node CPU -> de-duplicator.
    PacketProc { nodes: usize },
}

impl Topology {
    pub fn entry(&self) -> StageId {
        StageId(0)
    }

    /// Route one copy headed for `target`, with per-hop demands.
    pub fn route(&self, req: &RequestDescriptor, target: ReplicaId) -> Vec<Hop> {
        let r = target.0 as usize;
        let hop = |stage: usize, demand: u64| Hop {
            stage: StageId(stage as u32),
            demand,
        };
        match self.kind {
            TopoKind::DataParallel { n } => alloc::vec![
                hop(0, REQUEST_BYTES),
                hop(1, REQUEST_BYTES),
                hop(4 + r, REQUEST_BYTES),
                hop(4 + n + r, 0),
                hop(4 + 2 * n + r, req.size),
                hop(4 + 3 * n + r, req.size),
                hop(2, req.size),
                hop(3, 0),
            ],
            TopoKind::Network { n } => alloc::vec![
                hop(0, REQUEST_BYTES),
                hop(1, REQUEST_BYTES),
                hop(4 + r, REQUEST_BYTES),
                hop(4 + n + r, 0),
                hop(4 + 2 * n + r, req.size),
                hop(2, req.size),
                hop(3, 0),
            ],
            TopoKind::PacketProc { nodes } => alloc::vec![
                hop(0, 0),
                hop(1 + r, req.size),
                hop(1 + nodes, 0),
            ],
        }
    }

    /// Route of a background hotspot transfer, if the scenario has them.
    pub fn background_route(&self, replica: ReplicaId, bytes: u64) -> Option<Vec<Hop>> {
        match self.kind {
            TopoKind::Network { n } => {
                let r = replica.0 as usize;
                Some(alloc::vec![
                    Hop {
                        stage: StageId((4 + 2 * n + r) as u32),
                        demand: bytes,
                    },
                    Hop {
                        stage: StageId(2),
                        demand: bytes,
                    },
                ])
            }
            _ => None,
        }
    }
}

// ── Workload generation ──────────────────────────────────────────────────

/// Workload description: Poisson arrivals at `rate_per_us`, a size
/// distribution, and a request count.
#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub rate_per_us: f64,
    pub size: SizeDist,
    pub count: usize,
    pub n_servers: usize,
    pub replication: usize,
    /// Fraction of requests assigned to the baseline (non-duplicating)
    /// class in mixed-population runs.
    pub baseline_fraction: f64,
}

/// Generates the arrival stream: times, sizes, replica sets, and the
/// primary/secondary picks. Deterministic per seed and independent of the
/// scheme under test.
pub fn generate_workload(spec: &WorkloadSpec, seed: u64) -> Vec<RequestDescriptor> {
    assert!(spec.replication <= spec.n_servers);
    assert!(spec.rate_per_us > 0.0);
    let mut arrivals = RngStream::new(seed, "arrivals");
    let mut sizes = RngStream::new(seed, "sizes");
    let mut replicas = RngStream::new(seed, "replica-choice");
    let mut groups = RngStream::new(seed, "groups");
    let inter = Dist::Exponential {
        mean: 1.0 / spec.rate_per_us,
    };
    let mut t = 0.0_f64;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        t += inter.sample(&mut arrivals);
        let size = spec.size.sample(&mut sizes).max(1);
        // Partial Fisher-Yates for a distinct replica set.
        let mut pool: Vec<u32> = (0..spec.n_servers as u32).collect();
        let mut set = Vec::with_capacity(spec.replication);
        for k in 0..spec.replication {
            let j = k + replicas.next_below((spec.n_servers - k) as u64) as usize;
            pool.swap(k, j);
            set.push(ReplicaId(pool[k]));
        }
        let primary = set[replicas.next_below(set.len() as u64) as usize];
        let secondary = loop {
            let pick = set[replicas.next_below(set.len() as u64) as usize];
            if pick != primary || spec.replication == 1 {
                break pick;
            }
        };
        let group = if groups.next_f64() < spec.baseline_fraction {
            0
        } else {
            1
        };
        out.push(RequestDescriptor {
            request_id: i as u64,
            issue_time: SimTime(libm::round(t.max(1.0)) as u64),
            size,
            replicas: set,
            primary,
            secondary,
            group,
        });
    }
    out
}

// ── Data-parallel scenario ───────────────────────────────────────────────

/// Storage-cluster get() scenario configuration.
#[derive(Clone, Debug)]
pub struct DataParallelConfig {
    pub n_servers: usize,
    pub replication_factor: usize,
    /// Storage service rate per server, bytes/us.
    pub storage_rate: f64,
    pub storage_concurrency: usize,
    /// Edge link capacities, bits/us.
    pub server_link: f64,
    pub client_link: f64,
    pub object_size: SizeDist,
    pub requests: usize,
    pub load: f64,
    pub scheme: SchemeSpec,
    pub noise: NoiseModel,
    pub layers: Layers,
    pub overheads: Overheads,
    pub use_proxy: bool,
    pub proxy: ThrottlerConfig,
    /// How storage purges treat in-service reads. `Instant` models a fully
    /// duplicate-aware store; `Never` models an unmodified store whose
    /// admitted reads always run to completion.
    pub storage_purge: AbortPolicy,
    pub baseline_fraction: f64,
    pub retain_primary_on_win: bool,
    pub seed: u64,
}

impl DataParallelConfig {
    /// Small controlled-testbed preset: 10 servers, replication 3, 10 MB
    /// objects, disk-bound servers behind 1 Gb/s links, 10 Gb/s client.
    /// Each disk serves four concurrent streams (time-sliced I/O). Set
    /// `storage_purge` to `Never` to model an unmodified store whose
    /// admitted reads always run to completion.
    pub fn testbed(scheme: SchemeSpec, load: f64, seed: u64) -> Self {
        DataParallelConfig {
            n_servers: 10,
            replication_factor: 3,
            storage_rate: 25.0,
            storage_concurrency: 4,
            server_link: 1_000.0,
            client_link: 10_000.0,
            object_size: SizeDist::Fixed(10_000_000),
            requests: 10_000,
            load,
            scheme,
            noise: NoiseModel::cloud_default(),
            layers: Layers::default(),
            overheads: Overheads::default(),
            use_proxy: false,
            proxy: ThrottlerConfig::default(),
            storage_purge: AbortPolicy::Instant,
            baseline_fraction: 0.0,
            retain_primary_on_win: false,
            seed,
        }
    }

    pub fn arrival_rate_per_us(&self) -> f64 {
        let aggregate = self.n_servers as f64 * self.storage_rate * self.storage_concurrency as f64;
        self.load * aggregate / self.object_size.mean()
    }

    pub fn build(&self) -> Cluster {
        assert!(self.replication_factor <= self.n_servers);
        assert!(self.load > 0.0 && self.load < 1.0, "load must be in (0, 1)");
        let n = self.n_servers;
        let rate = self.arrival_rate_per_us();
        let requests = generate_workload(
            &WorkloadSpec {
                rate_per_us: rate,
                size: self.object_size.clone(),
                count: self.requests,
                n_servers: n,
                replication: self.replication_factor,
                baseline_fraction: self.baseline_fraction,
            },
            self.seed,
        );
        let span_us = requests.last().map(|r| r.issue_time.as_us()).unwrap_or(0) as f64;
        let link = |label: String, capacity: f64| NodeSpec {
            label,
            kind: StageKind::Link(LinkParams {
                capacity,
                packet_bytes: self.overheads.link_packet_bytes,
            }),
            cfg: StageKind::Link(LinkParams {
                capacity,
                packet_bytes: self.overheads.link_packet_bytes,
            })
            .stage_cfg(self.layers.network),
            downstream: Vec::new(),
            noise_at: None,
            tied_trigger: false,
            proxy: None,
        };
        let handler = |label: String| NodeSpec {
            label,
            kind: StageKind::Handler { fixed_us: 0 },
            cfg: StageKind::Handler { fixed_us: 0 }.stage_cfg(true),
            downstream: Vec::new(),
            noise_at: None,
            tied_trigger: false,
            proxy: None,
        };
        let mut nodes = alloc::vec![
            handler(String::from("client-req")),
            link(String::from("client-up"), self.client_link),
            link(String::from("client-down"), self.client_link),
            handler(String::from("client-resp")),
        ];
        for r in 0..n {
            nodes.push(link(format!("server-in-{r}"), self.server_link));
        }
        for r in 0..n {
            nodes.push(handler(format!("server-req-{r}")));
        }
        for r in 0..n {
            let storage = StageKind::Storage(StorageParams {
                rate: self.storage_rate,
                concurrency: self.storage_concurrency,
            });
            let mut cfg = storage.stage_cfg(self.layers.storage);
            cfg.boundary_us = self.overheads.quantum_us;
            cfg.abort = self.storage_purge;
            let proxy = if self.use_proxy {
                Some((storage, self.proxy, self.storage_concurrency))
            } else {
                None
            };
            nodes.push(NodeSpec {
                label: format!("storage-{r}"),
                kind: storage,
                cfg,
                downstream: Vec::new(),
                noise_at: Some(ReplicaId(r as u32)),
                tied_trigger: true,
                proxy,
            });
        }
        for r in 0..n {
            nodes.push(link(format!("server-out-{r}"), self.server_link));
        }
        // Wire the purge-cascade graph along the pipeline.
        nodes[0].downstream = alloc::vec![StageId(1)];
        nodes[1].downstream = (0..n).map(|r| StageId((4 + r) as u32)).collect();
        for r in 0..n {
            nodes[4 + r].downstream = alloc::vec![StageId((4 + n + r) as u32)];
            nodes[4 + n + r].downstream = alloc::vec![StageId((4 + 2 * n + r) as u32)];
            nodes[4 + 2 * n + r].downstream = alloc::vec![StageId((4 + 3 * n + r) as u32)];
            nodes[4 + 3 * n + r].downstream = alloc::vec![StageId(2)];
        }
        nodes[2].downstream = alloc::vec![StageId(3)];
        Cluster::new(ClusterSpec {
            nodes,
            topology: Topology {
                kind: TopoKind::DataParallel { n },
            },
            requests,
            hotspots: Vec::new(),
            stragglers: Vec::new(),
            run: RunConfig {
                seed: self.seed,
                scheme: self.scheme,
                baseline_fraction: self.baseline_fraction,
                load: self.load,
                noise: self.noise.clone(),
                overheads: self.overheads,
                retain_primary_on_win: self.retain_primary_on_win,
                policy_purges: true,
                horizon_us: (span_us * 1.15) as u64 + 2_000_000,
                sample_period_us: (span_us / 50.0) as u64 + 1,
                fixed_size_class: self.object_size.is_fixed(),
            },
        })
    }
}

// ── Small-request network scenario ───────────────────────────────────────

/// In-memory serving scenario: nine rate-limited servers, one fat client,
/// small requests, optional background hotspot transfers.
#[derive(Clone, Debug)]
pub struct NetworkConfig {
    pub n_servers: usize,
    pub replication_factor: usize,
    pub server_link: f64,
    pub client_link: f64,
    pub flow_size: SizeDist,
    pub requests: usize,
    pub load: f64,
    pub scheme: SchemeSpec,
    /// Background transfers as a fraction of aggregate egress capacity.
    pub hotspot_fraction: f64,
    pub hotspot_bytes: u64,
    pub layers: Layers,
    pub overheads: Overheads,
    pub baseline_fraction: f64,
    pub retain_primary_on_win: bool,
    pub seed: u64,
}

impl NetworkConfig {
    /// Cloud preset: 9 servers at 1 Gb/s, client at 16 Gb/s, 50 KB flows,
    /// 10 MB hotspots worth 1% of aggregate capacity. Purge messages take
    /// a realistic inter-VM latency to land.
    pub fn cloud(scheme: SchemeSpec, load: f64, seed: u64) -> Self {
        NetworkConfig {
            n_servers: 9,
            replication_factor: 3,
            server_link: 1_000.0,
            client_link: 16_000.0,
            flow_size: SizeDist::Fixed(50_000),
            requests: 20_000,
            load,
            scheme,
            hotspot_fraction: 0.01,
            hotspot_bytes: 10_000_000,
            layers: Layers::default(),
            overheads: Overheads {
                purge_latency_us: 2_000,
                ..Overheads::default()
            },
            baseline_fraction: 0.0,
            retain_primary_on_win: false,
            seed,
        }
    }

    pub fn arrival_rate_per_us(&self) -> f64 {
        let egress_bytes_per_us = self.server_link / 8.0;
        self.load * self.n_servers as f64 * egress_bytes_per_us / self.flow_size.mean()
    }

    pub fn build(&self) -> Cluster {
        assert!(self.replication_factor <= self.n_servers);
        assert!(self.load > 0.0 && self.load < 1.0, "load must be in (0, 1)");
        let n = self.n_servers;
        let rate = self.arrival_rate_per_us();
        let requests = generate_workload(
            &WorkloadSpec {
                rate_per_us: rate,
                size: self.flow_size.clone(),
                count: self.requests,
                n_servers: n,
                replication: self.replication_factor,
                baseline_fraction: self.baseline_fraction,
            },
            self.seed,
        );
        let span_us = requests.last().map(|r| r.issue_time.as_us()).unwrap_or(0) as f64;
        let mut hotspots = Vec::new();
        if self.hotspot_fraction > 0.0 {
            let egress_bytes_per_us = self.server_link / 8.0;
            let hot_rate =
                self.hotspot_fraction * n as f64 * egress_bytes_per_us / self.hotspot_bytes as f64;
            let mut rng = RngStream::new(self.seed, "hotspots");
            let inter = Dist::Exponential {
                mean: 1.0 / hot_rate,
            };
            let mut t = 0.0;
            loop {
                t += inter.sample(&mut rng);
                if t >= span_us {
                    break;
                }
                let target = ReplicaId(rng.next_below(n as u64) as u32);
                hotspots.push((SimTime(t as u64), target, self.hotspot_bytes));
            }
        }
        let link = |label: String, capacity: f64, aware: bool| {
            let kind = StageKind::Link(LinkParams {
                capacity,
                packet_bytes: self.overheads.link_packet_bytes,
            });
            NodeSpec {
                label,
                kind,
                cfg: kind.stage_cfg(aware),
                downstream: Vec::new(),
                noise_at: None,
                tied_trigger: false,
                proxy: None,
            }
        };
        let handler = |label: String| NodeSpec {
            label,
            kind: StageKind::Handler { fixed_us: 0 },
            cfg: StageKind::Handler { fixed_us: 0 }.stage_cfg(true),
            downstream: Vec::new(),
            noise_at: None,
            tied_trigger: false,
            proxy: None,
        };
        let mut nodes = alloc::vec![
            handler(String::from("client-req")),
            link(String::from("client-up"), self.client_link, self.layers.network),
            link(String::from("client-down"), self.client_link, self.layers.network),
            handler(String::from("client-resp")),
        ];
        for r in 0..n {
            nodes.push(link(
                format!("server-in-{r}"),
                self.server_link,
                self.layers.network,
            ));
        }
        for r in 0..n {
            nodes.push(handler(format!("server-req-{r}")));
        }
        for r in 0..n {
            let mut node = link(
                format!("server-out-{r}"),
                self.server_link,
                self.layers.network,
            );
            node.tied_trigger = true;
            nodes.push(node);
        }
        nodes[0].downstream = alloc::vec![StageId(1)];
        nodes[1].downstream = (0..n).map(|r| StageId((4 + r) as u32)).collect();
        for r in 0..n {
            nodes[4 + r].downstream = alloc::vec![StageId((4 + n + r) as u32)];
            nodes[4 + n + r].downstream = alloc::vec![StageId((4 + 2 * n + r) as u32)];
            nodes[4 + 2 * n + r].downstream = alloc::vec![StageId(2)];
        }
        nodes[2].downstream = alloc::vec![StageId(3)];
        Cluster::new(ClusterSpec {
            nodes,
            topology: Topology {
                kind: TopoKind::Network { n },
            },
            requests,
            hotspots,
            stragglers: Vec::new(),
            run: RunConfig {
                seed: self.seed,
                scheme: self.scheme,
                baseline_fraction: self.baseline_fraction,
                load: self.load,
                noise: NoiseModel::disabled(),
                overheads: self.overheads,
                retain_primary_on_win: self.retain_primary_on_win,
                policy_purges: true,
                horizon_us: (span_us * 1.15) as u64 + 2_000_000,
                sample_period_us: (span_us / 50.0) as u64 + 1,
                fixed_size_class: self.flow_size.is_fixed(),
            },
        })
    }
}

// ── Packet-processing (IDS cluster) scenario ─────────────────────────────

#[derive(Clone, Debug)]
pub struct StragglerSpec {
    /// Which processing node straggles.
    pub node: usize,
    /// Effective rate while straggling (fraction of nominal).
    pub rate_factor: f64,
    /// Start, as a fraction of the arrival span.
    pub start_frac: f64,
    /// Duration, as a fraction of the arrival span.
    pub duration_frac: f64,
}

impl Default for StragglerSpec {
    fn default() -> Self {
        StragglerSpec {
            node: 0,
            rate_factor: 0.1,
            start_frac: 0.4,
            duration_frac: 0.6,
        }
    }
}

/// Duplicated packet-processing scenario: an in-network duplicator fans
/// packets over CPU-bound nodes; a de-duplicator forwards unique packets.
#[derive(Clone, Debug)]
pub struct NfvConfig {
    pub nodes: usize,
    /// CPU-us of work per us (1.0 = one core).
    pub cpu_rate: f64,
    /// Per-packet CPU demand distribution (CPU-us).
    pub packet_demand: SizeDist,
    pub duplicate_queue_cap: Option<usize>,
    pub requests: usize,
    pub load: f64,
    pub scheme: SchemeSpec,
    pub straggler: Option<StragglerSpec>,
    pub layers: Layers,
    pub overheads: Overheads,
    pub seed: u64,
}

impl NfvConfig {
    /// Two-node IDS cluster preset with per-packet cost of 100 CPU-us.
    pub fn ids_cluster(scheme: SchemeSpec, load: f64, seed: u64) -> Self {
        NfvConfig {
            nodes: 2,
            cpu_rate: 1.0,
            packet_demand: SizeDist::Fixed(100),
            duplicate_queue_cap: Some(64),
            requests: 20_000,
            load,
            scheme,
            straggler: None,
            layers: Layers::default(),
            overheads: Overheads::ideal(),
            seed,
        }
    }

    pub fn arrival_rate_per_us(&self) -> f64 {
        self.load * self.nodes as f64 * self.cpu_rate / self.packet_demand.mean()
    }

    pub fn build(&self) -> Cluster {
        assert!(self.nodes >= 2);
        assert!(self.load > 0.0 && self.load < 1.0, "load must be in (0, 1)");
        let rate = self.arrival_rate_per_us();
        let requests = generate_workload(
            &WorkloadSpec {
                rate_per_us: rate,
                size: self.packet_demand.clone(),
                count: self.requests,
                n_servers: self.nodes,
                replication: self.nodes.min(2),
                baseline_fraction: 0.0,
            },
            self.seed,
        );
        let span_us = requests.last().map(|r| r.issue_time.as_us()).unwrap_or(0) as f64;
        let handler = |label: String| NodeSpec {
            label,
            kind: StageKind::Handler { fixed_us: 0 },
            cfg: StageKind::Handler { fixed_us: 0 }.stage_cfg(true),
            downstream: Vec::new(),
            noise_at: None,
            tied_trigger: false,
            proxy: None,
        };
        let mut nodes = alloc::vec![handler(String::from("duplicator"))];
        for i in 0..self.nodes {
            let kind = StageKind::Cpu(CpuParams {
                rate: self.cpu_rate,
                duplicate_queue_cap: self.duplicate_queue_cap,
            });
            let mut cfg = kind.stage_cfg(self.layers.cpu);
            cfg.boundary_us = self.overheads.quantum_us;
            nodes.push(NodeSpec {
                label: format!("cpu-{i}"),
                kind,
                cfg,
                downstream: Vec::new(),
                noise_at: None,
                tied_trigger: false,
                proxy: None,
            });
        }
        nodes.push(handler(String::from("dedup")));
        nodes[0].downstream = (0..self.nodes).map(|i| StageId((1 + i) as u32)).collect();
        let dedup = StageId((1 + self.nodes) as u32);
        for i in 0..self.nodes {
            nodes[1 + i].downstream = alloc::vec![dedup];
        }
        let mut stragglers = Vec::new();
        if let Some(s) = &self.straggler {
            let on = SimTime((span_us * s.start_frac) as u64);
            let off = SimTime((span_us * (s.start_frac + s.duration_frac)) as u64);
            let node_idx = 1 + s.node;
            stragglers.push((on, node_idx, self.cpu_rate * s.rate_factor));
            stragglers.push((off, node_idx, self.cpu_rate));
        }
        Cluster::new(ClusterSpec {
            nodes,
            topology: Topology {
                kind: TopoKind::PacketProc { nodes: self.nodes },
            },
            requests,
            hotspots: Vec::new(),
            stragglers,
            run: RunConfig {
                seed: self.seed,
                scheme: self.scheme,
                baseline_fraction: 0.0,
                load: self.load,
                noise: NoiseModel::disabled(),
                overheads: self.overheads,
                retain_primary_on_win: false,
                // Purging is approximated by the duplicate queue cap only.
                policy_purges: false,
                horizon_us: (span_us * 1.15) as u64 + 2_000_000,
                sample_period_us: (span_us / 50.0) as u64 + 1,
                fixed_size_class: self.packet_demand.is_fixed(),
            },
        })
    }
}

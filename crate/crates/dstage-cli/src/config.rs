//! Config-file schema (TOML) and the parsing helpers shared with the CLI:
//! durations with us/ms/s suffixes, sizes with KB/MB/GB suffixes, scheme
//! tokens, and empirical CDF files.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use dstage_core::cluster::Overheads;
use dstage_core::proxy::ThrottlerConfig;
use dstage_core::resources::{NoiseMode, NoiseModel};
use dstage_core::scenario::{
    websearch_cdf, DataParallelConfig, Layers, NetworkConfig, NfvConfig, SizeDist, StragglerSpec,
};
use dstage_core::sim::EmpiricalCdf;
use dstage_core::stage::AbortPolicy;

/// Parses a duration like `480ms`, `1s`, `250us`, or a bare microsecond
/// count, into microseconds.
pub fn parse_duration_us(s: &str) -> Result<u64> {
    let t = s.trim();
    let (num, mult) = if let Some(v) = t.strip_suffix("us") {
        (v, 1.0)
    } else if let Some(v) = t.strip_suffix("ms") {
        (v, 1_000.0)
    } else if let Some(v) = t.strip_suffix('s') {
        (v, 1_000_000.0)
    } else {
        (t, 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .with_context(|| format!("bad duration {s:?}"))?;
    if v < 0.0 {
        bail!("duration {s:?} is negative");
    }
    Ok((v * mult).round() as u64)
}

/// Parses a size like `50KB`, `10MB`, `1.5GB`, or bare bytes.
pub fn parse_size_bytes(s: &str) -> Result<u64> {
    let t = s.trim();
    let (num, mult) = if let Some(v) = t.strip_suffix("GB") {
        (v, 1e9)
    } else if let Some(v) = t.strip_suffix("MB") {
        (v, 1e6)
    } else if let Some(v) = t.strip_suffix("KB") {
        (v, 1e3)
    } else if let Some(v) = t.strip_suffix('B') {
        (v, 1.0)
    } else {
        (t, 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .with_context(|| format!("bad size {s:?}"))?;
    if v < 0.0 {
        bail!("size {s:?} is negative");
    }
    Ok((v * mult).round() as u64)
}

/// Loads an empirical CDF file: one `cumulative_probability value` pair per
/// line; `#` starts a comment.
pub fn load_cdf_file(path: &Path) -> Result<EmpiricalCdf> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading CDF file {}", path.display()))?;
    parse_cdf(&text).with_context(|| format!("parsing CDF file {}", path.display()))
}

pub fn parse_cdf(text: &str) -> Result<EmpiricalCdf> {
    let mut anchors = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(p), Some(v)) = (parts.next(), parts.next()) else {
            bail!("line {}: expected `prob value`", lineno + 1);
        };
        let p: f64 = p.parse().with_context(|| format!("line {}", lineno + 1))?;
        let v = parse_size_bytes(v)?;
        anchors.push((p, v as f64));
    }
    EmpiricalCdf::new(anchors).map_err(|e| anyhow::anyhow!("{e}"))
}

#[derive(Copy, Clone, PartialEq, Eq, PartialOrd, Ord, Debug)]
pub enum ScenarioKind {
    DataParallel,
    Network,
    Nfv,
}

impl ScenarioKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "data-parallel" => Ok(ScenarioKind::DataParallel),
            "network" => Ok(ScenarioKind::Network),
            "nfv" => Ok(ScenarioKind::Nfv),
            other => bail!("unknown scenario {other:?} (data-parallel | network | nfv)"),
        }
    }

    pub fn token(&self) -> &'static str {
        match self {
            ScenarioKind::DataParallel => "data-parallel",
            ScenarioKind::Network => "network",
            ScenarioKind::Nfv => "nfv",
        }
    }
}

// ── TOML schema ──────────────────────────────────────────────────────────

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub scenario: Option<String>,
    #[serde(default)]
    pub cluster: ClusterSection,
    #[serde(default)]
    pub workload: WorkloadSection,
    #[serde(default)]
    pub scheme: SchemeSection,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub proxy: ProxySection,
}

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub servers: Option<usize>,
    pub clients: Option<usize>,
    pub replication: Option<usize>,
    /// Storage service rate per slot, MB/s.
    pub storage_rate: Option<f64>,
    pub storage_concurrency: Option<usize>,
    /// abort | boundary | never
    pub storage_purge: Option<String>,
    /// Edge link capacities, Gb/s.
    pub server_link: Option<f64>,
    pub client_link: Option<f64>,
    pub use_proxy: Option<bool>,
    /// Duplicate-aware layers; the rest serve one level FIFO.
    pub layers: Option<Vec<String>>,
    pub quantum: Option<String>,
    pub packet_bytes: Option<u64>,
    pub purge_latency: Option<String>,
    pub purge_cost: Option<String>,
    pub duplication_cost: Option<String>,
    /// Packet-processing scenario knobs.
    pub nodes: Option<usize>,
    pub cpu_rate: Option<f64>,
    pub duplicate_queue_cap: Option<i64>,
    pub straggler: Option<bool>,
    pub straggler_rate_factor: Option<f64>,
}

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSection {
    pub requests: Option<usize>,
    pub load: Option<f64>,
    /// Fixed object/flow size (with suffix) or CPU-us per packet.
    pub size: Option<String>,
    /// `websearch` or a path to a CDF file.
    pub size_cdf: Option<String>,
}

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub name: Option<String>,
    pub threshold: Option<String>,
    pub timeout: Option<String>,
}

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub fraction: Option<f64>,
    /// (cumulative probability within the affected mass, multiplier) pairs.
    pub anchors: Option<Vec<(f64, f64)>>,
    /// service | response
    pub mode: Option<String>,
    pub hotspot_fraction: Option<f64>,
    pub hotspot_size: Option<String>,
}

#[derive(Deserialize, Debug, Default, Clone)]
#[serde(deny_unknown_fields)]
pub struct ProxySection {
    pub gamma: Option<f64>,
    pub window_ms: Option<f64>,
    pub min_completions: Option<u64>,
    pub alpha: Option<f64>,
    pub drift: Option<f64>,
    pub reprobe: Option<bool>,
    pub fixed_level: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn noise_model(&self) -> Result<NoiseModel> {
        let mut model = NoiseModel::cloud_default();
        if let Some(f) = self.noise.fraction {
            if !(0.0..=1.0).contains(&f) {
                bail!("noise.fraction must lie in [0, 1]");
            }
            model.affected_fraction = f;
        }
        if let Some(anchors) = &self.noise.anchors {
            model.inflation_table = anchors.clone();
        }
        if let Some(mode) = &self.noise.mode {
            model.mode = match mode.as_str() {
                "service" => NoiseMode::Service,
                "response" => NoiseMode::Response,
                other => bail!("unknown noise.mode {other:?} (service | response)"),
            };
        }
        Ok(model)
    }

    pub fn throttler(&self) -> ThrottlerConfig {
        let mut t = ThrottlerConfig::default();
        if let Some(g) = self.proxy.gamma {
            t.gamma = g;
        }
        if let Some(w) = self.proxy.window_ms {
            t.window_us = (w * 1_000.0) as u64;
        }
        if let Some(m) = self.proxy.min_completions {
            t.min_completions = m;
        }
        if let Some(a) = self.proxy.alpha {
            t.alpha = a;
        }
        if let Some(d) = self.proxy.drift {
            t.drift = d;
        }
        if let Some(r) = self.proxy.reprobe {
            t.reprobe = r;
        }
        if let Some(l) = self.proxy.fixed_level {
            t.fixed_level = Some(l);
        }
        t
    }

    pub fn overheads(&self) -> Result<Overheads> {
        let mut o = Overheads::default();
        if let Some(v) = &self.cluster.quantum {
            o.quantum_us = parse_duration_us(v)?;
        }
        if let Some(v) = self.cluster.packet_bytes {
            o.link_packet_bytes = v;
        }
        if let Some(v) = &self.cluster.purge_latency {
            o.purge_latency_us = parse_duration_us(v)?;
        }
        if let Some(v) = &self.cluster.purge_cost {
            o.purge_cost_us = parse_duration_us(v)?;
        }
        if let Some(v) = &self.cluster.duplication_cost {
            o.duplication_cost_us = parse_duration_us(v)?;
        }
        Ok(o)
    }

    pub fn layers(&self) -> Result<Layers> {
        let Some(list) = &self.cluster.layers else {
            return Ok(Layers::default());
        };
        let mut layers = Layers::none();
        for l in list {
            match l.as_str() {
                "storage" => layers.storage = true,
                "network" => layers.network = true,
                "cpu" => layers.cpu = true,
                other => bail!("unknown layer {other:?} (storage | network | cpu)"),
            }
        }
        Ok(layers)
    }

    pub fn storage_purge(&self) -> Result<AbortPolicy> {
        match self.cluster.storage_purge.as_deref() {
            None | Some("abort") => Ok(AbortPolicy::Instant),
            Some("boundary") => Ok(AbortPolicy::AtBoundary),
            Some("never") => Ok(AbortPolicy::Never),
            Some(other) => bail!("unknown storage_purge {other:?} (abort | boundary | never)"),
        }
    }

    pub fn size_dist(&self, base: &Path) -> Result<Option<SizeDist>> {
        if let Some(cdf) = &self.workload.size_cdf {
            if cdf == "websearch" {
                return Ok(Some(SizeDist::Cdf(websearch_cdf())));
            }
            let path = base.join(cdf);
            return Ok(Some(SizeDist::Cdf(load_cdf_file(&path)?)));
        }
        if let Some(size) = &self.workload.size {
            return Ok(Some(SizeDist::Fixed(parse_size_bytes(size)?)));
        }
        Ok(None)
    }
}

/// A fully resolved scenario configuration for one cell.
#[derive(Clone, Debug)]
pub enum ResolvedScenario {
    DataParallel(DataParallelConfig),
    Network(NetworkConfig),
    Nfv(NfvConfig),
}

impl ResolvedScenario {
    pub fn run(&self) -> dstage_core::record::RunOutput {
        match self {
            ResolvedScenario::DataParallel(c) => c.build().run(),
            ResolvedScenario::Network(c) => c.build().run(),
            ResolvedScenario::Nfv(c) => c.build().run(),
        }
    }

    pub fn set_scheme(&mut self, scheme: dstage_core::policy::SchemeSpec) {
        match self {
            ResolvedScenario::DataParallel(c) => c.scheme = scheme,
            ResolvedScenario::Network(c) => c.scheme = scheme,
            ResolvedScenario::Nfv(c) => c.scheme = scheme,
        }
    }

    pub fn set_noise_fraction(&mut self, fraction: f64) {
        if let ResolvedScenario::DataParallel(c) = self {
            c.noise.affected_fraction = fraction;
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        match self {
            ResolvedScenario::DataParallel(c) => c.seed = seed,
            ResolvedScenario::Network(c) => c.seed = seed,
            ResolvedScenario::Nfv(c) => c.seed = seed,
        }
    }
}

/// Builds the scenario for (kind, load, seed) from preset defaults plus the
/// config file overrides. The scheme is resolved separately.
pub fn build_scenario(
    kind: ScenarioKind,
    file: &FileConfig,
    base: &Path,
    load: f64,
    seed: u64,
    requests: Option<usize>,
) -> Result<ResolvedScenario> {
    use dstage_core::policy::{SchemeKind, SchemeSpec};
    if !(load > 0.0 && load < 1.0) {
        bail!("load {load} must lie in (0, 1)");
    }
    let placeholder = SchemeSpec::new(SchemeKind::SingleCopy);
    let c = &file.cluster;
    match kind {
        ScenarioKind::DataParallel => {
            let mut cfg = DataParallelConfig::testbed(placeholder, load, seed);
            if let Some(v) = c.servers {
                cfg.n_servers = v;
            }
            if let Some(v) = c.replication {
                cfg.replication_factor = v;
            }
            if let Some(v) = c.storage_rate {
                cfg.storage_rate = v; // MB/s == bytes/us
            }
            if let Some(v) = c.storage_concurrency {
                cfg.storage_concurrency = v;
            }
            cfg.storage_purge = file.storage_purge()?;
            if let Some(v) = c.server_link {
                cfg.server_link = v * 1_000.0; // Gb/s -> bits/us
            }
            if let Some(v) = c.client_link {
                cfg.client_link = v * 1_000.0;
            }
            if let Some(v) = c.use_proxy {
                cfg.use_proxy = v;
            }
            if let Some(size) = file.size_dist(base)? {
                cfg.object_size = size;
            }
            if let Some(v) = requests.or(file.workload.requests) {
                cfg.requests = v;
            }
            cfg.noise = file.noise_model()?;
            cfg.layers = file.layers()?;
            cfg.overheads = file.overheads()?;
            cfg.proxy = file.throttler();
            if cfg.replication_factor > cfg.n_servers || cfg.replication_factor < 1 {
                bail!("replication factor must lie in 1..=servers");
            }
            Ok(ResolvedScenario::DataParallel(cfg))
        }
        ScenarioKind::Network => {
            let mut cfg = NetworkConfig::cloud(placeholder, load, seed);
            if let Some(v) = c.servers {
                cfg.n_servers = v;
            }
            if let Some(v) = c.replication {
                cfg.replication_factor = v;
            }
            if let Some(v) = c.server_link {
                cfg.server_link = v * 1_000.0;
            }
            if let Some(v) = c.client_link {
                cfg.client_link = v * 1_000.0;
            }
            if let Some(size) = file.size_dist(base)? {
                cfg.flow_size = size;
            }
            if let Some(v) = requests.or(file.workload.requests) {
                cfg.requests = v;
            }
            if let Some(v) = file.noise.hotspot_fraction {
                cfg.hotspot_fraction = v;
            }
            if let Some(v) = &file.noise.hotspot_size {
                cfg.hotspot_bytes = parse_size_bytes(v)?;
            }
            cfg.layers = file.layers()?;
            let mut overheads = file.overheads()?;
            if c.purge_latency.is_none() {
                overheads.purge_latency_us = cfg.overheads.purge_latency_us;
            }
            cfg.overheads = overheads;
            if cfg.replication_factor > cfg.n_servers || cfg.replication_factor < 1 {
                bail!("replication factor must lie in 1..=servers");
            }
            Ok(ResolvedScenario::Network(cfg))
        }
        ScenarioKind::Nfv => {
            let mut cfg = NfvConfig::ids_cluster(placeholder, load, seed);
            if let Some(v) = c.nodes {
                cfg.nodes = v;
            }
            if let Some(v) = c.cpu_rate {
                cfg.cpu_rate = v;
            }
            match c.duplicate_queue_cap {
                Some(v) if v < 0 => cfg.duplicate_queue_cap = None,
                Some(v) => cfg.duplicate_queue_cap = Some(v as usize),
                None => {}
            }
            if let Some(size) = &file.workload.size {
                cfg.packet_demand = SizeDist::Fixed(parse_size_bytes(size)?);
            }
            if let Some(v) = requests.or(file.workload.requests) {
                cfg.requests = v;
            }
            if c.straggler == Some(true) {
                let mut s = StragglerSpec::default();
                if let Some(f) = c.straggler_rate_factor {
                    s.rate_factor = f;
                }
                cfg.straggler = Some(s);
            }
            cfg.layers = file.layers()?;
            cfg.overheads = file.overheads()?;
            Ok(ResolvedScenario::Nfv(cfg))
        }
    }
}

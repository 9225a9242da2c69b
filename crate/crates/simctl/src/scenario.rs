//! Runs a whole deployment in one process: a registry, one station per
//! farm and per reflector, the repository, the virtual probe mesh and the
//! fault timeline, all on one scaled clock.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vigil_core::clock::{Clock, ScaledClock, SystemClock};
use vigil_core::collector::{ExecModule, ModuleTable, TaskSpec};
use vigil_core::overlay::TreeEdge;
use vigil_core::predicate::Predicate;
use vigil_core::registry::RegistryConfig;
use vigil_core::signing::TrustKey;
use vigil_core::supervisor::{SignedWatch, WatchSpec};
use vigil_net::config::{ProbeSection, SupervisorSection};
use vigil_net::stopper::Stopper;
use vigil_net::{RegistryServer, RegistryServerConfig, Station, StationConfig, StationParts};
use vigil_repo::{RepoConfig, RepoStats, Repository};

use crate::config::{FaultAction, FaultEvent, ScenarioConfig};
use crate::error::Result;
use crate::mesh::VirtualMesh;
use crate::modules::{SimActuator, SimHealthCheck, SimModule, CLUSTER};
use crate::world::SimWorld;

/// Simulated time between start-up and the first scheduled collect, so
/// that stations register and the repository attaches first.
pub const LEAD_MS: u64 = 2_000;

/// Nearest-rank percentiles of a latency sample, in simulated ms.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub count: usize,
    pub p50: u64,
    pub p90: u64,
    pub p99: u64,
    pub max: u64,
}

impl Percentiles {
    pub fn of(mut sample: Vec<u64>) -> Self {
        sample.sort_unstable();
        let rank = |q: f64| {
            if sample.is_empty() {
                0
            } else {
                let i = ((q * sample.len() as f64).ceil() as usize).clamp(1, sample.len());
                sample[i - 1]
            }
        };
        Self {
            count: sample.len(),
            p50: rank(0.5),
            p90: rank(0.9),
            p99: rank(0.99),
            max: sample.last().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FarmReport {
    pub name: String,
    pub collects_planned: u64,
    /// Values whose due time falls in the scenario window.
    pub values: u64,
    pub rate_per_s: f64,
    pub dispatched: u64,
    pub completed: u64,
    pub failed: u64,
    pub timeouts: u64,
    pub saturated: u64,
    pub mean_active_workers: f64,
    pub peak_workers: usize,
    pub latency: Percentiles,
    /// Tasks whose node no fault ever touched.
    pub healthy_latency: Percentiles,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MstReport {
    pub vertices: Vec<String>,
    pub edges: Vec<TreeEdge>,
    pub total_weight: f64,
    pub rounds: u64,
    pub churn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub seed: u64,
    pub duration_ms: u64,
    pub time_factor: f64,
    pub wall_ms: u64,
    pub farms: Vec<FarmReport>,
    /// Total over farms.
    pub values: u64,
    pub rate_per_s: f64,
    pub faults_applied: u64,
    pub faults_ignored: u64,
    pub restarts: u64,
    pub alerts: u64,
    pub mst: Option<MstReport>,
    pub repository: Option<RepoStats>,
    /// SHA-256 over every windowed value, addressed by round instead of
    /// wall time; equal seeds give equal hashes when every collect lands.
    pub stream_hash: String,
    /// The hash a fault-free run must produce; absent when node faults
    /// are scheduled.
    pub expected_stream_hash: Option<String>,
}

pub struct Scenario {
    cfg: ScenarioConfig,
    clock: Arc<dyn Clock>,
    world: Arc<SimWorld>,
    registry: RegistryServer,
    farms: Vec<Station>,
    reflectors: Vec<Station>,
    repository: Option<Repository>,
    stop: Arc<Stopper>,
    threads: Vec<JoinHandle<()>>,
    applied: Arc<AtomicU64>,
    ignored: Arc<AtomicU64>,
    /// Nodes named by any node fault; excluded from healthy latencies.
    touched: BTreeSet<(String, String)>,
    started: Instant,
}

fn link_peers(cfg: &ScenarioConfig, id: &str) -> BTreeMap<String, String> {
    cfg.reflectors
        .iter()
        .filter(|r| *r != id)
        .map(|r| (r.clone(), "simulated".to_string()))
        .collect()
}

impl Scenario {
    pub fn start(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let started = Instant::now();
        let clock: Arc<dyn Clock> = Arc::new(ScaledClock::new(SystemClock.now_ms(), cfg.time_factor));
        let t0 = clock.now_ms() + LEAD_MS;
        let world = Arc::new(SimWorld::new(&cfg, t0));
        let registry = RegistryServer::start(
            RegistryServerConfig {
                listen: "127.0.0.1:0".into(),
                peer_id: None,
                peers: Vec::new(),
                registry: RegistryConfig {
                    min_lease_ms: cfg.registry.min_lease_ms,
                    max_lease_ms: cfg.registry.max_lease_ms,
                    sweep_ms: cfg.registry.sweep_ms,
                    groups: cfg.groups.iter().cloned().collect(),
                    ..RegistryConfig::default()
                },
                sync_ms: 5_000,
                token: None,
            },
            clock.clone(),
        )?;
        let base = StationConfig {
            groups: cfg.groups.clone(),
            registries: vec![registry.endpoint()],
            lease_ms: cfg.registry.lease_ms,
            retention: cfg.station.retention.clone(),
            compact_every_ms: cfg.station.compact_every_ms,
            trust_key: cfg.trust_key.clone(),
            queue_hwm: cfg.station.queue_hwm,
            engine: cfg.station.engine.clone(),
            ..StationConfig::default()
        };
        let modules = || {
            ModuleTable::new()
                .with(ExecModule)
                .with(SimModule::load(world.clone()))
                .with(SimModule::net(world.clone()))
        };

        let mut farms = Vec::new();
        for spec in &cfg.farms {
            let station = Station::start(
                StationConfig {
                    service_id: spec.name.clone(),
                    ..base.clone()
                },
                StationParts {
                    modules: modules(),
                    ..StationParts::default()
                },
                clock.clone(),
            )?;
            {
                let engine = station.engine();
                let mut engine = engine.lock();
                let now = clock.now_ms();
                for (j, node) in world.nodes(&spec.name).iter().enumerate() {
                    let due = t0 + SimWorld::offset(spec, j);
                    let target = SimModule::target(&spec.name, node);
                    let mut modules = vec![SimModule::LOAD];
                    if spec.traffic {
                        modules.push(SimModule::NET);
                    }
                    for m in modules {
                        let task = TaskSpec::new(m, &target, spec.period_ms).deadline(spec.deadline_ms).starting_at(due);
                        engine.schedule(task, now)?;
                    }
                }
                engine.reset_stats(now);
            }
            farms.push(station);
        }

        let trust = TrustKey::new(&cfg.trust_key);
        let mut reflectors = Vec::new();
        for id in &cfg.reflectors {
            let supervisor = cfg.supervisor.enabled.then(|| {
                let spec = WatchSpec {
                    restart_limit: cfg.supervisor.restart_limit,
                    actuator: SimActuator::NAME.into(),
                    ..WatchSpec::new(id, cfg.supervisor.period_ms, cfg.supervisor.check_deadline_ms)
                };
                SupervisorSection {
                    watches: vec![SignedWatch {
                        signature: trust.sign(&spec),
                        spec,
                    }],
                    ..SupervisorSection::default()
                }
            });
            let station = Station::start(
                StationConfig {
                    service_id: id.clone(),
                    role: "reflector".into(),
                    probe: Some(ProbeSection {
                        listen: None,
                        peers: link_peers(&cfg, id),
                        config: cfg.probe.clone(),
                    }),
                    supervisor,
                    ..base.clone()
                },
                StationParts {
                    modules: modules(),
                    health_check: Some(Arc::new(SimHealthCheck(world.clone()))),
                    actuators: vec![Arc::new(SimActuator {
                        world: world.clone(),
                        works: cfg.supervisor.restart_works,
                    })],
                    notifiers: Vec::new(),
                },
                clock.clone(),
            )?;
            reflectors.push(station);
        }

        let repository = if cfg.repository.enabled {
            Some(Repository::start(
                RepoConfig {
                    registries: vec![registry.endpoint()],
                    groups: cfg.groups.clone(),
                    listen: cfg.repository.listen.clone(),
                    admin_tokens: vec![cfg.repository.admin_token.clone()],
                    trust_key: Some(cfg.trust_key.clone()),
                    retention: cfg.station.retention.clone(),
                    compact_every_ms: cfg.station.compact_every_ms,
                    mst: cfg.mst.clone(),
                    cost: cfg.probe.cost,
                    ..RepoConfig::default()
                },
                clock.clone(),
            )?)
        } else {
            None
        };

        let stop = Arc::new(Stopper::new());
        let mut threads = Vec::new();
        if !reflectors.is_empty() {
            let probers = reflectors
                .iter()
                .filter_map(|s| s.prober().map(|p| (s.service_id().to_string(), p)))
                .collect();
            let mesh = VirtualMesh::new(world.clone(), probers);
            threads.push(mesh.spawn(clock.clone(), cfg.probe.period_ms, stop.clone())?);
        }
        let applied = Arc::new(AtomicU64::new(0));
        let ignored = Arc::new(AtomicU64::new(0));
        threads.push(spawn_faults(
            cfg.faults.clone(),
            world.clone(),
            clock.clone(),
            stop.clone(),
            applied.clone(),
            ignored.clone(),
        )?);
        let touched = cfg
            .faults
            .iter()
            .filter_map(|f| match &f.action {
                FaultAction::KillNode { farm, node } | FaultAction::RestoreNode { farm, node } => {
                    Some((farm.clone(), node.clone()))
                }
                _ => None,
            })
            .collect();
        tracing::info!(t0, registry = %registry.endpoint(), "scenario started");
        Ok(Self {
            cfg,
            clock,
            world,
            registry,
            farms,
            reflectors,
            repository,
            stop,
            threads,
            applied,
            ignored,
            touched,
            started,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn world(&self) -> &Arc<SimWorld> {
        &self.world
    }

    /// Scenario start in clock milliseconds.
    pub fn t0(&self) -> u64 {
        self.world.t0()
    }

    pub fn registry_endpoint(&self) -> String {
        self.registry.endpoint()
    }

    pub fn station(&self, id: &str) -> Option<&Station> {
        self.farms.iter().chain(&self.reflectors).find(|s| s.service_id() == id)
    }

    pub fn repository(&self) -> Option<&Repository> {
        self.repository.as_ref()
    }

    /// Simulated milliseconds since `t0`; zero before it.
    pub fn elapsed_ms(&self) -> u64 {
        self.clock.now_ms().saturating_sub(self.t0())
    }

    /// Blocks until `t0 + at_ms` on the scenario clock.
    pub fn run_until(&self, at_ms: u64) {
        let target = self.t0() + at_ms;
        loop {
            let now = self.clock.now_ms();
            if now >= target {
                return;
            }
            std::thread::sleep(self.clock.real(target - now).min(Duration::from_millis(200)));
        }
    }

    /// Applies a fault now; `false` when its target is unknown.
    pub fn inject(&self, action: &FaultAction) -> bool {
        self.world.apply(action)
    }

    /// Longest farm deadline: values due before the window end have landed
    /// once this much more time has passed.
    pub fn drain_ms(&self) -> u64 {
        self.cfg.farms.iter().map(|f| f.deadline_ms).max().unwrap_or(0) + 500
    }

    /// Measures the window `[t0, t0 + duration)`; call after
    /// `run_until(duration + drain)`.
    pub fn report(&self) -> Report {
        let (t0, end) = (self.t0(), self.t0() + self.cfg.duration_ms);
        let secs = self.cfg.duration_ms as f64 / 1_000.0;
        let mut hasher = Sha256::new();
        let mut lines = Vec::new();
        let mut farms = Vec::new();
        for (spec, station) in self.cfg.farms.iter().zip(&self.farms) {
            let values = station
                .with_store(|s| s.query_raw(&Predicate::any(), t0, end - 1))
                .unwrap_or_default();
            let mut count = 0;
            for v in values.iter().filter(|v| v.cluster == CLUSTER) {
                count += 1;
                let k = self.world.round_of(&v.farm, v.time);
                lines.push(format!("{}\t{}\t{}\t{}\t{}\t{:016x}", v.farm, v.cluster, v.node, v.param, k, v.value.to_bits()));
            }
            let engine = station.engine();
            let engine = engine.lock();
            let stats = engine.stats();
            let targets: BTreeMap<_, _> = engine.tasks().into_iter().map(|t| (t.task_id, t.target)).collect();
            let healthy = |id| {
                targets
                    .get(id)
                    .and_then(|t: &String| t.split_once('/'))
                    .is_some_and(|(f, n)| !self.touched.contains(&(f.to_string(), n.to_string())))
            };
            let all: Vec<u64> = engine.latencies().iter().map(|(_, l)| *l).collect();
            let ok: Vec<u64> = engine.latencies().iter().filter(|(id, _)| healthy(id)).map(|(_, l)| *l).collect();
            farms.push(FarmReport {
                name: spec.name.clone(),
                collects_planned: planned_collects(spec, self.cfg.duration_ms),
                values: count,
                rate_per_s: count as f64 / secs,
                dispatched: stats.dispatched,
                completed: stats.completed,
                failed: stats.failed,
                timeouts: stats.timeouts,
                saturated: stats.saturated,
                mean_active_workers: stats.mean_active_workers,
                peak_workers: stats.peak_workers,
                latency: Percentiles::of(all),
                healthy_latency: Percentiles::of(ok),
            });
        }
        lines.sort_unstable();
        for l in &lines {
            hasher.update(l.as_bytes());
            hasher.update(b"\n");
        }
        let (restarts, alerts) = self
            .reflectors
            .iter()
            .map(|s| s.stats())
            .fold((0, 0), |(r, a), s| (r + s.restarts, a + s.alerts));
        let mst = self.repository.as_ref().filter(|_| !self.reflectors.is_empty()).map(|r| {
            let view = r.mst();
            MstReport {
                vertices: view.vertices,
                edges: view.edges,
                total_weight: view.total_weight,
                rounds: view.rounds,
                churn: view.churn,
            }
        });
        let values: u64 = farms.iter().map(|f| f.values).sum();
        Report {
            seed: self.cfg.seed,
            duration_ms: self.cfg.duration_ms,
            time_factor: self.cfg.time_factor,
            wall_ms: self.started.elapsed().as_millis() as u64,
            values,
            rate_per_s: values as f64 / secs,
            farms,
            faults_applied: self.applied.load(Ordering::SeqCst),
            faults_ignored: self.ignored.load(Ordering::SeqCst),
            restarts,
            alerts,
            mst,
            repository: self.repository.as_ref().map(Repository::stats),
            stream_hash: hex::encode(hasher.finalize()),
            expected_stream_hash: expected_stream_hash(&self.cfg),
        }
    }

    pub fn shutdown(&mut self) {
        self.stop.stop();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        if let Some(mut r) = self.repository.take() {
            r.shutdown();
        }
        for s in self.farms.iter_mut().chain(self.reflectors.iter_mut()) {
            s.shutdown(true);
        }
        self.registry.shutdown();
    }
}

impl Drop for Scenario {
    fn drop(&mut self) {
        if !self.stop.is_stopped() {
            self.shutdown();
        }
    }
}

fn spawn_faults(
    mut faults: Vec<FaultEvent>,
    world: Arc<SimWorld>,
    clock: Arc<dyn Clock>,
    stop: Arc<Stopper>,
    applied: Arc<AtomicU64>,
    ignored: Arc<AtomicU64>,
) -> std::io::Result<JoinHandle<()>> {
    faults.sort_by_key(|f| f.at_ms);
    std::thread::Builder::new().name("sim-faults".into()).spawn(move || {
        for f in faults {
            let at = world.t0() + f.at_ms;
            loop {
                let now = clock.now_ms();
                if now >= at {
                    break;
                }
                if stop.wait(clock.real(at - now).min(Duration::from_millis(200))) {
                    return;
                }
            }
            if world.apply(&f.action) {
                tracing::info!(at_ms = f.at_ms, action = ?f.action, "fault applied");
                applied.fetch_add(1, Ordering::SeqCst);
            } else {
                tracing::warn!(at_ms = f.at_ms, action = ?f.action, "fault target unknown; ignored");
                ignored.fetch_add(1, Ordering::SeqCst);
            }
        }
    })
}

/// Collects whose due time falls in `[0, duration)` of the scenario.
pub fn planned_collects(spec: &crate::config::FarmSpec, duration_ms: u64) -> u64 {
    let per_node = |j: usize| {
        let offset = SimWorld::offset(spec, j);
        if offset >= duration_ms {
            0
        } else {
            (duration_ms - offset).div_ceil(spec.period_ms)
        }
    };
    let modules = if spec.traffic { 2 } else { 1 };
    (0..spec.nodes).map(per_node).sum::<u64>() * modules
}

/// The stream hash of a run in which every planned collect lands, derived
/// from the world model alone.
pub fn expected_stream_hash(cfg: &ScenarioConfig) -> Option<String> {
    let node_faults = cfg
        .faults
        .iter()
        .any(|f| matches!(f.action, FaultAction::KillNode { .. } | FaultAction::RestoreNode { .. }));
    if node_faults {
        return None;
    }
    let world = SimWorld::new(cfg, 0);
    let mut lines = Vec::new();
    for spec in &cfg.farms {
        for (j, node) in world.nodes(&spec.name).iter().enumerate() {
            let offset = SimWorld::offset(spec, j);
            let mut k = 0;
            while offset + k * spec.period_ms < cfg.duration_ms {
                let mut values = world.load_values(&spec.name, node, k).unwrap_or_default();
                if spec.traffic {
                    values.extend(world.net_values(&spec.name, node, k).unwrap_or_default());
                }
                for (param, v) in values {
                    lines.push(format!("{}\t{}\t{}\t{}\t{}\t{:016x}", spec.name, CLUSTER, node, param, k, v.to_bits()));
                }
                k += 1;
            }
        }
    }
    lines.sort_unstable();
    let mut hasher = Sha256::new();
    for l in &lines {
        hasher.update(l.as_bytes());
        hasher.update(b"\n");
    }
    Some(hex::encode(hasher.finalize()))
}

/// Starts the scenario, runs it to the end plus the drain time and
/// returns the report.
pub fn run_scenario(cfg: ScenarioConfig) -> Result<Report> {
    let mut scenario = Scenario::start(cfg)?;
    scenario.run_until(scenario.config().duration_ms + scenario.drain_ms());
    let report = scenario.report();
    scenario.shutdown();
    Ok(report)
}

//! The station server: collection engine, store, subscription hub, filter
//! agents, optional link prober and supervisor behind one control
//! endpoint, kept registered with the registries.
//!
//! Threads: the collector coordinator and its workers, one ingest thread
//! (single writer of the store), one thread per control connection plus
//! one writer thread per subscription lane, and optional link-export,
//! probe and supervisor threads.

use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use vigil_core::clock::Clock;
use vigil_core::collector::{
    Engine, EngineStats, ExecModule, ModuleTable, PoolState, ResultBatch, RunnerConfig, TaskSpec, ThreadedCollector,
};
use vigil_core::metric::{MetricValue, SeriesKey};
use vigil_core::predicate::Predicate;
use vigil_core::probe::Prober;
use vigil_core::proto::Frame;
use vigil_core::registry::ServiceDescriptor;
use vigil_core::signing::TrustKey;
use vigil_core::store::Store;
use vigil_core::subscription::{history, Hub, HubConfig, SubscriptionStream};
use vigil_core::supervisor::{Action, Actuator, Alert, AlertLog, ExecActuator, HealthCheck, Notifier, Supervisor};

use crate::config::StationConfig;
use crate::conn::{write_frame, FrameConn, Listener};
use crate::error::{NetError, Result};
use crate::health::{TcpHealthCheck, WebhookNotifier};
use crate::probe_agent::UdpProbeAgent;
use crate::registry_client::{LeaseKeeper, RegistryClient};
use crate::stopper::Stopper;

pub const ALERTS_CLUSTER: &str = "_alerts";

const INGEST_POLL: Duration = Duration::from_millis(20);
const LANE_POLL: Duration = Duration::from_millis(100);
const FLUSH_EVERY: Duration = Duration::from_millis(500);
/// A client that accepts nothing for this long is dropped.
const WRITE_TIMEOUT: Duration = Duration::from_secs(10);
/// Per-second ingest counts kept for rate reporting.
const RATE_HISTORY_S: u64 = 3_600;

/// Pluggable pieces the configuration file cannot name.
pub struct StationParts {
    pub modules: ModuleTable,
    pub health_check: Option<Arc<dyn HealthCheck>>,
    pub actuators: Vec<Arc<dyn Actuator>>,
    pub notifiers: Vec<Arc<dyn Notifier>>,
}

impl Default for StationParts {
    fn default() -> Self {
        Self {
            modules: ModuleTable::new().with(ExecModule),
            health_check: None,
            actuators: Vec::new(),
            notifiers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationStats {
    pub service_id: String,
    pub ingested: u64,
    pub rejected: u64,
    pub published: u64,
    pub overflowed: u64,
    pub subscriptions: usize,
    pub records: usize,
    pub dropped_batches: u64,
    pub alerts: u64,
    pub restarts: u64,
    pub pool: PoolState,
    pub collector: EngineStats,
}

#[derive(Default)]
struct Counters {
    ingested: AtomicU64,
    rejected: AtomicU64,
}

struct Shared {
    id: String,
    farm: String,
    clock: Arc<dyn Clock>,
    store: Mutex<Store>,
    hub: Hub,
    trust: TrustKey,
    engine: Arc<Mutex<Engine>>,
    supervisor: Option<Mutex<Supervisor>>,
    prober: Option<Arc<Mutex<Prober>>>,
    alerts: Mutex<Vec<Alert>>,
    counters: Counters,
    per_second: Mutex<BTreeMap<u64, u64>>,
    stop: Stopper,
}

impl Shared {
    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    /// The single path into the store and the hub.
    fn ingest(&self, values: &[MetricValue]) -> usize {
        if values.is_empty() {
            return 0;
        }
        let accepted = match self.store.lock().insert(values) {
            Ok(n) => n,
            Err(e) => {
                tracing::error!("store insert failed: {e}");
                0
            }
        };
        self.counters.ingested.fetch_add(accepted as u64, Ordering::Relaxed);
        self.counters
            .rejected
            .fetch_add((values.len() - accepted) as u64, Ordering::Relaxed);
        let second = self.now() / 1_000;
        {
            let mut ps = self.per_second.lock();
            *ps.entry(second).or_default() += accepted as u64;
            while ps.len() as u64 > RATE_HISTORY_S {
                ps.pop_first();
            }
        }
        self.hub.publish(values);
        accepted
    }
}

pub struct Station {
    shared: Arc<Shared>,
    config: StationConfig,
    listener: Listener,
    endpoint: String,
    collector: Option<ThreadedCollector>,
    agent: Option<UdpProbeAgent>,
    keeper: Option<LeaseKeeper>,
    threads: Vec<JoinHandle<()>>,
}

impl Station {
    pub fn start(config: StationConfig, parts: StationParts, clock: Arc<dyn Clock>) -> Result<Self> {
        config.validate()?;
        let now = clock.now_ms();
        let policy = config.retention_policy()?;
        let store = match &config.store_path {
            Some(dir) => Store::open(dir, policy)?,
            None => Store::in_memory(policy),
        };
        let farm = config.farm_name().to_string();
        let hub = Hub::new(HubConfig {
            queue_hwm: config.queue_hwm,
            local_farm: farm.clone(),
        });
        let trust = TrustKey::new(&config.trust_key);

        let mut engine = Engine::new(config.engine.clone(), parts.modules.names().map(str::to_string));
        for task in &config.tasks {
            let n = task.targets.len() as u64;
            for (i, target) in task.targets.iter().enumerate() {
                let offset = if task.stagger { task.period_ms * i as u64 / n } else { 0 };
                let mut spec = TaskSpec::new(&task.module, target, task.period_ms).starting_at(now + offset);
                if let Some(d) = task.deadline_ms {
                    spec = spec.deadline(d);
                }
                engine.schedule(spec, now)?;
            }
        }
        let (collector, results) = ThreadedCollector::start(engine, parts.modules, clock.clone(), RunnerConfig::default());

        let supervisor = match &config.supervisor {
            None => None,
            Some(section) => {
                let check = parts.health_check.unwrap_or_else(|| Arc::new(TcpHealthCheck));
                let mut sup = Supervisor::new(check, trust.clone());
                let log = match &section.alert_log {
                    Some(path) => AlertLog::to_file(path),
                    None => AlertLog::in_memory(),
                };
                sup.add_notifier(Arc::new(log));
                if let Some(url) = &section.webhook {
                    sup.add_notifier(Arc::new(WebhookNotifier::new(url)));
                }
                if let Some(cmd) = &section.restart_command {
                    sup.add_actuator(Arc::new(ExecActuator::new(cmd)));
                }
                for a in parts.actuators {
                    sup.add_actuator(a);
                }
                for n in parts.notifiers {
                    sup.add_notifier(n);
                }
                for w in &section.watches {
                    sup.add_watch(w.clone(), now)?;
                }
                Some(Mutex::new(sup))
            }
        };

        let prober = match &config.probe {
            None => None,
            Some(p) => {
                let mut prober = Prober::new(p.config.clone(), Prober::id_from_name(&config.service_id))?;
                prober.set_peers(p.peers.keys().cloned());
                Some(Arc::new(Mutex::new(prober)))
            }
        };

        let shared = Arc::new(Shared {
            id: config.service_id.clone(),
            farm,
            clock: clock.clone(),
            store: Mutex::new(store),
            hub,
            trust,
            engine: collector.engine(),
            supervisor,
            prober: prober.clone(),
            alerts: Mutex::new(Vec::new()),
            counters: Counters::default(),
            per_second: Mutex::new(BTreeMap::new()),
            stop: Stopper::new(),
        });

        let handler_shared = shared.clone();
        let listener = Listener::spawn(&config.listen, "station", move |conn| {
            handle_connection(&handler_shared, conn);
        })?;
        let endpoint = config.advertise.clone().unwrap_or_else(|| listener.addr().to_string());

        let mut threads = Vec::new();
        let s = shared.clone();
        let compact_every = config.compact_every_ms;
        let flushes = config.store_path.is_some();
        threads.push(
            thread::Builder::new()
                .name(format!("{}-ingest", config.service_id))
                .spawn(move || ingest_loop(&s, &results, compact_every, flushes))?,
        );

        let agent = match (&config.probe, &prober) {
            (Some(section), Some(prober)) => {
                let s = shared.clone();
                let period_ms = section.config.period_ms;
                let p = prober.clone();
                threads.push(
                    thread::Builder::new()
                        .name(format!("{}-links", config.service_id))
                        .spawn(move || link_export_loop(&s, &p, period_ms))?,
                );
                match &section.listen {
                    Some(bind) => Some(UdpProbeAgent::start(bind, prober.clone(), &section.peers, clock.clone())?),
                    None => None,
                }
            }
            _ => None,
        };

        if shared.supervisor.is_some() {
            let s = shared.clone();
            threads.push(
                thread::Builder::new()
                    .name(format!("{}-supervisor", config.service_id))
                    .spawn(move || supervisor_loop(&s))?,
            );
        }

        let mut station = Self {
            shared,
            config,
            listener,
            endpoint,
            collector: Some(collector),
            agent,
            keeper: None,
            threads,
        };
        if !station.config.registries.is_empty() {
            let client =
                RegistryClient::new(station.config.registries.clone()).with_token(station.config.registry_token.clone());
            let keeper = LeaseKeeper::start(client, station.descriptor(), station.config.lease_ms, clock)?;
            station.keeper = Some(keeper);
        }
        Ok(station)
    }

    /// What this station announces to the registries.
    pub fn descriptor(&self) -> ServiceDescriptor {
        let mut d = ServiceDescriptor::new(&self.config.service_id, self.config.groups.iter().cloned(), &self.endpoint)
            .with_attr("role", &self.config.role)
            .with_attr("farm", &self.shared.farm);
        for (k, v) in &self.config.attributes {
            d = d.with_attr(k, v);
        }
        if let Some(agent) = &self.agent {
            d = d.with_attr("probe", agent.addr().to_string());
        }
        d
    }

    pub fn service_id(&self) -> &str {
        &self.shared.id
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn config(&self) -> &StationConfig {
        &self.config
    }

    pub fn hub(&self) -> &Hub {
        &self.shared.hub
    }

    pub fn with_store<R>(&self, f: impl FnOnce(&mut Store) -> R) -> R {
        f(&mut self.shared.store.lock())
    }

    pub fn engine(&self) -> Arc<Mutex<Engine>> {
        self.shared.engine.clone()
    }

    pub fn prober(&self) -> Option<Arc<Mutex<Prober>>> {
        self.shared.prober.clone()
    }

    pub fn probe_addr(&self) -> Option<SocketAddr> {
        self.agent.as_ref().map(UdpProbeAgent::addr)
    }

    pub fn with_supervisor<R>(&self, f: impl FnOnce(&mut Supervisor) -> R) -> Option<R> {
        self.shared.supervisor.as_ref().map(|s| f(&mut s.lock()))
    }

    /// Feeds locally produced values through the same path as collected ones.
    pub fn ingest(&self, values: &[MetricValue]) -> usize {
        self.shared.ingest(values)
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.shared.alerts.lock().clone()
    }

    /// Accepted values per clock second.
    pub fn ingest_per_second(&self) -> BTreeMap<u64, u64> {
        self.shared.per_second.lock().clone()
    }

    pub fn lease_keeper(&self) -> Option<&LeaseKeeper> {
        self.keeper.as_ref()
    }

    pub fn stats(&self) -> StationStats {
        let (pool, collector) = {
            let e = self.shared.engine.lock();
            (e.pool_state(), e.stats())
        };
        let (alerts, restarts) = self
            .with_supervisor(|s| (s.total_alerts(), s.total_restarts()))
            .unwrap_or((0, 0));
        StationStats {
            service_id: self.shared.id.clone(),
            ingested: self.shared.counters.ingested.load(Ordering::Relaxed),
            rejected: self.shared.counters.rejected.load(Ordering::Relaxed),
            published: self.shared.hub.published(),
            overflowed: self.shared.hub.overflowed(),
            subscriptions: self.shared.hub.subscription_count(),
            records: self.shared.store.lock().record_count(),
            dropped_batches: self.collector.as_ref().map_or(0, ThreadedCollector::dropped_batches),
            alerts,
            restarts,
            pool,
            collector,
        }
    }

    pub fn connection_count(&self) -> usize {
        self.listener.connection_count()
    }

    /// Stops everything. A clean stop deregisters; otherwise the lease is
    /// left to expire, as after a crash.
    pub fn shutdown(&mut self, deregister: bool) {
        if self.shared.stop.is_stopped() {
            return;
        }
        if let Some(mut k) = self.keeper.take() {
            k.stop(deregister);
        }
        self.shared.stop.stop();
        self.listener.shutdown();
        if let Some(mut a) = self.agent.take() {
            a.shutdown();
        }
        if let Some(c) = self.collector.take() {
            c.shutdown();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let mut store = self.shared.store.lock();
        if let Err(e) = store.flush().and_then(|()| store.snapshot()) {
            tracing::error!("final store snapshot failed: {e}");
        }
    }
}

impl Drop for Station {
    fn drop(&mut self) {
        self.shutdown(true);
    }
}

fn ingest_loop(shared: &Shared, results: &Receiver<ResultBatch>, compact_every_ms: u64, flushes: bool) {
    let mut next_compact = shared.now() + compact_every_ms;
    let mut last_flush = Instant::now();
    while !shared.stop.is_stopped() {
        match results.recv_timeout(INGEST_POLL) {
            Ok(batch) => {
                shared.ingest(&batch.values);
                for more in results.try_iter().take(256) {
                    shared.ingest(&more.values);
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                if shared.stop.wait(INGEST_POLL) {
                    break;
                }
            }
        }
        let now = shared.now();
        let synthetic = shared.hub.tick_due(now);
        shared.ingest(&synthetic);
        if now >= next_compact {
            let bins = shared.store.lock().compact(now);
            if bins > 0 {
                tracing::debug!(bins, "compacted");
                if flushes {
                    if let Err(e) = shared.store.lock().snapshot() {
                        tracing::error!("snapshot after compaction failed: {e}");
                    }
                }
            }
            next_compact = now + compact_every_ms;
        }
        if flushes && last_flush.elapsed() >= FLUSH_EVERY {
            if let Err(e) = shared.store.lock().flush() {
                tracing::error!("store flush failed: {e}");
            }
            last_flush = Instant::now();
        }
    }
}

fn link_export_loop(shared: &Shared, prober: &Mutex<Prober>, period_ms: u64) {
    let period = shared.clock.real(period_ms);
    while !shared.stop.wait(period) {
        let now = shared.now();
        let values = {
            let mut p = prober.lock();
            p.sweep(now);
            p.export_metrics(&shared.farm, now)
        };
        shared.ingest(&values);
    }
}

fn supervisor_loop(shared: &Shared) {
    let Some(sup) = &shared.supervisor else { return };
    let step_ms = sup
        .lock()
        .watches()
        .map(|w| w.spec().period_ms)
        .min()
        .map_or(1_000, |p| (p / 4).max(1));
    let step = shared.clock.real(step_ms);
    while !shared.stop.wait(step) {
        let now = shared.now();
        let actions = sup.lock().tick(now);
        for (target, action) in actions {
            match action {
                Action::Escalated(alert) => {
                    tracing::warn!(%target, "escalated after {} restart attempts", alert.attempts.len());
                    let v = MetricValue::new(
                        &SeriesKey::new(&shared.farm, ALERTS_CLUSTER, &target, "escalated"),
                        alert.at,
                        alert.attempts.len() as f64,
                    );
                    shared.alerts.lock().push(alert);
                    shared.ingest(&[v]);
                }
                Action::Restarted { attempt } => tracing::info!(%target, attempt, "restart issued"),
                Action::RestartFailed { attempt, reason } => {
                    tracing::warn!(%target, attempt, "restart failed: {reason}")
                }
                Action::Recovered => tracing::info!(%target, "recovered"),
            }
        }
    }
}

type SharedWriter = Arc<Mutex<TcpStream>>;

fn send(writer: &SharedWriter, frame: &Frame) -> Result<()> {
    write_frame(&mut *writer.lock(), frame)
}

struct LaneHandle {
    sub_id: u64,
    retired: Arc<AtomicBool>,
    thread: JoinHandle<()>,
}

impl LaneHandle {
    fn retire(self, hub: &Hub) {
        self.retired.store(true, Ordering::SeqCst);
        hub.unsubscribe(self.sub_id);
        let _ = self.thread.join();
    }
}

fn handle_connection(shared: &Arc<Shared>, mut conn: FrameConn) {
    let writer: SharedWriter = match conn.stream() {
        Ok(s) => {
            let _ = s.set_write_timeout(Some(WRITE_TIMEOUT));
            Arc::new(Mutex::new(s))
        }
        Err(_) => return,
    };
    let default_client = conn.peer().to_string();
    let mut lanes: Vec<LaneHandle> = Vec::new();
    loop {
        let frame = match conn.recv() {
            Ok(f) => f,
            Err(NetError::Malformed(msg)) => {
                if send(&writer, &Frame::error("MALFORMED", msg)).is_err() {
                    break;
                }
                continue;
            }
            Err(_) => break,
        };
        let reply = match frame {
            Frame::Subscribe { predicate, client } => match Predicate::new(predicate) {
                Err(e) => Frame::error("INVALID", e.to_string()),
                Ok(pred) => {
                    let client = client.unwrap_or_else(|| default_client.clone());
                    let missed: u64 = shared.hub.take_notices(&client).iter().map(|n| n.dropped).sum();
                    if missed > 0 && send(&writer, &Frame::Overflow { dropped: missed }).is_err() {
                        break;
                    }
                    let stream = shared.hub.subscribe(pred, client);
                    let sub_id = stream.sub_id();
                    if send(&writer, &Frame::SubscribeAck { sub_id }).is_err() {
                        shared.hub.unsubscribe(sub_id);
                        break;
                    }
                    let retired = Arc::new(AtomicBool::new(false));
                    let (w, s, r) = (writer.clone(), shared.clone(), retired.clone());
                    match thread::Builder::new()
                        .name(format!("lane-{sub_id}"))
                        .spawn(move || lane_writer(&s, stream, &w, &r))
                    {
                        Ok(thread) => lanes.push(LaneHandle { sub_id, retired, thread }),
                        Err(_) => {
                            shared.hub.unsubscribe(sub_id);
                        }
                    }
                    continue;
                }
            },
            Frame::Unsubscribe => {
                for lane in lanes.drain(..) {
                    lane.retire(&shared.hub);
                }
                Frame::ok("")
            }
            other => answer(shared, other),
        };
        if send(&writer, &reply).is_err() {
            break;
        }
    }
    for lane in lanes {
        lane.retire(&shared.hub);
    }
}

fn lane_writer(shared: &Shared, stream: SubscriptionStream, writer: &SharedWriter, retired: &AtomicBool) {
    let sub_id = stream.sub_id();
    loop {
        match stream.recv_timeout(LANE_POLL) {
            Ok(Some(first)) => {
                let mut values = first.values;
                while let Some(more) = stream.try_recv() {
                    values.extend(more.values);
                }
                if send(writer, &Frame::Data { values }).is_err() {
                    retired.store(true, Ordering::SeqCst);
                    shared.hub.unsubscribe(sub_id);
                    return;
                }
            }
            Ok(None) => {
                if shared.stop.is_stopped() {
                    return;
                }
            }
            Err(()) => {
                // Dropped at the high-water mark: close the connection so
                // the client reconnects and receives its overflow notice.
                if !retired.load(Ordering::SeqCst) {
                    let _ = writer.lock().shutdown(std::net::Shutdown::Both);
                }
                return;
            }
        }
    }
}

fn answer(shared: &Shared, frame: Frame) -> Frame {
    let now = shared.now();
    match frame {
        Frame::History { predicate } => match Predicate::new(predicate) {
            Err(e) => Frame::error("INVALID", e.to_string()),
            Ok(pred) => match history(&shared.store.lock(), &pred) {
                Ok(history) => Frame::HistoryResult { history },
                Err(e) => Frame::error("INVALID", e.to_string()),
            },
        },
        Frame::FilterDeploy { spec, signature } => {
            match shared.hub.deploy_filter(spec, &signature, &shared.trust, now) {
                Ok(filter_id) => Frame::FilterAck { filter_id },
                Err(e @ vigil_core::Error::BadSignature(_)) => Frame::error("BAD_SIGNATURE", e.to_string()),
                Err(e) => Frame::error("INVALID", e.to_string()),
            }
        }
        Frame::ModuleToggle { module_name, enabled } => {
            match shared.engine.lock().set_module_enabled(&module_name, enabled) {
                Ok(()) => Frame::ok(format!("{module_name} {}", if enabled { "enabled" } else { "disabled" })),
                Err(e) => Frame::error("UNKNOWN_MODULE", e.to_string()),
            }
        }
        Frame::RestartTarget { target } => match &shared.supervisor {
            None => Frame::error("UNSUPPORTED", "no supervisor on this station"),
            Some(sup) => {
                let mut sup = sup.lock();
                match sup.reset(&target, now).and_then(|()| sup.restart_now(&target)) {
                    Ok(()) => Frame::ok(format!("{target} restarted")),
                    Err(e) => Frame::error("RESTART_FAILED", e.to_string()),
                }
            }
        },
        other => Frame::error("UNSUPPORTED", format!("{} is not a station request", other.kind())),
    }
}

//! The repository service: registry discovery, one reader per upstream
//! station, the single store writer, the MST loop and the HTTP server.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use vigil_core::clock::Clock;
use vigil_core::metric::MetricValue;
use vigil_core::overlay::TreeUpdate;
use vigil_core::registry::{EventKind, RegistryEvent, ServiceDescriptor};
use vigil_core::signing::TrustKey;
use vigil_net::station_client::StreamItem;
use vigil_net::stopper::Stopper;
use vigil_net::{EventFeed, RegistryClient, StationClient};

use crate::api::HttpServer;
use crate::audit::AuditLog;
use crate::bus::{EventBus, StreamEvent};
use crate::config::RepoConfig;
use crate::error::Result;
use crate::links::{MstView, Overlay};
use crate::sourced::SourcedStore;

const POLL: Duration = Duration::from_millis(100);
const FLUSH_EVERY: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpstreamState {
    Connecting,
    Attached,
    Backoff,
    /// Left the registry; its series are kept but marked stale.
    Stale,
}

impl UpstreamState {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => UpstreamState::Attached,
            2 => UpstreamState::Backoff,
            3 => UpstreamState::Stale,
            _ => UpstreamState::Connecting,
        }
    }
}

/// Counters of one upstream. `received = stored + rejected` once every
/// batch has been written; `dropped` is what the station reported lost to
/// overflow.
#[derive(Debug, Default)]
pub struct UpstreamStatus {
    state: AtomicU8,
    connects: AtomicU64,
    received: AtomicU64,
    dropped: AtomicU64,
    stored: AtomicU64,
    rejected: AtomicU64,
    last_error: Mutex<Option<String>>,
}

impl UpstreamStatus {
    fn set_state(&self, s: UpstreamState) {
        self.state.store(s as u8, Ordering::SeqCst);
    }

    fn state(&self) -> UpstreamState {
        UpstreamState::from_u8(self.state.load(Ordering::SeqCst))
    }

    fn set_error(&self, e: impl ToString) {
        *self.last_error.lock() = Some(e.to_string());
    }
}

/// One row of `GET /api/services`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub service_id: String,
    pub descriptor: ServiceDescriptor,
    pub state: UpstreamState,
    pub reflector: bool,
    pub connects: u64,
    pub received: u64,
    pub dropped: u64,
    pub stored: u64,
    pub rejected: u64,
    pub last_error: Option<String>,
    pub stale_since: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepoStats {
    pub upstreams_attached: usize,
    pub records: usize,
    pub pending_batches: u64,
    pub stream_clients: usize,
    pub stream_overflows: u64,
    pub audit_records: usize,
    pub mst_rounds: u64,
    pub mst_churn: u64,
}

pub(crate) struct Batch {
    source: String,
    status: Option<Arc<UpstreamStatus>>,
    values: Vec<MetricValue>,
}

struct Upstream {
    descriptor: ServiceDescriptor,
    status: Arc<UpstreamStatus>,
    stop: Arc<Stopper>,
    thread: Option<JoinHandle<()>>,
}

pub(crate) struct Shared {
    pub config: RepoConfig,
    pub clock: Arc<dyn Clock>,
    pub store: RwLock<SourcedStore>,
    pub bus: EventBus,
    pub overlay: Mutex<Overlay>,
    pub audit: AuditLog,
    pub trust: Option<TrustKey>,
    pub admin_locks: Mutex<BTreeMap<String, Arc<Mutex<()>>>>,
    upstreams: Mutex<BTreeMap<String, Upstream>>,
    retired: Mutex<Vec<JoinHandle<()>>>,
    ingest_tx: Sender<Batch>,
    pending: AtomicU64,
    stopper: Stopper,
}

impl Shared {
    fn is_reflector(&self, d: &ServiceDescriptor) -> bool {
        d.attributes.get("role").is_some_and(|r| *r == self.config.reflector_role)
    }

    fn enqueue(&self, batch: Batch) {
        self.pending.fetch_add(1, Ordering::SeqCst);
        if self.ingest_tx.send(batch).is_err() {
            self.pending.fetch_sub(1, Ordering::SeqCst);
        }
    }

    /// Endpoint of an attached (non-stale) service.
    pub fn endpoint_of(&self, service_id: &str) -> Option<String> {
        let ups = self.upstreams.lock();
        let u = ups.get(service_id)?;
        (u.status.state() != UpstreamState::Stale).then(|| u.descriptor.endpoint.clone())
    }

    pub fn services(&self) -> Vec<ServiceInfo> {
        let store = self.store.read();
        self.upstreams
            .lock()
            .iter()
            .map(|(id, u)| ServiceInfo {
                service_id: id.clone(),
                descriptor: u.descriptor.clone(),
                state: u.status.state(),
                reflector: self.is_reflector(&u.descriptor),
                connects: u.status.connects.load(Ordering::Relaxed),
                received: u.status.received.load(Ordering::Relaxed),
                dropped: u.status.dropped.load(Ordering::Relaxed),
                stored: u.status.stored.load(Ordering::Relaxed),
                rejected: u.status.rejected.load(Ordering::Relaxed),
                last_error: u.status.last_error.lock().clone(),
                stale_since: store.stale_since(id),
            })
            .collect()
    }

    pub fn stats(&self) -> RepoStats {
        let attached = self
            .upstreams
            .lock()
            .values()
            .filter(|u| u.status.state() == UpstreamState::Attached)
            .count();
        let (rounds, churn) = {
            let o = self.overlay.lock();
            (o.optimizer().rounds(), o.optimizer().churn())
        };
        RepoStats {
            upstreams_attached: attached,
            records: self.store.read().record_count(),
            pending_batches: self.pending.load(Ordering::SeqCst),
            stream_clients: self.bus.client_count(),
            stream_overflows: self.bus.overflowed(),
            audit_records: self.audit.len(),
            mst_rounds: rounds,
            mst_churn: churn,
        }
    }

    /// Starts (or keeps) the reader for `d`. A changed endpoint restarts it.
    fn attach(self: &Arc<Self>, d: ServiceDescriptor) {
        if self.stopper.is_stopped() {
            return;
        }
        if self.is_reflector(&d) {
            self.overlay.lock().add_reflector(&d.service_id);
        }
        self.store.write().clear_stale(&d.service_id);
        let mut ups = self.upstreams.lock();
        if let Some(u) = ups.get_mut(&d.service_id) {
            let running = u.thread.is_some();
            if running && u.descriptor.endpoint == d.endpoint {
                u.descriptor = d;
                return;
            }
            u.stop.stop();
            if let Some(h) = u.thread.take() {
                self.retired.lock().push(h);
            }
        }
        let status = ups.get(&d.service_id).map(|u| u.status.clone()).unwrap_or_default();
        status.set_state(UpstreamState::Connecting);
        let stop = Arc::new(Stopper::new());
        let (shared, st, sp, desc) = (self.clone(), status.clone(), stop.clone(), d.clone());
        let thread = thread::Builder::new()
            .name(format!("upstream-{}", d.service_id))
            .spawn(move || run_upstream(shared, desc, st, sp))
            .expect("spawn upstream reader");
        tracing::info!(service = %d.service_id, endpoint = %d.endpoint, "attaching upstream");
        ups.insert(
            d.service_id.clone(),
            Upstream {
                descriptor: d,
                status,
                stop,
                thread: Some(thread),
            },
        );
    }

    /// Stops the reader and marks the source stale; other upstreams are
    /// not touched.
    fn detach(&self, service_id: &str) {
        let mut ups = self.upstreams.lock();
        let Some(u) = ups.get_mut(service_id) else { return };
        u.stop.stop();
        if let Some(h) = u.thread.take() {
            self.retired.lock().push(h);
        }
        u.status.set_state(UpstreamState::Stale);
        drop(ups);
        tracing::info!(service = %service_id, "detached upstream");
        self.store.write().mark_stale(service_id, self.clock.now_ms());
        self.overlay.lock().remove_reflector(service_id);
    }

    fn on_registry_event(self: &Arc<Self>, ev: RegistryEvent) {
        match ev.kind {
            EventKind::ServiceAdded | EventKind::AttributeChanged => self.attach(ev.descriptor.clone()),
            EventKind::ServiceRemoved => self.detach(&ev.descriptor.service_id),
        }
        self.bus.publish(&StreamEvent::Registry(ev));
    }

    /// Attaches every listed service and detaches live ones not listed.
    fn reconcile(self: &Arc<Self>, listed: Vec<ServiceDescriptor>) {
        let ids: BTreeSet<String> = listed.iter().map(|d| d.service_id.clone()).collect();
        let gone: Vec<String> = self
            .upstreams
            .lock()
            .iter()
            .filter(|(id, u)| !ids.contains(*id) && u.thread.is_some())
            .map(|(id, _)| id.clone())
            .collect();
        for id in gone {
            self.detach(&id);
        }
        for d in listed {
            self.attach(d);
        }
    }

    pub fn recompute(&self) -> Option<TreeUpdate> {
        let now = self.clock.now_ms();
        let (update, metrics) = {
            let mut o = self.overlay.lock();
            let update = o.recompute(now);
            let metrics = o.optimizer().tree_metrics(&self.config.repo_id, now);
            (update, metrics)
        };
        self.enqueue(Batch {
            source: self.config.repo_id.clone(),
            status: None,
            values: metrics,
        });
        if let Some(u) = &update {
            tracing::info!(epoch = u.epoch, total = u.total_weight, "tree updated");
            self.bus.publish(&StreamEvent::Tree(u.clone()));
        }
        update
    }
}

fn backoff_next(current: Duration, cfg: &RepoConfig) -> Duration {
    (current * 2).min(Duration::from_millis(cfg.backoff_max_ms))
}

/// Connect, deploy filters, subscribe, pump; on any failure back off and
/// retry until stopped.
fn run_upstream(shared: Arc<Shared>, d: ServiceDescriptor, status: Arc<UpstreamStatus>, stop: Arc<Stopper>) {
    let client = StationClient::new(&d.endpoint);
    let min = Duration::from_millis(shared.config.backoff_min_ms);
    let mut backoff = min;
    while !stop.is_stopped() {
        status.set_state(UpstreamState::Connecting);
        for f in &shared.config.filters {
            if let Err(e) = client.deploy_filter(f.spec.clone(), f.signature.clone()) {
                tracing::warn!(service = %d.service_id, filter = %f.spec.filter_id, "filter deploy failed: {e}");
                status.set_error(format!("filter {}: {e}", f.spec.filter_id));
            }
        }
        match client.subscribe(&shared.config.predicates, Some(&shared.config.repo_id)) {
            Ok(sub) => {
                status.connects.fetch_add(1, Ordering::Relaxed);
                status.set_state(UpstreamState::Attached);
                backoff = min;
                loop {
                    if stop.is_stopped() {
                        return;
                    }
                    match sub.next_timeout(POLL) {
                        Ok(Some(StreamItem::Values(values))) => {
                            status.received.fetch_add(values.len() as u64, Ordering::Relaxed);
                            shared.enqueue(Batch {
                                source: d.service_id.clone(),
                                status: Some(status.clone()),
                                values,
                            });
                        }
                        Ok(Some(StreamItem::Overflow(n))) => {
                            tracing::warn!(service = %d.service_id, "station dropped {n} values on overflow");
                            status.dropped.fetch_add(n, Ordering::Relaxed);
                        }
                        Ok(None) => {}
                        Err(()) => {
                            status.set_error("connection closed");
                            break;
                        }
                    }
                }
            }
            Err(e) => {
                tracing::debug!(service = %d.service_id, "connect failed: {e}");
                status.set_error(e);
            }
        }
        if stop.is_stopped() {
            return;
        }
        status.set_state(UpstreamState::Backoff);
        if stop.wait(backoff) {
            return;
        }
        backoff = backoff_next(backoff, &shared.config);
    }
}

/// Opens an event feed per registry, lists current members, then follows
/// events. Any closed feed restarts the cycle so missed events are
/// recovered by the next listing.
fn run_discovery(shared: Arc<Shared>) {
    let cfg = &shared.config;
    let client = RegistryClient::new(cfg.registries.clone());
    let groups: BTreeSet<String> = cfg.groups.iter().cloned().collect();
    let min = Duration::from_millis(cfg.backoff_min_ms);
    let mut backoff = min;
    while !shared.stopper.is_stopped() {
        let feeds: Vec<EventFeed> = cfg
            .registries
            .iter()
            .filter_map(|ep| match client.subscribe_events(ep, &groups) {
                Ok(f) => Some(f),
                Err(e) => {
                    tracing::debug!(registry = %ep, "event feed failed: {e}");
                    None
                }
            })
            .collect();
        let listed = if feeds.is_empty() {
            None
        } else {
            client.lookup(&groups, &BTreeMap::new()).ok()
        };
        let Some(listed) = listed else {
            tracing::warn!("no registry reachable; retrying in {backoff:?}");
            if shared.stopper.wait(backoff) {
                return;
            }
            backoff = backoff_next(backoff, cfg);
            continue;
        };
        backoff = min;
        shared.reconcile(listed);
        let partial = feeds.len() < cfg.registries.len();
        let opened = Instant::now();
        'follow: loop {
            if shared.stopper.is_stopped() {
                return;
            }
            for feed in &feeds {
                match feed.next_timeout(Duration::from_millis(20)) {
                    Ok(Some(ev)) => {
                        shared.on_registry_event(ev);
                        for ev in feed.drain() {
                            shared.on_registry_event(ev);
                        }
                    }
                    Ok(None) => {}
                    Err(()) => {
                        tracing::warn!("registry event feed closed; resubscribing");
                        break 'follow;
                    }
                }
            }
            // retry registries that were down when the feeds opened
            if partial && opened.elapsed() > Duration::from_millis(cfg.backoff_max_ms) {
                break;
            }
        }
    }
}

fn run_writer(shared: Arc<Shared>, rx: Receiver<Batch>) {
    let every = shared.config.compact_every_ms;
    let mut next_compact = shared.clock.now_ms() + every;
    let mut last_flush = Instant::now();
    loop {
        match rx.recv_timeout(POLL) {
            Ok(batch) => {
                write_batch(&shared, batch);
                for batch in rx.try_iter().take(256) {
                    write_batch(&shared, batch);
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                if shared.stopper.is_stopped() {
                    break;
                }
            }
            Err(RecvTimeoutError::Disconnected) => break,
        }
        let now = shared.clock.now_ms();
        if now >= next_compact {
            next_compact = now + every;
            if let Err(e) = shared.store.write().compact(now) {
                tracing::error!("compaction failed: {e}");
            }
        }
        if last_flush.elapsed() >= FLUSH_EVERY {
            last_flush = Instant::now();
            if let Err(e) = shared.store.write().flush() {
                tracing::error!("store flush failed: {e}");
            }
        }
    }
    let _ = shared.store.write().flush();
}

fn write_batch(shared: &Shared, batch: Batch) {
    let n = batch.values.len() as u64;
    let accepted = match shared.store.write().insert(&batch.source, &batch.values) {
        Ok(a) => a as u64,
        Err(e) => {
            tracing::error!(source = %batch.source, "store insert failed: {e}");
            0
        }
    };
    if let Some(st) = &batch.status {
        st.stored.fetch_add(accepted, Ordering::Relaxed);
        st.rejected.fetch_add(n - accepted, Ordering::Relaxed);
    }
    if batch.status.is_some() {
        shared.overlay.lock().ingest(&batch.source, &batch.values);
    }
    shared.bus.publish(&StreamEvent::Values {
        source: batch.source,
        values: batch.values,
    });
    shared.pending.fetch_sub(1, Ordering::SeqCst);
}

fn run_optimizer(shared: Arc<Shared>) {
    let period = shared.clock.real(shared.config.mst.recompute_period_ms);
    while !shared.stopper.wait(period) {
        shared.recompute();
    }
}

pub struct Repository {
    shared: Arc<Shared>,
    http: Option<HttpServer>,
    threads: Vec<JoinHandle<()>>,
}

impl Repository {
    pub fn start(config: RepoConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        config.validate()?;
        let policy = config.retention_policy()?;
        let store = match &config.store_path {
            Some(dir) => SourcedStore::open(dir, policy)?,
            None => SourcedStore::in_memory(policy),
        };
        let audit = match &config.audit_log {
            Some(path) => AuditLog::to_file(path)?,
            None => AuditLog::in_memory(),
        };
        let (tx, rx) = crossbeam_channel::unbounded();
        let shared = Arc::new(Shared {
            overlay: Mutex::new(Overlay::new(config.mst.clone(), config.cost)?),
            bus: EventBus::new(config.stream_queue),
            trust: config.trust_key.as_ref().map(TrustKey::new),
            store: RwLock::new(store),
            audit,
            admin_locks: Mutex::new(BTreeMap::new()),
            upstreams: Mutex::new(BTreeMap::new()),
            retired: Mutex::new(Vec::new()),
            ingest_tx: tx,
            pending: AtomicU64::new(0),
            stopper: Stopper::new(),
            clock,
            config,
        });
        let http = HttpServer::start(&shared.config.listen, shared.clone())?;
        let spawn = |name: &str, f: Box<dyn FnOnce() + Send>| thread::Builder::new().name(name.into()).spawn(f);
        let threads = vec![
            spawn("repo-writer", {
                let s = shared.clone();
                Box::new(move || run_writer(s, rx))
            })?,
            spawn("repo-discovery", {
                let s = shared.clone();
                Box::new(move || run_discovery(s))
            })?,
            spawn("repo-mst", {
                let s = shared.clone();
                Box::new(move || run_optimizer(s))
            })?,
        ];
        tracing::info!(http = %http.addr(), "repository started");
        Ok(Self {
            shared,
            http: Some(http),
            threads,
        })
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http.as_ref().expect("running").addr()
    }

    /// Base URL of the HTTP API, e.g. `http://127.0.0.1:8080`.
    pub fn url(&self) -> String {
        format!("http://{}", self.http_addr())
    }

    pub fn config(&self) -> &RepoConfig {
        &self.shared.config
    }

    pub fn services(&self) -> Vec<ServiceInfo> {
        self.shared.services()
    }

    pub fn stats(&self) -> RepoStats {
        self.shared.stats()
    }

    pub fn mst(&self) -> MstView {
        self.shared.overlay.lock().view()
    }

    /// Runs one MST round now, outside the periodic schedule.
    pub fn recompute_now(&self) -> Option<TreeUpdate> {
        self.shared.recompute()
    }

    pub fn with_store<R>(&self, f: impl FnOnce(&SourcedStore) -> R) -> R {
        f(&self.shared.store.read())
    }

    pub fn audit(&self) -> &AuditLog {
        &self.shared.audit
    }

    /// Waits until every received batch has been written.
    pub fn wait_idle(&self, timeout: Duration) -> bool {
        let t0 = Instant::now();
        while self.shared.pending.load(Ordering::SeqCst) > 0 {
            if t0.elapsed() > timeout {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
        true
    }

    pub fn shutdown(&mut self) {
        self.shared.stopper.stop();
        if let Some(mut http) = self.http.take() {
            http.shutdown();
        }
        let readers: Vec<JoinHandle<()>> = {
            let mut ups = self.shared.upstreams.lock();
            ups.values_mut()
                .filter_map(|u| {
                    u.stop.stop();
                    u.thread.take()
                })
                .collect()
        };
        let retired: Vec<_> = std::mem::take(&mut *self.shared.retired.lock());
        for h in readers.into_iter().chain(retired).chain(self.threads.drain(..)) {
            let _ = h.join();
        }
    }
}

impl Drop for Repository {
    fn drop(&mut self) {
        self.shutdown();
    }
}

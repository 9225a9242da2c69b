//! Live fan-out of the metric flow to per-client lanes, historical queries,
//! and signed filter agents that aggregate the flow periodically.
//!
//! Every subscription owns an independent lane: an unbounded channel with a
//! value-count high-water mark. A lane that overflows is cut off and the
//! client gets an [`OverflowNotice`] when it comes back; no other lane ever
//! waits on it.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricValue, SeriesKey};
use crate::predicate::{Predicate, PredicateSpec};
use crate::signing::TrustKey;
use crate::store::{CompactionBin, Resolution, Store};

pub const FILTER_CLUSTER: &str = "_filters";

#[derive(Debug, Clone)]
pub struct HubConfig {
    /// Values a lane may hold before it is disconnected.
    pub queue_hwm: usize,
    /// Farm name stamped on synthetic filter output.
    pub local_farm: String,
}

impl Default for HubConfig {
    fn default() -> Self {
        Self {
            queue_hwm: 10_000,
            local_farm: "local".into(),
        }
    }
}

/// A batch of matching values for one subscription.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub sub_id: u64,
    pub values: Vec<MetricValue>,
    pub published_at: Instant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverflowNotice {
    pub sub_id: u64,
    pub client: String,
    /// Values enqueued on the lane before the cut; all stay receivable.
    pub delivered: u64,
    /// Values of the publish that found the lane full.
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneStats {
    pub sub_id: u64,
    pub client: String,
    pub queued: usize,
    pub delivered: u64,
}

struct Lane {
    id: u64,
    client: String,
    predicate: Predicate,
    tx: Sender<Delivery>,
    queued: Arc<AtomicUsize>,
    delivered: AtomicU64,
}

/// Receiving side of a subscription lane.
pub struct SubscriptionStream {
    sub_id: u64,
    rx: Receiver<Delivery>,
    queued: Arc<AtomicUsize>,
}

impl SubscriptionStream {
    pub fn sub_id(&self) -> u64 {
        self.sub_id
    }

    fn took(&self, d: Delivery) -> Delivery {
        self.queued.fetch_sub(d.values.len(), Ordering::AcqRel);
        d
    }

    /// `Err(())` once the lane was closed and fully drained.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Delivery>, ()> {
        match self.rx.recv_timeout(timeout) {
            Ok(d) => Ok(Some(self.took(d))),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(()),
        }
    }

    pub fn recv(&self) -> Option<Delivery> {
        self.rx.recv().ok().map(|d| self.took(d))
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.rx.try_recv().ok().map(|d| self.took(d))
    }

    pub fn drain_values(&self) -> Vec<MetricValue> {
        let mut out = Vec::new();
        while let Some(d) = self.try_recv() {
            out.extend(d.values);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Aggregate {
    Sum,
    Mean,
    Min,
    Max,
    Count,
    CountWhere {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vmin: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        vmax: Option<f64>,
    },
}

/// A declarative filter agent. Signed over its canonical serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub filter_id: String,
    pub predicate: PredicateSpec,
    pub aggregate: Aggregate,
    pub period_ms: u64,
    pub output: String,
}

#[derive(Debug, Default, Clone, Copy)]
struct Window {
    sum: f64,
    count: u64,
    min: f64,
    max: f64,
    hits: u64,
}

impl Window {
    fn add(&mut self, v: f64, aggregate: &Aggregate) {
        if self.count == 0 {
            self.min = v;
            self.max = v;
        } else {
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
        self.sum += v;
        self.count += 1;
        if let Aggregate::CountWhere { vmin, vmax } = aggregate {
            if vmin.map_or(true, |lo| v >= lo) && vmax.map_or(true, |hi| v <= hi) {
                self.hits += 1;
            }
        }
    }

    fn result(&self, aggregate: &Aggregate) -> Option<f64> {
        match aggregate {
            Aggregate::Count => Some(self.count as f64),
            Aggregate::CountWhere { .. } => Some(self.hits as f64),
            _ if self.count == 0 => None,
            Aggregate::Sum => Some(self.sum),
            Aggregate::Mean => Some(self.sum / self.count as f64),
            Aggregate::Min => Some(self.min),
            Aggregate::Max => Some(self.max),
        }
    }
}

struct Filter {
    spec: FilterSpec,
    predicate: Predicate,
    window: Window,
    next_tick: u64,
}

pub struct Hub {
    config: HubConfig,
    lanes: RwLock<BTreeMap<u64, Arc<Lane>>>,
    filters: Mutex<BTreeMap<String, Filter>>,
    notices: Mutex<HashMap<String, Vec<OverflowNotice>>>,
    audit: Mutex<Vec<String>>,
    next_id: AtomicU64,
    published: AtomicU64,
    overflowed: AtomicU64,
}

impl Hub {
    pub fn new(config: HubConfig) -> Self {
        Self {
            config,
            lanes: RwLock::new(BTreeMap::new()),
            filters: Mutex::new(BTreeMap::new()),
            notices: Mutex::new(HashMap::new()),
            audit: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            published: AtomicU64::new(0),
            overflowed: AtomicU64::new(0),
        }
    }

    pub fn config(&self) -> &HubConfig {
        &self.config
    }

    /// Opens a lane for `client`. Equal predicates still get distinct lanes.
    pub fn subscribe(&self, predicate: Predicate, client: impl Into<String>) -> SubscriptionStream {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = crossbeam_channel::unbounded();
        let queued = Arc::new(AtomicUsize::new(0));
        let lane = Lane {
            id,
            client: client.into(),
            predicate,
            tx,
            queued: queued.clone(),
            delivered: AtomicU64::new(0),
        };
        self.lanes.write().insert(id, Arc::new(lane));
        SubscriptionStream { sub_id: id, rx, queued }
    }

    pub fn unsubscribe(&self, sub_id: u64) -> bool {
        self.lanes.write().remove(&sub_id).is_some()
    }

    pub fn subscription_count(&self) -> usize {
        self.lanes.read().len()
    }

    pub fn lane_stats(&self) -> Vec<LaneStats> {
        self.lanes
            .read()
            .values()
            .map(|l| LaneStats {
                sub_id: l.id,
                client: l.client.clone(),
                queued: l.queued.load(Ordering::Acquire),
                delivered: l.delivered.load(Ordering::Relaxed),
            })
            .collect()
    }

    /// Notices for lanes of `client` that were cut off since it last asked.
    pub fn take_notices(&self, client: &str) -> Vec<OverflowNotice> {
        self.notices.lock().remove(client).unwrap_or_default()
    }

    pub fn overflowed(&self) -> u64 {
        self.overflowed.load(Ordering::Relaxed)
    }

    pub fn published(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    /// Fans `values` out to every matching lane and filter window.
    /// Returns the number of (value, lane) deliveries made.
    pub fn publish(&self, values: &[MetricValue]) -> usize {
        if values.is_empty() {
            return 0;
        }
        self.published.fetch_add(values.len() as u64, Ordering::Relaxed);
        let now = Instant::now();
        let mut delivered = 0;
        let mut overflowing = Vec::new();
        {
            let lanes = self.lanes.read();
            for lane in lanes.values() {
                let matched: Vec<MetricValue> =
                    values.iter().filter(|v| lane.predicate.matches(v)).cloned().collect();
                if matched.is_empty() {
                    continue;
                }
                let n = matched.len();
                let queued = lane.queued.fetch_add(n, Ordering::AcqRel) + n;
                if queued > self.config.queue_hwm {
                    lane.queued.fetch_sub(n, Ordering::AcqRel);
                    overflowing.push((lane.id, true, n));
                    continue;
                }
                let sent = lane.tx.send(Delivery {
                    sub_id: lane.id,
                    values: matched,
                    published_at: now,
                });
                if sent.is_err() {
                    // receiver gone: treat as a silent unsubscribe
                    lane.queued.fetch_sub(n, Ordering::AcqRel);
                    overflowing.push((lane.id, false, n));
                    continue;
                }
                lane.delivered.fetch_add(n as u64, Ordering::Relaxed);
                delivered += n;
            }
        }
        if !overflowing.is_empty() {
            let mut lanes = self.lanes.write();
            for (id, overflow, rejected) in overflowing {
                if let Some(lane) = lanes.remove(&id) {
                    if !overflow {
                        continue;
                    }
                    self.overflowed.fetch_add(1, Ordering::Relaxed);
                    self.notices.lock().entry(lane.client.clone()).or_default().push(OverflowNotice {
                        sub_id: lane.id,
                        client: lane.client.clone(),
                        delivered: lane.delivered.load(Ordering::Relaxed),
                        dropped: rejected as u64,
                    });
                }
            }
        }
        self.feed_filters(values);
        delivered
    }

    fn feed_filters(&self, values: &[MetricValue]) {
        let mut filters = self.filters.lock();
        for f in filters.values_mut() {
            for v in values {
                if v.cluster == FILTER_CLUSTER && v.node == f.spec.filter_id {
                    continue;
                }
                if f.predicate.matches(v) {
                    f.window.add(v.value, &f.spec.aggregate);
                }
            }
        }
    }

    /// Verifies and activates a filter. Redeploying an id replaces it.
    pub fn deploy_filter(&self, spec: FilterSpec, signature: &str, trust: &TrustKey, now: u64) -> Result<String> {
        if let Err(e) = trust.check(&spec.filter_id, &spec, signature) {
            let line = format!("rejected filter `{}`: bad signature", spec.filter_id);
            tracing::warn!("{line}");
            self.audit.lock().push(line);
            return Err(e);
        }
        if spec.filter_id.is_empty() || spec.output.is_empty() {
            return Err(Error::InvalidFilter("filter_id and output must be set".into()));
        }
        if spec.period_ms == 0 {
            return Err(Error::InvalidFilter("period_ms must be positive".into()));
        }
        let predicate = Predicate::new(spec.predicate.clone())?;
        let id = spec.filter_id.clone();
        self.audit.lock().push(format!("deployed filter `{id}`"));
        self.filters.lock().insert(
            id.clone(),
            Filter {
                next_tick: now + spec.period_ms,
                spec,
                predicate,
                window: Window::default(),
            },
        );
        Ok(id)
    }

    pub fn remove_filter(&self, filter_id: &str) -> bool {
        self.filters.lock().remove(filter_id).is_some()
    }

    pub fn filter_ids(&self) -> Vec<String> {
        self.filters.lock().keys().cloned().collect()
    }

    pub fn audit_log(&self) -> Vec<String> {
        self.audit.lock().clone()
    }

    fn emit(&self, f: &Filter, now: u64) -> Option<MetricValue> {
        let value = f.window.result(&f.spec.aggregate)?;
        let key = SeriesKey::new(&self.config.local_farm, FILTER_CLUSTER, &f.spec.filter_id, &f.spec.output);
        Some(MetricValue::new(&key, now, value))
    }

    /// Closes the current window of one filter and returns its aggregate.
    /// Empty windows emit nothing, except for the count aggregates (0).
    pub fn filter_tick(&self, filter_id: &str, now: u64) -> Result<Option<MetricValue>> {
        let mut filters = self.filters.lock();
        let f = filters
            .get_mut(filter_id)
            .ok_or_else(|| Error::UnknownFilter(filter_id.to_string()))?;
        let out = self.emit(f, now);
        f.window = Window::default();
        f.next_tick = now + f.spec.period_ms;
        Ok(out)
    }

    /// Ticks every filter whose period elapsed. The caller feeds the result
    /// back into [`publish`](Self::publish) and the store.
    pub fn tick_due(&self, now: u64) -> Vec<MetricValue> {
        let mut out = Vec::new();
        let mut filters = self.filters.lock();
        for f in filters.values_mut() {
            if f.next_tick > now {
                continue;
            }
            if let Some(v) = self.emit(f, now) {
                out.push(v);
            }
            f.window = Window::default();
            while f.next_tick <= now {
                f.next_tick += f.spec.period_ms;
            }
        }
        out
    }
}

/// Result of a historical query: raw points or, when the window reaches
/// into compacted data, bins at the stored resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum History {
    Values(Vec<MetricValue>),
    Bins(Vec<CompactionBin>),
}

/// Historical query. Value constraints are applied after the store query;
/// for bins they test the bin mean.
pub fn history(store: &Store, predicate: &Predicate) -> Result<History> {
    let spec = predicate.spec();
    let (Some(t1), Some(t2)) = (spec.t1, spec.t2) else {
        return Err(Error::InvalidPredicate("history needs both t1 and t2".into()));
    };
    if t1 > t2 {
        return Err(Error::InvalidRange { t1, t2 });
    }
    match store.resolution(predicate, t1, t2) {
        Resolution::Raw => {
            let mut values = store.query_raw(predicate, t1, t2)?;
            values.retain(|v| predicate.accepts_value(v.value));
            Ok(History::Values(values))
        }
        Resolution::Binned(width) => {
            let mut bins = store.query_bins(predicate, t1, t2, width)?;
            bins.retain(|b| predicate.accepts_value(b.mean));
            Ok(History::Bins(bins))
        }
    }
}

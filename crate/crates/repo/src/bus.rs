//! Fan-out of live events to stream clients.
//!
//! Each client owns a bounded queue. A client whose queue is full when an
//! event arrives is dropped on the spot, so one slow reader never holds up
//! ingest or the other readers.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::Mutex;
use regex::Regex;
use serde::Serialize;
use tokio::sync::mpsc::{self, error::TrySendError, Receiver, Sender};
use vigil_core::metric::MetricValue;
use vigil_core::overlay::TreeUpdate;
use vigil_core::predicate::Predicate;
use vigil_core::registry::RegistryEvent;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum StreamEvent {
    Values { source: String, values: Vec<MetricValue> },
    Tree(TreeUpdate),
    Registry(RegistryEvent),
}

impl StreamEvent {
    /// The event type name on the wire.
    pub fn name(&self) -> &'static str {
        match self {
            StreamEvent::Values { .. } => "values",
            StreamEvent::Tree(_) => "tree",
            StreamEvent::Registry(_) => "registry",
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stream events serialize infallibly")
    }
}

/// What one client wants to see. Tree and registry events are not address
/// based and pass whenever their kind is enabled.
#[derive(Debug, Clone)]
pub struct StreamFilter {
    pub predicate: Predicate,
    pub source: Option<Regex>,
    pub values: bool,
    pub tree: bool,
    pub registry: bool,
}

impl Default for StreamFilter {
    fn default() -> Self {
        Self {
            predicate: Predicate::any(),
            source: None,
            values: true,
            tree: true,
            registry: true,
        }
    }
}

impl StreamFilter {
    /// The part of `event` this client receives, if any.
    fn select(&self, event: &StreamEvent) -> Option<StreamEvent> {
        match event {
            StreamEvent::Values { source, values } => {
                if !self.values || self.source.as_ref().is_some_and(|re| !re.is_match(source)) {
                    return None;
                }
                let values: Vec<MetricValue> = values.iter().filter(|v| self.predicate.matches(v)).cloned().collect();
                (!values.is_empty()).then(|| StreamEvent::Values {
                    source: source.clone(),
                    values,
                })
            }
            StreamEvent::Tree(_) => self.tree.then(|| event.clone()),
            StreamEvent::Registry(_) => self.registry.then(|| event.clone()),
        }
    }
}

struct Client {
    filter: StreamFilter,
    tx: Sender<StreamEvent>,
}

pub struct EventBus {
    capacity: usize,
    clients: Mutex<BTreeMap<u64, Client>>,
    next_id: AtomicU64,
    overflowed: AtomicU64,
}

impl EventBus {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            clients: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            overflowed: AtomicU64::new(0),
        }
    }

    pub fn subscribe(&self, filter: StreamFilter) -> (u64, Receiver<StreamEvent>) {
        let (tx, rx) = mpsc::channel(self.capacity);
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.clients.lock().insert(id, Client { filter, tx });
        (id, rx)
    }

    pub fn unsubscribe(&self, id: u64) -> bool {
        self.clients.lock().remove(&id).is_some()
    }

    /// Live clients; clients whose receiver is gone are pruned first.
    pub fn client_count(&self) -> usize {
        let mut clients = self.clients.lock();
        clients.retain(|_, c| !c.tx.is_closed());
        clients.len()
    }

    /// Clients disconnected because their queue was full.
    pub fn overflowed(&self) -> u64 {
        self.overflowed.load(Ordering::Relaxed)
    }

    /// Never blocks. Returns how many clients received the event.
    pub fn publish(&self, event: &StreamEvent) -> usize {
        let mut sent = 0;
        let mut clients = self.clients.lock();
        clients.retain(|id, c| {
            let Some(part) = c.filter.select(event) else {
                return !c.tx.is_closed();
            };
            match c.tx.try_send(part) {
                Ok(()) => {
                    sent += 1;
                    true
                }
                Err(TrySendError::Full(_)) => {
                    tracing::warn!(client = id, "stream client overflowed; disconnecting");
                    self.overflowed.fetch_add(1, Ordering::Relaxed);
                    false
                }
                Err(TrySendError::Closed(_)) => false,
            }
        });
        sent
    }
}

//! Lookup service: lease-based registration, attribute discovery, change
//! events, and anti-entropy replication between peered registries.
//!
//! The registry is a plain state machine. Every mutating call takes the
//! current time explicitly; the network server drives it from a clock and
//! runs [`Registry::sweep_leases`] every `sweep_ms`.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender, TryRecvError, TrySendError};
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceDescriptor {
    pub service_id: String,
    pub groups: BTreeSet<String>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
    pub endpoint: String,
    pub proto_version: u32,
    /// Stamped by the registry that accepted the registration.
    #[serde(default)]
    pub registered_at: u64,
}

impl ServiceDescriptor {
    pub fn new<I, S>(service_id: impl Into<String>, groups: I, endpoint: impl Into<String>) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            service_id: service_id.into(),
            groups: groups.into_iter().map(Into::into).collect(),
            attributes: BTreeMap::new(),
            endpoint: endpoint.into(),
            proto_version: crate::proto::PROTO_VERSION,
            registered_at: 0,
        }
    }

    pub fn with_attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.service_id.is_empty() {
            return Err(Error::InvalidDescriptor("empty service_id".into()));
        }
        if self.groups.is_empty() {
            return Err(Error::InvalidDescriptor("groups must be non-empty".into()));
        }
        if self.groups.iter().any(String::is_empty) {
            return Err(Error::InvalidDescriptor("empty group name".into()));
        }
        if self.proto_version < 1 {
            return Err(Error::InvalidDescriptor("proto_version must be >= 1".into()));
        }
        if !self.endpoint.contains(':') {
            return Err(Error::InvalidDescriptor(format!(
                "endpoint `{}` is not host:port",
                self.endpoint
            )));
        }
        Ok(())
    }

    fn in_any(&self, groups: &BTreeSet<String>) -> bool {
        groups.is_empty() || !self.groups.is_disjoint(groups)
    }

    /// Same registration content, ignoring the registration timestamp.
    fn same_content(&self, other: &Self) -> bool {
        self.groups == other.groups
            && self.attributes == other.attributes
            && self.endpoint == other.endpoint
            && self.proto_version == other.proto_version
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub duration_ms: u64,
    pub expires_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    ServiceAdded,
    ServiceRemoved,
    AttributeChanged,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEvent {
    pub kind: EventKind,
    pub descriptor: ServiceDescriptor,
    pub at: u64,
}

/// A descriptor and its lease as exchanged between peered registries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerEntry {
    pub descriptor: ServiceDescriptor,
    pub lease: Lease,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncDelta {
    pub added: Vec<String>,
    pub updated: Vec<String>,
    pub removed: Vec<String>,
}

impl SyncDelta {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.updated.is_empty() && self.removed.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub min_lease_ms: u64,
    pub max_lease_ms: u64,
    pub sweep_ms: u64,
    /// Groups this registry serves. Empty means every group.
    pub groups: BTreeSet<String>,
    pub event_queue: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            min_lease_ms: 5_000,
            max_lease_ms: 300_000,
            sweep_ms: 1_000,
            groups: BTreeSet::new(),
            event_queue: 1024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Origin {
    Local,
    Peer(String),
}

#[derive(Debug, Clone)]
struct Entry {
    descriptor: ServiceDescriptor,
    lease: Lease,
    origin: Origin,
}

struct Subscriber {
    id: u64,
    groups: BTreeSet<String>,
    tx: Sender<RegistryEvent>,
}

/// Receiving end of [`Registry::subscribe_events`].
///
/// When the subscriber falls more than the queue capacity behind, the
/// registry drops it; the stream then drains and reports disconnection.
#[derive(Debug)]
pub struct EventStream {
    id: u64,
    rx: Receiver<RegistryEvent>,
}

impl EventStream {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn try_next(&self) -> Option<RegistryEvent> {
        self.rx.try_recv().ok()
    }

    pub fn next_timeout(&self, timeout: Duration) -> Result<Option<RegistryEvent>, Disconnected> {
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => Ok(Some(ev)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(Disconnected),
        }
    }

    /// Everything queued right now.
    pub fn drain(&self) -> Vec<RegistryEvent> {
        self.rx.try_iter().collect()
    }

    pub fn is_disconnected(&self) -> bool {
        matches!(self.rx.try_recv(), Err(TryRecvError::Disconnected)) && self.rx.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Disconnected;

pub struct Registry {
    config: RegistryConfig,
    entries: BTreeMap<String, Entry>,
    subscribers: Vec<Subscriber>,
    next_subscriber: u64,
    overflow_disconnects: u64,
}

impl Registry {
    pub fn new(config: RegistryConfig) -> Self {
        Self {
            config,
            entries: BTreeMap::new(),
            subscribers: Vec::new(),
            next_subscriber: 1,
            overflow_disconnects: 0,
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn subscriber_count(&self) -> usize {
        self.subscribers.len()
    }

    pub fn overflow_disconnects(&self) -> u64 {
        self.overflow_disconnects
    }

    pub fn lease_of(&self, service_id: &str) -> Option<Lease> {
        self.entries.get(service_id).map(|e| e.lease)
    }

    fn clamp(&self, requested_ms: u64) -> u64 {
        requested_ms.clamp(self.config.min_lease_ms, self.config.max_lease_ms)
    }

    pub fn register(
        &mut self,
        mut descriptor: ServiceDescriptor,
        requested_ms: u64,
        now: u64,
    ) -> Result<Lease> {
        descriptor.validate()?;
        if requested_ms == 0 {
            return Err(Error::InvalidDescriptor("requested lease must be positive".into()));
        }
        descriptor.registered_at = now;
        let duration_ms = self.clamp(requested_ms);
        let lease = Lease {
            duration_ms,
            expires_at: now + duration_ms,
        };
        let previous = self.entries.insert(
            descriptor.service_id.clone(),
            Entry {
                descriptor: descriptor.clone(),
                lease,
                origin: Origin::Local,
            },
        );
        match previous {
            None => self.emit(EventKind::ServiceAdded, &descriptor, now),
            Some(old) => self.emit_change(&old.descriptor, &descriptor, now),
        }
        Ok(lease)
    }

    pub fn renew(&mut self, service_id: &str, requested_ms: u64, now: u64) -> Result<Lease> {
        let duration_ms = self.clamp(requested_ms.max(1));
        let entry = self
            .entries
            .get_mut(service_id)
            .ok_or_else(|| Error::NotRegistered(service_id.to_string()))?;
        entry.lease = Lease {
            duration_ms,
            expires_at: now + duration_ms,
        };
        entry.origin = Origin::Local;
        Ok(entry.lease)
    }

    /// Removes a service on request (clean shutdown).
    pub fn deregister(&mut self, service_id: &str, now: u64) -> Result<()> {
        let entry = self
            .entries
            .remove(service_id)
            .ok_or_else(|| Error::NotRegistered(service_id.to_string()))?;
        self.emit(EventKind::ServiceRemoved, &entry.descriptor, now);
        Ok(())
    }

    /// Services in any of `groups` whose attributes match every pattern
    /// in `attr_match` (anchored). Ordered by service id.
    pub fn lookup(
        &self,
        groups: &BTreeSet<String>,
        attr_match: &BTreeMap<String, String>,
    ) -> Result<Vec<ServiceDescriptor>> {
        if groups.is_empty() {
            return Err(Error::InvalidDescriptor("lookup needs at least one group".into()));
        }
        let patterns = attr_match
            .iter()
            .map(|(name, pattern)| {
                Regex::new(&format!("^(?:{pattern})$"))
                    .map(|re| (name.as_str(), re))
                    .map_err(|e| Error::InvalidPattern {
                        pattern: pattern.clone(),
                        reason: e.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(self
            .entries
            .values()
            .map(|e| &e.descriptor)
            .filter(|d| d.in_any(groups))
            .filter(|d| {
                patterns.iter().all(|(name, re)| {
                    d.attributes.get(*name).is_some_and(|value| re.is_match(value))
                })
            })
            .cloned()
            .collect())
    }

    /// Subscribes to changes affecting `groups` (empty = all groups). The
    /// stream starts with a `ServiceAdded` snapshot of current members.
    pub fn subscribe_events(&mut self, groups: BTreeSet<String>, now: u64) -> EventStream {
        let snapshot: Vec<ServiceDescriptor> = self
            .entries
            .values()
            .filter(|e| e.descriptor.in_any(&groups))
            .map(|e| e.descriptor.clone())
            .collect();
        let (tx, rx) = crossbeam_channel::bounded(self.config.event_queue + snapshot.len());
        for descriptor in snapshot {
            let _ = tx.try_send(RegistryEvent {
                kind: EventKind::ServiceAdded,
                descriptor,
                at: now,
            });
        }
        let id = self.next_subscriber;
        self.next_subscriber += 1;
        self.subscribers.push(Subscriber { id, groups, tx });
        EventStream { id, rx }
    }

    pub fn unsubscribe(&mut self, id: u64) {
        self.subscribers.retain(|s| s.id != id);
    }

    /// Removes every service whose lease expired before `now`.
    pub fn sweep_leases(&mut self, now: u64) -> Vec<String> {
        let expired: Vec<String> = self
            .entries
            .iter()
            .filter(|(_, e)| e.lease.expires_at < now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in &expired {
            if let Some(entry) = self.entries.remove(id) {
                self.emit(EventKind::ServiceRemoved, &entry.descriptor, now);
            }
        }
        expired
    }

    fn common_groups(&self, peer_groups: &BTreeSet<String>) -> BTreeSet<String> {
        match (self.config.groups.is_empty(), peer_groups.is_empty()) {
            (true, true) => BTreeSet::new(),
            (true, false) => peer_groups.clone(),
            (false, true) => self.config.groups.clone(),
            (false, false) => self.config.groups.intersection(peer_groups).cloned().collect(),
        }
    }

    /// Locally registered services visible to a peer serving
    /// `peer_groups`. Entries learned from other peers are not re-exported.
    pub fn export_for_peer(&self, peer_groups: &BTreeSet<String>) -> Vec<PeerEntry> {
        let common = self.common_groups(peer_groups);
        if common.is_empty() && !(self.config.groups.is_empty() && peer_groups.is_empty()) {
            return Vec::new();
        }
        self.entries
            .values()
            .filter(|e| e.origin == Origin::Local && e.descriptor.in_any(&common))
            .map(|e| PeerEntry {
                descriptor: e.descriptor.clone(),
                lease: e.lease,
            })
            .collect()
    }

    /// Merges a peer's full state for the groups both registries serve.
    ///
    /// Unknown services are added; for a service known on both sides the
    /// later `registered_at` wins. Services previously learned from this
    /// peer and missing from `entries` are removed. Events fire only for
    /// additions and removals.
    pub fn sync_peer(
        &mut self,
        peer_id: &str,
        peer_groups: &BTreeSet<String>,
        entries: Vec<PeerEntry>,
        now: u64,
    ) -> SyncDelta {
        let common = self.common_groups(peer_groups);
        let everything = self.config.groups.is_empty() && peer_groups.is_empty();
        if common.is_empty() && !everything {
            return SyncDelta::default();
        }
        let mut delta = SyncDelta::default();
        let mut seen = BTreeSet::new();
        let mut incoming: Vec<PeerEntry> = entries
            .into_iter()
            .filter(|e| e.descriptor.validate().is_ok() && e.descriptor.in_any(&common))
            .collect();
        incoming.sort_by(|a, b| a.descriptor.service_id.cmp(&b.descriptor.service_id));

        for PeerEntry { descriptor, lease } in incoming {
            let id = descriptor.service_id.clone();
            seen.insert(id.clone());
            match self.entries.get_mut(&id) {
                None => {
                    self.entries.insert(
                        id.clone(),
                        Entry {
                            descriptor: descriptor.clone(),
                            lease,
                            origin: Origin::Peer(peer_id.to_string()),
                        },
                    );
                    self.emit(EventKind::ServiceAdded, &descriptor, now);
                    delta.added.push(id);
                }
                Some(local) => {
                    let from_this_peer = local.origin == Origin::Peer(peer_id.to_string());
                    let mut changed = false;
                    if descriptor.registered_at > local.descriptor.registered_at
                        || (from_this_peer && descriptor != local.descriptor)
                    {
                        changed |= !local.descriptor.same_content(&descriptor)
                            || local.descriptor.registered_at != descriptor.registered_at;
                        local.descriptor = descriptor;
                    }
                    let expires_at = if from_this_peer {
                        lease.expires_at
                    } else {
                        local.lease.expires_at.max(lease.expires_at)
                    };
                    if expires_at != local.lease.expires_at {
                        local.lease = Lease {
                            duration_ms: lease.duration_ms,
                            expires_at,
                        };
                    }
                    if changed {
                        delta.updated.push(id);
                    }
                }
            }
        }

        let stale: Vec<String> = self
            .entries
            .iter()
            .filter(|(id, e)| {
                e.origin == Origin::Peer(peer_id.to_string())
                    && e.descriptor.in_any(&common)
                    && !seen.contains(*id)
            })
            .map(|(id, _)| id.clone())
            .collect();
        for id in stale {
            if let Some(entry) = self.entries.remove(&id) {
                self.emit(EventKind::ServiceRemoved, &entry.descriptor, now);
                delta.removed.push(id);
            }
        }
        delta
    }

    fn emit_change(&mut self, old: &ServiceDescriptor, new: &ServiceDescriptor, now: u64) {
        let old_groups = old.groups.clone();
        let new_groups = new.groups.clone();
        let content_changed = !old.same_content(new);
        self.deliver(now, |sub_groups| {
            let was = sub_groups.is_empty() || !old_groups.is_disjoint(sub_groups);
            let is = sub_groups.is_empty() || !new_groups.is_disjoint(sub_groups);
            match (was, is) {
                (false, true) => Some((EventKind::ServiceAdded, new)),
                (true, false) => Some((EventKind::ServiceRemoved, old)),
                (true, true) if content_changed => Some((EventKind::AttributeChanged, new)),
                _ => None,
            }
        });
    }

    fn emit(&mut self, kind: EventKind, descriptor: &ServiceDescriptor, now: u64) {
        self.deliver(now, |sub_groups| {
            descriptor.in_any(sub_groups).then_some((kind, descriptor))
        });
    }

    fn deliver<'a, F>(&mut self, now: u64, mut select: F)
    where
        F: FnMut(&BTreeSet<String>) -> Option<(EventKind, &'a ServiceDescriptor)>,
    {
        let mut dropped = 0;
        self.subscribers.retain(|sub| {
            let Some((kind, descriptor)) = select(&sub.groups) else {
                return true;
            };
            let event = RegistryEvent {
                kind,
                descriptor: descriptor.clone(),
                at: now,
            };
            match sub.tx.try_send(event) {
                Ok(()) => true,
                Err(TrySendError::Full(_)) => {
                    dropped += 1;
                    false
                }
                Err(TrySendError::Disconnected(_)) => false,
            }
        });
        self.overflow_disconnects += dropped;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn groups(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    fn svc(id: &str, group: &str) -> ServiceDescriptor {
        ServiceDescriptor::new(id, [group], format!("{id}.local:9000"))
    }

    fn kinds(stream: &EventStream) -> Vec<(EventKind, String)> {
        stream
            .drain()
            .into_iter()
            .map(|e| (e.kind, e.descriptor.service_id))
            .collect()
    }

    #[test]
    fn register_grants_requested_lease() {
        let mut reg = Registry::new(RegistryConfig::default());
        let lease = reg.register(svc("A", "vrvs"), 30_000, 1_000).unwrap();
        assert_eq!(lease, Lease { duration_ms: 30_000, expires_at: 31_000 });
    }

    #[test]
    fn reregistration_with_changed_attribute_emits_attribute_changed() {
        let mut reg = Registry::new(RegistryConfig::default());
        reg.register(svc("A", "vrvs").with_attr("version", "1"), 30_000, 0).unwrap();
        let events = reg.subscribe_events(groups(&["vrvs"]), 0);
        assert_eq!(kinds(&events), vec![(EventKind::ServiceAdded, "A".into())]);

        reg.register(svc("A", "vrvs").with_attr("version", "2"), 30_000, 10).unwrap();
        assert_eq!(kinds(&events), vec![(EventKind::AttributeChanged, "A".into())]);

        // identical content re-registration is silent
        reg.register(svc("A", "vrvs").with_attr("version", "2"), 30_000, 20).unwrap();
        assert!(kinds(&events).is_empty());
    }

    #[test]
    fn group_move_looks_like_add_and_remove() {
        let mut reg = Registry::new(RegistryConfig::default());
        reg.register(svc("A", "g1"), 30_000, 0).unwrap();
        let g1 = reg.subscribe_events(groups(&["g1"]), 0);
        let g2 = reg.subscribe_events(groups(&["g2"]), 0);
        g1.drain();
        reg.register(svc("A", "g2"), 30_000, 1).unwrap();
        assert_eq!(kinds(&g1), vec![(EventKind::ServiceRemoved, "A".into())]);
        assert_eq!(kinds(&g2), vec![(EventKind::ServiceAdded, "A".into())]);
    }

    #[test]
    fn malformed_descriptors_rejected() {
        let mut reg = Registry::new(RegistryConfig::default());
        let empty_groups = ServiceDescriptor::new("A", Vec::<String>::new(), "h:1");
        assert!(matches!(
            reg.register(empty_groups, 30_000, 0),
            Err(Error::InvalidDescriptor(_))
        ));
        let mut v0 = svc("A", "g");
        v0.proto_version = 0;
        assert!(reg.register(v0, 30_000, 0).is_err());
        assert!(reg.register(svc("A", "g"), 0, 0).is_err());
        assert!(reg.register(ServiceDescriptor::new("A", ["g"], "nohost"), 1, 0).is_err());
        assert!(reg.is_empty());
    }

    #[test]
    fn renew_extends_from_now_and_clamps() {
        let mut reg = Registry::new(RegistryConfig {
            max_lease_ms: 60_000,
            ..Default::default()
        });
        reg.register(svc("A", "g"), 30_000, 0).unwrap();
        assert_eq!(reg.renew("A", 30_000, 7_000).unwrap().expires_at, 37_000);
        assert_eq!(reg.renew("A", 1_000_000_000, 7_000).unwrap().duration_ms, 60_000);
        assert_eq!(reg.renew("A", 1, 7_000).unwrap().duration_ms, 5_000);
    }

    #[test]
    fn renew_after_sweep_is_not_registered() {
        let mut reg = Registry::new(RegistryConfig::default());
        reg.register(svc("A", "g"), 5_000, 0).unwrap();
        assert_eq!(reg.sweep_leases(5_001), vec!["A".to_string()]);
        assert_eq!(reg.renew("A", 5_000, 5_002), Err(Error::NotRegistered("A".into())));
    }

    #[test]
    fn sweep_boundary_and_order() {
        let mut reg = Registry::new(RegistryConfig {
            min_lease_ms: 1,
            ..Default::default()
        });
        reg.register(svc("B", "g"), 1_000, 0).unwrap();
        reg.register(svc("A", "g"), 1_000, 0).unwrap();
        reg.register(svc("C", "g"), 9_000, 0).unwrap();
        let events = reg.subscribe_events(groups(&["g"]), 0);
        events.drain();
        assert!(reg.sweep_leases(999).is_empty());
        assert!(reg.sweep_leases(1_000).is_empty());
        assert_eq!(reg.sweep_leases(1_001), vec!["A".to_string(), "B".to_string()]);
        assert_eq!(
            kinds(&events),
            vec![
                (EventKind::ServiceRemoved, "A".into()),
                (EventKind::ServiceRemoved, "B".into())
            ]
        );
    }

    #[test]
    fn lookup_by_group_and_attribute() {
        let mut reg = Registry::new(RegistryConfig::default());
        reg.register(svc("s1", "uscms").with_attr("site", "Caltech-T2"), 30_000, 0).unwrap();
        reg.register(svc("s2", "uscms").with_attr("site", "FNAL"), 30_000, 0).unwrap();
        reg.register(svc("s3", "uscms"), 30_000, 0).unwrap();
        reg.register(svc("r1", "vrvs"), 30_000, 0).unwrap();

        let all = reg.lookup(&groups(&["uscms"]), &BTreeMap::new()).unwrap();
        let ids: Vec<_> = all.iter().map(|d| d.service_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);

        let attr = BTreeMap::from([("site".to_string(), "Caltech.*".to_string())]);
        let hit = reg.lookup(&groups(&["uscms"]), &attr).unwrap();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].service_id, "s1");

        assert!(reg.lookup(&groups(&["nogroup"]), &BTreeMap::new()).unwrap().is_empty());
        let bad = BTreeMap::from([("site".to_string(), "(".to_string())]);
        assert!(matches!(
            reg.lookup(&groups(&["uscms"]), &bad),
            Err(Error::InvalidPattern { .. })
        ));
        assert!(reg.lookup(&BTreeSet::new(), &BTreeMap::new()).is_err());
    }

    #[test]
    fn subscription_before_any_provider_and_snapshot() {
        let mut reg = Registry::new(RegistryConfig::default());
        let early = reg.subscribe_events(groups(&["vrvs"]), 0);
        assert!(early.drain().is_empty());
        reg.register(svc("r1", "vrvs"), 30_000, 0).unwrap();
        reg.register(svc("r2", "vrvs"), 30_000, 0).unwrap();
        reg.register(svc("x", "other"), 30_000, 0).unwrap();
        assert_eq!(early.drain().len(), 2);

        let late = reg.subscribe_events(groups(&["vrvs"]), 5);
        assert_eq!(
            kinds(&late),
            vec![
                (EventKind::ServiceAdded, "r1".into()),
                (EventKind::ServiceAdded, "r2".into())
            ]
        );
    }

    #[test]
    fn overflowing_subscriber_is_disconnected_alone() {
        let mut reg = Registry::new(RegistryConfig {
            event_queue: 2,
            ..Default::default()
        });
        let slow = reg.subscribe_events(groups(&["g"]), 0);
        let fast = reg.subscribe_events(groups(&["g"]), 0);
        for i in 0..3 {
            reg.register(svc(&format!("s{i}"), "g"), 30_000, 0).unwrap();
            fast.drain();
        }
        assert_eq!(reg.subscriber_count(), 1);
        assert_eq!(reg.overflow_disconnects(), 1);
        assert_eq!(slow.drain().len(), 2);
        assert!(slow.is_disconnected());
        reg.register(svc("s9", "g"), 30_000, 0).unwrap();
        assert_eq!(fast.drain().len(), 1);
    }

    #[test]
    fn peer_sync_replicates_common_groups_only() {
        let mut a = Registry::new(RegistryConfig {
            groups: groups(&["vrvs", "uscms"]),
            ..Default::default()
        });
        let mut b = Registry::new(RegistryConfig {
            groups: groups(&["vrvs", "private"]),
            ..Default::default()
        });
        b.register(svc("B", "vrvs"), 30_000, 0).unwrap();
        b.register(svc("P", "private"), 30_000, 0).unwrap();

        let state = b.export_for_peer(&a.config().groups);
        let delta = a.sync_peer("b", &b.config().groups.clone(), state, 1);
        assert_eq!(delta.added, vec!["B".to_string()]);
        let found = a.lookup(&groups(&["vrvs", "private"]), &BTreeMap::new()).unwrap();
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].service_id, "B");
    }

    #[test]
    fn peer_sync_newer_registration_wins() {
        let mut a = Registry::new(RegistryConfig::default());
        let mut b = Registry::new(RegistryConfig::default());
        a.register(svc("C", "g").with_attr("v", "old"), 30_000, 10).unwrap();
        b.register(svc("C", "g").with_attr("v", "new"), 30_000, 20).unwrap();
        let all = groups(&["g"]);
        let delta = a.sync_peer("b", &BTreeSet::new(), b.export_for_peer(&BTreeSet::new()), 30);
        assert_eq!(delta.updated, vec!["C".to_string()]);
        let c = &a.lookup(&all, &BTreeMap::new()).unwrap()[0];
        assert_eq!(c.attributes["v"], "new");

        // older peer state does not overwrite
        let delta = b.sync_peer("a", &BTreeSet::new(), vec![PeerEntry {
            descriptor: {
                let mut d = svc("C", "g").with_attr("v", "older");
                d.registered_at = 5;
                d
            },
            lease: Lease { duration_ms: 30_000, expires_at: 35_000 },
        }], 30);
        assert!(delta.updated.is_empty());
        assert_eq!(b.lookup(&all, &BTreeMap::new()).unwrap()[0].attributes["v"], "new");
    }

    #[test]
    fn peer_sync_removes_services_the_peer_dropped() {
        let mut a = Registry::new(RegistryConfig::default());
        let mut b = Registry::new(RegistryConfig::default());
        b.register(svc("B", "g"), 30_000, 0).unwrap();
        a.sync_peer("b", &BTreeSet::new(), b.export_for_peer(&BTreeSet::new()), 1);
        let events = a.subscribe_events(groups(&["g"]), 1);
        events.drain();
        b.deregister("B", 2).unwrap();
        let delta = a.sync_peer("b", &BTreeSet::new(), b.export_for_peer(&BTreeSet::new()), 3);
        assert_eq!(delta.removed, vec!["B".to_string()]);
        assert_eq!(kinds(&events), vec![(EventKind::ServiceRemoved, "B".into())]);
        // a second identical round is a no-op
        assert!(a
            .sync_peer("b", &BTreeSet::new(), b.export_for_peer(&BTreeSet::new()), 4)
            .is_empty());
    }

    #[test]
    fn peer_renewals_extend_replicated_lease() {
        let mut a = Registry::new(RegistryConfig::default());
        let mut b = Registry::new(RegistryConfig::default());
        b.register(svc("B", "g"), 10_000, 0).unwrap();
        a.sync_peer("b", &BTreeSet::new(), b.export_for_peer(&BTreeSet::new()), 0);
        b.renew("B", 10_000, 8_000).unwrap();
        a.sync_peer("b", &BTreeSet::new(), b.export_for_peer(&BTreeSet::new()), 8_000);
        assert!(a.sweep_leases(12_000).is_empty());
        assert_eq!(a.lease_of("B").unwrap().expires_at, 18_000);
    }
}

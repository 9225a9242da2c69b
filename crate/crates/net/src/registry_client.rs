//! Registry clients: one-shot requests, the lease keeper that services run
//! to stay registered, and event feeds.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};
use parking_lot::Mutex;
use vigil_core::clock::Clock;
use vigil_core::proto::Frame;
use vigil_core::registry::{Lease, RegistryEvent, ServiceDescriptor};

use crate::conn::{self, FrameConn};
use crate::error::{NetError, Result};
use crate::stopper::Stopper;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(3);

#[derive(Debug, Clone)]
pub struct RegistryClient {
    endpoints: Vec<String>,
    token: Option<String>,
}

impl RegistryClient {
    pub fn new<I, S>(endpoints: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            endpoints: endpoints.into_iter().map(Into::into).collect(),
            token: None,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn endpoints(&self) -> &[String] {
        &self.endpoints
    }

    pub fn register_at(&self, endpoint: &str, descriptor: &ServiceDescriptor, duration_ms: u64) -> Result<Lease> {
        let frame = Frame::Register {
            descriptor: descriptor.clone(),
            duration_ms,
            token: self.token.clone(),
        };
        match conn::call(endpoint, &frame, REQUEST_TIMEOUT)? {
            Frame::RegisterAck { lease } => Ok(lease),
            other => Err(unexpected(other, "REGISTER_ACK")),
        }
    }

    pub fn renew_at(&self, endpoint: &str, service_id: &str, duration_ms: u64) -> Result<Lease> {
        let frame = Frame::Renew {
            service_id: service_id.to_string(),
            duration_ms,
        };
        match conn::call(endpoint, &frame, REQUEST_TIMEOUT)? {
            Frame::RenewAck { lease } => Ok(lease),
            other => Err(unexpected(other, "RENEW_ACK")),
        }
    }

    pub fn deregister_at(&self, endpoint: &str, service_id: &str) -> Result<()> {
        let frame = Frame::Deregister {
            service_id: service_id.to_string(),
        };
        match conn::call(endpoint, &frame, REQUEST_TIMEOUT)? {
            Frame::Ok { .. } => Ok(()),
            other => Err(unexpected(other, "OK")),
        }
    }

    /// Registers with every endpoint; succeeds when at least one accepted.
    pub fn register(&self, descriptor: &ServiceDescriptor, duration_ms: u64) -> Result<Lease> {
        self.on_any(|ep| self.register_at(ep, descriptor, duration_ms))
    }

    pub fn deregister(&self, service_id: &str) -> Result<()> {
        self.on_any(|ep| self.deregister_at(ep, service_id))
    }

    /// Union of the answers of every reachable registry, by service id.
    /// Fails only when no registry answered.
    pub fn lookup(
        &self,
        groups: &BTreeSet<String>,
        attributes: &BTreeMap<String, String>,
    ) -> Result<Vec<ServiceDescriptor>> {
        let frame = Frame::Lookup {
            groups: groups.iter().cloned().collect(),
            attributes: attributes.clone(),
        };
        let mut found: BTreeMap<String, ServiceDescriptor> = BTreeMap::new();
        let mut last_err = None;
        let mut answered = false;
        for ep in &self.endpoints {
            match conn::call(ep, &frame, REQUEST_TIMEOUT) {
                Ok(Frame::LookupResult { services }) => {
                    answered = true;
                    for s in services {
                        match found.get(&s.service_id) {
                            Some(old) if old.registered_at >= s.registered_at => {}
                            _ => {
                                found.insert(s.service_id.clone(), s);
                            }
                        }
                    }
                }
                Ok(other) => last_err = Some(unexpected(other, "LOOKUP_RESULT")),
                Err(e) => last_err = Some(e),
            }
        }
        if answered {
            Ok(found.into_values().collect())
        } else {
            Err(last_err.unwrap_or_else(|| NetError::Unreachable("no registry endpoints".into())))
        }
    }

    /// Opens an event feed on one registry.
    pub fn subscribe_events(&self, endpoint: &str, groups: &BTreeSet<String>) -> Result<EventFeed> {
        EventFeed::open(endpoint, groups)
    }

    fn on_any<T>(&self, mut f: impl FnMut(&str) -> Result<T>) -> Result<T> {
        let mut ok = None;
        let mut last_err = None;
        for ep in &self.endpoints {
            match f(ep) {
                Ok(v) => {
                    ok.get_or_insert(v);
                }
                Err(e) => last_err = Some(e),
            }
        }
        ok.ok_or_else(|| last_err.unwrap_or_else(|| NetError::Unreachable("no registry endpoints".into())))
    }
}

fn unexpected(frame: Frame, wanted: &'static str) -> NetError {
    NetError::Unexpected {
        got: frame.kind(),
        wanted,
    }
}

/// Live registry events from one registry, read by a background thread.
pub struct EventFeed {
    rx: Receiver<RegistryEvent>,
    stream: std::net::TcpStream,
    closed: Arc<AtomicBool>,
    reader: Option<JoinHandle<()>>,
}

impl EventFeed {
    pub fn open(endpoint: &str, groups: &BTreeSet<String>) -> Result<Self> {
        let mut conn = FrameConn::connect(endpoint)?;
        conn.send(&Frame::SubscribeEvents {
            groups: groups.iter().cloned().collect(),
        })?;
        let stream = conn.stream()?;
        let (tx, rx) = crossbeam_channel::unbounded();
        let closed = Arc::new(AtomicBool::new(false));
        let flag = closed.clone();
        let reader = thread::Builder::new().name("registry-feed".into()).spawn(move || {
            while let Ok(frame) = conn.recv() {
                match frame {
                    Frame::Event { event } => {
                        if tx.send(event).is_err() {
                            break;
                        }
                    }
                    Frame::Error { code, msg } => {
                        tracing::warn!(%code, "event feed ended: {msg}");
                        break;
                    }
                    _ => {}
                }
            }
            flag.store(true, Ordering::SeqCst);
        })?;
        Ok(Self {
            rx,
            stream,
            closed,
            reader: Some(reader),
        })
    }

    /// `Err(())` once the feed closed and every event was consumed.
    pub fn next_timeout(&self, timeout: Duration) -> Result<Option<RegistryEvent>, ()> {
        match self.rx.recv_timeout(timeout) {
            Ok(ev) => Ok(Some(ev)),
            Err(RecvTimeoutError::Timeout) => {
                if self.closed.load(Ordering::SeqCst) && self.rx.is_empty() {
                    Err(())
                } else {
                    Ok(None)
                }
            }
            Err(RecvTimeoutError::Disconnected) => Err(()),
        }
    }

    pub fn drain(&self) -> Vec<RegistryEvent> {
        self.rx.try_iter().collect()
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn close(&mut self) {
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for EventFeed {
    fn drop(&mut self) {
        self.close();
    }
}

#[derive(Debug, Default)]
struct KeeperState {
    paused: AtomicBool,
    renewals: AtomicU64,
    registrations: AtomicU64,
    lease: Mutex<Option<Lease>>,
}

/// Keeps one service registered with every configured registry.
///
/// Renews every third of the lease. A registry that forgot the service
/// (restart or expiry) gets a fresh REGISTER; unreachable registries are
/// retried on the next tick.
pub struct LeaseKeeper {
    client: RegistryClient,
    descriptor: ServiceDescriptor,
    state: Arc<KeeperState>,
    stop: Arc<Stopper>,
    thread: Option<JoinHandle<()>>,
}

impl LeaseKeeper {
    pub fn start(
        client: RegistryClient,
        descriptor: ServiceDescriptor,
        duration_ms: u64,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        descriptor.validate()?;
        let state = Arc::new(KeeperState::default());
        let stop = Arc::new(Stopper::new());
        let (c, d, s, st) = (client.clone(), descriptor.clone(), state.clone(), stop.clone());
        let thread = thread::Builder::new()
            .name(format!("lease-{}", descriptor.service_id))
            .spawn(move || keep(&c, &d, duration_ms, &*clock, &s, &st))?;
        Ok(Self {
            client,
            descriptor,
            state,
            stop,
            thread: Some(thread),
        })
    }

    /// Stops renewing without deregistering, as a crashed service would.
    pub fn pause(&self) {
        self.state.paused.store(true, Ordering::SeqCst);
    }

    pub fn resume(&self) {
        self.state.paused.store(false, Ordering::SeqCst);
    }

    pub fn renewals(&self) -> u64 {
        self.state.renewals.load(Ordering::SeqCst)
    }

    pub fn registrations(&self) -> u64 {
        self.state.registrations.load(Ordering::SeqCst)
    }

    pub fn lease(&self) -> Option<Lease> {
        *self.state.lease.lock()
    }

    pub fn descriptor(&self) -> &ServiceDescriptor {
        &self.descriptor
    }

    /// Stops the keeper; a clean stop also deregisters.
    pub fn stop(&mut self, deregister: bool) {
        self.stop.stop();
        if let Some(h) = self.thread.take() {
            let _ = h.join();
            if deregister {
                let _ = self.client.deregister(&self.descriptor.service_id);
            }
        }
    }
}

impl Drop for LeaseKeeper {
    fn drop(&mut self) {
        self.stop(true);
    }
}

fn keep(
    client: &RegistryClient,
    descriptor: &ServiceDescriptor,
    duration_ms: u64,
    clock: &dyn Clock,
    state: &KeeperState,
    stop: &Stopper,
) {
    let mut registered: BTreeSet<String> = BTreeSet::new();
    let period = clock.real((duration_ms / 3).max(1));
    loop {
        if !state.paused.load(Ordering::SeqCst) {
            for ep in client.endpoints() {
                let renewed = if registered.contains(ep) {
                    match client.renew_at(ep, &descriptor.service_id, duration_ms) {
                        Ok(lease) => {
                            state.renewals.fetch_add(1, Ordering::SeqCst);
                            Some(lease)
                        }
                        Err(e) => {
                            tracing::debug!(%ep, "renew failed: {e}");
                            registered.remove(ep);
                            None
                        }
                    }
                } else {
                    None
                };
                let lease = match renewed {
                    Some(l) => Some(l),
                    None => match client.register_at(ep, descriptor, duration_ms) {
                        Ok(lease) => {
                            registered.insert(ep.clone());
                            state.registrations.fetch_add(1, Ordering::SeqCst);
                            Some(lease)
                        }
                        Err(e) => {
                            tracing::debug!(%ep, "register failed: {e}");
                            None
                        }
                    },
                };
                if let Some(l) = lease {
                    *state.lease.lock() = Some(l);
                }
            }
        }
        if stop.wait(period) {
            return;
        }
    }
}

//! The registry as a network service.
//!
//! Each connection gets its own thread. `SUBSCRIBE_EVENTS` turns the
//! connection into a one-way event feed. A sweep thread expires leases
//! every `sweep_ms`; an anti-entropy thread exchanges `PEER_SYNC` frames
//! with every configured peer every `sync_ms` and right after any local
//! registration change.

use std::collections::BTreeSet;
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use vigil_core::clock::Clock;
use vigil_core::proto::{Frame, PROTO_VERSION};
use vigil_core::registry::{Registry, RegistryConfig};

use crate::conn::{FrameConn, Listener};
use crate::error::{NetError, Result};
use crate::stopper::Stopper;

/// Real-time granularity at which event feeds notice shutdown and
/// departed clients.
const FEED_POLL: Duration = Duration::from_millis(100);

#[derive(Debug, Clone)]
pub struct RegistryServerConfig {
    pub listen: String,
    /// Name announced to peers; the bound address when absent.
    pub peer_id: Option<String>,
    pub peers: Vec<String>,
    pub registry: RegistryConfig,
    /// Anti-entropy period in clock milliseconds.
    pub sync_ms: u64,
    /// Shared secret required on REGISTER when set.
    pub token: Option<String>,
}

impl Default for RegistryServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            peer_id: None,
            peers: Vec::new(),
            registry: RegistryConfig::default(),
            sync_ms: 5_000,
            token: None,
        }
    }
}

struct Shared {
    registry: Mutex<Registry>,
    clock: Arc<dyn Clock>,
    peer_id: String,
    groups: Vec<String>,
    peers: Mutex<Vec<String>>,
    token: Option<String>,
    sync_ms: u64,
    stop: Stopper,
    kick: Mutex<bool>,
    kicked: Condvar,
}

impl Shared {
    fn now(&self) -> u64 {
        self.clock.now_ms()
    }

    fn kick_sync(&self) {
        *self.kick.lock() = true;
        self.kicked.notify_all();
    }
}

pub struct RegistryServer {
    listener: Listener,
    shared: Arc<Shared>,
    threads: Vec<JoinHandle<()>>,
}

impl RegistryServer {
    pub fn start(config: RegistryServerConfig, clock: Arc<dyn Clock>) -> Result<Self> {
        if config.sync_ms == 0 || config.registry.sweep_ms == 0 {
            return Err(NetError::Config("sync_ms and sweep_ms must be positive".into()));
        }
        let shared_slot: Arc<Mutex<Option<Arc<Shared>>>> = Arc::new(Mutex::new(None));
        let slot = shared_slot.clone();
        let listener = Listener::spawn(&config.listen, "registry", move |conn| {
            let shared = slot.lock().clone();
            if let Some(shared) = shared {
                handle_connection(&shared, conn);
            }
        })?;
        let sweep_ms = config.registry.sweep_ms;
        let shared = Arc::new(Shared {
            groups: config.registry.groups.iter().cloned().collect(),
            registry: Mutex::new(Registry::new(config.registry)),
            clock,
            peer_id: config.peer_id.unwrap_or_else(|| listener.addr().to_string()),
            peers: Mutex::new(config.peers),
            token: config.token,
            sync_ms: config.sync_ms,
            stop: Stopper::new(),
            kick: Mutex::new(true),
            kicked: Condvar::new(),
        });
        *shared_slot.lock() = Some(shared.clone());

        let sweeper = shared.clone();
        let sweep = thread::Builder::new()
            .name("registry-sweep".into())
            .spawn(move || {
                let period = sweeper.clock.real(sweep_ms);
                while !sweeper.stop.wait(period) {
                    let now = sweeper.now();
                    let removed = sweeper.registry.lock().sweep_leases(now);
                    if !removed.is_empty() {
                        tracing::info!(?removed, "leases expired");
                    }
                }
            })?;
        let syncer = shared.clone();
        let sync = thread::Builder::new()
            .name("registry-sync".into())
            .spawn(move || sync_loop(&syncer))?;
        Ok(Self {
            listener,
            shared,
            threads: vec![sweep, sync],
        })
    }

    pub fn addr(&self) -> std::net::SocketAddr {
        self.listener.addr()
    }

    pub fn endpoint(&self) -> String {
        self.addr().to_string()
    }

    pub fn peer_id(&self) -> &str {
        &self.shared.peer_id
    }

    /// Runs `f` on the in-memory registry (inspection and tests).
    pub fn with_registry<R>(&self, f: impl FnOnce(&mut Registry) -> R) -> R {
        f(&mut self.shared.registry.lock())
    }

    pub fn set_peers(&self, peers: Vec<String>) {
        *self.shared.peers.lock() = peers;
        self.shared.kick_sync();
    }

    /// Performs one anti-entropy round with every peer right now.
    pub fn sync_now(&self) -> usize {
        sync_round(&self.shared)
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.is_stopped() {
            return;
        }
        self.shared.stop.stop();
        self.shared.kick_sync();
        self.listener.shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn sync_loop(shared: &Shared) {
    let period = shared.clock.real(shared.sync_ms);
    loop {
        {
            let mut kick = shared.kick.lock();
            if !*kick {
                shared.kicked.wait_for(&mut kick, period);
            }
            *kick = false;
        }
        if shared.stop.is_stopped() {
            return;
        }
        sync_round(shared);
    }
}

/// Pushes local state to every peer and merges each reply. Returns the
/// number of peers reached.
fn sync_round(shared: &Shared) -> usize {
    let peers = shared.peers.lock().clone();
    let mut reached = 0;
    for peer in peers {
        match sync_with(shared, &peer) {
            Ok(()) => reached += 1,
            Err(e) => tracing::debug!(%peer, "peer sync failed: {e}"),
        }
    }
    reached
}

fn sync_with(shared: &Shared, peer: &str) -> Result<()> {
    let entries = shared.registry.lock().export_for_peer(&BTreeSet::new());
    let frame = Frame::PeerSync {
        peer_id: shared.peer_id.clone(),
        groups: shared.groups.clone(),
        entries,
    };
    match crate::conn::call(peer, &frame, Duration::from_secs(2))? {
        Frame::PeerSync {
            peer_id,
            groups,
            entries,
        } => {
            let groups: BTreeSet<String> = groups.into_iter().collect();
            let now = shared.now();
            shared.registry.lock().sync_peer(&peer_id, &groups, entries, now);
            Ok(())
        }
        other => Err(NetError::Unexpected {
            got: other.kind(),
            wanted: "PEER_SYNC",
        }),
    }
}

fn handle_connection(shared: &Shared, mut conn: FrameConn) {
    loop {
        let frame = match conn.recv() {
            Ok(f) => f,
            Err(NetError::Malformed(msg)) => {
                if conn.send(&Frame::error("MALFORMED", msg)).is_err() {
                    return;
                }
                continue;
            }
            Err(_) => return,
        };
        let reply = match frame {
            Frame::SubscribeEvents { groups } => {
                stream_events(shared, conn, groups.into_iter().collect());
                return;
            }
            other => answer(shared, other),
        };
        if conn.send(&reply).is_err() {
            return;
        }
    }
}

fn answer(shared: &Shared, frame: Frame) -> Frame {
    let now = shared.now();
    match frame {
        Frame::Register {
            descriptor,
            duration_ms,
            token,
        } => {
            if shared.token.is_some() && token != shared.token {
                return Frame::error("UNAUTHORIZED", "missing or wrong registry token");
            }
            if descriptor.proto_version != PROTO_VERSION {
                return Frame::error(
                    "PROTO_VERSION",
                    format!("speaks {}, registry speaks {PROTO_VERSION}", descriptor.proto_version),
                );
            }
            let res = shared.registry.lock().register(descriptor, duration_ms, now);
            match res {
                Ok(lease) => {
                    shared.kick_sync();
                    Frame::RegisterAck { lease }
                }
                Err(e) => Frame::error("INVALID", e.to_string()),
            }
        }
        Frame::Renew {
            service_id,
            duration_ms,
        } => match shared.registry.lock().renew(&service_id, duration_ms, now) {
            Ok(lease) => Frame::RenewAck { lease },
            Err(e) => Frame::error("NOT_REGISTERED", e.to_string()),
        },
        Frame::Deregister { service_id } => {
            let res = shared.registry.lock().deregister(&service_id, now);
            match res {
                Ok(()) => {
                    shared.kick_sync();
                    Frame::ok("")
                }
                Err(e) => Frame::error("NOT_REGISTERED", e.to_string()),
            }
        }
        Frame::Lookup { groups, attributes } => {
            let groups: BTreeSet<String> = groups.into_iter().collect();
            match shared.registry.lock().lookup(&groups, &attributes) {
                Ok(services) => Frame::LookupResult { services },
                Err(e) => Frame::error("INVALID", e.to_string()),
            }
        }
        Frame::PeerSync {
            peer_id,
            groups,
            entries,
        } => {
            let groups: BTreeSet<String> = groups.into_iter().collect();
            let mut reg = shared.registry.lock();
            reg.sync_peer(&peer_id, &groups, entries, now);
            Frame::PeerSync {
                peer_id: shared.peer_id.clone(),
                groups: shared.groups.clone(),
                entries: reg.export_for_peer(&groups),
            }
        }
        other => Frame::error("UNSUPPORTED", format!("{} is not a registry request", other.kind())),
    }
}

fn stream_events(shared: &Shared, mut conn: FrameConn, groups: BTreeSet<String>) {
    let stream = shared.registry.lock().subscribe_events(groups, shared.now());
    loop {
        if shared.stop.is_stopped() {
            break;
        }
        match stream.next_timeout(FEED_POLL) {
            Ok(Some(event)) => {
                if conn.send(&Frame::Event { event }).is_err() {
                    break;
                }
            }
            Ok(None) => {
                if conn.peer_closed() {
                    break;
                }
            }
            Err(_) => {
                let _ = conn.send(&Frame::error("OVERFLOW", "event subscriber fell behind"));
                break;
            }
        }
    }
    shared.registry.lock().unsubscribe(stream.id());
}

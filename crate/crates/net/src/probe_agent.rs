//! Real UDP transport for a [`Prober`].
//!
//! One socket serves both roles: requests from other agents are answered
//! in place (responder), replies to our own requests feed the estimators.
//! RTTs are measured on the real monotonic clock even when the agent's
//! schedule runs on a compressed clock; a network round trip is not
//! compressible.

use std::collections::BTreeMap;
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use vigil_core::clock::Clock;
use vigil_core::probe::{ProbePacket, ProbeType, Prober, PACKET_LEN};

use crate::error::{NetError, Result};
use crate::stopper::Stopper;

const RECV_POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Default)]
pub struct AgentCounters {
    pub sent: AtomicU64,
    pub replies_sent: AtomicU64,
    pub replies_received: AtomicU64,
    pub malformed: AtomicU64,
}

pub struct UdpProbeAgent {
    addr: SocketAddr,
    peers: Arc<Mutex<BTreeMap<String, SocketAddr>>>,
    counters: Arc<AgentCounters>,
    stop: Arc<Stopper>,
    threads: Vec<JoinHandle<()>>,
}

impl UdpProbeAgent {
    /// Binds `bind` and probes every peer (`id -> host:port`) once per
    /// `prober.config().period_ms` of `clock` time.
    pub fn start(
        bind: &str,
        prober: Arc<Mutex<Prober>>,
        peers: &BTreeMap<String, String>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let socket = UdpSocket::bind(bind)?;
        socket.set_read_timeout(Some(RECV_POLL))?;
        let addr = socket.local_addr()?;
        let peers = Arc::new(Mutex::new(resolve(peers)?));
        prober.lock().set_peers(peers.lock().keys().cloned());
        let counters = Arc::new(AgentCounters::default());
        let stop = Arc::new(Stopper::new());
        let epoch = Instant::now();

        let recv_socket = socket.try_clone()?;
        let (rp, rc, rs, rclock) = (prober.clone(), counters.clone(), stop.clone(), clock.clone());
        let receiver = thread::Builder::new().name("probe-recv".into()).spawn(move || {
            let mut buf = [0u8; 512];
            while !rs.is_stopped() {
                let (n, from) = match recv_socket.recv_from(&mut buf) {
                    Ok(x) => x,
                    Err(_) => continue,
                };
                let now_ns = epoch.elapsed().as_nanos() as u64;
                let datagram = &buf[..n];
                match ProbePacket::decode(datagram) {
                    Ok(p) if p.ptype == ProbeType::Request => {
                        if recv_socket.send_to(&p.reply().encode(), from).is_ok() {
                            rc.replies_sent.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    Ok(_) => {
                        if rp.lock().on_datagram(datagram, rclock.now_ms(), now_ns).is_some() {
                            rc.replies_received.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                    Err(_) => {
                        rc.malformed.fetch_add(1, Ordering::Relaxed);
                    }
                }
            }
        })?;

        let (sp, sc, ss, speers) = (prober, counters.clone(), stop.clone(), peers.clone());
        let sender = thread::Builder::new().name("probe-send".into()).spawn(move || {
            let period = clock.real(sp.lock().config().period_ms);
            loop {
                let targets: Vec<(String, SocketAddr)> =
                    speers.lock().iter().map(|(k, v)| (k.clone(), *v)).collect();
                for (peer, to) in targets {
                    let now_ns = epoch.elapsed().as_nanos() as u64;
                    let packet = sp.lock().request(&peer, clock.now_ms(), now_ns);
                    if let Some(p) = packet {
                        let bytes: [u8; PACKET_LEN] = p.encode();
                        if socket.send_to(&bytes, to).is_ok() {
                            sc.sent.fetch_add(1, Ordering::Relaxed);
                        }
                    }
                }
                if ss.wait(period) {
                    return;
                }
            }
        })?;

        Ok(Self {
            addr,
            peers,
            counters,
            stop,
            threads: vec![receiver, sender],
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn counters(&self) -> &AgentCounters {
        &self.counters
    }

    /// Replaces the peer set. The prober must be updated by the caller.
    pub fn set_peers(&self, peers: &BTreeMap<String, String>) -> Result<()> {
        *self.peers.lock() = resolve(peers)?;
        Ok(())
    }

    pub fn shutdown(&mut self) {
        self.stop.stop();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for UdpProbeAgent {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn resolve(peers: &BTreeMap<String, String>) -> Result<BTreeMap<String, SocketAddr>> {
    peers
        .iter()
        .map(|(id, addr)| {
            addr.to_socket_addrs()?
                .next()
                .map(|sa| (id.clone(), sa))
                .ok_or_else(|| NetError::Config(format!("cannot resolve probe peer `{addr}`")))
        })
        .collect()
}

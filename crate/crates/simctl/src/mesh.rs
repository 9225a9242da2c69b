//! Drives externally clocked probers over simulated links: one probe per
//! directed pair every probe period, answered after the sampled RTT or
//! never when the sample is a loss.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use parking_lot::Mutex;
use vigil_core::clock::Clock;
use vigil_core::probe::Prober;
use vigil_net::stopper::Stopper;

use crate::world::SimWorld;

pub struct VirtualMesh {
    world: Arc<SimWorld>,
    probers: Vec<(String, Arc<Mutex<Prober>>)>,
    /// Probes sent so far per directed pair; addresses the link sample.
    sent: BTreeMap<(String, String), u64>,
}

impl VirtualMesh {
    pub fn new(world: Arc<SimWorld>, probers: Vec<(String, Arc<Mutex<Prober>>)>) -> Self {
        Self {
            world,
            probers,
            sent: BTreeMap::new(),
        }
    }

    /// One probe round at `now_ms`. A dead reflector neither sends nor
    /// answers. Returns the number of replies delivered.
    pub fn step(&mut self, now_ms: u64) -> usize {
        let now_ns = now_ms.saturating_mul(1_000_000);
        let mut delivered = 0;
        for (id, prober) in &self.probers {
            if !self.world.reflector_alive(id) {
                continue;
            }
            let mut p = prober.lock();
            let peers: Vec<String> = p.peers().map(str::to_string).collect();
            for peer in peers {
                let Some(packet) = p.request(&peer, now_ms, now_ns) else {
                    continue;
                };
                let k = self.sent.entry((id.clone(), peer.clone())).or_insert(0);
                let sample = self.world.probe(id, &peer, *k);
                *k += 1;
                if let Some(rtt_ms) = sample {
                    let rtt_ns = (rtt_ms * 1e6).round() as u64;
                    let at_ms = now_ms + (rtt_ns / 1_000_000);
                    if p.on_datagram(&packet.reply().encode(), at_ms, now_ns + rtt_ns).is_some() {
                        delivered += 1;
                    }
                }
            }
        }
        delivered
    }

    /// Steps every `period_ms` of `clock` time until stopped.
    pub fn spawn(mut self, clock: Arc<dyn Clock>, period_ms: u64, stop: Arc<Stopper>) -> std::io::Result<JoinHandle<()>> {
        std::thread::Builder::new().name("sim-mesh".into()).spawn(move || {
            let mut next = clock.now_ms();
            loop {
                let now = clock.now_ms();
                if now >= next {
                    self.step(now);
                    next += period_ms;
                    if next <= now {
                        // fell behind; skip missed rounds rather than burst
                        next = now + period_ms;
                    }
                }
                if stop.wait(clock.real(next.saturating_sub(clock.now_ms())).max(std::time::Duration::from_millis(1))) {
                    return;
                }
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{LinkSpec, ScenarioConfig};
    use vigil_core::probe::ProbeConfig;

    fn mesh(loss: f64) -> (Arc<SimWorld>, VirtualMesh, Vec<Arc<Mutex<Prober>>>) {
        let cfg = ScenarioConfig {
            farms: vec![],
            reflectors: vec!["r1".into(), "r2".into()],
            links: vec![LinkSpec { a: "r1".into(), b: "r2".into(), rtt_ms: 40.0, jitter_ms: 0.0, loss }],
            ..ScenarioConfig::default()
        };
        let world = Arc::new(SimWorld::new(&cfg, 0));
        let probers: Vec<_> = ["r1", "r2"]
            .iter()
            .map(|id| {
                let mut p = Prober::new(ProbeConfig::default(), Prober::id_from_name(id)).unwrap();
                p.set_peers([if *id == "r1" { "r2" } else { "r1" }.to_string()]);
                (id.to_string(), Arc::new(Mutex::new(p)))
            })
            .collect();
        let handles = probers.iter().map(|(_, p)| p.clone()).collect();
        (world.clone(), VirtualMesh::new(world, probers), handles)
    }

    #[test]
    fn replies_carry_the_link_rtt() {
        let (_, mut m, probers) = mesh(0.0);
        for round in 0..10 {
            assert_eq!(m.step(1_000 + round * 2_000), 2);
        }
        let p = probers[0].lock();
        let stats = p.stats("r2").unwrap();
        assert!((stats.ema_rtt - 40.0).abs() < 1e-6);
    }

    #[test]
    fn dead_reflectors_go_silent() {
        let (world, mut m, _) = mesh(0.0);
        world.apply(&crate::config::FaultAction::KillReflector { id: "r2".into() });
        assert_eq!(m.step(1_000), 0);
        assert!(world.restore_reflector("r2"));
        assert_eq!(m.step(3_000), 2);
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let (_, mut m, _) = mesh(1.0);
        assert_eq!((0..5).map(|r| m.step(r * 2_000)).sum::<usize>(), 0);
    }
}

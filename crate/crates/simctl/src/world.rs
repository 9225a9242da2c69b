//! The simulated world: farm nodes whose metrics follow bounded random
//! walks, and reflector links with noisy RTTs and Bernoulli loss.
//!
//! Every draw comes from a ChaCha stream addressed by `(seed, entity,
//! round)`, so a value depends on the seed and its address only, never on
//! thread timing or on which earlier rounds were actually collected.

use std::collections::{BTreeMap, BTreeSet};

use parking_lot::{Mutex, RwLock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{FarmSpec, FaultAction, ScenarioConfig};

/// Stream words reserved per round; enough for `MAX_PARAMS` f64 draws.
const ROUND_WORDS: u128 = 1 << 16;
pub const MAX_PARAMS: usize = 10_000;

const KIND_WALK: u64 = 1 << 60;
const KIND_NET: u64 = 2 << 60;
const KIND_RESPONSE: u64 = 3 << 60;
const KIND_LINK: u64 = 4 << 60;

/// Walk step as a fraction of the parameter range.
const STEP: f64 = 0.05;

const NAMED_PARAMS: [&str; 10] = [
    "Load1", "Load5", "Load15", "CPU_usr", "CPU_sys", "CPU_idle", "MEM_free", "SWAP_free", "Disk_free", "Processes",
];
pub const NET_PARAMS: [&str; 2] = ["net_in", "net_out"];

fn stream(seed: u64, entity: u64, slot: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(entity);
    rng.set_word_pos(slot as u128 * ROUND_WORDS);
    rng
}

pub fn param_name(i: usize) -> String {
    NAMED_PARAMS.get(i).map_or_else(|| format!("p{i:03}"), |s| s.to_string())
}

/// Upper bound of a parameter's walk; the lower bound is 0.
fn param_hi(name: &str) -> f64 {
    if name.starts_with("Load") {
        16.0
    } else if name.starts_with("net_") {
        1_000.0
    } else {
        100.0
    }
}

/// Folds `x` back into `[0, hi]`.
fn reflect(x: f64, hi: f64) -> f64 {
    if x < 0.0 {
        (-x).min(hi)
    } else if x > hi {
        (2.0 * hi - x).max(0.0)
    } else {
        x
    }
}

/// Bounded random walks of one node's parameters. Slot 0 of the stream
/// seeds the start values; round `k` uses slot `k + 1`.
#[derive(Debug, Clone)]
pub struct SimNode {
    seed: u64,
    entity: u64,
    names: Vec<String>,
    his: Vec<f64>,
    values: Vec<f64>,
    /// Rounds already folded into `values`.
    rounds: u64,
}

impl SimNode {
    fn new(seed: u64, entity: u64, names: Vec<String>) -> Self {
        let his: Vec<f64> = names.iter().map(|n| param_hi(n)).collect();
        let mut rng = stream(seed, entity, 0);
        let values = his.iter().map(|hi| rng.gen::<f64>() * hi).collect();
        Self { seed, entity, names, his, values, rounds: 0 }
    }

    /// Values after round `k`, all within `[0, hi]`.
    pub fn at(&mut self, k: u64) -> Vec<(String, f64)> {
        if self.rounds > k + 1 {
            *self = Self::new(self.seed, self.entity, std::mem::take(&mut self.names));
        }
        while self.rounds <= k {
            let mut rng = stream(self.seed, self.entity, self.rounds + 1);
            for (v, hi) in self.values.iter_mut().zip(&self.his) {
                *v = reflect(*v + hi * STEP * rng.gen_range(-1.0..1.0), *hi);
            }
            self.rounds += 1;
        }
        self.names.iter().cloned().zip(self.values.iter().copied()).collect()
    }
}

/// Current properties of one undirected link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimLink {
    pub rtt_ms: f64,
    pub jitter_ms: f64,
    pub loss: f64,
}

impl SimLink {
    /// One round trip: `None` when dropped, otherwise an RTT of at least
    /// half the base.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Option<f64> {
        let dropped = rng.gen::<f64>() < self.loss;
        let u: f64 = rng.gen_range(-1.0..=1.0);
        (!dropped).then(|| (self.rtt_ms + self.jitter_ms * u).max(self.rtt_ms / 2.0))
    }
}

struct FarmWorld {
    spec: FarmSpec,
    index: u64,
    nodes: Vec<String>,
    load: BTreeMap<String, Mutex<SimNode>>,
    net: BTreeMap<String, Mutex<SimNode>>,
}

pub fn node_name(j: usize, nodes: usize) -> String {
    let width = nodes.saturating_sub(1).to_string().len().max(3);
    format!("n{j:0width$}")
}

pub struct SimWorld {
    seed: u64,
    t0: u64,
    farms: BTreeMap<String, FarmWorld>,
    reflectors: Vec<String>,
    links: RwLock<BTreeMap<(String, String), SimLink>>,
    dead_nodes: RwLock<BTreeSet<(String, String)>>,
    dead_reflectors: RwLock<BTreeSet<String>>,
}

fn pair(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl SimWorld {
    /// `t0` is the scenario start in clock milliseconds; round `k` of a
    /// node is due at `t0 + offset + k * period`.
    pub fn new(cfg: &ScenarioConfig, t0: u64) -> Self {
        let farms = cfg
            .farms
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let nodes: Vec<String> = (0..spec.nodes).map(|j| node_name(j, spec.nodes)).collect();
                let names: Vec<String> = (0..spec.params).map(param_name).collect();
                let net_names: Vec<String> = NET_PARAMS.iter().map(|s| s.to_string()).collect();
                let entity = |j: usize| ((i as u64) << 32) | j as u64;
                let load = nodes
                    .iter()
                    .enumerate()
                    .map(|(j, n)| (n.clone(), Mutex::new(SimNode::new(cfg.seed, KIND_WALK | entity(j), names.clone()))))
                    .collect();
                let net = nodes
                    .iter()
                    .enumerate()
                    .map(|(j, n)| (n.clone(), Mutex::new(SimNode::new(cfg.seed, KIND_NET | entity(j), net_names.clone()))))
                    .collect();
                let farm = FarmWorld {
                    spec: spec.clone(),
                    index: i as u64,
                    nodes,
                    load,
                    net,
                };
                (spec.name.clone(), farm)
            })
            .collect();
        let links = cfg
            .links
            .iter()
            .map(|l| {
                let link = SimLink {
                    rtt_ms: l.rtt_ms,
                    jitter_ms: l.jitter_ms,
                    loss: l.loss,
                };
                (pair(&l.a, &l.b), link)
            })
            .collect();
        Self {
            seed: cfg.seed,
            t0,
            farms,
            reflectors: cfg.reflectors.clone(),
            links: RwLock::new(links),
            dead_nodes: RwLock::new(BTreeSet::new()),
            dead_reflectors: RwLock::new(BTreeSet::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn farm(&self, name: &str) -> Option<&FarmSpec> {
        self.farms.get(name).map(|f| &f.spec)
    }

    pub fn nodes(&self, farm: &str) -> &[String] {
        self.farms.get(farm).map_or(&[], |f| &f.nodes)
    }

    pub fn reflectors(&self) -> &[String] {
        &self.reflectors
    }

    /// Stagger of node `j`: the farm's nodes are spread evenly over one period.
    pub fn offset(spec: &FarmSpec, j: usize) -> u64 {
        spec.period_ms * j as u64 / spec.nodes as u64
    }

    /// Round index of a collect due at `due`.
    pub fn round_of(&self, farm: &str, due: u64) -> u64 {
        self.farm(farm).map_or(0, |f| due.saturating_sub(self.t0) / f.period_ms)
    }

    fn node_index(&self, farm: &FarmWorld, node: &str) -> Option<u64> {
        farm.nodes.binary_search(&node.to_string()).ok().map(|j| j as u64)
    }

    /// Simulated response time of `node` for round `k`.
    pub fn response_ms(&self, farm: &str, node: &str, k: u64) -> Option<u64> {
        let f = self.farms.get(farm)?;
        let j = self.node_index(f, node)?;
        let mut rng = stream(self.seed, KIND_RESPONSE | (f.index << 32) | j, k + 1);
        Some(rng.gen_range(f.spec.response_min_ms..=f.spec.response_max_ms))
    }

    pub fn load_values(&self, farm: &str, node: &str, k: u64) -> Option<Vec<(String, f64)>> {
        Some(self.farms.get(farm)?.load.get(node)?.lock().at(k))
    }

    pub fn net_values(&self, farm: &str, node: &str, k: u64) -> Option<Vec<(String, f64)>> {
        Some(self.farms.get(farm)?.net.get(node)?.lock().at(k))
    }

    pub fn has_node(&self, farm: &str, node: &str) -> bool {
        self.farms.get(farm).is_some_and(|f| f.load.contains_key(node))
    }

    pub fn node_alive(&self, farm: &str, node: &str) -> bool {
        !self.dead_nodes.read().contains(&(farm.to_string(), node.to_string()))
    }

    pub fn reflector_alive(&self, id: &str) -> bool {
        !self.dead_reflectors.read().contains(id)
    }

    pub fn restore_reflector(&self, id: &str) -> bool {
        self.dead_reflectors.write().remove(id)
    }

    pub fn link(&self, a: &str, b: &str) -> Option<SimLink> {
        self.links.read().get(&pair(a, b)).copied()
    }

    /// Outcome of the `k`-th probe from `from` to `to`; `None` when lost.
    pub fn probe(&self, from: &str, to: &str, k: u64) -> Option<f64> {
        if !self.reflector_alive(from) || !self.reflector_alive(to) {
            return None;
        }
        let link = self.link(from, to)?;
        let index = |id: &str| self.reflectors.iter().position(|r| r == id).map(|i| i as u64);
        let (i, j) = (index(from)?, index(to)?);
        let n = self.reflectors.len() as u64;
        let pair_index = i.min(j) * n + i.max(j);
        let direction = u64::from(i > j);
        let mut rng = stream(self.seed, KIND_LINK | (pair_index << 1) | direction, k + 1);
        link.sample(&mut rng)
    }

    /// Applies a fault; `false` (and nothing changes) for unknown targets.
    pub fn apply(&self, action: &FaultAction) -> bool {
        match action {
            FaultAction::KillNode { farm, node } | FaultAction::RestoreNode { farm, node } => {
                if !self.has_node(farm, node) {
                    return false;
                }
                let key = (farm.clone(), node.clone());
                let mut dead = self.dead_nodes.write();
                if matches!(action, FaultAction::KillNode { .. }) {
                    dead.insert(key);
                } else {
                    dead.remove(&key);
                }
                true
            }
            FaultAction::KillReflector { id } => {
                self.reflectors.contains(id) && {
                    self.dead_reflectors.write().insert(id.clone());
                    true
                }
            }
            FaultAction::RestoreReflector { id } => {
                self.reflectors.contains(id) && {
                    self.restore_reflector(id);
                    true
                }
            }
            FaultAction::SetLink { a, b, rtt_ms, jitter_ms, loss } => {
                if a == b || !self.reflectors.contains(a) || !self.reflectors.contains(b) {
                    return false;
                }
                let mut links = self.links.write();
                let link = match (links.get(&pair(a, b)).copied(), rtt_ms) {
                    (Some(l), _) => l,
                    (None, Some(rtt)) => SimLink { rtt_ms: *rtt, jitter_ms: 0.0, loss: 0.0 },
                    // a new link needs a base RTT
                    (None, None) => return false,
                };
                links.insert(
                    pair(a, b),
                    SimLink {
                        rtt_ms: rtt_ms.unwrap_or(link.rtt_ms),
                        jitter_ms: jitter_ms.unwrap_or(link.jitter_ms),
                        loss: loss.unwrap_or(link.loss),
                    },
                );
                true
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LinkSpec;
    use proptest::prelude::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            farms: vec![FarmSpec {
                nodes: 12,
                params: 15,
                ..FarmSpec::default()
            }],
            reflectors: vec!["r1".into(), "r2".into(), "r3".into()],
            links: vec![LinkSpec {
                a: "r1".into(),
                b: "r2".into(),
                rtt_ms: 40.0,
                jitter_ms: 10.0,
                loss: 0.2,
            }],
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn values_depend_on_address_not_history() {
        let a = SimWorld::new(&small(), 0);
        let b = SimWorld::new(&small(), 0);
        // a walks every round, b jumps straight to round 7
        for k in 0..7 {
            a.load_values("farm-a", "n003", k).unwrap();
        }
        assert_eq!(a.load_values("farm-a", "n003", 7), b.load_values("farm-a", "n003", 7));
        // going back recomputes from the start
        assert_eq!(a.load_values("farm-a", "n003", 2), SimWorld::new(&small(), 0).load_values("farm-a", "n003", 2));
        assert_ne!(a.load_values("farm-a", "n003", 7), a.load_values("farm-a", "n004", 7));
        let other_seed = SimWorld::new(&ScenarioConfig { seed: 2, ..small() }, 0);
        assert_ne!(other_seed.load_values("farm-a", "n003", 7), b.load_values("farm-a", "n003", 7));
    }

    #[test]
    fn names_and_faults() {
        let w = SimWorld::new(&small(), 0);
        assert_eq!(w.nodes("farm-a")[11], "n011");
        assert_eq!(node_name(7, 1_500), "n0007");
        assert_eq!(param_name(1), "Load5");
        assert_eq!(param_name(42), "p042");
        assert!(w.apply(&FaultAction::KillNode { farm: "farm-a".into(), node: "n002".into() }));
        assert!(!w.node_alive("farm-a", "n002"));
        assert!(!w.apply(&FaultAction::KillNode { farm: "farm-a".into(), node: "n999".into() }));
        assert!(!w.apply(&FaultAction::KillReflector { id: "zz".into() }));
        assert!(w.apply(&FaultAction::KillReflector { id: "r1".into() }));
        assert_eq!(w.probe("r1", "r2", 0), None);
        assert!(w.restore_reflector("r1"));
        // no link between r2 and r3 until one is created with a base RTT
        assert!(!w.apply(&FaultAction::SetLink { a: "r2".into(), b: "r3".into(), rtt_ms: None, jitter_ms: None, loss: Some(0.1) }));
        assert!(w.apply(&FaultAction::SetLink { a: "r3".into(), b: "r2".into(), rtt_ms: Some(5.0), jitter_ms: None, loss: None }));
        assert_eq!(w.link("r2", "r3").unwrap().rtt_ms, 5.0);
        assert!(w.apply(&FaultAction::SetLink { a: "r2".into(), b: "r1".into(), rtt_ms: None, jitter_ms: None, loss: Some(0.6) }));
        assert_eq!(w.link("r1", "r2").unwrap(), SimLink { rtt_ms: 40.0, jitter_ms: 10.0, loss: 0.6 });
    }

    #[test]
    fn link_samples_follow_loss_and_bounds() {
        let w = SimWorld::new(&small(), 0);
        let samples: Vec<Option<f64>> = (0..4_000).map(|k| w.probe("r1", "r2", k)).collect();
        let lost = samples.iter().filter(|s| s.is_none()).count() as f64 / samples.len() as f64;
        assert!((lost - 0.2).abs() < 0.03, "{lost}");
        assert!(samples.iter().flatten().all(|r| (30.0..=50.0).contains(r)));
        // directions draw independently
        let back: Vec<Option<f64>> = (0..50).map(|k| w.probe("r2", "r1", k)).collect();
        assert_ne!(back, samples[..50].to_vec());
    }

    proptest! {
        #[test]
        fn walks_stay_in_range(seed in any::<u64>(), k in 0u64..300) {
            let cfg = ScenarioConfig { seed, ..small() };
            let w = SimWorld::new(&cfg, 0);
            for (name, v) in w.load_values("farm-a", "n000", k).unwrap() {
                prop_assert!(v >= 0.0 && v <= param_hi(&name), "{name} = {v}");
            }
            let r = w.response_ms("farm-a", "n000", k).unwrap();
            prop_assert!((1_000..=3_000).contains(&r));
        }

        #[test]
        fn rtt_never_below_half_base(base in 0.1f64..500.0, jitter in 0.0f64..1_000.0, k in any::<u32>()) {
            let link = SimLink { rtt_ms: base, jitter_ms: jitter, loss: 0.0 };
            let mut rng = stream(9, KIND_LINK, k as u64);
            let rtt = link.sample(&mut rng).unwrap();
            prop_assert!(rtt >= base / 2.0);
        }
    }
}

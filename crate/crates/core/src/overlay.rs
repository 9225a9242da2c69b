//! Overlay routing optimizer.
//!
//! Directed link costs from both endpoints are folded into one symmetric
//! weight per reflector pair. Edges of the current tree get a momentum
//! discount (`w · mu`) so that small fluctuations do not cause reconnects,
//! and the spanning tree is recomputed with Borůvka's algorithm.
//!
//! Borůvka needs distinct weights to stay cycle-free. Ties are broken by
//! the lexicographic pair id, which makes the edge order total.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricValue, SeriesKey};
use crate::probe::LinkCost;

pub const MST_CLUSTER: &str = "_mst";

/// An unordered reflector pair, stored with `u < v`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EdgeKey {
    pub u: String,
    pub v: String,
}

impl EdgeKey {
    /// `None` for self-loops.
    pub fn new(a: &str, b: &str) -> Option<Self> {
        match a.cmp(b) {
            Ordering::Less => Some(Self { u: a.into(), v: b.into() }),
            Ordering::Greater => Some(Self { u: b.into(), v: a.into() }),
            Ordering::Equal => None,
        }
    }

    pub fn touches(&self, vertex: &str) -> bool {
        self.u == vertex || self.v == vertex
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MstConfig {
    /// Momentum discount on incumbent tree edges, in (0, 1].
    pub momentum: f64,
    pub recompute_period_ms: u64,
    #[serde(default)]
    pub combine: Combine,
}

impl Default for MstConfig {
    fn default() -> Self {
        Self {
            momentum: 0.8,
            recompute_period_ms: 10_000,
            combine: Combine::Mean,
        }
    }
}

impl MstConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::Config("momentum must be in (0, 1]".into()));
        }
        if self.recompute_period_ms == 0 {
            return Err(Error::Config("recompute period must be positive".into()));
        }
        Ok(())
    }
}

/// Combines the two directed costs of a pair; `None` when neither side is
/// usable (the edge is left out of the graph).
pub fn symmetric_cost(cost_uv: Option<f64>, cost_vu: Option<f64>, combine: Combine) -> Option<f64> {
    match (cost_uv, cost_vu) {
        (Some(a), Some(b)) => Some(match combine {
            Combine::Mean => (a + b) / 2.0,
            Combine::Max => a.max(b),
        }),
        (Some(c), None) | (None, Some(c)) => Some(c),
        (None, None) => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeState {
    pub key: EdgeKey,
    pub cost_uv: Option<f64>,
    pub cost_vu: Option<f64>,
    pub w: f64,
    pub in_prev_mst: bool,
}

pub fn effective_weight(edge: &EdgeState, cfg: &MstConfig) -> f64 {
    if edge.in_prev_mst {
        edge.w * cfg.momentum
    } else {
        edge.w
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Graph {
    pub vertices: BTreeSet<String>,
    pub edges: BTreeMap<EdgeKey, EdgeState>,
}

impl Graph {
    /// Adds or replaces an undirected edge with symmetric weight `w`.
    pub fn add_edge(&mut self, a: &str, b: &str, w: f64) -> Result<()> {
        let key = EdgeKey::new(a, b).ok_or_else(|| Error::Config(format!("self-loop on `{a}`")))?;
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::Config(format!("edge weight must be positive, got {w}")));
        }
        self.vertices.insert(a.into());
        self.vertices.insert(b.into());
        self.edges.insert(
            key.clone(),
            EdgeState {
                key,
                cost_uv: Some(w),
                cost_vu: Some(w),
                w,
                in_prev_mst: false,
            },
        );
        Ok(())
    }

    /// Builds the graph from directed costs keyed `(from, to)`. Pairs with
    /// an endpoint outside `vertices` are ignored.
    pub fn from_directed(
        vertices: &BTreeSet<String>,
        directed: &BTreeMap<(String, String), LinkCost>,
        previous: &SpanningTree,
        combine: Combine,
    ) -> Self {
        let mut sides: BTreeMap<EdgeKey, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for ((from, to), cost) in directed {
            if !vertices.contains(from) || !vertices.contains(to) {
                continue;
            }
            let Some(key) = EdgeKey::new(from, to) else { continue };
            let entry = sides.entry(key.clone()).or_default();
            let usable = cost.usable().filter(|c| c.is_finite() && *c >= 0.0);
            if *from == key.u {
                entry.0 = usable;
            } else {
                entry.1 = usable;
            }
        }
        let edges = sides
            .into_iter()
            .filter_map(|(key, (uv, vu))| {
                // zero-cost links still need a positive weight
                let w = symmetric_cost(uv, vu, combine)?.max(f64::MIN_POSITIVE);
                let in_prev_mst = previous.edges.contains_key(&key);
                Some((key.clone(), EdgeState { key, cost_uv: uv, cost_vu: vu, w, in_prev_mst }))
            })
            .collect();
        Self {
            vertices: vertices.clone(),
            edges,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEdge {
    pub u: String,
    pub v: String,
    pub w: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanningTree {
    /// Tree edges with their symmetric (undiscounted) weight.
    pub edges: BTreeMap<EdgeKey, f64>,
    pub total_weight: f64,
    pub epoch: u64,
    /// Connected components spanned; more than one means a forest.
    pub components: usize,
}

impl SpanningTree {
    pub fn is_forest(&self) -> bool {
        self.components > 1
    }

    pub fn tree_edges(&self) -> Vec<TreeEdge> {
        self.edges
            .iter()
            .map(|(k, w)| TreeEdge { u: k.u.clone(), v: k.v.clone(), w: *w })
            .collect()
    }

    pub fn same_edges(&self, other: &SpanningTree) -> bool {
        self.edges.keys().eq(other.edges.keys())
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Total order on `(weight, u, v)` edges.
fn edge_order(a: &(usize, usize, f64), b: &(usize, usize, f64)) -> Ordering {
    a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
}

/// Borůvka's algorithm over vertices `0..n`. Edges are `(u, v, weight)`
/// with `u < v`; ties are broken by `(u, v)`. Returns the indices of the
/// selected edges (a minimum spanning forest) in ascending order.
pub fn boruvka(n: usize, edges: &[(usize, usize, f64)]) -> Vec<usize> {
    let mut sets = DisjointSet::new(n);
    let mut chosen = BTreeSet::new();
    loop {
        // cheapest outgoing edge per component root
        let mut cheapest: Vec<Option<usize>> = vec![None; n];
        for (idx, e) in edges.iter().enumerate() {
            let (ra, rb) = (sets.find(e.0), sets.find(e.1));
            if ra == rb {
                continue;
            }
            for root in [ra, rb] {
                let better = match cheapest[root] {
                    None => true,
                    Some(cur) => edge_order(e, &edges[cur]) == Ordering::Less,
                };
                if better {
                    cheapest[root] = Some(idx);
                }
            }
        }
        let mut merged = false;
        for idx in cheapest.into_iter().flatten() {
            let e = edges[idx];
            if sets.union(e.0, e.1) {
                chosen.insert(idx);
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }
    chosen.into_iter().collect()
}

/// Checks that `edges` form a forest over `0..n`; returns the number of
/// connected components it induces.
pub fn check_forest(n: usize, edges: &[(usize, usize)]) -> Result<usize> {
    let mut sets = DisjointSet::new(n);
    for &(a, b) in edges {
        if a >= n || b >= n || !sets.union(a, b) {
            return Err(Error::Config(format!("edge ({a}, {b}) closes a cycle or is out of range")));
        }
    }
    Ok(n - edges.len())
}

/// Minimum spanning forest of `graph` under momentum-adjusted weights.
pub fn boruvka_mst(graph: &Graph, cfg: &MstConfig) -> SpanningTree {
    let names: Vec<&String> = graph.vertices.iter().collect();
    let index: BTreeMap<&String, usize> = names.iter().enumerate().map(|(i, n)| (*n, i)).collect();
    let states: Vec<&EdgeState> = graph
        .edges
        .values()
        .filter(|e| index.contains_key(&e.key.u) && index.contains_key(&e.key.v))
        .collect();
    let weighted: Vec<(usize, usize, f64)> = states
        .iter()
        .map(|e| (index[&e.key.u], index[&e.key.v], effective_weight(e, cfg)))
        .collect();

    let chosen = boruvka(names.len(), &weighted);
    let pairs: Vec<(usize, usize)> = chosen.iter().map(|&i| (weighted[i].0, weighted[i].1)).collect();
    let components = check_forest(names.len(), &pairs).expect("Borůvka output is always a forest");

    let edges: BTreeMap<EdgeKey, f64> = chosen
        .iter()
        .map(|&i| (states[i].key.clone(), states[i].w))
        .collect();
    SpanningTree {
        total_weight: edges.values().sum(),
        edges,
        epoch: 0,
        components,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeDiff {
    pub added: Vec<EdgeKey>,
    pub removed: Vec<EdgeKey>,
}

impl TreeDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty()
    }
}

pub fn diff_trees(old: &SpanningTree, new: &SpanningTree) -> TreeDiff {
    TreeDiff {
        added: new.edges.keys().filter(|k| !old.edges.contains_key(*k)).cloned().collect(),
        removed: old.edges.keys().filter(|k| !new.edges.contains_key(*k)).cloned().collect(),
    }
}

/// Published whenever the tree's edge set changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeUpdate {
    pub epoch: u64,
    pub edges: Vec<TreeEdge>,
    pub total_weight: f64,
    pub added: Vec<TreeEdge>,
    pub removed: Vec<TreeEdge>,
    pub at: u64,
}

/// Keeps the latest directed link costs and the incumbent tree.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: MstConfig,
    vertices: BTreeSet<String>,
    directed: BTreeMap<(String, String), LinkCost>,
    tree: SpanningTree,
    updates: u64,
    rounds: u64,
}

impl Optimizer {
    pub fn new(cfg: MstConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            vertices: BTreeSet::new(),
            directed: BTreeMap::new(),
            tree: SpanningTree::default(),
            updates: 0,
            rounds: 0,
        })
    }

    pub fn config(&self) -> &MstConfig {
        &self.cfg
    }

    pub fn add_vertex(&mut self, id: impl Into<String>) {
        self.vertices.insert(id.into());
    }

    /// Drops a reflector and every link touching it.
    pub fn remove_vertex(&mut self, id: &str) {
        self.vertices.remove(id);
        self.directed.retain(|(a, b), _| a != id && b != id);
    }

    pub fn vertices(&self) -> &BTreeSet<String> {
        &self.vertices
    }

    /// Latest cost measured by `from` towards `to`.
    pub fn update_link(&mut self, from: &str, to: &str, cost: LinkCost) {
        if from == to {
            return;
        }
        self.directed.insert((from.to_string(), to.to_string()), cost);
    }

    pub fn tree(&self) -> &SpanningTree {
        &self.tree
    }

    /// Number of `TreeUpdate`s produced so far (tree churn).
    pub fn churn(&self) -> u64 {
        self.updates
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn graph(&self) -> Graph {
        Graph::from_directed(&self.vertices, &self.directed, &self.tree, self.cfg.combine)
    }

    /// Rebuilds the graph, applies momentum against the incumbent tree and
    /// reruns Borůvka. Returns an update only when the edge set changed.
    pub fn recompute(&mut self, now: u64) -> Option<TreeUpdate> {
        self.rounds += 1;
        let graph = self.graph();
        let mut next = boruvka_mst(&graph, &self.cfg);
        let diff = diff_trees(&self.tree, &next);
        if diff.is_empty() {
            // keep weights fresh without bumping the epoch
            next.epoch = self.tree.epoch;
            self.tree = next;
            return None;
        }
        next.epoch = self.tree.epoch + 1;
        let removed = diff
            .removed
            .iter()
            .map(|k| TreeEdge { u: k.u.clone(), v: k.v.clone(), w: self.tree.edges[k] })
            .collect();
        let added = diff
            .added
            .iter()
            .map(|k| TreeEdge { u: k.u.clone(), v: k.v.clone(), w: next.edges[k] })
            .collect();
        self.tree = next;
        self.updates += 1;
        Some(TreeUpdate {
            epoch: self.tree.epoch,
            edges: self.tree.tree_edges(),
            total_weight: self.tree.total_weight,
            added,
            removed,
            at: now,
        })
    }

    /// Tree state as metrics on cluster `_mst`: one `weight` value per
    /// tree edge (node `u~v`) plus totals on node `tree`.
    pub fn tree_metrics(&self, farm: &str, now: u64) -> Vec<MetricValue> {
        let mut out: Vec<MetricValue> = self
            .tree
            .edges
            .iter()
            .map(|(k, w)| MetricValue::new(&SeriesKey::new(farm, MST_CLUSTER, format!("{}~{}", k.u, k.v), "weight"), now, *w))
            .collect();
        let tree = |param: &str, v: f64| MetricValue::new(&SeriesKey::new(farm, MST_CLUSTER, "tree", param), now, v);
        out.push(tree("total_weight", self.tree.total_weight));
        out.push(tree("epoch", self.tree.epoch as f64));
        out.push(tree("components", self.tree.components as f64));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph(edges: &[(&str, &str, f64)]) -> Graph {
        let mut g = Graph::default();
        for (a, b, w) in edges {
            g.add_edge(a, b, *w).unwrap();
        }
        g
    }

    fn keys(t: &SpanningTree) -> Vec<String> {
        t.edges.keys().map(|k| format!("{}{}", k.u, k.v)).collect()
    }

    fn opt_with(edges: &[(&str, &str, f64)]) -> Optimizer {
        let mut o = Optimizer::new(MstConfig::default()).unwrap();
        set_links(&mut o, edges);
        o
    }

    fn set_links(o: &mut Optimizer, edges: &[(&str, &str, f64)]) {
        for (a, b, w) in edges {
            o.add_vertex(*a);
            o.add_vertex(*b);
            o.update_link(a, b, LinkCost::Usable(*w));
            o.update_link(b, a, LinkCost::Usable(*w));
        }
    }

    #[test]
    fn symmetric_cost_rules() {
        assert_eq!(symmetric_cost(Some(40.0), Some(60.0), Combine::Mean), Some(50.0));
        assert_eq!(symmetric_cost(Some(40.0), Some(60.0), Combine::Max), Some(60.0));
        assert_eq!(symmetric_cost(Some(40.0), None, Combine::Mean), Some(40.0));
        assert_eq!(symmetric_cost(None, None, Combine::Mean), None);
    }

    #[test]
    fn unusable_both_ways_drops_the_edge() {
        let mut o = Optimizer::new(MstConfig::default()).unwrap();
        for v in ["A", "B", "C"] {
            o.add_vertex(v);
        }
        o.update_link("A", "B", LinkCost::Unusable);
        o.update_link("B", "A", LinkCost::Unusable);
        o.update_link("A", "C", LinkCost::Usable(40.0));
        o.update_link("C", "A", LinkCost::Unusable);
        let g = o.graph();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[&EdgeKey::new("A", "C").unwrap()].w, 40.0);
    }

    #[test]
    fn momentum_formula() {
        let cfg = MstConfig::default();
        let mut e = EdgeState {
            key: EdgeKey::new("A", "B").unwrap(),
            cost_uv: Some(2.0),
            cost_vu: Some(2.0),
            w: 2.0,
            in_prev_mst: true,
        };
        assert_eq!(effective_weight(&e, &cfg), 1.6);
        let off = MstConfig { momentum: 1.0, ..cfg.clone() };
        assert_eq!(effective_weight(&e, &off), 2.0);
        e.in_prev_mst = false;
        assert_eq!(effective_weight(&e, &cfg), 2.0);
        assert!(MstConfig { momentum: 1.2, ..cfg.clone() }.validate().is_err());
        assert!(MstConfig { momentum: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn triangle() {
        let t = boruvka_mst(&graph(&[("A", "B", 1.0), ("B", "C", 2.0), ("A", "C", 3.0)]), &MstConfig::default());
        assert_eq!(keys(&t), vec!["AB", "BC"]);
        // brute force over the three spanning trees: 1+2, 1+3, 2+3
        let oracle = [1.0 + 2.0, 1.0 + 3.0, 2.0 + 3.0].into_iter().fold(f64::INFINITY, f64::min);
        assert_eq!(t.total_weight, oracle);
        assert_eq!(t.components, 1);
    }

    #[test]
    fn degenerate_graphs() {
        let mut g = Graph::default();
        let t = boruvka_mst(&g, &MstConfig::default());
        assert!(t.edges.is_empty());
        assert_eq!(t.components, 0);
        g.vertices.insert("A".into());
        let t = boruvka_mst(&g, &MstConfig::default());
        assert!(t.edges.is_empty());
        assert_eq!(t.components, 1);
        assert!(g.add_edge("A", "A", 1.0).is_err());
        assert!(g.add_edge("A", "B", 0.0).is_err());
    }

    #[test]
    fn ties_break_lexicographically() {
        let g = graph(&[("A", "B", 1.0), ("A", "C", 1.0), ("B", "C", 1.0)]);
        let t = boruvka_mst(&g, &MstConfig::default());
        assert_eq!(keys(&t), vec!["AB", "AC"]);
        for _ in 0..10 {
            assert_eq!(boruvka_mst(&g, &MstConfig::default()), t);
        }
    }

    #[test]
    fn disconnected_graph_yields_flagged_forest() {
        let t = boruvka_mst(&graph(&[("A", "B", 1.0), ("C", "D", 1.0)]), &MstConfig::default());
        assert_eq!(t.edges.len(), 2);
        assert_eq!(t.components, 2);
        assert!(t.is_forest());
    }

    #[test]
    fn momentum_keeps_then_adopts() {
        let mut o = opt_with(&[("A", "B", 1.0), ("B", "C", 2.0), ("A", "C", 3.0)]);
        let first = o.recompute(0).unwrap();
        assert_eq!(first.epoch, 1);
        assert_eq!(keys(o.tree()), vec!["AB", "BC"]);

        // BC effective 2·0.8 = 1.6 < 1.9
        set_links(&mut o, &[("A", "C", 1.9)]);
        assert!(o.recompute(1).is_none());
        assert_eq!(keys(o.tree()), vec!["AB", "BC"]);

        // 1.5 < 1.6
        set_links(&mut o, &[("A", "C", 1.5)]);
        let up = o.recompute(2).unwrap();
        assert_eq!(keys(o.tree()), vec!["AB", "AC"]);
        assert_eq!(up.epoch, 2);
        assert_eq!(up.added, vec![TreeEdge { u: "A".into(), v: "C".into(), w: 1.5 }]);
        assert_eq!(up.removed, vec![TreeEdge { u: "B".into(), v: "C".into(), w: 2.0 }]);
        assert_eq!(o.churn(), 2);
    }

    #[test]
    fn vanished_reflector_is_dropped() {
        let mut o = opt_with(&[("A", "B", 1.0), ("B", "C", 2.0), ("A", "C", 3.0)]);
        o.recompute(0);
        o.remove_vertex("B");
        let up = o.recompute(1).unwrap();
        assert_eq!(keys(o.tree()), vec!["AC"]);
        assert_eq!(up.removed.len(), 2);
    }

    #[test]
    fn diff_cases() {
        let a = boruvka_mst(&graph(&[("A", "B", 1.0), ("B", "C", 2.0)]), &MstConfig::default());
        let b = boruvka_mst(&graph(&[("A", "B", 1.0), ("A", "C", 2.0)]), &MstConfig::default());
        assert!(diff_trees(&a, &a).is_empty());
        let d = diff_trees(&a, &b);
        assert_eq!(d.added, vec![EdgeKey::new("A", "C").unwrap()]);
        assert_eq!(d.removed, vec![EdgeKey::new("B", "C").unwrap()]);
        let d = diff_trees(&SpanningTree::default(), &a);
        assert_eq!(d.added.len(), 2);
        assert!(d.removed.is_empty());
    }

    #[test]
    fn tree_update_wire_shape() {
        let mut o = opt_with(&[("A", "B", 1.0)]);
        let up = o.recompute(5).unwrap();
        let v = serde_json::to_value(&up).unwrap();
        assert_eq!(v["epoch"], 1);
        assert_eq!(v["edges"][0]["u"], "A");
        assert_eq!(v["edges"][0]["w"], 1.0);
        assert_eq!(v["total_weight"], 1.0);
        assert_eq!(v["added"].as_array().unwrap().len(), 1);
        let metrics = o.tree_metrics("local", 5);
        assert!(metrics.iter().all(|m| m.cluster == MST_CLUSTER));
        assert!(metrics.iter().any(|m| m.node == "A~B" && m.value == 1.0));
    }

    /// Exhaustive minimum over all spanning trees (n ≤ 8).
    fn brute_force(n: usize, edges: &[(usize, usize, f64)]) -> f64 {
        fn rec(n: usize, edges: &[(usize, usize, f64)], i: usize, parent: &mut Vec<usize>, taken: usize, sum: f64, best: &mut f64) {
            if taken == n - 1 {
                *best = best.min(sum);
                return;
            }
            if i == edges.len() || edges.len() - i < n - 1 - taken {
                return;
            }
            fn root(p: &[usize], mut x: usize) -> usize {
                while p[x] != x {
                    x = p[x];
                }
                x
            }
            let (a, b, w) = edges[i];
            let (ra, rb) = (root(parent, a), root(parent, b));
            if ra != rb {
                parent[ra] = rb;
                rec(n, edges, i + 1, parent, taken + 1, sum + w, best);
                parent[ra] = ra;
            }
            rec(n, edges, i + 1, parent, taken, sum, best);
        }
        let mut best = f64::INFINITY;
        rec(n, edges, 0, &mut (0..n).collect(), 0, 0.0, &mut best);
        best
    }

    /// Kruskal under the same (w, u, v) order.
    fn kruskal(n: usize, edges: &[(usize, usize, f64)]) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..edges.len()).collect();
        idx.sort_by(|&a, &b| edge_order(&edges[a], &edges[b]));
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                x = p[x];
            }
            x
        }
        let mut out: Vec<usize> = idx
            .into_iter()
            .filter(|&i| {
                let (ra, rb) = (root(&mut parent, edges[i].0), root(&mut parent, edges[i].1));
                if ra == rb {
                    return false;
                }
                parent[ra] = rb;
                true
            })
            .collect();
        out.sort();
        out
    }

    fn connected_graph(distinct: bool) -> impl Strategy<Value = (usize, Vec<(usize, usize, f64)>)> {
        (2usize..=8)
            .prop_flat_map(move |n| {
                let tree = prop::collection::vec(any::<prop::sample::Index>(), n - 1);
                let extra = prop::collection::vec((0..n, 0..n), 0..=n);
                let weights = prop::collection::vec(1u32..if distinct { 1_000_000 } else { 4 }, 2 * n);
                (Just(n), tree, extra, weights)
            })
            .prop_map(move |(n, tree, extra, weights)| {
                let mut pairs = BTreeSet::new();
                for (v, parent) in tree.iter().enumerate() {
                    let child = v + 1;
                    let p = parent.index(child);
                    pairs.insert((p.min(child), p.max(child)));
                }
                for (a, b) in extra {
                    if a != b {
                        pairs.insert((a.min(b), a.max(b)));
                    }
                }
                let mut used = BTreeSet::new();
                let edges = pairs
                    .into_iter()
                    .enumerate()
                    .map(|(i, (a, b))| {
                        let mut w = weights[i % weights.len()] as f64;
                        if distinct {
                            while !used.insert(w as u64) {
                                w += 1.0;
                            }
                        }
                        (a, b, w)
                    })
                    .collect();
                (n, edges)
            })
    }

    fn total(edges: &[(usize, usize, f64)], chosen: &[usize]) -> f64 {
        chosen.iter().map(|&i| edges[i].2).sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn boruvka_matches_brute_force((n, edges) in connected_graph(true)) {
            let chosen = boruvka(n, &edges);
            prop_assert_eq!(chosen.len(), n - 1);
            prop_assert_eq!(total(&edges, &chosen), brute_force(n, &edges));
            let pairs: Vec<_> = chosen.iter().map(|&i| (edges[i].0, edges[i].1)).collect();
            prop_assert_eq!(check_forest(n, &pairs).unwrap(), 1);
        }

        #[test]
        fn ties_match_kruskal((n, edges) in connected_graph(false)) {
            let chosen = boruvka(n, &edges);
            let k = kruskal(n, &edges);
            prop_assert_eq!(total(&edges, &chosen), total(&edges, &k));
            prop_assert_eq!(chosen, k);
        }

        #[test]
        fn scaling_keeps_edge_set((n, edges) in connected_graph(false), c in 0.001f64..1000.0) {
            let scaled: Vec<_> = edges.iter().map(|&(a, b, w)| (a, b, w * c)).collect();
            prop_assert_eq!(boruvka(n, &edges), boruvka(n, &scaled));
        }

        #[test]
        fn small_fluctuations_never_reconnect(
            (n, edges) in connected_graph(true),
            noise in prop::collection::vec(prop::collection::vec(-0.08f64..0.08, 16), 20),
        ) {
            let names: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
            let mut o = Optimizer::new(MstConfig::default()).unwrap();
            for name in &names {
                o.add_vertex(name.clone());
            }
            let apply = |o: &mut Optimizer, f: &[f64]| {
                for (i, &(a, b, w)) in edges.iter().enumerate() {
                    let c = LinkCost::Usable(w * (1.0 + f[i % f.len()]));
                    o.update_link(&names[a], &names[b], c);
                    o.update_link(&names[b], &names[a], c);
                }
            };
            apply(&mut o, &[0.0]);
            o.recompute(0).unwrap();
            for (round, f) in noise.iter().enumerate() {
                apply(&mut o, f);
                prop_assert!(o.recompute(round as u64 + 1).is_none());
                prop_assert_eq!(o.tree().components, 1);
            }
        }
    }
}

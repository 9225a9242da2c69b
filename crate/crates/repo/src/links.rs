//! Turns the link metrics reflectors publish into optimizer input.
//!
//! A reflector station exports `(farm, _links, peer, rtt_ms | jitter_ms |
//! loss)`. The repository knows which service sent each value, so the
//! directed link is `source -> peer` whatever the farm name is.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vigil_core::metric::MetricValue;
use vigil_core::overlay::{MstConfig, Optimizer, TreeEdge, TreeUpdate};
use vigil_core::probe::{cost_from, CostParams, LinkCost, LINKS_CLUSTER};

use crate::error::Result;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Reading {
    rtt_ms: Option<f64>,
    jitter_ms: Option<f64>,
    loss: Option<f64>,
    at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkView {
    pub from: String,
    pub to: String,
    pub rtt_ms: Option<f64>,
    pub jitter_ms: Option<f64>,
    pub loss: Option<f64>,
    /// `None` while incomplete or when the link is unusable.
    pub cost: Option<f64>,
    pub usable: bool,
    pub at: u64,
}

/// The MST state served to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstView {
    pub vertices: Vec<String>,
    pub edges: Vec<TreeEdge>,
    pub total_weight: f64,
    pub epoch: u64,
    pub components: usize,
    pub churn: u64,
    pub rounds: u64,
    pub links: Vec<LinkView>,
}

pub struct Overlay {
    optimizer: Optimizer,
    cost: CostParams,
    readings: BTreeMap<(String, String), Reading>,
}

impl Overlay {
    pub fn new(mst: MstConfig, cost: CostParams) -> Result<Self> {
        Ok(Self {
            optimizer: Optimizer::new(mst)?,
            cost,
            readings: BTreeMap::new(),
        })
    }

    pub fn optimizer(&self) -> &Optimizer {
        &self.optimizer
    }

    pub fn add_reflector(&mut self, id: &str) {
        self.optimizer.add_vertex(id);
    }

    /// Drops the vertex and every reading to or from it.
    pub fn remove_reflector(&mut self, id: &str) {
        self.optimizer.remove_vertex(id);
        self.readings.retain(|(a, b), _| a != id && b != id);
    }

    /// Applies the link values in `values`; returns how many directed
    /// links got a new cost.
    pub fn ingest(&mut self, source: &str, values: &[MetricValue]) -> usize {
        let mut touched = Vec::new();
        for v in values.iter().filter(|v| v.cluster == LINKS_CLUSTER && v.node != source) {
            let key = (source.to_string(), v.node.clone());
            let r = self.readings.entry(key.clone()).or_default();
            match v.param.as_str() {
                "rtt_ms" => r.rtt_ms = Some(v.value),
                "jitter_ms" => r.jitter_ms = Some(v.value),
                "loss" => r.loss = Some(v.value),
                _ => continue,
            }
            r.at = r.at.max(v.time);
            if !touched.contains(&key) {
                touched.push(key);
            }
        }
        let mut updated = 0;
        for key in touched {
            if let Some(cost) = self.cost_of(&self.readings[&key]) {
                self.optimizer.update_link(&key.0, &key.1, cost);
                updated += 1;
            }
        }
        updated
    }

    fn cost_of(&self, r: &Reading) -> Option<LinkCost> {
        Some(cost_from(r.rtt_ms?, r.jitter_ms?, r.loss?, &self.cost))
    }

    pub fn recompute(&mut self, now: u64) -> Option<TreeUpdate> {
        self.optimizer.recompute(now)
    }

    pub fn view(&self) -> MstView {
        let tree = self.optimizer.tree();
        let links = self
            .readings
            .iter()
            .map(|((from, to), r)| {
                let cost = self.cost_of(r);
                LinkView {
                    from: from.clone(),
                    to: to.clone(),
                    rtt_ms: r.rtt_ms,
                    jitter_ms: r.jitter_ms,
                    loss: r.loss,
                    cost: cost.and_then(LinkCost::usable),
                    usable: matches!(cost, Some(LinkCost::Usable(_))),
                    at: r.at,
                }
            })
            .collect();
        MstView {
            vertices: self.optimizer.vertices().iter().cloned().collect(),
            edges: tree.tree_edges(),
            total_weight: tree.total_weight,
            epoch: tree.epoch,
            components: tree.components,
            churn: self.optimizer.churn(),
            rounds: self.optimizer.rounds(),
            links,
        }
    }
}

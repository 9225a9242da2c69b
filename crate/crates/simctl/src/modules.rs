//! Collector modules, health check and actuator backed by [`SimWorld`].

use std::sync::Arc;

use vigil_core::collector::{CollectorModule, RunContext};
use vigil_core::metric::MetricValue;
use vigil_core::supervisor::{Actuator, CheckOutcome, HealthCheck};

use crate::world::SimWorld;

/// Cluster name of every simulated node.
pub const CLUSTER: &str = "nodes";

#[derive(Clone, Copy)]
enum Kind {
    Load,
    Net,
}

/// A simulated node query. The target is `<farm>/<node>`. A live node
/// answers after its response time with values stamped at the due time; a
/// dead node hangs until cancelled.
pub struct SimModule {
    world: Arc<SimWorld>,
    kind: Kind,
}

impl SimModule {
    pub const LOAD: &'static str = "sim_load";
    pub const NET: &'static str = "sim_net";

    pub fn load(world: Arc<SimWorld>) -> Self {
        Self { world, kind: Kind::Load }
    }

    pub fn net(world: Arc<SimWorld>) -> Self {
        Self { world, kind: Kind::Net }
    }

    pub fn target(farm: &str, node: &str) -> String {
        format!("{farm}/{node}")
    }
}

impl CollectorModule for SimModule {
    fn name(&self) -> &str {
        match self.kind {
            Kind::Load => Self::LOAD,
            Kind::Net => Self::NET,
        }
    }

    fn collect(&self, target: &str, ctx: &RunContext) -> Result<Vec<MetricValue>, String> {
        let (farm, node) = target.split_once('/').ok_or_else(|| format!("bad target `{target}`"))?;
        if !self.world.has_node(farm, node) {
            return Err(format!("unknown node `{target}`"));
        }
        if !self.world.node_alive(farm, node) {
            let wait = ctx.deadline_at.saturating_sub(ctx.clock.now_ms());
            ctx.cancel.sleep(ctx.clock.as_ref(), wait);
            return Err(format!("`{target}` did not answer"));
        }
        let k = self.world.round_of(farm, ctx.due);
        let response = self.world.response_ms(farm, node, k).unwrap_or(0);
        if !ctx.cancel.sleep(ctx.clock.as_ref(), response) {
            return Err("cancelled".into());
        }
        let values = match self.kind {
            Kind::Load => self.world.load_values(farm, node, k),
            Kind::Net => self.world.net_values(farm, node, k),
        }
        .unwrap_or_default();
        Ok(values
            .into_iter()
            .map(|(param, value)| MetricValue {
                farm: farm.to_string(),
                cluster: CLUSTER.to_string(),
                node: node.to_string(),
                param,
                time: ctx.due,
                value,
            })
            .collect())
    }
}

/// Reports a reflector healthy while it is alive in the world.
pub struct SimHealthCheck(pub Arc<SimWorld>);

impl HealthCheck for SimHealthCheck {
    fn check(&self, target: &str, _deadline_ms: u64) -> CheckOutcome {
        if self.0.reflector_alive(target) {
            CheckOutcome::Ok
        } else {
            CheckOutcome::Failed(format!("`{target}` is down"))
        }
    }
}

/// Restarts a reflector. With `works` false every attempt fails.
pub struct SimActuator {
    pub world: Arc<SimWorld>,
    pub works: bool,
}

impl SimActuator {
    pub const NAME: &'static str = "sim-restart";
}

impl Actuator for SimActuator {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn restart(&self, target: &str) -> Result<(), String> {
        if !self.works {
            return Err(format!("restart of `{target}` failed"));
        }
        self.world.restore_reflector(target);
        Ok(())
    }
}

//! Admin commands relayed to stations over the control protocol.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vigil_core::subscription::FilterSpec;
use vigil_net::{NetError, StationClient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdminKind {
    DeployFilter,
    ModuleToggle,
    RestartTarget,
}

impl AdminKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdminKind::DeployFilter => "DEPLOY_FILTER",
            AdminKind::ModuleToggle => "MODULE_TOGGLE",
            AdminKind::RestartTarget => "RESTART_TARGET",
        }
    }
}

/// Body of `POST /api/admin`. The token travels in the Authorization
/// header and is checked before the body is looked at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdminCommand {
    pub kind: AdminKind,
    /// Service id of the station to act on.
    pub target: String,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployFilterPayload {
    pub spec: FilterSpec,
    pub signature: String,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleTogglePayload {
    pub module: String,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RestartTargetPayload {
    pub target: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdminFailure {
    /// The payload does not fit the command kind.
    BadPayload(String),
    /// The station answered with an ERROR frame.
    Remote { code: String, msg: String },
    /// The station could not be reached or broke the protocol.
    Unreachable(String),
}

fn payload<T: for<'de> Deserialize<'de>>(cmd: &AdminCommand) -> Result<T, AdminFailure> {
    serde_json::from_value(cmd.payload.clone())
        .map_err(|e| AdminFailure::BadPayload(format!("{} payload: {e}", cmd.kind.as_str())))
}

/// Checks the payload without contacting anyone.
pub fn validate(cmd: &AdminCommand) -> Result<(), AdminFailure> {
    match cmd.kind {
        AdminKind::DeployFilter => payload::<DeployFilterPayload>(cmd).map(drop),
        AdminKind::ModuleToggle => payload::<ModuleTogglePayload>(cmd).map(drop),
        AdminKind::RestartTarget => payload::<RestartTargetPayload>(cmd).map(drop),
    }
}

/// Sends the command to the station at `endpoint` and returns its answer.
pub fn forward(endpoint: &str, cmd: &AdminCommand) -> Result<Value, AdminFailure> {
    let client = StationClient::new(endpoint);
    let relayed = match cmd.kind {
        AdminKind::DeployFilter => {
            let p: DeployFilterPayload = payload(cmd)?;
            client.deploy_filter(p.spec, p.signature).map(|id| json!({ "filter_id": id }))
        }
        AdminKind::ModuleToggle => {
            let p: ModuleTogglePayload = payload(cmd)?;
            client.module_toggle(&p.module, p.enabled).map(|msg| json!({ "msg": msg }))
        }
        AdminKind::RestartTarget => {
            let p: RestartTargetPayload = payload(cmd)?;
            client.restart_target(&p.target).map(|msg| json!({ "msg": msg }))
        }
    };
    relayed.map_err(|e| match e {
        NetError::Remote { code, msg } => AdminFailure::Remote { code, msg },
        other => AdminFailure::Unreachable(other.to_string()),
    })
}

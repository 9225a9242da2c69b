//! HTTP client for the repository's admin endpoints.

use serde_json::{json, Value};
use vigil_core::subscription::FilterSpec;

use crate::error::{Result, SimError};

/// One admin call: the status code and the JSON body, for errors too.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub status: u16,
    pub body: Value,
}

impl Reply {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

pub struct AdminClient {
    base: String,
    token: String,
}

impl AdminClient {
    /// `base` is the repository URL, e.g. `http://127.0.0.1:8080`.
    pub fn new(base: impl Into<String>, token: impl Into<String>) -> Self {
        Self {
            base: base.into().trim_end_matches('/').to_string(),
            token: token.into(),
        }
    }

    fn post(&self, path: &str, body: &Value) -> Result<Reply> {
        let req = ureq::post(&format!("{}{path}", self.base)).set("Authorization", &format!("Bearer {}", self.token));
        let resp = match req.send_json(body.clone()) {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(SimError::Config(format!("{}: {e}", self.base))),
        };
        let status = resp.status();
        let body = resp.into_json().unwrap_or(Value::Null);
        Ok(Reply { status, body })
    }

    pub fn module_toggle(&self, service: &str, module: &str, enabled: bool) -> Result<Reply> {
        self.post(
            "/api/admin",
            &json!({ "kind": "MODULE_TOGGLE", "target": service, "payload": { "module": module, "enabled": enabled } }),
        )
    }

    pub fn restart_target(&self, service: &str, target: &str) -> Result<Reply> {
        self.post(
            "/api/admin",
            &json!({ "kind": "RESTART_TARGET", "target": service, "payload": { "target": target } }),
        )
    }

    /// Deploys a filter already signed, e.g. by [`AdminClient::sign_filter`].
    pub fn deploy_filter(&self, service: &str, signed: &Value) -> Result<Reply> {
        self.post("/api/admin", &json!({ "kind": "DEPLOY_FILTER", "target": service, "payload": signed }))
    }

    /// Returns `{spec, signature}` on success.
    pub fn sign_filter(&self, spec: &FilterSpec) -> Result<Reply> {
        self.post("/api/admin/sign-filter", &serde_json::to_value(spec).map_err(|e| SimError::Config(e.to_string()))?)
    }
}

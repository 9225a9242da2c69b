//! Control-protocol frames.
//!
//! Every frame is one JSON object on one line with a mandatory `"type"`
//! field. Registry, subscription, station and repository traffic all share
//! this enum so a single codec can serve every endpoint.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::metric::MetricValue;
use crate::overlay::TreeUpdate;
use crate::predicate::PredicateSpec;
use crate::registry::{Lease, PeerEntry, RegistryEvent, ServiceDescriptor};
use crate::subscription::{FilterSpec, History};

/// Bumped on any incompatible frame change; peers refuse other versions.
pub const PROTO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Frame {
    Register {
        descriptor: ServiceDescriptor,
        duration_ms: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<String>,
    },
    RegisterAck {
        lease: Lease,
    },
    Renew {
        service_id: String,
        duration_ms: u64,
    },
    RenewAck {
        lease: Lease,
    },
    Deregister {
        service_id: String,
    },
    Lookup {
        #[serde(default)]
        groups: Vec<String>,
        #[serde(default)]
        attributes: BTreeMap<String, String>,
    },
    LookupResult {
        services: Vec<ServiceDescriptor>,
    },
    SubscribeEvents {
        #[serde(default)]
        groups: Vec<String>,
    },
    Event {
        event: RegistryEvent,
    },
    /// Full local state for the groups of `peer_id`. The receiver merges
    /// it and answers with its own `PEER_SYNC`, so one exchange is one
    /// sync round for both sides.
    PeerSync {
        peer_id: String,
        groups: Vec<String>,
        entries: Vec<PeerEntry>,
    },

    Subscribe {
        predicate: PredicateSpec,
        /// Stable client name; overflow notices are replayed to it on
        /// reconnect.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client: Option<String>,
    },
    SubscribeAck {
        sub_id: u64,
    },
    Data {
        values: Vec<MetricValue>,
    },
    History {
        predicate: PredicateSpec,
    },
    HistoryResult {
        history: History,
    },
    FilterDeploy {
        spec: FilterSpec,
        signature: String,
    },
    FilterAck {
        filter_id: String,
    },
    Unsubscribe,
    Overflow {
        dropped: u64,
    },
    TreeUpdate {
        update: TreeUpdate,
    },

    ModuleToggle {
        module_name: String,
        enabled: bool,
    },
    RestartTarget {
        target: String,
    },
    Ok {
        #[serde(default, skip_serializing_if = "String::is_empty")]
        msg: String,
    },
    Error {
        code: String,
        msg: String,
    },
}

impl Frame {
    pub fn error(code: &str, msg: impl Into<String>) -> Self {
        Frame::Error {
            code: code.to_string(),
            msg: msg.into(),
        }
    }

    pub fn ok(msg: impl Into<String>) -> Self {
        Frame::Ok { msg: msg.into() }
    }

    pub fn encode(&self) -> String {
        let mut line = serde_json::to_string(self).expect("frames serialize infallibly");
        line.push('\n');
        line
    }

    pub fn decode(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line.trim_end())
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Frame::Register { .. } => "REGISTER",
            Frame::RegisterAck { .. } => "REGISTER_ACK",
            Frame::Renew { .. } => "RENEW",
            Frame::RenewAck { .. } => "RENEW_ACK",
            Frame::Deregister { .. } => "DEREGISTER",
            Frame::Lookup { .. } => "LOOKUP",
            Frame::LookupResult { .. } => "LOOKUP_RESULT",
            Frame::SubscribeEvents { .. } => "SUBSCRIBE_EVENTS",
            Frame::Event { .. } => "EVENT",
            Frame::PeerSync { .. } => "PEER_SYNC",
            Frame::Subscribe { .. } => "SUBSCRIBE",
            Frame::SubscribeAck { .. } => "SUBSCRIBE_ACK",
            Frame::Data { .. } => "DATA",
            Frame::History { .. } => "HISTORY",
            Frame::HistoryResult { .. } => "HISTORY_RESULT",
            Frame::FilterDeploy { .. } => "FILTER_DEPLOY",
            Frame::FilterAck { .. } => "FILTER_ACK",
            Frame::Unsubscribe => "UNSUBSCRIBE",
            Frame::Overflow { .. } => "OVERFLOW",
            Frame::TreeUpdate { .. } => "TREE_UPDATE",
            Frame::ModuleToggle { .. } => "MODULE_TOGGLE",
            Frame::RestartTarget { .. } => "RESTART_TARGET",
            Frame::Ok { .. } => "OK",
            Frame::Error { .. } => "ERROR",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_carry_type_tag() {
        let f = Frame::Renew {
            service_id: "st-1".into(),
            duration_ms: 30_000,
        };
        let v: serde_json::Value = serde_json::from_str(&f.encode()).unwrap();
        assert_eq!(v["type"], "RENEW");
        assert_eq!(v["service_id"], "st-1");
        assert_eq!(v["duration_ms"], 30_000);
        assert_eq!(f.kind(), "RENEW");
    }

    #[test]
    fn error_frame_shape() {
        let line = Frame::error("NOT_REGISTERED", "st-9").encode();
        assert!(line.ends_with('\n'));
        assert_eq!(line.trim_end(), r#"{"type":"ERROR","code":"NOT_REGISTERED","msg":"st-9"}"#);
    }

    #[test]
    fn unit_frames_roundtrip() {
        for f in [Frame::Unsubscribe, Frame::ok("")] {
            assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
        }
    }

    #[test]
    fn missing_type_is_rejected() {
        assert!(Frame::decode(r#"{"service_id":"x"}"#).is_err());
        assert!(Frame::decode(r#"{"type":"NOPE"}"#).is_err());
    }

    #[test]
    fn register_roundtrip() {
        let d = ServiceDescriptor::new("st-1", ["farm-a"], "10.0.0.1:7000").with_attr("site", "cern");
        let f = Frame::Register {
            descriptor: d,
            duration_ms: 10_000,
            token: None,
        };
        let back = Frame::decode(&f.encode()).unwrap();
        assert_eq!(back, f);
    }
}

//! Network-facing supervisor plumbing: a TCP liveness check and a webhook
//! notifier.

use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use vigil_core::supervisor::{Alert, CheckOutcome, HealthCheck, Notifier};

/// Healthy when `target` (`host:port`) accepts a TCP connection within
/// the deadline.
#[derive(Debug, Default, Clone, Copy)]
pub struct TcpHealthCheck;

impl HealthCheck for TcpHealthCheck {
    fn check(&self, target: &str, deadline_ms: u64) -> CheckOutcome {
        let addrs = match target.to_socket_addrs() {
            Ok(a) => a.collect::<Vec<_>>(),
            Err(e) => return CheckOutcome::Failed(format!("cannot resolve {target}: {e}")),
        };
        let timeout = Duration::from_millis(deadline_ms.max(1));
        for addr in &addrs {
            if TcpStream::connect_timeout(addr, timeout).is_ok() {
                return CheckOutcome::Ok;
            }
        }
        CheckOutcome::Failed(format!("{target} refused or timed out"))
    }
}

/// POSTs each alert as JSON to a URL.
pub struct WebhookNotifier {
    url: String,
    agent: ureq::Agent,
}

impl WebhookNotifier {
    pub const NAME: &'static str = "webhook";

    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(5)).build(),
        }
    }
}

impl Notifier for WebhookNotifier {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn notify(&self, alert: &Alert) -> Result<(), String> {
        self.agent
            .post(&self.url)
            .send_json(alert)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

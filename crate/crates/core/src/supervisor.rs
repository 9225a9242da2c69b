//! Action agents that watch targets, restart them when they stop answering,
//! and raise one alert when restarting keeps failing.
//!
//! Per target the state machine is:
//!
//! ```text
//! OK --check fails--> FAILED --restart--> RESTARTING --check ok--> OK
//!                                          |  check fails: counter += 1, restart again
//!                                          '- counter reaches the limit --> ESCALATED (one alert)
//! ESCALATED --check ok--> OK (counter reset, episode closed)
//! ```
//!
//! A restart the actuator cannot perform counts as a failed attempt right
//! away. While escalated the target is still checked but never restarted.

use std::collections::{BTreeMap, VecDeque};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::Command;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signing::TrustKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatchSpec {
    pub target: String,
    pub period_ms: u64,
    pub check_deadline_ms: u64,
    pub actuator: String,
    pub notifier: String,
    /// Consecutive failed restarts that trigger escalation.
    #[serde(default = "default_limit")]
    pub restart_limit: u32,
}

fn default_limit() -> u32 {
    2
}

impl WatchSpec {
    pub fn new(target: impl Into<String>, period_ms: u64, check_deadline_ms: u64) -> Self {
        Self {
            target: target.into(),
            period_ms,
            check_deadline_ms,
            actuator: "sim-restart".into(),
            notifier: "log".into(),
            restart_limit: default_limit(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.check_deadline_ms == 0 || self.period_ms <= self.check_deadline_ms {
            return Err(Error::Config(format!(
                "watch `{}`: period must exceed the check deadline",
                self.target
            )));
        }
        if self.restart_limit == 0 {
            return Err(Error::Config("restart_limit must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Status {
    Ok,
    Failed,
    Restarting,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at: u64,
    pub from: Status,
    pub to: Status,
}

/// The alert log line: `{target, reason, attempts, at}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub target: String,
    pub reason: String,
    pub attempts: Vec<u64>,
    pub at: u64,
    #[serde(skip)]
    pub delivered_to: Vec<String>,
}

pub trait HealthCheck: Send + Sync {
    /// Request/response health probe; must give up after `deadline_ms`.
    fn check(&self, target: &str, deadline_ms: u64) -> CheckOutcome;
}

pub trait Actuator: Send + Sync {
    fn name(&self) -> &str;
    fn restart(&self, target: &str) -> std::result::Result<(), String>;
}

pub trait Notifier: Send + Sync {
    fn name(&self) -> &str;
    fn notify(&self, alert: &Alert) -> std::result::Result<(), String>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Restarted { attempt: u32 },
    RestartFailed { attempt: u32, reason: String },
    Escalated(Alert),
    Recovered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthState {
    pub target: String,
    pub status: Status,
    pub consecutive_restart_failures: u32,
    pub history: VecDeque<Transition>,
    pub restart_attempts: Vec<u64>,
    pub total_restarts: u64,
    pub alerts: u64,
    last_error: String,
}

const HISTORY: usize = 64;

#[derive(Debug, Clone)]
struct PendingAlert {
    alert: Alert,
    retry_at: u64,
    backoff_ms: u64,
}

/// One target's supervision state.
#[derive(Debug, Clone)]
pub struct Watch {
    spec: WatchSpec,
    state: HealthState,
    next_check: u64,
    pending: Option<PendingAlert>,
}

impl Watch {
    pub fn new(spec: WatchSpec, now: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            state: HealthState {
                target: spec.target.clone(),
                status: Status::Ok,
                consecutive_restart_failures: 0,
                history: VecDeque::new(),
                restart_attempts: Vec::new(),
                total_restarts: 0,
                alerts: 0,
                last_error: String::new(),
            },
            next_check: now,
            spec,
            pending: None,
        })
    }

    pub fn spec(&self) -> &WatchSpec {
        &self.spec
    }

    pub fn state(&self) -> &HealthState {
        &self.state
    }

    pub fn is_due(&self, now: u64) -> bool {
        now >= self.next_check
    }

    fn set(&mut self, to: Status, now: u64) {
        let from = self.state.status;
        if from == to {
            return;
        }
        self.state.status = to;
        if self.state.history.len() == HISTORY {
            self.state.history.pop_front();
        }
        self.state.history.push_back(Transition { at: now, from, to });
    }

    /// Operator reset: leaves escalation and allows restarts again.
    pub fn reset(&mut self, now: u64) {
        self.state.consecutive_restart_failures = 0;
        self.state.restart_attempts.clear();
        self.set(Status::Ok, now);
        self.next_check = now;
    }

    /// Applies one health-check result.
    pub fn on_check(
        &mut self,
        outcome: CheckOutcome,
        now: u64,
        actuator: Option<&dyn Actuator>,
        notifier: &dyn Notifier,
    ) -> Vec<Action> {
        self.next_check = now + self.spec.period_ms;
        let mut actions = Vec::new();
        self.retry_alert(now, notifier);
        match (self.state.status, outcome) {
            (Status::Ok, CheckOutcome::Ok) => {}
            (Status::Ok, CheckOutcome::Failed(reason)) => {
                self.state.last_error = reason;
                self.set(Status::Failed, now);
                self.on_failure(now, actuator, notifier, &mut actions);
            }
            (Status::Failed | Status::Restarting | Status::Escalated, CheckOutcome::Ok) => {
                self.state.consecutive_restart_failures = 0;
                self.state.restart_attempts.clear();
                self.set(Status::Ok, now);
                actions.push(Action::Recovered);
            }
            (Status::Restarting, CheckOutcome::Failed(reason)) => {
                self.state.last_error = reason;
                self.state.consecutive_restart_failures += 1;
                self.set(Status::Failed, now);
                self.on_failure(now, actuator, notifier, &mut actions);
            }
            (Status::Failed, CheckOutcome::Failed(reason)) => {
                self.state.last_error = reason;
                self.on_failure(now, actuator, notifier, &mut actions);
            }
            (Status::Escalated, CheckOutcome::Failed(_)) => {}
        }
        actions
    }

    fn on_failure(
        &mut self,
        now: u64,
        actuator: Option<&dyn Actuator>,
        notifier: &dyn Notifier,
        actions: &mut Vec<Action>,
    ) {
        if self.state.consecutive_restart_failures >= self.spec.restart_limit {
            self.escalate(now, notifier, actions);
            return;
        }
        let attempt = self.state.restart_attempts.len() as u32 + 1;
        self.state.restart_attempts.push(now);
        self.state.total_restarts += 1;
        let result = match actuator {
            Some(a) => a.restart(&self.spec.target),
            None => Err(format!("actuator `{}` unavailable", self.spec.actuator)),
        };
        match result {
            Ok(()) => {
                self.set(Status::Restarting, now);
                actions.push(Action::Restarted { attempt });
            }
            Err(reason) => {
                self.state.consecutive_restart_failures += 1;
                actions.push(Action::RestartFailed { attempt, reason });
                if self.state.consecutive_restart_failures >= self.spec.restart_limit {
                    self.escalate(now, notifier, actions);
                }
            }
        }
    }

    fn escalate(&mut self, now: u64, notifier: &dyn Notifier, actions: &mut Vec<Action>) {
        if self.state.status == Status::Escalated {
            return;
        }
        self.set(Status::Escalated, now);
        let mut alert = Alert {
            target: self.spec.target.clone(),
            reason: format!(
                "{} consecutive restart attempts failed: {}",
                self.state.consecutive_restart_failures, self.state.last_error
            ),
            attempts: self.state.restart_attempts.clone(),
            at: now,
            delivered_to: Vec::new(),
        };
        self.state.alerts += 1;
        match notifier.notify(&alert) {
            Ok(()) => alert.delivered_to.push(notifier.name().to_string()),
            Err(e) => {
                tracing::warn!(target = %self.spec.target, "alert delivery failed: {e}");
                self.pending = Some(PendingAlert {
                    alert: alert.clone(),
                    retry_at: now + self.spec.period_ms,
                    backoff_ms: self.spec.period_ms,
                });
            }
        }
        actions.push(Action::Escalated(alert));
    }

    fn retry_alert(&mut self, now: u64, notifier: &dyn Notifier) {
        let Some(p) = self.pending.as_mut() else { return };
        if now < p.retry_at {
            return;
        }
        if notifier.notify(&p.alert).is_ok() {
            self.pending = None;
        } else {
            p.backoff_ms = (p.backoff_ms * 2).min(self.spec.period_ms * 32);
            p.retry_at = now + p.backoff_ms;
        }
    }

    pub fn alert_pending(&self) -> bool {
        self.pending.is_some()
    }
}

/// A signed watch request, as deployed by an operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedWatch {
    pub spec: WatchSpec,
    pub signature: String,
}

/// All watches of one agent plus its pluggable actuators and notifiers.
pub struct Supervisor {
    watches: BTreeMap<String, Watch>,
    actuators: BTreeMap<String, Arc<dyn Actuator>>,
    notifiers: BTreeMap<String, Arc<dyn Notifier>>,
    check: Arc<dyn HealthCheck>,
    trust: TrustKey,
    rejected: u64,
}

impl Supervisor {
    pub fn new(check: Arc<dyn HealthCheck>, trust: TrustKey) -> Self {
        Self {
            watches: BTreeMap::new(),
            actuators: BTreeMap::new(),
            notifiers: BTreeMap::new(),
            check,
            trust,
            rejected: 0,
        }
    }

    pub fn add_actuator(&mut self, actuator: Arc<dyn Actuator>) {
        self.actuators.insert(actuator.name().to_string(), actuator);
    }

    pub fn add_notifier(&mut self, notifier: Arc<dyn Notifier>) {
        self.notifiers.insert(notifier.name().to_string(), notifier);
    }

    /// Installs a watch only if its signature verifies under the trust key.
    pub fn add_watch(&mut self, signed: SignedWatch, now: u64) -> Result<()> {
        if let Err(e) = self.trust.check(&signed.spec.target, &signed.spec, &signed.signature) {
            self.rejected += 1;
            tracing::warn!(target = %signed.spec.target, "rejected unsigned action agent");
            return Err(e);
        }
        if !self.notifiers.contains_key(&signed.spec.notifier) {
            return Err(Error::Config(format!("unknown notifier `{}`", signed.spec.notifier)));
        }
        let watch = Watch::new(signed.spec, now)?;
        self.watches.insert(watch.spec.target.clone(), watch);
        Ok(())
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn watch(&self, target: &str) -> Option<&Watch> {
        self.watches.get(target)
    }

    pub fn watches(&self) -> impl Iterator<Item = &Watch> {
        self.watches.values()
    }

    pub fn reset(&mut self, target: &str, now: u64) -> Result<()> {
        self.watches
            .get_mut(target)
            .map(|w| w.reset(now))
            .ok_or_else(|| Error::Config(format!("no watch on `{target}`")))
    }

    /// Manual restart request (operator action), bypassing the state machine.
    pub fn restart_now(&self, target: &str) -> Result<()> {
        let watch = self
            .watches
            .get(target)
            .ok_or_else(|| Error::Config(format!("no watch on `{target}`")))?;
        let actuator = self
            .actuators
            .get(&watch.spec.actuator)
            .ok_or_else(|| Error::Config(format!("actuator `{}` unavailable", watch.spec.actuator)))?;
        actuator.restart(target).map_err(Error::Config)
    }

    /// Runs the due health checks (concurrently across targets) and feeds
    /// each result to its state machine.
    pub fn tick(&mut self, now: u64) -> Vec<(String, Action)> {
        let due: Vec<(String, u64)> = self
            .watches
            .values()
            .filter(|w| w.is_due(now))
            .map(|w| (w.spec.target.clone(), w.spec.check_deadline_ms))
            .collect();
        let check = self.check.clone();
        let outcomes: Vec<(String, CheckOutcome)> = std::thread::scope(|s| {
            let handles: Vec<_> = due
                .iter()
                .map(|(target, deadline)| {
                    let check = check.clone();
                    s.spawn(move || (target.clone(), check.check(target, *deadline)))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("health check panicked")).collect()
        });
        let mut out = Vec::new();
        for (target, outcome) in outcomes {
            let Some(watch) = self.watches.get_mut(&target) else { continue };
            let actuator = self.actuators.get(&watch.spec.actuator).map(|a| a.as_ref());
            let Some(notifier) = self.notifiers.get(&watch.spec.notifier) else { continue };
            for action in watch.on_check(outcome, now, actuator, notifier.as_ref()) {
                out.push((target.clone(), action));
            }
        }
        out
    }

    pub fn total_alerts(&self) -> u64 {
        self.watches.values().map(|w| w.state.alerts).sum()
    }

    pub fn total_restarts(&self) -> u64 {
        self.watches.values().map(|w| w.state.total_restarts).sum()
    }
}

/// Appends alerts as JSON lines to a file, and keeps them in memory.
pub struct AlertLog {
    path: Option<PathBuf>,
    alerts: Mutex<Vec<Alert>>,
}

impl AlertLog {
    pub const NAME: &'static str = "log";

    pub fn to_file(path: impl Into<PathBuf>) -> Self {
        Self {
            path: Some(path.into()),
            alerts: Mutex::new(Vec::new()),
        }
    }

    pub fn in_memory() -> Self {
        Self {
            path: None,
            alerts: Mutex::new(Vec::new()),
        }
    }

    pub fn alerts(&self) -> Vec<Alert> {
        self.alerts.lock().clone()
    }
}

impl Notifier for AlertLog {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn notify(&self, alert: &Alert) -> std::result::Result<(), String> {
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(alert).map_err(|e| e.to_string())?;
            line.push('\n');
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| f.write_all(line.as_bytes()))
                .map_err(|e| e.to_string())?;
        }
        self.alerts.lock().push(alert.clone());
        Ok(())
    }
}

/// Restarts by running `<command> <target>` through the shell.
pub struct ExecActuator {
    command: String,
}

impl ExecActuator {
    pub const NAME: &'static str = "exec-command";

    pub fn new(command: impl Into<String>) -> Self {
        Self {
            command: command.into(),
        }
    }
}

impl Actuator for ExecActuator {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn restart(&self, target: &str) -> std::result::Result<(), String> {
        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{} {}", self.command, target))
            .status()
            .map_err(|e| e.to_string())?;
        if status.success() {
            Ok(())
        } else {
            Err(format!("restart command exited with {status}"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};

    /// A scripted target: alive or dead, optionally revived by a restart.
    #[derive(Default)]
    struct World {
        alive: Mutex<HashMap<String, bool>>,
        restarts_fix: AtomicBool,
        restarts: AtomicU32,
        actuator_down: AtomicBool,
    }

    struct Check(Arc<World>);
    struct Restart(Arc<World>);

    impl HealthCheck for Check {
        fn check(&self, target: &str, _deadline_ms: u64) -> CheckOutcome {
            if *self.0.alive.lock().get(target).unwrap_or(&false) {
                CheckOutcome::Ok
            } else {
                CheckOutcome::Failed("no answer before deadline".into())
            }
        }
    }

    impl Actuator for Restart {
        fn name(&self) -> &str {
            "sim-restart"
        }

        fn restart(&self, target: &str) -> std::result::Result<(), String> {
            if self.0.actuator_down.load(Ordering::SeqCst) {
                return Err("actuator unreachable".into());
            }
            self.0.restarts.fetch_add(1, Ordering::SeqCst);
            if self.0.restarts_fix.load(Ordering::SeqCst) {
                self.0.alive.lock().insert(target.to_string(), true);
            }
            Ok(())
        }
    }

    struct Flaky {
        fail_next: AtomicU32,
        sent: Mutex<Vec<Alert>>,
    }

    impl Notifier for Flaky {
        fn name(&self) -> &str {
            "log"
        }

        fn notify(&self, alert: &Alert) -> std::result::Result<(), String> {
            if self.fail_next.load(Ordering::SeqCst) > 0 {
                self.fail_next.fetch_sub(1, Ordering::SeqCst);
                return Err("smtp down".into());
            }
            self.sent.lock().push(alert.clone());
            Ok(())
        }
    }

    const PERIOD: u64 = 1000;

    fn setup(world: &Arc<World>) -> (Supervisor, Arc<AlertLog>, TrustKey) {
        let key = TrustKey::new("ops");
        let mut sup = Supervisor::new(Arc::new(Check(world.clone())), key.clone());
        sup.add_actuator(Arc::new(Restart(world.clone())));
        let log = Arc::new(AlertLog::in_memory());
        sup.add_notifier(log.clone());
        world.alive.lock().insert("refl-1".into(), true);
        let spec = WatchSpec::new("refl-1", PERIOD, 200);
        let signature = key.sign(&spec);
        sup.add_watch(SignedWatch { spec, signature }, 0).unwrap();
        (sup, log, key)
    }

    fn run(sup: &mut Supervisor, from: u64, ticks: u64) -> Vec<(String, Action)> {
        (0..ticks).flat_map(|i| sup.tick(from + i * PERIOD)).collect()
    }

    fn kill(world: &World) {
        world.alive.lock().insert("refl-1".into(), false);
    }

    #[test]
    fn healthy_target_stays_ok() {
        let world = Arc::new(World::default());
        let (mut sup, log, _) = setup(&world);
        assert!(run(&mut sup, 0, 5).is_empty());
        assert_eq!(sup.watch("refl-1").unwrap().state().status, Status::Ok);
        assert!(log.alerts().is_empty());
    }

    #[test]
    fn successful_restart_recovers_without_alert() {
        let world = Arc::new(World::default());
        world.restarts_fix.store(true, Ordering::SeqCst);
        let (mut sup, log, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        let actions = run(&mut sup, PERIOD, 3);
        assert_eq!(
            actions.into_iter().map(|(_, a)| a).collect::<Vec<_>>(),
            vec![Action::Restarted { attempt: 1 }, Action::Recovered]
        );
        let st = sup.watch("refl-1").unwrap().state();
        assert_eq!((st.status, st.consecutive_restart_failures), (Status::Ok, 0));
        assert!(log.alerts().is_empty());
    }

    #[test]
    fn one_failed_restart_then_success_peaks_at_one() {
        let world = Arc::new(World::default());
        let (mut sup, log, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        // first restart leaves the target dead
        run(&mut sup, PERIOD, 1);
        world.restarts_fix.store(true, Ordering::SeqCst);
        // second check fails (counter 1) and the second restart works
        run(&mut sup, 2 * PERIOD, 1);
        assert_eq!(sup.watch("refl-1").unwrap().state().consecutive_restart_failures, 1);
        run(&mut sup, 3 * PERIOD, 2);
        let st = sup.watch("refl-1").unwrap().state();
        assert_eq!((st.status, st.consecutive_restart_failures), (Status::Ok, 0));
        assert!(log.alerts().is_empty());
    }

    #[test]
    fn two_failed_restarts_escalate_once() {
        let world = Arc::new(World::default());
        let (mut sup, log, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        run(&mut sup, PERIOD, 12);
        assert_eq!(world.restarts.load(Ordering::SeqCst), 2);
        let alerts = log.alerts();
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].attempts, vec![PERIOD, 2 * PERIOD]);
        assert_eq!(alerts[0].at, 3 * PERIOD);
        let st = sup.watch("refl-1").unwrap().state();
        assert_eq!(st.status, Status::Escalated);
        assert_eq!(st.alerts, 1);
        assert_eq!(sup.total_alerts(), 1);
        let statuses: Vec<_> = st.history.iter().map(|t| t.to).collect();
        assert_eq!(
            statuses,
            vec![
                Status::Failed,
                Status::Restarting,
                Status::Failed,
                Status::Restarting,
                Status::Failed,
                Status::Escalated
            ]
        );
    }

    #[test]
    fn unavailable_actuator_counts_as_failed_attempt() {
        let world = Arc::new(World::default());
        world.actuator_down.store(true, Ordering::SeqCst);
        let (mut sup, log, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        let actions: Vec<_> = run(&mut sup, PERIOD, 5).into_iter().map(|(_, a)| a).collect();
        assert!(matches!(actions[0], Action::RestartFailed { attempt: 1, .. }));
        assert!(matches!(actions[1], Action::RestartFailed { attempt: 2, .. }));
        assert!(matches!(actions[2], Action::Escalated(_)));
        assert_eq!(actions.len(), 3);
        assert_eq!(log.alerts().len(), 1);
        assert_eq!(log.alerts()[0].attempts, vec![PERIOD, 2 * PERIOD]);
    }

    #[test]
    fn recovery_closes_episode_and_allows_new_one() {
        let world = Arc::new(World::default());
        let (mut sup, log, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        run(&mut sup, PERIOD, 5);
        world.alive.lock().insert("refl-1".into(), true);
        run(&mut sup, 6 * PERIOD, 1);
        let st = sup.watch("refl-1").unwrap().state();
        assert_eq!((st.status, st.consecutive_restart_failures), (Status::Ok, 0));
        kill(&world);
        run(&mut sup, 7 * PERIOD, 6);
        assert_eq!(log.alerts().len(), 2);
        assert_eq!(world.restarts.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn manual_reset_reenables_restarts() {
        let world = Arc::new(World::default());
        let (mut sup, _, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        run(&mut sup, PERIOD, 4);
        assert_eq!(world.restarts.load(Ordering::SeqCst), 2);
        sup.reset("refl-1", 5 * PERIOD).unwrap();
        world.restarts_fix.store(true, Ordering::SeqCst);
        run(&mut sup, 5 * PERIOD, 2);
        assert_eq!(world.restarts.load(Ordering::SeqCst), 3);
        assert_eq!(sup.watch("refl-1").unwrap().state().status, Status::Ok);
    }

    #[test]
    fn restarts_are_spaced_by_the_period() {
        let world = Arc::new(World::default());
        let (mut sup, _, _) = setup(&world);
        run(&mut sup, 0, 1);
        kill(&world);
        // ticks more often than the period only run due checks
        for t in (PERIOD..4 * PERIOD).step_by(100) {
            sup.tick(t);
        }
        let attempts = &sup.watch("refl-1").unwrap().state().restart_attempts;
        for pair in attempts.windows(2) {
            assert!(pair[1] - pair[0] >= PERIOD);
        }
    }

    #[test]
    fn notifier_failure_is_retried_but_counted_once() {
        let world = Arc::new(World::default());
        let flaky = Arc::new(Flaky {
            fail_next: AtomicU32::new(2),
            sent: Mutex::new(Vec::new()),
        });
        let key = TrustKey::new("ops");
        let mut sup = Supervisor::new(Arc::new(Check(world.clone())), key.clone());
        sup.add_actuator(Arc::new(Restart(world.clone())));
        sup.add_notifier(flaky.clone());
        let spec = WatchSpec::new("refl-1", PERIOD, 200);
        let signature = key.sign(&spec);
        sup.add_watch(SignedWatch { spec, signature }, 0).unwrap();
        run(&mut sup, 0, 20);
        assert_eq!(sup.total_alerts(), 1);
        assert_eq!(flaky.sent.lock().len(), 1);
        assert!(!sup.watch("refl-1").unwrap().alert_pending());
    }

    #[test]
    fn unsigned_agent_never_acts() {
        let world = Arc::new(World::default());
        let key = TrustKey::new("ops");
        let mut sup = Supervisor::new(Arc::new(Check(world.clone())), key.clone());
        sup.add_actuator(Arc::new(Restart(world.clone())));
        sup.add_notifier(Arc::new(AlertLog::in_memory()));
        let spec = WatchSpec::new("refl-1", PERIOD, 200);
        let forged = TrustKey::new("attacker").sign(&spec);
        assert!(matches!(
            sup.add_watch(SignedWatch { spec: spec.clone(), signature: forged }, 0),
            Err(Error::BadSignature(_))
        ));
        let mut tampered = spec.clone();
        tampered.actuator = "exec-command".into();
        let sig = key.sign(&spec);
        assert!(sup.add_watch(SignedWatch { spec: tampered, signature: sig }, 0).is_err());
        assert_eq!(sup.rejected(), 2);
        run(&mut sup, 0, 5);
        assert_eq!(world.restarts.load(Ordering::SeqCst), 0);
        assert!(sup.watch("refl-1").is_none());
    }

    #[test]
    fn spec_validation() {
        assert!(WatchSpec::new("t", 100, 100).validate().is_err());
        assert!(WatchSpec::new("t", 100, 0).validate().is_err());
        assert!(WatchSpec::new("t", 100, 50).validate().is_ok());
    }

    #[test]
    fn alert_log_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alerts.log");
        let log = AlertLog::to_file(&path);
        let alert = Alert {
            target: "refl-1".into(),
            reason: "down".into(),
            attempts: vec![1000, 2000],
            at: 3000,
            delivered_to: vec!["x".into()],
        };
        log.notify(&alert).unwrap();
        log.notify(&alert).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[0],
            r#"{"target":"refl-1","reason":"down","attempts":[1000,2000],"at":3000}"#
        );
    }

    #[test]
    fn exec_actuator_reports_exit_status() {
        assert!(ExecActuator::new("true").restart("x").is_ok());
        assert!(ExecActuator::new("false").restart("x").is_err());
    }
}

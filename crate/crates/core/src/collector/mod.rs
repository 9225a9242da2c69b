//! The station's data-collection engine.
//!
//! [`Engine`] is the scheduling state machine: a priority queue of periodic
//! tasks keyed by `(next_due, task_id)`, a dynamic worker pool, deadline
//! tracking and failure backoff. It does no I/O and never sleeps; the
//! [`runner`] drives it with real threads and a clock.

pub mod exec;
pub mod runner;

pub use exec::ExecModule;
pub use runner::{ResultBatch, RunnerConfig, ThreadedCollector};

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::metric::MetricValue;

pub type TaskId = u64;
pub type RunId = u64;
pub type WorkerId = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub max_workers: usize,
    /// Idle workers kept alive regardless of age.
    pub idle_target: usize,
    pub idle_ttl_ms: u64,
    pub backoff_cap_ms: u64,
    pub default_deadline_ms: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_workers: 64,
            idle_target: 4,
            idle_ttl_ms: 30_000,
            backoff_cap_ms: 600_000,
            default_deadline_ms: 10_000,
        }
    }
}

/// What to collect, from where, and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub module_name: String,
    pub target: String,
    pub period_ms: u64,
    /// Per-run timeout; the engine default when absent.
    #[serde(default)]
    pub deadline_ms: Option<u64>,
    /// First run time; "now" when absent.
    #[serde(default)]
    pub next_due: Option<u64>,
}

impl TaskSpec {
    pub fn new(module_name: impl Into<String>, target: impl Into<String>, period_ms: u64) -> Self {
        Self {
            module_name: module_name.into(),
            target: target.into(),
            period_ms,
            deadline_ms: None,
            next_due: None,
        }
    }

    pub fn deadline(mut self, ms: u64) -> Self {
        self.deadline_ms = Some(ms);
        self
    }

    pub fn starting_at(mut self, due: u64) -> Self {
        self.next_due = Some(due);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub task_id: TaskId,
    pub module_name: String,
    pub target: String,
    pub period_ms: u64,
    pub deadline_ms: u64,
    pub next_due: u64,
    pub consecutive_failures: u32,
    pub runs: u64,
    pub failures: u64,
    pub in_flight: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub active_workers: usize,
    pub idle_workers: usize,
    pub max_workers: usize,
    pub queue_depth: usize,
}

/// A run handed to a worker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dispatch {
    pub task_id: TaskId,
    pub run_id: RunId,
    pub worker: WorkerId,
    /// The worker is new and must be started.
    pub spawn: bool,
    pub module_name: String,
    pub target: String,
    /// Scheduled time of this run; stamped on values without a timestamp.
    pub due: u64,
    pub deadline_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FailCause {
    Timeout,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Completion {
    Accepted {
        task_id: TaskId,
        due: u64,
        latency_ms: u64,
        values: Vec<MetricValue>,
    },
    /// The run was cancelled (or its task removed); values discarded.
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FailOutcome {
    pub task_id: TaskId,
    pub consecutive_failures: u32,
    pub next_due: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EngineStats {
    pub dispatched: u64,
    pub completed: u64,
    pub failed: u64,
    pub timeouts: u64,
    pub stale: u64,
    pub saturated: u64,
    pub skipped_disabled: u64,
    pub values: u64,
    pub workers_spawned: u64,
    pub workers_reaped: u64,
    pub peak_workers: usize,
    pub mean_active_workers: f64,
}

#[derive(Debug, Clone)]
struct Task {
    spec: TaskSpec,
    deadline_ms: u64,
    next_due: u64,
    queued_at: Option<u64>,
    in_flight: Option<RunId>,
    consecutive_failures: u32,
    runs: u64,
    failures: u64,
}

#[derive(Debug, Clone)]
struct Run {
    task_id: TaskId,
    worker: WorkerId,
    due: u64,
    dispatched_at: u64,
    deadline_at: u64,
}

pub struct Engine {
    config: EngineConfig,
    plugins: BTreeSet<String>,
    disabled: BTreeSet<String>,
    tasks: BTreeMap<TaskId, Task>,
    queue: BinaryHeap<Reverse<(u64, TaskId)>>,
    runs: BTreeMap<RunId, Run>,
    idle: Vec<(WorkerId, u64)>,
    busy: BTreeSet<WorkerId>,
    next_task: TaskId,
    next_run: RunId,
    next_worker: WorkerId,
    stats: EngineStats,
    latencies: Vec<(TaskId, u64)>,
    active_integral: f64,
    accounted_at: Option<u64>,
    started_at: Option<u64>,
}

impl Engine {
    pub fn new<I, S>(config: EngineConfig, plugins: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            config,
            plugins: plugins.into_iter().map(Into::into).collect(),
            disabled: BTreeSet::new(),
            tasks: BTreeMap::new(),
            queue: BinaryHeap::new(),
            runs: BTreeMap::new(),
            idle: Vec::new(),
            busy: BTreeSet::new(),
            next_task: 1,
            next_run: 1,
            next_worker: 1,
            stats: EngineStats::default(),
            latencies: Vec::new(),
            active_integral: 0.0,
            accounted_at: None,
            started_at: None,
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn register_plugin(&mut self, name: impl Into<String>) {
        self.plugins.insert(name.into());
    }

    pub fn plugins(&self) -> impl Iterator<Item = &str> {
        self.plugins.iter().map(String::as_str)
    }

    fn account(&mut self, now: u64) {
        self.started_at.get_or_insert(now);
        if let Some(prev) = self.accounted_at {
            if now > prev {
                self.active_integral += self.busy.len() as f64 * (now - prev) as f64;
            }
        }
        self.accounted_at = Some(self.accounted_at.map_or(now, |p| p.max(now)));
    }

    fn enqueue(&mut self, task_id: TaskId) {
        if let Some(task) = self.tasks.get_mut(&task_id) {
            task.queued_at = Some(task.next_due);
            self.queue.push(Reverse((task.next_due, task_id)));
        }
    }

    /// Adds a periodic task. The first run is due at `spec.next_due`, or
    /// immediately.
    pub fn schedule(&mut self, spec: TaskSpec, now: u64) -> Result<TaskId> {
        if !self.plugins.contains(&spec.module_name) {
            return Err(Error::UnknownModule(spec.module_name));
        }
        if spec.period_ms == 0 {
            return Err(Error::InvalidTask("period_ms must be positive".into()));
        }
        let deadline_ms = spec.deadline_ms.unwrap_or(self.config.default_deadline_ms);
        if deadline_ms == 0 {
            return Err(Error::InvalidTask("deadline_ms must be positive".into()));
        }
        if deadline_ms > spec.period_ms {
            tracing::warn!(
                module = %spec.module_name,
                target = %spec.target,
                "deadline {deadline_ms} ms exceeds period {} ms",
                spec.period_ms
            );
        }
        self.account(now);
        let id = self.next_task;
        self.next_task += 1;
        let next_due = spec.next_due.unwrap_or(now);
        self.tasks.insert(
            id,
            Task {
                spec,
                deadline_ms,
                next_due,
                queued_at: None,
                in_flight: None,
                consecutive_failures: 0,
                runs: 0,
                failures: 0,
            },
        );
        self.enqueue(id);
        Ok(id)
    }

    /// Removes a task. An in-flight run finishes but its values are dropped.
    pub fn unschedule(&mut self, task_id: TaskId) -> Result<()> {
        self.tasks.remove(&task_id).map(|_| ()).ok_or(Error::UnknownTask(task_id))
    }

    /// Stops (or resumes) dispatching every task of a module.
    pub fn set_module_enabled(&mut self, module: &str, enabled: bool) -> Result<()> {
        if !self.plugins.contains(module) {
            return Err(Error::UnknownModule(module.to_string()));
        }
        if enabled {
            self.disabled.remove(module);
        } else {
            self.disabled.insert(module.to_string());
        }
        Ok(())
    }

    pub fn module_enabled(&self, module: &str) -> bool {
        !self.disabled.contains(module)
    }

    pub fn task(&self, task_id: TaskId) -> Option<TaskInfo> {
        self.tasks.get(&task_id).map(|t| TaskInfo {
            task_id,
            module_name: t.spec.module_name.clone(),
            target: t.spec.target.clone(),
            period_ms: t.spec.period_ms,
            deadline_ms: t.deadline_ms,
            next_due: t.next_due,
            consecutive_failures: t.consecutive_failures,
            runs: t.runs,
            failures: t.failures,
            in_flight: t.in_flight.is_some(),
        })
    }

    pub fn tasks(&self) -> Vec<TaskInfo> {
        self.tasks.keys().filter_map(|id| self.task(*id)).collect()
    }

    fn pop_valid(&mut self) -> Option<(u64, TaskId)> {
        while let Some(Reverse((due, id))) = self.queue.peek().copied() {
            let valid = self
                .tasks
                .get(&id)
                .is_some_and(|t| t.queued_at == Some(due) && t.in_flight.is_none());
            if valid {
                return Some((due, id));
            }
            self.queue.pop();
        }
        None
    }

    fn take_worker(&mut self) -> Option<(WorkerId, bool)> {
        if let Some((id, _)) = self.idle.pop() {
            return Some((id, false));
        }
        if self.busy.len() + self.idle.len() < self.config.max_workers {
            let id = self.next_worker;
            self.next_worker += 1;
            self.stats.workers_spawned += 1;
            return Some((id, true));
        }
        None
    }

    /// Hands every due task to a worker, in `(next_due, task_id)` order,
    /// growing the pool up to `max_workers`. Tasks that find no worker stay
    /// queued and the saturation counter goes up.
    pub fn run_due(&mut self, now: u64) -> Vec<Dispatch> {
        self.account(now);
        let mut out = Vec::new();
        while let Some((due, task_id)) = self.pop_valid() {
            if due > now {
                break;
            }
            let module = self.tasks[&task_id].spec.module_name.clone();
            if self.disabled.contains(&module) {
                self.queue.pop();
                let task = self.tasks.get_mut(&task_id).expect("validated");
                while task.next_due <= now {
                    task.next_due += task.spec.period_ms;
                }
                self.stats.skipped_disabled += 1;
                self.enqueue(task_id);
                continue;
            }
            let Some((worker, spawn)) = self.take_worker() else {
                self.stats.saturated += 1;
                break;
            };
            self.queue.pop();
            let run_id = self.next_run;
            self.next_run += 1;
            let task = self.tasks.get_mut(&task_id).expect("validated");
            task.queued_at = None;
            task.in_flight = Some(run_id);
            task.next_due = due + task.spec.period_ms;
            task.runs += 1;
            let deadline_at = now + task.deadline_ms;
            out.push(Dispatch {
                task_id,
                run_id,
                worker,
                spawn,
                module_name: module,
                target: task.spec.target.clone(),
                due,
                deadline_at,
            });
            self.runs.insert(
                run_id,
                Run {
                    task_id,
                    worker,
                    due,
                    dispatched_at: now,
                    deadline_at,
                },
            );
            self.busy.insert(worker);
            self.stats.dispatched += 1;
            self.stats.peak_workers = self.stats.peak_workers.max(self.busy.len() + self.idle.len());
        }
        out
    }

    /// Accepts a run's results. Values without a timestamp get the run's
    /// scheduled time. Results of cancelled runs are discarded.
    pub fn complete(&mut self, run_id: RunId, mut values: Vec<MetricValue>, now: u64) -> Completion {
        self.account(now);
        let Some(run) = self.runs.remove(&run_id) else {
            self.stats.stale += 1;
            return Completion::Stale;
        };
        self.busy.remove(&run.worker);
        self.idle.push((run.worker, now));
        let Some(task) = self.tasks.get_mut(&run.task_id) else {
            self.stats.stale += 1;
            return Completion::Stale;
        };
        task.in_flight = None;
        task.consecutive_failures = 0;
        self.enqueue(run.task_id);
        for v in values.iter_mut().filter(|v| v.time == 0) {
            v.time = run.due;
        }
        let latency_ms = now.saturating_sub(run.dispatched_at);
        self.stats.completed += 1;
        self.stats.values += values.len() as u64;
        self.latencies.push((run.task_id, latency_ms));
        Completion::Accepted {
            task_id: run.task_id,
            due: run.due,
            latency_ms,
            values,
        }
    }

    /// Cancels a run that failed or overran its deadline and reschedules
    /// the task. From the third consecutive failure the period backs off
    /// to `min(period · 2^(failures−2), backoff_cap)`.
    ///
    /// A timed-out worker is abandoned (it may still be stuck); a worker
    /// whose module reported failure goes back to the idle pool.
    pub fn fail_or_timeout(&mut self, run_id: RunId, cause: FailCause, now: u64) -> Option<FailOutcome> {
        self.account(now);
        let run = self.runs.remove(&run_id)?;
        self.busy.remove(&run.worker);
        match cause {
            FailCause::Timeout => self.stats.timeouts += 1,
            FailCause::Failed(_) => {
                self.stats.failed += 1;
                self.idle.push((run.worker, now));
            }
        }
        let cap = self.config.backoff_cap_ms;
        let task = self.tasks.get_mut(&run.task_id)?;
        task.in_flight = None;
        task.failures += 1;
        task.consecutive_failures += 1;
        let effective = backoff_period(task.spec.period_ms, task.consecutive_failures, cap);
        task.next_due = run.due + effective;
        let outcome = FailOutcome {
            task_id: run.task_id,
            consecutive_failures: task.consecutive_failures,
            next_due: task.next_due,
        };
        self.enqueue(run.task_id);
        Some(outcome)
    }

    /// Runs whose deadline has passed at `now`.
    pub fn expired(&self, now: u64) -> Vec<RunId> {
        self.runs
            .iter()
            .filter(|(_, r)| r.deadline_at <= now)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Earliest time something needs attention: a due task or a deadline.
    pub fn next_wakeup(&mut self) -> Option<u64> {
        let due = self.pop_valid().map(|(due, _)| due);
        let deadline = self.runs.values().map(|r| r.deadline_at).min();
        match (due, deadline) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Reaps idle workers above `idle_target` that have been idle for
    /// `idle_ttl_ms`. Returns the pool state and the reaped worker ids.
    pub fn resize_pool(&mut self, now: u64) -> (PoolState, Vec<WorkerId>) {
        self.account(now);
        let mut reaped = Vec::new();
        // the idle stack is most-recent-last; the oldest idle sit at the front
        while self.idle.len() > self.config.idle_target {
            let (id, since) = self.idle[0];
            if since + self.config.idle_ttl_ms > now {
                break;
            }
            self.idle.remove(0);
            reaped.push(id);
        }
        self.stats.workers_reaped += reaped.len() as u64;
        (self.pool_state(), reaped)
    }

    pub fn pool_state(&self) -> PoolState {
        PoolState {
            active_workers: self.busy.len(),
            idle_workers: self.idle.len(),
            max_workers: self.config.max_workers,
            queue_depth: self.tasks.values().filter(|t| t.in_flight.is_none()).count(),
        }
    }

    pub fn stats(&self) -> EngineStats {
        let mut stats = self.stats.clone();
        if let (Some(start), Some(last)) = (self.started_at, self.accounted_at) {
            if last > start {
                stats.mean_active_workers = self.active_integral / (last - start) as f64;
            }
        }
        stats
    }

    /// Dispatch-to-completion latencies of accepted runs, by task.
    pub fn latencies(&self) -> &[(TaskId, u64)] {
        &self.latencies
    }

    /// Restarts the averaging window of the statistics at `now`.
    pub fn reset_stats(&mut self, now: u64) {
        self.stats = EngineStats::default();
        self.latencies.clear();
        self.active_integral = 0.0;
        self.started_at = Some(now);
        self.accounted_at = Some(now);
    }
}

pub fn backoff_period(period_ms: u64, consecutive_failures: u32, cap_ms: u64) -> u64 {
    if consecutive_failures < 3 {
        return period_ms;
    }
    let shift = (consecutive_failures - 2).min(63);
    period_ms.checked_shl(shift).filter(|p| p >> shift == period_ms).map_or(cap_ms, |p| p.min(cap_ms))
}

/// Cooperative cancellation shared between the control timer and a run.
#[derive(Clone, Default)]
pub struct CancelToken {
    inner: Arc<(Mutex<bool>, Condvar)>,
}

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        let (flag, cv) = &*self.inner;
        *flag.lock() = true;
        cv.notify_all();
    }

    pub fn is_cancelled(&self) -> bool {
        *self.inner.0.lock()
    }

    /// Sleeps for `ms` clock milliseconds unless cancelled first. Returns
    /// `false` if the sleep was cut short.
    pub fn sleep(&self, clock: &dyn Clock, ms: u64) -> bool {
        let real = clock.real(ms);
        if real.is_zero() {
            clock.sleep(ms);
            return !self.is_cancelled();
        }
        self.wait(real)
    }

    /// Waits up to `timeout` real time for cancellation.
    pub fn wait(&self, timeout: Duration) -> bool {
        let (flag, cv) = &*self.inner;
        let mut cancelled = flag.lock();
        let deadline = std::time::Instant::now() + timeout;
        while !*cancelled {
            if cv.wait_until(&mut cancelled, deadline).timed_out() {
                return !*cancelled;
            }
        }
        false
    }
}

/// Everything a module needs for one run.
pub struct RunContext {
    pub due: u64,
    pub deadline_at: u64,
    pub cancel: CancelToken,
    pub clock: Arc<dyn Clock>,
}

/// A collection module. `collect` must return promptly once
/// `ctx.cancel` fires; late results are discarded anyway.
pub trait CollectorModule: Send + Sync {
    fn name(&self) -> &str;
    fn collect(&self, target: &str, ctx: &RunContext) -> std::result::Result<Vec<MetricValue>, String>;
}

/// The plugin table: modules by name.
#[derive(Clone, Default)]
pub struct ModuleTable {
    modules: BTreeMap<String, Arc<dyn CollectorModule>>,
}

impl ModuleTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, module: impl CollectorModule + 'static) -> Self {
        self.insert(Arc::new(module));
        self
    }

    pub fn insert(&mut self, module: Arc<dyn CollectorModule>) {
        self.modules.insert(module.name().to_string(), module);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn CollectorModule>> {
        self.modules.get(name).cloned()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modules.keys().map(String::as_str)
    }
}

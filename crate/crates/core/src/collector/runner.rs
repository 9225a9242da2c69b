//! Drives an [`Engine`] with real worker threads.
//!
//! One coordinator thread owns the scheduling decisions: it dispatches due
//! runs, enforces deadlines (the control timer), returns workers to the
//! pool and reaps idle ones. Results leave through a bounded channel; when
//! the consumer lags the batch is dropped and counted, the coordinator
//! never blocks on it.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender, TrySendError};
use parking_lot::Mutex;

use super::{CancelToken, Completion, CollectorModule, Engine, FailCause, ModuleTable, RunContext, RunId, TaskId, WorkerId};
use crate::clock::Clock;
use crate::metric::MetricValue;

const MIN_NAP: Duration = Duration::from_micros(200);

/// Results of one accepted run.
#[derive(Debug, Clone)]
pub struct ResultBatch {
    pub task_id: TaskId,
    pub module_name: String,
    pub target: String,
    pub due: u64,
    pub latency_ms: u64,
    pub values: Vec<MetricValue>,
}

#[derive(Debug, Clone)]
pub struct RunnerConfig {
    /// Capacity of the result channel, in batches.
    pub result_capacity: usize,
    /// Longest real-time nap of the coordinator between checks.
    pub max_nap: Duration,
    /// Clock milliseconds between pool resize passes.
    pub resize_every_ms: u64,
}

impl Default for RunnerConfig {
    fn default() -> Self {
        Self {
            result_capacity: 4096,
            max_nap: Duration::from_millis(20),
            resize_every_ms: 1_000,
        }
    }
}

enum Job {
    Run {
        run_id: RunId,
        module: Arc<dyn CollectorModule>,
        target: String,
        ctx: RunContext,
    },
    Exit,
}

enum Msg {
    Done {
        run_id: RunId,
        result: Result<Vec<MetricValue>, String>,
    },
    Wake,
}

struct Worker {
    tx: Sender<Job>,
}

pub struct ThreadedCollector {
    engine: Arc<Mutex<Engine>>,
    msg_tx: Sender<Msg>,
    stop: Arc<AtomicBool>,
    dropped: Arc<AtomicU64>,
    coordinator: Option<JoinHandle<()>>,
}

impl ThreadedCollector {
    /// Starts the coordinator. Returns the handle and the result stream.
    pub fn start(
        engine: Engine,
        modules: ModuleTable,
        clock: Arc<dyn Clock>,
        config: RunnerConfig,
    ) -> (Self, Receiver<ResultBatch>) {
        let engine = Arc::new(Mutex::new(engine));
        let (msg_tx, msg_rx) = crossbeam_channel::unbounded();
        let (result_tx, result_rx) = crossbeam_channel::bounded(config.result_capacity);
        let stop = Arc::new(AtomicBool::new(false));
        let dropped = Arc::new(AtomicU64::new(0));
        let coordinator = Coordinator {
            engine: engine.clone(),
            modules,
            clock,
            config,
            msg_tx: msg_tx.clone(),
            msg_rx,
            result_tx,
            stop: stop.clone(),
            dropped: dropped.clone(),
            workers: HashMap::new(),
            tokens: HashMap::new(),
            run_workers: HashMap::new(),
        };
        let handle = std::thread::Builder::new()
            .name("collector-coordinator".into())
            .spawn(move || coordinator.run())
            .expect("spawn coordinator");
        (
            Self {
                engine,
                msg_tx,
                stop,
                dropped,
                coordinator: Some(handle),
            },
            result_rx,
        )
    }

    /// Runs `f` against the engine and wakes the coordinator afterwards.
    pub fn with_engine<R>(&self, f: impl FnOnce(&mut Engine) -> R) -> R {
        let out = f(&mut self.engine.lock());
        let _ = self.msg_tx.send(Msg::Wake);
        out
    }

    pub fn engine(&self) -> Arc<Mutex<Engine>> {
        self.engine.clone()
    }

    /// Result batches dropped because the consumer lagged.
    pub fn dropped_batches(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.msg_tx.send(Msg::Wake);
        if let Some(h) = self.coordinator.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ThreadedCollector {
    fn drop(&mut self) {
        self.stop_inner();
    }
}

struct Coordinator {
    engine: Arc<Mutex<Engine>>,
    modules: ModuleTable,
    clock: Arc<dyn Clock>,
    config: RunnerConfig,
    msg_tx: Sender<Msg>,
    msg_rx: Receiver<Msg>,
    result_tx: Sender<ResultBatch>,
    stop: Arc<AtomicBool>,
    dropped: Arc<AtomicU64>,
    workers: HashMap<WorkerId, Worker>,
    tokens: HashMap<RunId, CancelToken>,
    run_workers: HashMap<RunId, WorkerId>,
}

impl Coordinator {
    fn run(mut self) {
        let mut last_resize = self.clock.now_ms();
        while !self.stop.load(Ordering::SeqCst) {
            let nap = {
                let mut engine = self.engine.lock();
                let now = self.clock.now_ms();
                match engine.next_wakeup() {
                    Some(t) if t <= now => Duration::ZERO,
                    // manual clocks report zero real time; avoid spinning
                    Some(t) => self.clock.real(t - now).clamp(MIN_NAP, self.config.max_nap),
                    None => self.config.max_nap,
                }
            };
            let first = if nap.is_zero() {
                self.msg_rx.try_recv().ok()
            } else {
                self.msg_rx.recv_timeout(nap).ok()
            };
            let mut msgs: Vec<Msg> = first.into_iter().collect();
            msgs.extend(self.msg_rx.try_iter());

            let now = self.clock.now_ms();
            let shared = self.engine.clone();
            let mut engine = shared.lock();
            for msg in msgs {
                if let Msg::Done { run_id, result } = msg {
                    self.tokens.remove(&run_id);
                    self.run_workers.remove(&run_id);
                    match result {
                        Ok(values) => self.forward(engine.complete(run_id, values, now), &engine),
                        Err(cause) => {
                            engine.fail_or_timeout(run_id, FailCause::Failed(cause), now);
                        }
                    }
                }
            }
            for run_id in engine.expired(now) {
                engine.fail_or_timeout(run_id, FailCause::Timeout, now);
                if let Some(token) = self.tokens.remove(&run_id) {
                    token.cancel();
                }
                // the stuck worker exits once its run returns
                if let Some(worker) = self.run_workers.remove(&run_id) {
                    self.workers.remove(&worker);
                }
            }
            for d in engine.run_due(now) {
                let Some(module) = self.modules.get(&d.module_name) else {
                    engine.fail_or_timeout(d.run_id, FailCause::Failed("module missing".into()), now);
                    continue;
                };
                if d.spawn || !self.workers.contains_key(&d.worker) {
                    self.spawn_worker(d.worker);
                }
                let token = CancelToken::new();
                self.tokens.insert(d.run_id, token.clone());
                self.run_workers.insert(d.run_id, d.worker);
                let job = Job::Run {
                    run_id: d.run_id,
                    module,
                    target: d.target,
                    ctx: RunContext {
                        due: d.due,
                        deadline_at: d.deadline_at,
                        cancel: token,
                        clock: self.clock.clone(),
                    },
                };
                let _ = self.workers[&d.worker].tx.send(job);
            }
            if now >= last_resize + self.config.resize_every_ms {
                last_resize = now;
                let (_, reaped) = engine.resize_pool(now);
                for id in reaped {
                    if let Some(w) = self.workers.remove(&id) {
                        let _ = w.tx.send(Job::Exit);
                    }
                }
            }
        }
        for (_, token) in self.tokens.drain() {
            token.cancel();
        }
        for (_, w) in self.workers.drain() {
            let _ = w.tx.send(Job::Exit);
        }
    }

    fn forward(&self, completion: Completion, engine: &Engine) {
        let Completion::Accepted { task_id, due, latency_ms, values } = completion else {
            return;
        };
        let Some(info) = engine.task(task_id) else { return };
        let batch = ResultBatch {
            task_id,
            module_name: info.module_name,
            target: info.target,
            due,
            latency_ms,
            values,
        };
        match self.result_tx.try_send(batch) {
            Ok(()) => {}
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    fn spawn_worker(&mut self, id: WorkerId) {
        let (tx, rx) = crossbeam_channel::unbounded::<Job>();
        let done = self.msg_tx.clone();
        std::thread::Builder::new()
            .name(format!("collector-worker-{id}"))
            .spawn(move || {
                while let Ok(job) = rx.recv() {
                    match job {
                        Job::Exit => break,
                        Job::Run { run_id, module, target, ctx } => {
                            let result = module.collect(&target, &ctx);
                            let cancelled = ctx.cancel.is_cancelled();
                            let _ = done.send(Msg::Done { run_id, result });
                            if cancelled {
                                // the engine already replaced this worker
                                break;
                            }
                        }
                    }
                }
            })
            .expect("spawn worker");
        self.workers.insert(id, Worker { tx });
    }
}

//! Client side of the station control protocol.

use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{Receiver, RecvTimeoutError};
use vigil_core::metric::MetricValue;
use vigil_core::predicate::PredicateSpec;
use vigil_core::proto::Frame;
use vigil_core::subscription::{FilterSpec, History};

use crate::conn::{self, FrameConn};
use crate::error::{NetError, Result};

const REQUEST_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct StationClient {
    endpoint: String,
}

impl StationClient {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// One request on a fresh connection; ERROR replies become
    /// `NetError::Remote`.
    pub fn request(&self, frame: &Frame) -> Result<Frame> {
        conn::call(&self.endpoint, frame, REQUEST_TIMEOUT)
    }

    pub fn history(&self, predicate: PredicateSpec) -> Result<History> {
        match self.request(&Frame::History { predicate })? {
            Frame::HistoryResult { history } => Ok(history),
            other => Err(unexpected(other, "HISTORY_RESULT")),
        }
    }

    pub fn deploy_filter(&self, spec: FilterSpec, signature: String) -> Result<String> {
        match self.request(&Frame::FilterDeploy { spec, signature })? {
            Frame::FilterAck { filter_id } => Ok(filter_id),
            other => Err(unexpected(other, "FILTER_ACK")),
        }
    }

    pub fn module_toggle(&self, module_name: &str, enabled: bool) -> Result<String> {
        let frame = Frame::ModuleToggle {
            module_name: module_name.to_string(),
            enabled,
        };
        match self.request(&frame)? {
            Frame::Ok { msg } => Ok(msg),
            other => Err(unexpected(other, "OK")),
        }
    }

    pub fn restart_target(&self, target: &str) -> Result<String> {
        match self.request(&Frame::RestartTarget {
            target: target.to_string(),
        })? {
            Frame::Ok { msg } => Ok(msg),
            other => Err(unexpected(other, "OK")),
        }
    }

    /// Subscribes with every predicate on one connection.
    pub fn subscribe(&self, predicates: &[PredicateSpec], client: Option<&str>) -> Result<Subscription> {
        Subscription::open(&self.endpoint, predicates, client)
    }
}

fn unexpected(frame: Frame, wanted: &'static str) -> NetError {
    NetError::Unexpected {
        got: frame.kind(),
        wanted,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamItem {
    Values(Vec<MetricValue>),
    /// Values this client lost when an earlier lane overflowed.
    Overflow(u64),
}

/// A live subscription connection read by a background thread.
pub struct Subscription {
    sub_ids: Vec<u64>,
    rx: Receiver<StreamItem>,
    stream: TcpStream,
    closed: Arc<AtomicBool>,
    received: Arc<AtomicU64>,
    reader: Option<JoinHandle<()>>,
}

impl Subscription {
    pub fn open(endpoint: &str, predicates: &[PredicateSpec], client: Option<&str>) -> Result<Self> {
        let mut conn = FrameConn::connect(endpoint)?;
        conn.set_read_timeout(Some(REQUEST_TIMEOUT))?;
        for p in predicates {
            conn.send(&Frame::Subscribe {
                predicate: p.clone(),
                client: client.map(str::to_string),
            })?;
        }
        let (tx, rx) = crossbeam_channel::unbounded();
        let received = Arc::new(AtomicU64::new(0));
        let mut sub_ids = Vec::new();
        while sub_ids.len() < predicates.len() {
            match conn.recv()? {
                Frame::SubscribeAck { sub_id } => sub_ids.push(sub_id),
                Frame::Data { values } => {
                    received.fetch_add(values.len() as u64, Ordering::Relaxed);
                    let _ = tx.send(StreamItem::Values(values));
                }
                Frame::Overflow { dropped } => {
                    let _ = tx.send(StreamItem::Overflow(dropped));
                }
                Frame::Error { code, msg } => return Err(NetError::Remote { code, msg }),
                other => return Err(unexpected(other, "SUBSCRIBE_ACK")),
            }
        }
        conn.set_read_timeout(None)?;
        let stream = conn.stream()?;
        let closed = Arc::new(AtomicBool::new(false));
        let (flag, count) = (closed.clone(), received.clone());
        let reader = thread::Builder::new().name("subscription-reader".into()).spawn(move || {
            while let Ok(frame) = conn.recv() {
                let item = match frame {
                    Frame::Data { values } => {
                        count.fetch_add(values.len() as u64, Ordering::Relaxed);
                        StreamItem::Values(values)
                    }
                    Frame::Overflow { dropped } => StreamItem::Overflow(dropped),
                    _ => continue,
                };
                if tx.send(item).is_err() {
                    break;
                }
            }
            flag.store(true, Ordering::SeqCst);
        })?;
        Ok(Self {
            sub_ids,
            rx,
            stream,
            closed,
            received,
            reader: Some(reader),
        })
    }

    pub fn sub_ids(&self) -> &[u64] {
        &self.sub_ids
    }

    /// `Err(())` once the connection closed and everything was consumed.
    pub fn next_timeout(&self, timeout: Duration) -> Result<Option<StreamItem>, ()> {
        match self.rx.recv_timeout(timeout) {
            Ok(item) => Ok(Some(item)),
            Err(RecvTimeoutError::Timeout) => {
                if self.closed.load(Ordering::SeqCst) && self.rx.is_empty() {
                    Err(())
                } else {
                    Ok(None)
                }
            }
            Err(RecvTimeoutError::Disconnected) => Err(()),
        }
    }

    /// Values received so far, counted on arrival.
    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    pub fn close(&mut self) {
        let _ = self.stream.shutdown(Shutdown::Both);
        if let Some(h) = self.reader.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.close();
    }
}

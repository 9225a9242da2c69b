//! Append-only record of admin requests: one record per request, whether
//! it was allowed, denied or malformed.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub at: u64,
    /// Command kind as sent, or `?` when the body did not parse.
    pub kind: String,
    /// Target service id, empty when unknown.
    pub target: String,
    /// Index of the admin token used; `None` when authentication failed.
    pub principal: Option<usize>,
    /// `ok`, `denied`, `invalid` or `failed`.
    pub outcome: String,
    pub detail: String,
}

#[derive(Default)]
struct Inner {
    records: Vec<AuditRecord>,
    file: Option<File>,
}

#[derive(Default)]
pub struct AuditLog {
    inner: Mutex<Inner>,
}

impl AuditLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends to `path` as JSON lines in addition to memory.
    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner: Mutex::new(Inner {
                records: Vec::new(),
                file: Some(file),
            }),
        })
    }

    /// Stamps the sequence number and stores the record.
    pub fn append(&self, mut record: AuditRecord) -> AuditRecord {
        let mut inner = self.inner.lock();
        record.seq = inner.records.len() as u64 + 1;
        if let Some(f) = inner.file.as_mut() {
            let line = serde_json::to_string(&record).expect("audit records serialize infallibly");
            if let Err(e) = writeln!(f, "{line}").and_then(|_| f.flush()) {
                tracing::error!("audit log write failed: {e}");
            }
        }
        inner.records.push(record.clone());
        record
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.inner.lock().records.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

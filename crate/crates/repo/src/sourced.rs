//! The repository's store: one compacting store per source service, so the
//! source id acts as a fifth address dimension without changing the value
//! format stations send.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use vigil_core::metric::{MetricValue, SeriesKey};
use vigil_core::predicate::Predicate;
use vigil_core::store::{CompactionBin, Resolution, RetentionPolicy, Store};

use crate::error::{RepoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub t: u64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinPoint {
    pub t_start: u64,
    pub t_end: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

/// One chartable series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPayload {
    pub source: String,
    pub farm: String,
    pub cluster: String,
    pub node: String,
    pub param: String,
    /// The source left the registry; no new values will arrive.
    pub stale: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<Point>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bins: Vec<BinPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesResult {
    /// `points` or `bins`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width_ms: Option<u64>,
    pub series: Vec<SeriesPayload>,
}


pub struct SourcedStore {
    policy: RetentionPolicy,
    dir: Option<PathBuf>,
    sources: BTreeMap<String, Store>,
    /// Kept apart from the stores so a source can go stale before its
    /// first value lands.
    stale: BTreeMap<String, u64>,
}

/// Keeps `[A-Za-z0-9_-]`, escapes the rest as `%XX` so any service id
/// maps to a distinct directory name.
fn dir_name(source: &str) -> String {
    let mut out = String::new();
    for b in source.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_') {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn source_name(dir: &str) -> Option<String> {
    let bytes = dir.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'%' {
            let hex = dir.get(i + 1..i + 3)?;
            out.push(u8::from_str_radix(hex, 16).ok()?);
            i += 3;
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    String::from_utf8(out).ok()
}

fn lcm(a: u64, b: u64) -> u64 {
    fn gcd(a: u64, b: u64) -> u64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    a / gcd(a, b) * b
}

impl SourcedStore {
    pub fn in_memory(policy: RetentionPolicy) -> Self {
        Self {
            policy,
            dir: None,
            sources: BTreeMap::new(),
            stale: BTreeMap::new(),
        }
    }

    /// Opens every source store found under `dir`.
    pub fn open(dir: impl AsRef<Path>, policy: RetentionPolicy) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut sources = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let Some(name) = entry.file_name().to_str().and_then(source_name) else { continue };
            let store = Store::open(entry.path(), policy.clone())?;
            sources.insert(name, store);
        }
        Ok(Self {
            policy,
            dir: Some(dir),
            sources,
            stale: BTreeMap::new(),
        })
    }

    fn source_mut(&mut self, source: &str) -> Result<&mut Store> {
        if !self.sources.contains_key(source) {
            if source.is_empty() {
                return Err(RepoError::Config("values need a non-empty source id".into()));
            }
            let store = match &self.dir {
                Some(dir) => Store::open(dir.join(dir_name(source)), self.policy.clone())?,
                None => Store::in_memory(self.policy.clone()),
            };
            self.sources.insert(source.to_string(), store);
        }
        Ok(self.sources.get_mut(source).expect("inserted above"))
    }

    /// Stores values under `source`; returns how many were accepted.
    pub fn insert(&mut self, source: &str, values: &[MetricValue]) -> Result<usize> {
        Ok(self.source_mut(source)?.insert(values)?)
    }

    /// The first mark wins until cleared.
    pub fn mark_stale(&mut self, source: &str, at: u64) {
        self.stale.entry(source.to_string()).or_insert(at);
    }

    pub fn clear_stale(&mut self, source: &str) {
        self.stale.remove(source);
    }

    pub fn stale_since(&self, source: &str) -> Option<u64> {
        self.stale.get(source).copied()
    }

    pub fn sources(&self) -> impl Iterator<Item = &str> {
        self.sources.keys().map(String::as_str)
    }

    pub fn policy(&self) -> &RetentionPolicy {
        &self.policy
    }

    /// Bin widths the policy stores; requested widths must be multiples
    /// of the widths stored in the queried range.
    pub fn stored_widths(&self) -> Vec<u64> {
        self.policy.tiers().iter().map(|t| t.width_ms).filter(|w| *w > 0).collect()
    }

    pub fn record_count(&self) -> usize {
        self.sources.values().map(|s| s.record_count()).sum()
    }

    pub fn rejected(&self) -> u64 {
        self.sources.values().map(|s| s.rejected()).sum()
    }

    /// Every raw value stored for `source` in `[t1, t2]`.
    pub fn raw(&self, source: &str, pred: &Predicate, t1: u64, t2: u64) -> Result<Vec<MetricValue>> {
        match self.sources.get(source) {
            Some(s) => Ok(s.query_raw(pred, t1, t2)?),
            None => Ok(Vec::new()),
        }
    }

    pub fn keys(&self, source: &str) -> Vec<SeriesKey> {
        self.sources
            .get(source)
            .map(|s| s.keys().cloned().collect())
            .unwrap_or_default()
    }

    /// Chart query over every source matching `source_re`. Without a width
    /// the result is raw points unless the window reaches compacted data,
    /// in which case every series is binned at the smallest width all the
    /// stored bins divide. Value bounds test points, or bin means.
    pub fn query(&self, source_re: &Regex, pred: &Predicate, t1: u64, t2: u64, width: Option<u64>) -> Result<SeriesResult> {
        let matched: Vec<(&String, &Store)> = self.sources.iter().filter(|(id, _)| source_re.is_match(id)).collect();
        let width = match width {
            Some(w) => Some(w),
            None => matched
                .iter()
                .filter_map(|(_, s)| match s.resolution(pred, t1, t2) {
                    Resolution::Raw => None,
                    Resolution::Binned(w) => Some(w),
                })
                .reduce(lcm),
        };
        let mut series: BTreeMap<(String, SeriesKey), SeriesPayload> = BTreeMap::new();
        for (id, s) in &matched {
            let stale = self.stale.contains_key(*id);
            match width {
                None => {
                    for v in s.query_raw(pred, t1, t2)? {
                        if pred.accepts_value(v.value) {
                            slot(&mut series, id, &v.key(), stale).points.push(Point { t: v.time, v: v.value });
                        }
                    }
                }
                Some(w) => {
                    for b in s.query_bins(pred, t1, t2, w)? {
                        if pred.accepts_value(b.mean) {
                            slot(&mut series, id, &b.key, stale).bins.push(bin_point(&b));
                        }
                    }
                }
            }
        }
        Ok(SeriesResult {
            kind: if width.is_some() { "bins" } else { "points" }.to_string(),
            width_ms: width,
            series: series.into_values().collect(),
        })
    }

    pub fn compact(&mut self, now: u64) -> Result<usize> {
        let mut n = 0;
        for s in self.sources.values_mut() {
            n += s.compact_and_snapshot(now)?;
        }
        Ok(n)
    }

    pub fn flush(&mut self) -> Result<()> {
        for s in self.sources.values_mut() {
            s.flush()?;
        }
        Ok(())
    }
}

fn slot<'a>(
    series: &'a mut BTreeMap<(String, SeriesKey), SeriesPayload>,
    source: &str,
    key: &SeriesKey,
    stale: bool,
) -> &'a mut SeriesPayload {
    series
        .entry((source.to_string(), key.clone()))
        .or_insert_with(|| SeriesPayload {
            source: source.to_string(),
            farm: key.farm.clone(),
            cluster: key.cluster.clone(),
            node: key.node.clone(),
            param: key.param.clone(),
            stale,
            points: Vec::new(),
            bins: Vec::new(),
        })
}

fn bin_point(b: &CompactionBin) -> BinPoint {
    BinPoint {
        t_start: b.t_start,
        t_end: b.t_end,
        mean: b.mean,
        min: b.min,
        max: b.max,
        count: b.count,
    }
}

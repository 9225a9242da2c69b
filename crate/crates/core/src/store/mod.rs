//! Per-service time-series storage with tiered compaction.
//!
//! Raw values are kept per series until they age past the next tier's
//! threshold, then they are folded into width-aligned bins that keep the
//! count-weighted mean together with the min/max range. Queries can
//! re-aggregate any mix of raw values and bins on the fly.
//!
//! A store is either purely in memory or backed by a directory (see
//! [`disk`] for the file layout).

pub mod disk;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricValue, SeriesKey};
use crate::predicate::Predicate;

use self::disk::Disk;

/// One compaction tier: data older than `age_ms` is kept at `width_ms`
/// resolution. The raw tier has width 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tier {
    pub age_ms: u64,
    pub width_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetentionPolicy {
    tiers: Vec<Tier>,
}

const HOUR: u64 = 3_600_000;

impl Default for RetentionPolicy {
    /// Raw for 2 h, 60 s bins up to 2 d, 600 s bins after that.
    fn default() -> Self {
        Self {
            tiers: vec![
                Tier { age_ms: 0, width_ms: 0 },
                Tier { age_ms: 2 * HOUR, width_ms: 60_000 },
                Tier { age_ms: 48 * HOUR, width_ms: 600_000 },
            ],
        }
    }
}

impl RetentionPolicy {
    pub fn new(tiers: Vec<Tier>) -> Result<Self> {
        let bad = |msg: &str| Err(Error::InvalidRetention(msg.to_string()));
        match tiers.first() {
            None => return bad("at least the raw tier is required"),
            Some(t) if t.width_ms != 0 => return bad("first tier must be raw (width 0)"),
            _ => {}
        }
        for pair in tiers.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            if next.age_ms <= prev.age_ms {
                return bad("tier ages must be strictly increasing");
            }
            if next.width_ms <= prev.width_ms {
                return bad("tier widths must be strictly increasing");
            }
            if prev.width_ms != 0 && next.width_ms % prev.width_ms != 0 {
                return bad("each width must be a multiple of the previous width");
            }
        }
        Ok(Self { tiers })
    }

    pub fn tiers(&self) -> &[Tier] {
        &self.tiers
    }
}

/// An aggregate over `[t_start, t_end)` of one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompactionBin {
    pub key: SeriesKey,
    pub t_start: u64,
    pub t_end: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Bin {
    pub t_end: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

impl Bin {
    fn point(t: u64, width: u64, v: f64) -> Self {
        Bin {
            t_end: t + width,
            mean: v,
            min: v,
            max: v,
            count: 1,
        }
    }

    fn absorb(&mut self, other: &Bin) {
        let total = self.count + other.count;
        self.mean = (self.mean * self.count as f64 + other.mean * other.count as f64) / total as f64;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        self.count = total;
    }

    fn absorb_value(&mut self, v: f64) {
        self.absorb(&Bin::point(0, 0, v));
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Series {
    pub raw: BTreeMap<u64, f64>,
    pub bins: BTreeMap<u64, Bin>,
}

/// The stored width granularity of a query range, for history requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resolution {
    Raw,
    Binned(u64),
}

pub struct Store {
    policy: RetentionPolicy,
    series: BTreeMap<SeriesKey, Series>,
    rejected: u64,
    max_bin_width: u64,
    disk: Option<Disk>,
}

fn align(t: u64, width: u64) -> u64 {
    t - t % width
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

impl Store {
    pub fn in_memory(policy: RetentionPolicy) -> Self {
        Self {
            policy,
            series: BTreeMap::new(),
            rejected: 0,
            max_bin_width: 0,
            disk: None,
        }
    }

    /// Opens (or creates) a store directory and replays its log.
    pub fn open(dir: impl AsRef<Path>, policy: RetentionPolicy) -> Result<Self> {
        let (disk, series) = Disk::open(dir.as_ref())?;
        let max_bin_width = series
            .values()
            .flat_map(|s| s.bins.iter().map(|(start, b)| b.t_end - start))
            .max()
            .unwrap_or(0);
        Ok(Self {
            policy,
            series,
            rejected: 0,
            max_bin_width,
            disk: Some(disk),
        })
    }

    pub fn policy(&self) -> &RetentionPolicy {
        &self.policy
    }

    pub fn rejected(&self) -> u64 {
        self.rejected
    }

    pub fn series_count(&self) -> usize {
        self.series.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &SeriesKey> {
        self.series.keys()
    }

    /// Total stored records: raw points plus bins.
    pub fn record_count(&self) -> usize {
        self.series.values().map(|s| s.raw.len() + s.bins.len()).sum()
    }

    /// Stores every valid value; invalid ones are skipped and counted.
    /// A repeated `(key, time)` overwrites the earlier value.
    pub fn insert(&mut self, values: &[MetricValue]) -> Result<usize> {
        let mut accepted = 0;
        for v in values {
            if !v.is_valid() {
                self.rejected += 1;
                continue;
            }
            let key = v.key();
            if let Some(disk) = self.disk.as_mut() {
                disk.append(&key, v.time, v.value)?;
            }
            self.series.entry(key).or_default().raw.insert(v.time, v.value);
            accepted += 1;
        }
        Ok(accepted)
    }

    /// Flushes buffered log records to disk.
    pub fn flush(&mut self) -> Result<()> {
        match self.disk.as_mut() {
            Some(disk) => disk.flush(),
            None => Ok(()),
        }
    }

    /// Writes the full state to a fresh segment and swaps it in.
    pub fn snapshot(&mut self) -> Result<()> {
        match self.disk.as_mut() {
            Some(disk) => disk.snapshot(&self.series),
            None => Ok(()),
        }
    }

    /// Raw values in `[t1, t2]` whose address matches, ordered by key then
    /// time. Value constraints of the predicate are not applied here.
    pub fn query_raw(&self, pred: &Predicate, t1: u64, t2: u64) -> Result<Vec<MetricValue>> {
        if t1 > t2 {
            return Err(Error::InvalidRange { t1, t2 });
        }
        Ok(self
            .series
            .iter()
            .filter(|(key, _)| pred.matches_key(key))
            .flat_map(|(key, s)| s.raw.range(t1..=t2).map(move |(t, v)| MetricValue::new(key, *t, *v)))
            .collect())
    }

    fn bins_touching<'a>(&self, s: &'a Series, lo: u64, hi: u64) -> impl Iterator<Item = (u64, &'a Bin)> + 'a {
        let from = lo.saturating_sub(self.max_bin_width);
        s.bins
            .range(from..hi)
            .filter(move |(_, b)| b.t_end > lo)
            .map(|(start, b)| (*start, b))
    }

    /// What resolution the matching data in `[t1, t2]` is stored at: raw if
    /// no bins overlap the range, otherwise the smallest width every
    /// overlapping bin divides.
    pub fn resolution(&self, pred: &Predicate, t1: u64, t2: u64) -> Resolution {
        let mut lcm = 0u64;
        for (key, s) in &self.series {
            if !pred.matches_key(key) {
                continue;
            }
            for (start, b) in self.bins_touching(s, t1, t2.saturating_add(1)) {
                let w = b.t_end - start;
                lcm = if lcm == 0 { w } else { lcm / gcd(lcm, w) * w };
            }
        }
        if lcm == 0 {
            Resolution::Raw
        } else {
            Resolution::Binned(lcm)
        }
    }

    /// Re-aggregates matching data into `width`-aligned bins covering
    /// `[t1, t2]`. Raw values count as single-sample bins.
    pub fn query_bins(&self, pred: &Predicate, t1: u64, t2: u64, width: u64) -> Result<Vec<CompactionBin>> {
        if t1 > t2 {
            return Err(Error::InvalidRange { t1, t2 });
        }
        if width == 0 {
            return Err(Error::InvalidWidth {
                requested: 0,
                base: 1,
                examples: vec![1_000, 60_000],
            });
        }
        let lo = align(t1, width);
        let hi = align(t2, width).saturating_add(width);
        let mut out = Vec::new();
        for (key, s) in &self.series {
            if !pred.matches_key(key) {
                continue;
            }
            let mut acc: BTreeMap<u64, Bin> = BTreeMap::new();
            for (start, b) in self.bins_touching(s, lo, hi) {
                let stored = b.t_end - start;
                if width % stored != 0 || start < lo {
                    let base = match self.resolution(pred, t1, t2) {
                        Resolution::Binned(w) => w,
                        Resolution::Raw => stored,
                    };
                    return Err(Error::InvalidWidth {
                        requested: width,
                        base,
                        examples: vec![base, 2 * base, 5 * base, 10 * base],
                    });
                }
                let slot = align(start, width);
                acc.entry(slot)
                    .and_modify(|a| a.absorb(b))
                    .or_insert(Bin { t_end: slot + width, ..*b });
            }
            for (t, v) in s.raw.range(lo..hi) {
                let slot = align(*t, width);
                acc.entry(slot)
                    .and_modify(|a| a.absorb_value(*v))
                    .or_insert(Bin::point(slot, width, *v));
            }
            out.extend(acc.into_iter().map(|(t_start, b)| CompactionBin {
                key: key.clone(),
                t_start,
                t_end: b.t_end,
                mean: b.mean,
                min: b.min,
                max: b.max,
                count: b.count,
            }));
        }
        Ok(out)
    }

    /// Folds aged data into the policy's tiers. Returns how many bins were
    /// written (created or merged into).
    pub fn compact(&mut self, now: u64) -> usize {
        let mut written = 0;
        let tiers: Vec<Tier> = self.policy.tiers().iter().skip(1).copied().collect();
        for tier in tiers {
            if now < tier.age_ms {
                continue;
            }
            let boundary = align(now - tier.age_ms, tier.width_ms);
            for s in self.series.values_mut() {
                written += compact_series(s, boundary, tier.width_ms);
            }
            self.max_bin_width = self.max_bin_width.max(tier.width_ms);
        }
        written
    }

    /// Compacts, then swaps in a fresh on-disk segment if disk-backed.
    pub fn compact_and_snapshot(&mut self, now: u64) -> Result<usize> {
        let n = self.compact(now);
        if n > 0 {
            self.snapshot()?;
        }
        Ok(n)
    }

    pub fn export_raw_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Storage(e.to_string());
        w.write_record(["key", "time", "value"]).map_err(csv_err)?;
        for (key, s) in &self.series {
            let k = key.to_string();
            for (t, v) in &s.raw {
                w.write_record([k.as_str(), &t.to_string(), &v.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn export_bins_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Storage(e.to_string());
        w.write_record(["key", "t_start", "t_end", "mean", "min", "max", "count"])
            .map_err(csv_err)?;
        for (key, s) in &self.series {
            let k = key.to_string();
            for (start, b) in &s.bins {
                w.write_record([
                    k.clone(),
                    start.to_string(),
                    b.t_end.to_string(),
                    b.mean.to_string(),
                    b.min.to_string(),
                    b.max.to_string(),
                    b.count.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn compact_series(s: &mut Series, boundary: u64, width: u64) -> usize {
    let mut groups: BTreeMap<u64, Bin> = BTreeMap::new();

    let finer: Vec<u64> = s
        .bins
        .range(..boundary)
        .filter(|(start, b)| b.t_end - **start < width)
        .map(|(start, _)| *start)
        .collect();
    for start in finer {
        let b = s.bins.remove(&start).expect("collected above");
        let slot = align(start, width);
        groups
            .entry(slot)
            .and_modify(|g| g.absorb(&b))
            .or_insert(Bin { t_end: slot + width, ..b });
    }

    let aged: Vec<u64> = s.raw.range(..boundary).map(|(t, _)| *t).collect();
    for t in aged {
        let v = s.raw.remove(&t).expect("collected above");
        let slot = align(t, width);
        groups
            .entry(slot)
            .and_modify(|g| g.absorb_value(v))
            .or_insert(Bin::point(slot, width, v));
    }

    let written = groups.len();
    for (slot, g) in groups {
        match s.bins.get_mut(&slot) {
            Some(existing) => existing.absorb(&g),
            None => {
                s.bins.insert(slot, g);
            }
        }
    }
    written
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predicate::PredicateSpec;
    use proptest::prelude::*;

    fn key(param: &str) -> SeriesKey {
        SeriesKey::new("F1", "c", "n1", param)
    }

    fn any() -> Predicate {
        Predicate::any()
    }

    fn policy(tiers: &[(u64, u64)]) -> RetentionPolicy {
        RetentionPolicy::new(
            tiers
                .iter()
                .map(|&(age_ms, width_ms)| Tier { age_ms, width_ms })
                .collect(),
        )
        .unwrap()
    }

    fn store_with(points: &[(u64, f64)]) -> Store {
        let mut s = Store::in_memory(RetentionPolicy::default());
        let k = key("Load5");
        let vals: Vec<_> = points.iter().map(|&(t, v)| MetricValue::new(&k, t, v)).collect();
        s.insert(&vals).unwrap();
        s
    }

    #[test]
    fn policy_validation() {
        assert!(RetentionPolicy::new(vec![]).is_err());
        assert!(RetentionPolicy::new(vec![Tier { age_ms: 0, width_ms: 10 }]).is_err());
        assert!(RetentionPolicy::new(vec![
            Tier { age_ms: 0, width_ms: 0 },
            Tier { age_ms: 10, width_ms: 60 },
            Tier { age_ms: 20, width_ms: 90 },
        ])
        .is_err());
        assert!(RetentionPolicy::new(vec![
            Tier { age_ms: 0, width_ms: 0 },
            Tier { age_ms: 10, width_ms: 60 },
            Tier { age_ms: 10, width_ms: 120 },
        ])
        .is_err());
        let d = RetentionPolicy::default();
        assert_eq!(d.tiers()[1], Tier { age_ms: 7_200_000, width_ms: 60_000 });
        assert_eq!(d.tiers()[2], Tier { age_ms: 172_800_000, width_ms: 600_000 });
    }

    #[test]
    fn insert_and_query_in_time_order() {
        let s = store_with(&[(30, 3.0), (10, 1.0), (20, 2.0)]);
        let got: Vec<_> = s.query_raw(&any(), 0, 100).unwrap().iter().map(|v| v.value).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn invalid_values_are_counted_not_fatal() {
        let mut s = Store::in_memory(RetentionPolicy::default());
        let k = key("Load5");
        let n = s
            .insert(&[MetricValue::new(&k, 1, 1.0), MetricValue::new(&k, 2, f64::NAN)])
            .unwrap();
        assert_eq!(n, 1);
        assert_eq!(s.rejected(), 1);
    }

    #[test]
    fn duplicate_time_last_write_wins() {
        let s = store_with(&[(10, 1.0), (10, 9.0)]);
        let got = s.query_raw(&any(), 10, 10).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].value, 9.0);
    }

    #[test]
    fn query_raw_bounds_and_patterns() {
        let mut s = Store::in_memory(RetentionPolicy::default());
        let vals = [
            MetricValue::new(&key("Load5"), 10, 1.0),
            MetricValue::new(&key("Load1"), 10, 2.0),
            MetricValue::new(&key("Load5"), 20, 3.0),
            MetricValue::new(&SeriesKey::new("F2", "c", "n1", "Load5"), 10, 4.0),
            MetricValue::new(&key("Mem"), 10, 5.0),
        ];
        s.insert(&vals).unwrap();

        let p = PredicateSpec::default().farm("F1").param("Load5").compile().unwrap();
        assert_eq!(s.query_raw(&p, 0, 100).unwrap().len(), 2);
        let exact = s.query_raw(&p, 20, 20).unwrap();
        assert_eq!(exact.len(), 1);
        assert_eq!(exact[0].time, 20);

        let p = PredicateSpec::default().farm("F1").param("Load.*").compile().unwrap();
        let got: Vec<_> = s.query_raw(&p, 0, 100).unwrap().iter().map(|v| (v.param.clone(), v.time)).collect();
        assert_eq!(
            got,
            vec![("Load1".into(), 10), ("Load5".into(), 10), ("Load5".into(), 20)]
        );
        assert!(matches!(s.query_raw(&p, 5, 1), Err(Error::InvalidRange { .. })));
    }

    #[test]
    fn one_bin_of_four_raw_values() {
        let mut s = Store::in_memory(policy(&[(0, 0), (100, 1000)]));
        let k = key("Load5");
        let vals: Vec<_> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, v)| MetricValue::new(&k, 1 + i as u64 * 100, *v))
            .collect();
        s.insert(&vals).unwrap();
        assert_eq!(s.compact(5_000), 1);
        let bins = s.query_bins(&any(), 0, 999, 1000).unwrap();
        assert_eq!(bins.len(), 1);
        let b = &bins[0];
        assert_eq!((b.t_start, b.t_end), (0, 1000));
        assert_eq!((b.mean, b.min, b.max, b.count), (2.5, 1.0, 4.0, 4));
        assert!(s.query_raw(&any(), 0, 999).unwrap().is_empty());
    }

    #[test]
    fn merging_bins_weights_by_count() {
        // (mean 2, count 2) + (mean 4, count 6) -> (2*2 + 4*6) / 8
        let oracle = (2.0 * 2.0 + 4.0 * 6.0) / 8.0;
        let mut a = Bin { t_end: 10, mean: 2.0, min: 1.0, max: 3.0, count: 2 };
        let b = Bin { t_end: 10, mean: 4.0, min: 0.5, max: 9.0, count: 6 };
        a.absorb(&b);
        assert_eq!(a.mean, oracle);
        assert_eq!(a.mean, 3.5);
        assert_eq!((a.min, a.max, a.count), (0.5, 9.0, 8));
    }

    #[test]
    fn constant_series_is_invariant() {
        let points: Vec<_> = (1..200).map(|i| (i * 37, 7.0)).collect();
        let mut s = store_with(&points);
        s.policy = policy(&[(0, 0), (10, 1000)]);
        s.compact(1_000_000);
        for b in s.query_bins(&any(), 0, 10_000, 1000).unwrap() {
            assert_eq!((b.mean, b.min, b.max), (7.0, 7.0, 7.0));
        }
    }

    #[test]
    fn sixty_raw_points_into_one_minute_bin() {
        let points: Vec<_> = (0..60).map(|i| (60_000 + i * 1000, i as f64)).collect();
        let s = store_with(&points);
        let bins = s.query_bins(&any(), 60_000, 119_999, 60_000).unwrap();
        assert_eq!(bins.len(), 1);
        let oracle: f64 = (0..60).map(|i| i as f64).sum::<f64>() / 60.0;
        assert!((bins[0].mean - oracle).abs() < 1e-12);
        assert_eq!(bins[0].count, 60);
    }

    #[test]
    fn width_must_be_a_multiple_of_stored() {
        let points: Vec<_> = (0..600).map(|i| (1 + i * 1000, 1.0)).collect();
        let mut s = store_with(&points);
        s.policy = policy(&[(0, 0), (1, 60_000)]);
        s.compact(10_000_000);
        assert!(s.query_bins(&any(), 0, 599_999, 120_000).is_ok());
        match s.query_bins(&any(), 0, 599_999, 90_000) {
            Err(Error::InvalidWidth { requested, base, examples }) => {
                assert_eq!(requested, 90_000);
                assert_eq!(base, 60_000);
                assert!(examples.iter().all(|w| w % 60_000 == 0));
            }
            other => panic!("expected rejection, got {other:?}"),
        }
        assert_eq!(s.resolution(&any(), 0, 599_999), Resolution::Binned(60_000));
    }

    #[test]
    fn empty_range_is_empty() {
        let s = store_with(&[(10, 1.0)]);
        assert!(s.query_bins(&any(), 1000, 5000, 1000).unwrap().is_empty());
        assert!(s.query_raw(&any(), 1000, 5000).unwrap().is_empty());
    }

    #[test]
    fn tiers_cascade() {
        let points: Vec<_> = (0..3600).map(|i| (1 + i * 1000, (i % 17) as f64)).collect();
        let mut s = store_with(&points);
        s.policy = policy(&[(0, 0), (600_000, 60_000), (1_800_000, 600_000)]);
        let before = s.record_count();
        s.compact(3_600_000);
        assert!(s.record_count() < before);
        let bins = s.query_bins(&any(), 0, 3_599_999, 600_000).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), 3600);
        // 0..1.8e6 in 600 s bins, 1.8e6..3.0e6 in 60 s bins, the rest raw
        assert_eq!(s.resolution(&any(), 0, 1_799_999), Resolution::Binned(600_000));
        assert_eq!(s.resolution(&any(), 1_800_000, 2_999_999), Resolution::Binned(60_000));
        assert_eq!(s.resolution(&any(), 3_000_000, 3_600_000), Resolution::Raw);
    }

    #[test]
    fn csv_export_shapes() {
        let mut s = store_with(&[(10, 1.5), (2000, 2.5)]);
        let mut raw = Vec::new();
        s.export_raw_csv(&mut raw).unwrap();
        assert_eq!(
            String::from_utf8(raw).unwrap(),
            "key,time,value\nF1/c/n1/Load5,10,1.5\nF1/c/n1/Load5,2000,2.5\n"
        );
        s.policy = policy(&[(0, 0), (1, 1000)]);
        s.compact(1_000_000);
        let mut bins = Vec::new();
        s.export_bins_csv(&mut bins).unwrap();
        let text = String::from_utf8(bins).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("key,t_start,t_end,mean,min,max,count"));
        assert_eq!(lines.next(), Some("F1/c/n1/Load5,0,1000,1.5,1.5,1.5,1"));
    }

    #[test]
    fn disk_roundtrip_through_wal_and_snapshot() {
        let dir = tempfile::tempdir().unwrap();
        let pol = policy(&[(0, 0), (10_000, 1000)]);
        let k = key("Load5");
        {
            let mut s = Store::open(dir.path(), pol.clone()).unwrap();
            let vals: Vec<_> = (1..=50).map(|i| MetricValue::new(&k, i * 100, i as f64)).collect();
            s.insert(&vals).unwrap();
            s.flush().unwrap();
        }
        {
            let mut s = Store::open(dir.path(), pol.clone()).unwrap();
            assert_eq!(s.query_raw(&any(), 0, u64::MAX).unwrap().len(), 50);
            assert!(s.compact_and_snapshot(14_000).unwrap() > 0);
            s.insert(&[MetricValue::new(&k, 9000, 99.0)]).unwrap();
            s.flush().unwrap();
        }
        let s = Store::open(dir.path(), pol).unwrap();
        let bins = s.query_bins(&any(), 0, 4999, 1000).unwrap();
        assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), 49);
        assert_eq!(s.query_raw(&any(), 9000, 9000).unwrap()[0].value, 99.0);
    }

    #[test]
    fn torn_wal_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let k = key("Load5");
        {
            let mut s = Store::open(dir.path(), RetentionPolicy::default()).unwrap();
            s.insert(&[MetricValue::new(&k, 1, 1.0), MetricValue::new(&k, 2, 2.0)]).unwrap();
            s.flush().unwrap();
        }
        let wal = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "log"))
            .unwrap();
        let len = std::fs::metadata(&wal).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&wal).unwrap();
        f.set_len(len - 5).unwrap();
        let s = Store::open(dir.path(), RetentionPolicy::default()).unwrap();
        assert_eq!(s.query_raw(&any(), 0, 10).unwrap().len(), 1);
    }

    fn series_strategy() -> impl Strategy<Value = Vec<(u64, f64)>> {
        prop::collection::vec((1u64..200_000, -1e6f64..1e6), 1..200)
    }

    fn raw_stats(points: &BTreeMap<u64, f64>, lo: u64, hi: u64) -> Option<(f64, f64, f64, u64)> {
        let vals: Vec<f64> = points.range(lo..hi).map(|(_, v)| *v).collect();
        if vals.is_empty() {
            return None;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some((mean, min, max, vals.len() as u64))
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
    }

    proptest! {
        #[test]
        fn compaction_conserves_mean_and_range(points in series_strategy(), now in 0u64..400_000) {
            let mut s = store_with(&points);
            s.policy = policy(&[(0, 0), (10_000, 1_000), (50_000, 10_000)]);
            let oracle: BTreeMap<u64, f64> = points.iter().cloned().collect();
            s.compact(now);
            let bins = s.query_bins(&any(), 0, 300_000, 10_000).unwrap();
            for b in &bins {
                let (mean, min, max, count) = raw_stats(&oracle, b.t_start, b.t_end).unwrap();
                prop_assert!(close(b.mean, mean, 1e-9));
                prop_assert_eq!(b.min, min);
                prop_assert_eq!(b.max, max);
                prop_assert_eq!(b.count, count);
                prop_assert!(b.min <= b.mean + 1e-9 * b.mean.abs() && b.mean <= b.max + 1e-9 * b.max.abs());
            }
            prop_assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), oracle.len() as u64);
        }

        #[test]
        fn compaction_is_idempotent(points in series_strategy(), now in 0u64..400_000) {
            let mut s = store_with(&points);
            s.policy = policy(&[(0, 0), (10_000, 1_000), (50_000, 10_000)]);
            s.compact(now);
            prop_assert_eq!(s.compact(now), 0);
        }

        #[test]
        fn compaction_never_grows_storage(points in series_strategy(), now in 0u64..400_000) {
            let mut s = store_with(&points);
            s.policy = policy(&[(0, 0), (10_000, 1_000), (50_000, 10_000)]);
            let before = s.record_count();
            s.compact(now);
            prop_assert!(s.record_count() <= before);
        }

        #[test]
        fn query_commutes_with_compaction(points in series_strategy(), k in 1u64..5) {
            let width = 1_000 * k * 2;
            let before = store_with(&points).query_bins(&any(), 0, 300_000, width).unwrap();
            let mut s = store_with(&points);
            s.policy = policy(&[(0, 0), (1, 1_000 * k)]);
            s.compact(1_000_000);
            let after = s.query_bins(&any(), 0, 300_000, width).unwrap();
            prop_assert_eq!(before.len(), after.len());
            for (a, b) in before.iter().zip(&after) {
                prop_assert_eq!((a.t_start, a.t_end, a.count), (b.t_start, b.t_end, b.count));
                prop_assert_eq!((a.min, a.max), (b.min, b.max));
                // summation order differs, so rounding scales with the
                // magnitudes summed, not with a possibly cancelled mean
                let scale = a.min.abs().max(a.max.abs());
                prop_assert!(close(a.mean / scale.max(1.0), b.mean / scale.max(1.0), 1e-12), "{} vs {}", a.mean, b.mean);
            }
        }
    }
}

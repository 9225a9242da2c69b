//! On-disk layout of a store directory (format version 1).
//!
//! ```text
//! MANIFEST             JSON: {"format":1,"generation":G,"segment":"seg-G.vseg"|null,"wal":"wal-G.log"}
//! seg-<G>.vseg         immutable snapshot, written once then renamed into place
//! wal-<G>.log          values appended since that snapshot
//! ```
//!
//! All integers and floats are little-endian.
//!
//! Segment: `"VSEG"` `u32 version` `u32 key_count`, then per key four
//! strings (`u16 len` + UTF-8: farm, cluster, node, param), then
//! `u64 raw_count` raw records of 20 bytes (`u32 key` `u64 time` `f64 value`),
//! then `u64 bin_count` bin records of 52 bytes
//! (`u32 key` `u64 t_start` `u64 t_end` `f64 mean` `f64 min` `f64 max` `u64 count`).
//!
//! Log: `"VWAL"` `u32 version`, then tagged records: `0x01 u32 key` + four
//! strings defines a key id; `0x02 u32 key u64 time f64 value` is a value
//! (21 bytes). A torn record at the tail is ignored on replay.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Bin, Series};
use crate::error::{Error, Result};
use crate::metric::SeriesKey;

pub const FORMAT_VERSION: u32 = 1;
const SEG_MAGIC: &[u8; 4] = b"VSEG";
const WAL_MAGIC: &[u8; 4] = b"VWAL";
const TAG_KEY: u8 = 0x01;
const TAG_VALUE: u8 = 0x02;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    generation: u64,
    segment: Option<String>,
    wal: String,
}

pub(crate) struct Disk {
    dir: PathBuf,
    manifest: Manifest,
    wal: BufWriter<File>,
    key_ids: HashMap<SeriesKey, u32>,
}

fn corrupt(what: &str) -> Error {
    Error::Storage(format!("corrupt store: {what}"))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| std::io::Error::other("key field longer than 65535 bytes"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn write_key<W: Write>(w: &mut W, key: &SeriesKey) -> std::io::Result<()> {
    for part in [&key.farm, &key.cluster, &key.node, &key.param] {
        write_str(w, part)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf)?;
        Ok(buf)
    }
    fn u8(&mut self) -> std::io::Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> std::io::Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> std::io::Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> std::io::Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> std::io::Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn string(&mut self) -> std::io::Result<String> {
        let len = self.u16()? as usize;
        let mut buf = vec![0u8; len];
        self.inner.read_exact(&mut buf)?;
        String::from_utf8(buf).map_err(|_| std::io::Error::other("non-utf8 key"))
    }
    fn key(&mut self) -> std::io::Result<SeriesKey> {
        Ok(SeriesKey::new(self.string()?, self.string()?, self.string()?, self.string()?))
    }
}

impl Disk {
    pub(crate) fn open(dir: &Path) -> Result<(Self, BTreeMap<SeriesKey, Series>)> {
        fs::create_dir_all(dir)?;
        let manifest_path = dir.join("MANIFEST");
        let manifest = if manifest_path.exists() {
            let m: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)
                .map_err(|e| corrupt(&format!("manifest: {e}")))?;
            if m.format != FORMAT_VERSION {
                return Err(Error::Storage(format!("unsupported store format {}", m.format)));
            }
            m
        } else {
            let m = Manifest {
                format: FORMAT_VERSION,
                generation: 0,
                segment: None,
                wal: wal_name(0),
            };
            write_manifest(dir, &m)?;
            m
        };

        let mut series = BTreeMap::new();
        if let Some(seg) = &manifest.segment {
            read_segment(&dir.join(seg), &mut series)?;
        }
        let wal_path = dir.join(&manifest.wal);
        let mut key_ids = HashMap::new();
        let valid_len = if wal_path.exists() {
            replay_wal(&wal_path, &mut series, &mut key_ids)?
        } else {
            0
        };
        let wal = open_wal(&wal_path, valid_len)?;
        Ok((
            Self {
                dir: dir.to_path_buf(),
                manifest,
                wal,
                key_ids,
            },
            series,
        ))
    }

    pub(crate) fn append(&mut self, key: &SeriesKey, time: u64, value: f64) -> Result<()> {
        let id = match self.key_ids.get(key) {
            Some(id) => *id,
            None => {
                let id = self.key_ids.len() as u32;
                self.wal.write_all(&[TAG_KEY])?;
                self.wal.write_all(&id.to_le_bytes())?;
                write_key(&mut self.wal, key)?;
                self.key_ids.insert(key.clone(), id);
                id
            }
        };
        let mut rec = [0u8; 21];
        rec[0] = TAG_VALUE;
        rec[1..5].copy_from_slice(&id.to_le_bytes());
        rec[5..13].copy_from_slice(&time.to_le_bytes());
        rec[13..21].copy_from_slice(&value.to_le_bytes());
        self.wal.write_all(&rec)?;
        Ok(())
    }

    pub(crate) fn flush(&mut self) -> Result<()> {
        self.wal.flush()?;
        self.wal.get_ref().sync_data()?;
        Ok(())
    }

    pub(crate) fn snapshot(&mut self, series: &BTreeMap<SeriesKey, Series>) -> Result<()> {
        let generation = self.manifest.generation + 1;
        let seg = format!("seg-{generation:08}.vseg");
        let tmp = self.dir.join(format!("{seg}.tmp"));
        write_segment(&tmp, series)?;
        fs::rename(&tmp, self.dir.join(&seg))?;

        let wal = wal_name(generation);
        let new_wal = open_wal(&self.dir.join(&wal), 0)?;
        let next = Manifest {
            format: FORMAT_VERSION,
            generation,
            segment: Some(seg),
            wal,
        };
        write_manifest(&self.dir, &next)?;

        let old = std::mem::replace(&mut self.manifest, next);
        self.wal = new_wal;
        self.key_ids.clear();
        if let Some(old_seg) = old.segment {
            let _ = fs::remove_file(self.dir.join(old_seg));
        }
        let _ = fs::remove_file(self.dir.join(old.wal));
        Ok(())
    }
}

fn wal_name(generation: u64) -> String {
    format!("wal-{generation:08}.log")
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let tmp = dir.join("MANIFEST.tmp");
    let bytes = serde_json::to_vec(m).map_err(|e| Error::Storage(e.to_string()))?;
    {
        let mut f = File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, dir.join("MANIFEST"))?;
    Ok(())
}

fn open_wal(path: &Path, valid_len: u64) -> Result<BufWriter<File>> {
    if valid_len == 0 {
        let mut f = File::create(path)?;
        f.write_all(WAL_MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.sync_data()?;
        let f = OpenOptions::new().append(true).open(path)?;
        return Ok(BufWriter::new(f));
    }
    let f = OpenOptions::new().write(true).open(path)?;
    f.set_len(valid_len)?;
    drop(f);
    let f = OpenOptions::new().append(true).open(path)?;
    Ok(BufWriter::new(f))
}

/// Replays a log into `series`; returns the byte length of the valid prefix
/// (0 if the header itself is unreadable).
fn replay_wal(
    path: &Path,
    series: &mut BTreeMap<SeriesKey, Series>,
    key_ids: &mut HashMap<SeriesKey, u32>,
) -> Result<u64> {
    let data = fs::read(path)?;
    if data.len() < 8 || &data[..4] != WAL_MAGIC {
        return Ok(0);
    }
    let mut ids: HashMap<u32, SeriesKey> = HashMap::new();
    let mut r = Reader { inner: &data[8..] };
    let mut valid = 8u64;
    loop {
        let before = r.inner.len();
        let record = (|| -> std::io::Result<Option<(SeriesKey, u64, f64)>> {
            match r.u8()? {
                TAG_KEY => {
                    let id = r.u32()?;
                    let key = r.key()?;
                    ids.insert(id, key);
                    Ok(None)
                }
                TAG_VALUE => {
                    let id = r.u32()?;
                    let time = r.u64()?;
                    let value = r.f64()?;
                    let key = ids
                        .get(&id)
                        .cloned()
                        .ok_or_else(|| std::io::Error::other("undefined key id"))?;
                    Ok(Some((key, time, value)))
                }
                _ => Err(std::io::Error::other("bad tag")),
            }
        })();
        match record {
            Ok(Some((key, time, value))) => {
                series.entry(key).or_default().raw.insert(time, value);
            }
            Ok(None) => {}
            Err(_) => break,
        }
        valid += (before - r.inner.len()) as u64;
        if r.inner.is_empty() {
            break;
        }
    }
    for (id, key) in ids {
        key_ids.insert(key, id);
    }
    Ok(valid)
}

fn write_segment(path: &Path, series: &BTreeMap<SeriesKey, Series>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SEG_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(series.len() as u32).to_le_bytes())?;
    for key in series.keys() {
        write_key(&mut w, key)?;
    }
    let raw_count: usize = series.values().map(|s| s.raw.len()).sum();
    w.write_all(&(raw_count as u64).to_le_bytes())?;
    for (idx, s) in series.values().enumerate() {
        for (t, v) in &s.raw {
            w.write_all(&(idx as u32).to_le_bytes())?;
            w.write_all(&t.to_le_bytes())?;
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let bin_count: usize = series.values().map(|s| s.bins.len()).sum();
    w.write_all(&(bin_count as u64).to_le_bytes())?;
    for (idx, s) in series.values().enumerate() {
        for (start, b) in &s.bins {
            w.write_all(&(idx as u32).to_le_bytes())?;
            w.write_all(&start.to_le_bytes())?;
            w.write_all(&b.t_end.to_le_bytes())?;
            w.write_all(&b.mean.to_le_bytes())?;
            w.write_all(&b.min.to_le_bytes())?;
            w.write_all(&b.max.to_le_bytes())?;
            w.write_all(&b.count.to_le_bytes())?;
        }
    }
    let f = w.into_inner().map_err(|e| Error::Storage(e.to_string()))?;
    f.sync_all()?;
    Ok(())
}

fn read_segment(path: &Path, series: &mut BTreeMap<SeriesKey, Series>) -> Result<()> {
    let mut r = Reader {
        inner: BufReader::new(File::open(path)?),
    };
    let io = |e: std::io::Error| corrupt(&format!("segment {}: {e}", path.display()));
    if &r.bytes::<4>().map_err(io)? != SEG_MAGIC {
        return Err(corrupt("segment magic"));
    }
    if r.u32().map_err(io)? != FORMAT_VERSION {
        return Err(corrupt("segment version"));
    }
    let key_count = r.u32().map_err(io)? as usize;
    let mut keys = Vec::with_capacity(key_count);
    for _ in 0..key_count {
        let key = r.key().map_err(io)?;
        series.entry(key.clone()).or_default();
        keys.push(key);
    }
    let lookup = |idx: u32| keys.get(idx as usize).cloned().ok_or_else(|| corrupt("key index"));
    for _ in 0..r.u64().map_err(io)? {
        let key = lookup(r.u32().map_err(io)?)?;
        let t = r.u64().map_err(io)?;
        let v = r.f64().map_err(io)?;
        series.entry(key).or_default().raw.insert(t, v);
    }
    for _ in 0..r.u64().map_err(io)? {
        let key = lookup(r.u32().map_err(io)?)?;
        let start = r.u64().map_err(io)?;
        let bin = Bin {
            t_end: r.u64().map_err(io)?,
            mean: r.f64().map_err(io)?,
            min: r.f64().map_err(io)?,
            max: r.f64().map_err(io)?,
            count: r.u64().map_err(io)?,
        };
        series.entry(key).or_default().bins.insert(start, bin);
    }
    Ok(())
}

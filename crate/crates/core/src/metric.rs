use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four-part address of a series: farm / cluster / node / parameter.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SeriesKey {
    pub farm: String,
    pub cluster: String,
    pub node: String,
    pub param: String,
}

impl SeriesKey {
    pub fn new(
        farm: impl Into<String>,
        cluster: impl Into<String>,
        node: impl Into<String>,
        param: impl Into<String>,
    ) -> Self {
        Self {
            farm: farm.into(),
            cluster: cluster.into(),
            node: node.into(),
            param: param.into(),
        }
    }

    /// Parses `farm/cluster/node/param`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').collect();
        match parts.as_slice() {
            [f, c, n, p] if parts.iter().all(|x| !x.is_empty()) => Ok(Self::new(*f, *c, *n, *p)),
            _ => Err(Error::Protocol(format!("bad series address `{s}`"))),
        }
    }
}

impl fmt::Display for SeriesKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}", self.farm, self.cluster, self.node, self.param)
    }
}

/// One timestamped measurement.
///
/// A `time` of zero means "not stamped yet"; the collection engine fills in
/// the scheduled run time before forwarding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub farm: String,
    pub cluster: String,
    pub node: String,
    pub param: String,
    pub time: u64,
    pub value: f64,
}

impl MetricValue {
    pub fn new(key: &SeriesKey, time: u64, value: f64) -> Self {
        Self {
            farm: key.farm.clone(),
            cluster: key.cluster.clone(),
            node: key.node.clone(),
            param: key.param.clone(),
            time,
            value,
        }
    }

    pub fn key(&self) -> SeriesKey {
        SeriesKey::new(&self.farm, &self.cluster, &self.node, &self.param)
    }

    pub fn is_valid(&self) -> bool {
        self.value.is_finite()
            && self.time > 0
            && !self.farm.is_empty()
            && !self.cluster.is_empty()
            && !self.node.is_empty()
            && !self.param.is_empty()
    }

    /// Parses one line produced by an external `exec` collector:
    /// `<farm>/<cluster>/<node>/<param> <value> [<epoch_ms>]`.
    pub fn parse_exec_line(line: &str) -> Result<Self> {
        let mut fields = line.split_whitespace();
        let addr = fields
            .next()
            .ok_or_else(|| Error::Protocol("empty metric line".into()))?;
        let key = SeriesKey::parse(addr)?;
        let value: f64 = fields
            .next()
            .ok_or_else(|| Error::Protocol(format!("missing value in `{line}`")))?
            .parse()
            .map_err(|_| Error::Protocol(format!("bad value in `{line}`")))?;
        let time = match fields.next() {
            Some(t) => t
                .parse()
                .map_err(|_| Error::Protocol(format!("bad timestamp in `{line}`")))?,
            None => 0,
        };
        if fields.next().is_some() {
            return Err(Error::Protocol(format!("trailing fields in `{line}`")));
        }
        Ok(Self::new(&key, time, value))
    }
}

//! Anchored regular-expression selectors over metric addresses.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricValue, SeriesKey};

fn any() -> String {
    ".*".to_string()
}

/// The serializable form of a predicate. Field order is the canonical
/// order used for signing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateSpec {
    #[serde(default = "any")]
    pub farm: String,
    #[serde(default = "any")]
    pub cluster: String,
    #[serde(default = "any")]
    pub node: String,
    #[serde(default = "any")]
    pub param: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t2: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vmin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vmax: Option<f64>,
}

impl Default for PredicateSpec {
    fn default() -> Self {
        Self {
            farm: any(),
            cluster: any(),
            node: any(),
            param: any(),
            t1: None,
            t2: None,
            vmin: None,
            vmax: None,
        }
    }
}

impl PredicateSpec {
    pub fn farm(mut self, re: &str) -> Self {
        self.farm = re.into();
        self
    }
    pub fn cluster(mut self, re: &str) -> Self {
        self.cluster = re.into();
        self
    }
    pub fn node(mut self, re: &str) -> Self {
        self.node = re.into();
        self
    }
    pub fn param(mut self, re: &str) -> Self {
        self.param = re.into();
        self
    }
    pub fn between(mut self, t1: u64, t2: u64) -> Self {
        self.t1 = Some(t1);
        self.t2 = Some(t2);
        self
    }
    pub fn values(mut self, vmin: Option<f64>, vmax: Option<f64>) -> Self {
        self.vmin = vmin;
        self.vmax = vmax;
        self
    }

    pub fn compile(self) -> Result<Predicate> {
        Predicate::new(self)
    }
}

fn anchored(pattern: &str) -> Result<Regex> {
    Regex::new(&format!("^(?:{pattern})$")).map_err(|e| Error::InvalidPattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })
}

/// A compiled predicate. All four patterns must match the whole field.
#[derive(Debug, Clone)]
pub struct Predicate {
    spec: PredicateSpec,
    farm: Regex,
    cluster: Regex,
    node: Regex,
    param: Regex,
}

impl Predicate {
    pub fn new(spec: PredicateSpec) -> Result<Self> {
        if let (Some(t1), Some(t2)) = (spec.t1, spec.t2) {
            if t1 > t2 {
                return Err(Error::InvalidRange { t1, t2 });
            }
        }
        if let (Some(lo), Some(hi)) = (spec.vmin, spec.vmax) {
            if lo > hi {
                return Err(Error::InvalidPredicate(format!("vmin {lo} > vmax {hi}")));
            }
        }
        Ok(Self {
            farm: anchored(&spec.farm)?,
            cluster: anchored(&spec.cluster)?,
            node: anchored(&spec.node)?,
            param: anchored(&spec.param)?,
            spec,
        })
    }

    pub fn any() -> Self {
        Self::new(PredicateSpec::default()).expect("default predicate compiles")
    }

    pub fn spec(&self) -> &PredicateSpec {
        &self.spec
    }

    pub fn matches_address(&self, farm: &str, cluster: &str, node: &str, param: &str) -> bool {
        self.farm.is_match(farm)
            && self.cluster.is_match(cluster)
            && self.node.is_match(node)
            && self.param.is_match(param)
    }

    pub fn matches_key(&self, key: &SeriesKey) -> bool {
        self.matches_address(&key.farm, &key.cluster, &key.node, &key.param)
    }

    pub fn accepts_value(&self, value: f64) -> bool {
        self.spec.vmin.map_or(true, |lo| value >= lo) && self.spec.vmax.map_or(true, |hi| value <= hi)
    }

    /// Live-flow match: address and value constraints; time bounds ignored.
    pub fn matches(&self, v: &MetricValue) -> bool {
        self.matches_address(&v.farm, &v.cluster, &v.node, &v.param) && self.accepts_value(v.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(farm: &str, param: &str, v: f64) -> MetricValue {
        MetricValue::new(&SeriesKey::new(farm, "c", "n", param), 1, v)
    }

    #[test]
    fn regex_on_farm_and_param() {
        let p = PredicateSpec::default().farm("CERN.*").param("Load.*").compile().unwrap();
        assert!(p.matches(&value("CERN-LSF", "Load5", 1.0)));
        assert!(!p.matches(&value("FNAL", "Load5", 1.0)));
    }

    #[test]
    fn full_field_anchoring() {
        let p = PredicateSpec::default().param("Load").compile().unwrap();
        assert!(!p.matches(&value("f", "Load5", 1.0)));
        assert!(p.matches(&value("f", "Load", 1.0)));
        // alternation stays inside the anchors
        let p = PredicateSpec::default().param("a|Load").compile().unwrap();
        assert!(!p.matches(&value("f", "xLoad", 1.0)));
    }

    #[test]
    fn value_constraints() {
        let p = PredicateSpec::default().values(Some(0.5), None).compile().unwrap();
        assert!(!p.matches(&value("f", "p", 0.3)));
        assert!(p.matches(&value("f", "p", 0.5)));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(matches!(
            PredicateSpec::default().param("(").compile(),
            Err(Error::InvalidPattern { .. })
        ));
        assert!(matches!(
            PredicateSpec::default().between(5, 4).compile(),
            Err(Error::InvalidRange { t1: 5, t2: 4 })
        ));
        assert!(PredicateSpec::default().values(Some(2.0), Some(1.0)).compile().is_err());
    }

    #[test]
    fn canonical_serialization_is_stable() {
        let spec = PredicateSpec::default().param("Load.*").between(1, 2);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"farm":".*","cluster":".*","node":".*","param":"Load.*","t1":1,"t2":2}"#
        );
        let back: PredicateSpec = serde_json::from_str(r#"{"param":"Load.*","t1":1,"t2":2}"#).unwrap();
        assert_eq!(back, spec);
    }
}

//! Link-quality probing: the 33-byte probe datagram, per-peer RTT / jitter /
//! loss estimators, and the connection cost fed to the overlay optimizer.
//!
//! RTT is measured on the sender's own monotonic clock: the responder
//! echoes `t_send` untouched, so no clock agreement between hosts is needed.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metric::{MetricValue, SeriesKey};

pub const PROBE_MAGIC: [u8; 4] = *b"MLP1";
pub const PACKET_LEN: usize = 33;
pub const LINKS_CLUSTER: &str = "_links";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeType {
    Request = 0,
    Reply = 1,
}

/// Wire layout: magic(4) ptype(1) seq(u32 BE) t_send(u64 BE, ns) sender_id(16).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbePacket {
    pub ptype: ProbeType,
    pub seq: u32,
    pub t_send: u64,
    pub sender_id: [u8; 16],
}

impl ProbePacket {
    pub fn request(seq: u32, t_send: u64, sender_id: [u8; 16]) -> Self {
        Self {
            ptype: ProbeType::Request,
            seq,
            t_send,
            sender_id,
        }
    }

    /// The reply to a request: identical except for the type byte.
    pub fn reply(&self) -> Self {
        Self {
            ptype: ProbeType::Reply,
            ..*self
        }
    }

    pub fn encode(&self) -> [u8; PACKET_LEN] {
        let mut buf = [0u8; PACKET_LEN];
        buf[0..4].copy_from_slice(&PROBE_MAGIC);
        buf[4] = self.ptype as u8;
        buf[5..9].copy_from_slice(&self.seq.to_be_bytes());
        buf[9..17].copy_from_slice(&self.t_send.to_be_bytes());
        buf[17..33].copy_from_slice(&self.sender_id);
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() != PACKET_LEN {
            return Err(Error::MalformedPacket("wrong length"));
        }
        if buf[0..4] != PROBE_MAGIC {
            return Err(Error::MalformedPacket("wrong magic"));
        }
        let ptype = match buf[4] {
            0 => ProbeType::Request,
            1 => ProbeType::Reply,
            _ => return Err(Error::MalformedPacket("unknown type")),
        };
        let mut sender_id = [0u8; 16];
        sender_id.copy_from_slice(&buf[17..33]);
        Ok(Self {
            ptype,
            seq: u32::from_be_bytes(buf[5..9].try_into().expect("4 bytes")),
            t_send: u64::from_be_bytes(buf[9..17].try_into().expect("8 bytes")),
            sender_id,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Weight of jitter relative to the RTT.
    pub jitter_weight: f64,
    /// Exponent on the 1/(1-loss) penalty.
    pub loss_exponent: f64,
    /// Loss at or above which the link is unusable.
    pub loss_cutoff: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            jitter_weight: 2.0,
            loss_exponent: 2.0,
            loss_cutoff: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub period_ms: u64,
    pub alpha: f64,
    pub gamma: f64,
    pub window: usize,
    pub reply_timeout_ms: u64,
    #[serde(default)]
    pub cost: CostParams,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            period_ms: 2_000,
            alpha: 0.25,
            gamma: 1.0 / 16.0,
            window: 50,
            reply_timeout_ms: 1_000,
            cost: CostParams::default(),
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad("alpha must be in (0, 1]");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        if self.window < 10 {
            return bad("loss window must be at least 10");
        }
        if self.period_ms == 0 || self.reply_timeout_ms == 0 {
            return bad("period and reply timeout must be positive");
        }
        if !(self.cost.loss_cutoff > 0.0 && self.cost.loss_cutoff <= 1.0) {
            return bad("loss cutoff must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Sent {
    seq: u32,
    sent_at: u64,
    acked: bool,
}

/// Estimators for one directed link (this agent → peer).
#[derive(Debug, Clone, PartialEq)]
pub struct LinkStats {
    pub peer: String,
    pub ema_rtt: f64,
    pub jitter: f64,
    pub loss: f64,
    pub samples: u64,
    pub last_update: u64,
    prev_rtt: Option<f64>,
    sent: VecDeque<Sent>,
    window: usize,
}

impl LinkStats {
    pub fn new(peer: impl Into<String>, window: usize) -> Self {
        Self {
            peer: peer.into(),
            ema_rtt: 0.0,
            jitter: 0.0,
            loss: 0.0,
            samples: 0,
            last_update: 0,
            prev_rtt: None,
            sent: VecDeque::with_capacity(3 * window),
            window,
        }
    }

    /// Folds one RTT sample into the EMA and the jitter estimate.
    pub fn record_sample(&mut self, rtt_ms: f64, cfg: &ProbeConfig) {
        debug_assert!(rtt_ms >= 0.0);
        match self.prev_rtt {
            None => {
                self.ema_rtt = rtt_ms;
                self.jitter = 0.0;
            }
            Some(prev) => {
                self.ema_rtt = (1.0 - cfg.alpha) * self.ema_rtt + cfg.alpha * rtt_ms;
                self.jitter += cfg.gamma * ((rtt_ms - prev).abs() - self.jitter);
            }
        }
        self.prev_rtt = Some(rtt_ms);
        self.samples += 1;
    }

    /// Remembers an outgoing probe. Keeps three loss windows of history.
    pub fn record_sent(&mut self, seq: u32, now_ms: u64) {
        if self.sent.len() == 3 * self.window {
            self.sent.pop_front();
        }
        self.sent.push_back(Sent {
            seq,
            sent_at: now_ms,
            acked: false,
        });
    }

    /// Matches a reply. Replies slower than the reply timeout count as lost
    /// and do not feed the RTT estimators.
    pub fn record_ack(&mut self, seq: u32, rtt_ms: f64, now_ms: u64, cfg: &ProbeConfig) -> bool {
        if rtt_ms > cfg.reply_timeout_ms as f64 {
            return false;
        }
        let Some(slot) = self.sent.iter_mut().rev().find(|s| s.seq == seq) else {
            return false;
        };
        if slot.acked {
            return false;
        }
        slot.acked = true;
        self.record_sample(rtt_ms, cfg);
        self.last_update = now_ms;
        true
    }

    fn settled(&self, now_ms: u64, timeout: u64) -> impl Iterator<Item = &Sent> {
        self.sent
            .iter()
            .rev()
            .filter(move |s| s.sent_at + timeout <= now_ms)
    }

    /// Recomputes loss over the newest `window` probes whose reply timeout
    /// has passed. Before a full window exists, the ratio uses what is there.
    pub fn record_loss(&mut self, now_ms: u64, cfg: &ProbeConfig) -> f64 {
        let (mut total, mut lost) = (0usize, 0usize);
        for s in self.settled(now_ms, cfg.reply_timeout_ms).take(self.window) {
            total += 1;
            if !s.acked {
                lost += 1;
            }
        }
        self.loss = if total == 0 { 0.0 } else { lost as f64 / total as f64 };
        self.loss
    }

    /// True when three full windows of settled probes got no reply at all.
    pub fn silent(&self, now_ms: u64, cfg: &ProbeConfig) -> bool {
        let span = 3 * self.window;
        let settled: Vec<&Sent> = self.settled(now_ms, cfg.reply_timeout_ms).take(span).collect();
        settled.len() == span && settled.iter().all(|s| !s.acked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkCost {
    Usable(f64),
    Unusable,
}

impl LinkCost {
    pub fn usable(self) -> Option<f64> {
        match self {
            LinkCost::Usable(c) => Some(c),
            LinkCost::Unusable => None,
        }
    }
}

/// `ema_rtt · (1 + J·jitter/ema_rtt) · (1/(1−loss))^L`.
///
/// Each factor is 1 on a clean link; the loss term diverges as loss → 1.
pub fn cost_from(ema_rtt: f64, jitter: f64, loss: f64, params: &CostParams) -> LinkCost {
    if !(loss < params.loss_cutoff) || !ema_rtt.is_finite() || !jitter.is_finite() {
        return LinkCost::Unusable;
    }
    // ema·(1 + J·jitter/ema) written so that ema = 0 stays finite
    let base = ema_rtt + params.jitter_weight * jitter;
    LinkCost::Usable(base * (1.0 / (1.0 - loss)).powf(params.loss_exponent))
}

pub fn link_cost(stats: &LinkStats, now_ms: u64, cfg: &ProbeConfig) -> LinkCost {
    if stats.samples == 0 || stats.silent(now_ms, cfg) {
        return LinkCost::Unusable;
    }
    cost_from(stats.ema_rtt, stats.jitter, stats.loss, &cfg.cost)
}

/// An immutable copy of the estimators handed to the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSnapshot {
    pub ema_rtt: f64,
    pub jitter: f64,
    pub loss: f64,
    pub cost: LinkCost,
}

/// One agent's probing state towards a dynamic set of peers.
#[derive(Debug, Clone)]
pub struct Prober {
    config: ProbeConfig,
    sender_id: [u8; 16],
    next_seq: u32,
    stats: BTreeMap<String, LinkStats>,
    in_flight: BTreeMap<u32, String>,
    malformed: u64,
}

impl Prober {
    pub fn new(config: ProbeConfig, sender_id: [u8; 16]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            sender_id,
            next_seq: 1,
            stats: BTreeMap::new(),
            in_flight: BTreeMap::new(),
            malformed: 0,
        })
    }

    /// Derives a 16-byte sender id from a name (zero padded / truncated).
    pub fn id_from_name(name: &str) -> [u8; 16] {
        let mut id = [0u8; 16];
        for (dst, src) in id.iter_mut().zip(name.bytes()) {
            *dst = src;
        }
        id
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn sender_id(&self) -> [u8; 16] {
        self.sender_id
    }

    pub fn malformed(&self) -> u64 {
        self.malformed
    }

    /// Replaces the peer set; stats of peers that stay are kept.
    pub fn set_peers<I: IntoIterator<Item = String>>(&mut self, peers: I) {
        let wanted: BTreeMap<String, ()> = peers.into_iter().map(|p| (p, ())).collect();
        self.stats.retain(|p, _| wanted.contains_key(p));
        for peer in wanted.into_keys() {
            let window = self.config.window;
            self.stats.entry(peer.clone()).or_insert_with(|| LinkStats::new(peer, window));
        }
        self.in_flight.retain(|_, p| self.stats.contains_key(p));
    }

    pub fn peers(&self) -> impl Iterator<Item = &str> {
        self.stats.keys().map(String::as_str)
    }

    /// Builds the next request towards `peer` and records it as sent.
    pub fn request(&mut self, peer: &str, now_ms: u64, now_ns: u64) -> Option<ProbePacket> {
        let stats = self.stats.get_mut(peer)?;
        let seq = self.next_seq;
        self.next_seq = self.next_seq.wrapping_add(1);
        stats.record_sent(seq, now_ms);
        self.in_flight.insert(seq, peer.to_string());
        if self.in_flight.len() > 3 * self.config.window * self.stats.len().max(1) {
            let oldest = *self.in_flight.keys().next().expect("non-empty");
            self.in_flight.remove(&oldest);
        }
        Some(ProbePacket::request(seq, now_ns, self.sender_id))
    }

    /// Handles a raw datagram addressed to this agent's prober. Returns the
    /// peer and RTT for accepted replies.
    pub fn on_datagram(&mut self, buf: &[u8], now_ms: u64, now_ns: u64) -> Option<(String, f64)> {
        let packet = match ProbePacket::decode(buf) {
            Ok(p) => p,
            Err(_) => {
                self.malformed += 1;
                return None;
            }
        };
        if packet.ptype != ProbeType::Reply || packet.sender_id != self.sender_id {
            return None;
        }
        let peer = self.in_flight.remove(&packet.seq)?;
        let rtt_ms = now_ns.saturating_sub(packet.t_send) as f64 / 1e6;
        let cfg = self.config.clone();
        let stats = self.stats.get_mut(&peer)?;
        stats.record_ack(packet.seq, rtt_ms, now_ms, &cfg).then_some((peer, rtt_ms))
    }

    /// Periodic loss sweep over every peer.
    pub fn sweep(&mut self, now_ms: u64) {
        let cfg = self.config.clone();
        for stats in self.stats.values_mut() {
            stats.record_loss(now_ms, &cfg);
        }
    }

    pub fn stats(&self, peer: &str) -> Option<&LinkStats> {
        self.stats.get(peer)
    }

    pub fn stats_mut(&mut self, peer: &str) -> Option<&mut LinkStats> {
        self.stats.get_mut(peer)
    }

    pub fn snapshot(&self, now_ms: u64) -> BTreeMap<String, LinkSnapshot> {
        self.stats
            .iter()
            .map(|(peer, s)| {
                (
                    peer.clone(),
                    LinkSnapshot {
                        ema_rtt: s.ema_rtt,
                        jitter: s.jitter,
                        loss: s.loss,
                        cost: link_cost(s, now_ms, &self.config),
                    },
                )
            })
            .collect()
    }

    /// The link estimators as metric values on `(farm, _links, peer)`.
    pub fn export_metrics(&self, farm: &str, now_ms: u64) -> Vec<MetricValue> {
        let mut out = Vec::new();
        for (peer, s) in &self.stats {
            if s.samples == 0 {
                continue;
            }
            for (param, value) in [("rtt_ms", s.ema_rtt), ("jitter_ms", s.jitter), ("loss", s.loss)] {
                out.push(MetricValue::new(&SeriesKey::new(farm, LINKS_CLUSTER, peer, param), now_ms, value));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ProbeConfig {
        ProbeConfig::default()
    }

    #[test]
    fn codec_identity_and_rejections() {
        let p = ProbePacket::request(1, 1_000_000_000, Prober::id_from_name("refl-a"));
        let bytes = p.encode();
        assert_eq!(bytes.len(), 33);
        assert_eq!(&bytes[0..4], b"MLP1");
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[5..9], &[0, 0, 0, 1]);
        assert_eq!(&bytes[9..17], &1_000_000_000u64.to_be_bytes());
        assert_eq!(ProbePacket::decode(&bytes).unwrap(), p);

        assert!(ProbePacket::decode(&bytes[..32]).is_err());
        let mut bad = bytes;
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(ProbePacket::decode(&bad).is_err());
        let mut bad = bytes;
        bad[4] = 7;
        assert!(ProbePacket::decode(&bad).is_err());
    }

    #[test]
    fn reply_echoes_seq_and_time() {
        let p = ProbePacket::request(42, 777, [3; 16]);
        let r = p.reply();
        assert_eq!(r.ptype, ProbeType::Reply);
        assert_eq!((r.seq, r.t_send, r.sender_id), (42, 777, [3; 16]));
        assert_eq!(r.encode()[4], 1);
    }

    #[test]
    fn ema_recurrence() {
        let mut s = LinkStats::new("b", 50);
        s.record_sample(100.0, &cfg());
        s.record_sample(80.0, &cfg());
        // (1 - 0.25)·100 + 0.25·80
        assert_eq!(s.ema_rtt, 0.75 * 100.0 + 0.25 * 80.0);
        assert_eq!(s.ema_rtt, 95.0);
    }

    #[test]
    fn jitter_recurrence() {
        let mut s = LinkStats::new("b", 50);
        s.record_sample(10.0, &cfg());
        assert_eq!(s.jitter, 0.0);
        s.record_sample(14.0, &cfg());
        // 0 + (1/16)·(|14 − 10| − 0)
        assert_eq!(s.jitter, (14.0f64 - 10.0).abs() / 16.0);
        assert_eq!(s.jitter, 0.25);
    }

    #[test]
    fn first_sample_initializes() {
        let mut s = LinkStats::new("b", 50);
        s.record_sample(42.0, &cfg());
        assert_eq!((s.ema_rtt, s.jitter), (42.0, 0.0));
    }

    #[test]
    fn constant_rtt_converges() {
        let mut s = LinkStats::new("b", 50);
        for _ in 0..50 {
            s.record_sample(30.0, &cfg());
        }
        assert!((s.ema_rtt - 30.0).abs() < 1e-6 * 30.0);
        assert!(s.jitter < 1e-3);

        // after a step the EMA error shrinks by (1 − alpha) per sample
        let mut step = LinkStats::new("b", 50);
        step.record_sample(10.0, &cfg());
        for _ in 0..50 {
            step.record_sample(30.0, &cfg());
        }
        let oracle = 30.0 - 20.0 * 0.75f64.powi(50);
        assert!((step.ema_rtt - oracle).abs() < 1e-9);
        assert!((step.ema_rtt - 30.0).abs() < 1e-6 * 30.0);
    }

    #[test]
    fn loss_counts_settled_window() {
        let c = ProbeConfig { window: 10, ..cfg() };
        let mut s = LinkStats::new("b", 10);
        for seq in 0..10 {
            s.record_sent(seq, seq as u64 * 100);
            if seq != 3 && seq != 7 {
                s.record_ack(seq, 5.0, seq as u64 * 100 + 5, &c);
            }
        }
        assert_eq!(s.record_loss(10_000, &c), 0.2);

        let mut all = LinkStats::new("b", 10);
        for seq in 0..10 {
            all.record_sent(seq, 0);
            all.record_ack(seq, 5.0, 5, &c);
        }
        assert_eq!(all.record_loss(10_000, &c), 0.0);
    }

    #[test]
    fn unsettled_probes_are_not_lost_yet() {
        let mut s = LinkStats::new("b", 10);
        s.record_sent(1, 0);
        s.record_sent(2, 900);
        assert_eq!(s.record_loss(1000, &cfg()), 1.0);
        s.record_ack(2, 50.0, 950, &cfg());
        assert_eq!(s.record_loss(5000, &cfg()), 0.5);
    }

    #[test]
    fn late_reply_counts_as_lost() {
        let mut s = LinkStats::new("b", 10);
        s.record_sent(1, 0);
        assert!(!s.record_ack(1, 1500.0, 1500, &cfg()));
        assert_eq!(s.samples, 0);
        assert_eq!(s.record_loss(5000, &cfg()), 1.0);
    }

    #[test]
    fn bernoulli_loss_matches_binomial_oracle() {
        let c = ProbeConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = LinkStats::new("b", c.window);
        let mut dropped = Vec::new();
        let mut readings = Vec::new();
        for seq in 0..1000u32 {
            let t = seq as u64 * c.period_ms;
            s.record_sent(seq, t);
            let drop = rng.gen_bool(0.3);
            dropped.push(drop);
            if !drop {
                s.record_ack(seq, 20.0, t + 20, &c);
            }
            let now = t + c.reply_timeout_ms;
            let got = s.record_loss(now, &c);
            // oracle: fraction of drops among the newest `window` settled sends
            let lo = (seq as usize + 1).saturating_sub(c.window);
            let win = &dropped[lo..=seq as usize];
            let expect = win.iter().filter(|d| **d).count() as f64 / win.len() as f64;
            assert!((got - expect).abs() < 1e-12);
            if seq as usize + 1 >= c.window {
                readings.push(got);
            }
        }
        let mean = readings.iter().sum::<f64>() / readings.len() as f64;
        assert!((0.25..=0.35).contains(&mean), "mean loss {mean}");
    }

    #[test]
    fn cost_examples() {
        let p = CostParams::default();
        assert_eq!(cost_from(50.0, 0.0, 0.0, &p), LinkCost::Usable(50.0));
        let c = cost_from(50.0, 0.0, 0.25, &p).usable().unwrap();
        // 50·(1/(1 − 0.25))²
        let oracle = 50.0 * (4.0f64 / 3.0).powi(2);
        assert!((c - oracle).abs() < 1e-9);
        assert!((c - 88.89).abs() < 0.005);
        assert_eq!(cost_from(50.0, 0.0, 0.6, &p), LinkCost::Unusable);
        assert_eq!(cost_from(50.0, 0.0, 0.5, &p), LinkCost::Unusable);
        // jitter term: 50·(1 + 2·5/50)
        assert_eq!(cost_from(50.0, 5.0, 0.0, &p), LinkCost::Usable(60.0));
    }

    #[test]
    fn no_samples_or_silence_is_unusable() {
        let c = ProbeConfig { window: 10, ..cfg() };
        let mut s = LinkStats::new("b", 10);
        assert_eq!(link_cost(&s, 0, &c), LinkCost::Unusable);
        s.record_sent(0, 0);
        s.record_ack(0, 10.0, 10, &c);
        assert_eq!(link_cost(&s, 2000, &c), LinkCost::Usable(10.0));
        for seq in 1..=30 {
            s.record_sent(seq, seq as u64 * 2000);
        }
        assert_eq!(link_cost(&s, 100_000, &c), LinkCost::Unusable);
    }

    #[test]
    fn prober_roundtrip() {
        let mut a = Prober::new(cfg(), Prober::id_from_name("a")).unwrap();
        a.set_peers(["b".to_string(), "c".to_string()]);
        let req = a.request("b", 0, 1_000_000).unwrap();
        let reply = ProbePacket::decode(&req.encode()).unwrap().reply();
        let (peer, rtt) = a.on_datagram(&reply.encode(), 12, 13_000_000).unwrap();
        assert_eq!(peer, "b");
        assert_eq!(rtt, 12.0);
        // duplicate reply is ignored
        assert!(a.on_datagram(&reply.encode(), 12, 13_000_000).is_none());
        assert!(a.on_datagram(&[0u8; 5], 0, 0).is_none());
        assert_eq!(a.malformed(), 1);
        assert!(a.request("zzz", 0, 0).is_none());

        let metrics = a.export_metrics("local", 100);
        let params: Vec<_> = metrics.iter().map(|m| (m.cluster.as_str(), m.node.as_str(), m.param.as_str())).collect();
        assert_eq!(
            params,
            vec![("_links", "b", "rtt_ms"), ("_links", "b", "jitter_ms"), ("_links", "b", "loss")]
        );
        a.set_peers(["c".to_string()]);
        assert_eq!(a.peers().collect::<Vec<_>>(), vec!["c"]);
    }

    #[test]
    fn config_validation() {
        assert!(ProbeConfig { alpha: 0.0, ..cfg() }.validate().is_err());
        assert!(ProbeConfig { gamma: 1.5, ..cfg() }.validate().is_err());
        assert!(ProbeConfig { window: 9, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    proptest! {
        #[test]
        fn codec_roundtrip(reply in any::<bool>(), seq in any::<u32>(), t in any::<u64>(), id in any::<[u8; 16]>()) {
            let mut p = ProbePacket::request(seq, t, id);
            if reply {
                p = p.reply();
            }
            prop_assert_eq!(ProbePacket::decode(&p.encode()).unwrap(), p);
        }

        #[test]
        fn cost_is_monotone(ema in 0.1f64..1000.0, jit in 0.0f64..100.0, loss in 0.0f64..0.45, d in 0.001f64..1.0) {
            let p = CostParams::default();
            let base = cost_from(ema, jit, loss, &p).usable().unwrap();
            prop_assert!(cost_from(ema + d, jit, loss, &p).usable().unwrap() > base);
            prop_assert!(cost_from(ema, jit + d, loss, &p).usable().unwrap() > base);
            prop_assert!(cost_from(ema, jit, loss + d * 0.04, &p).usable().unwrap() > base);
        }

        #[test]
        fn constant_stream_converges(r in 0.1f64..1000.0, start in 0.0f64..1000.0) {
            let mut s = LinkStats::new("b", 50);
            s.record_sample(start, &cfg());
            for _ in 0..120 {
                s.record_sample(r, &cfg());
            }
            prop_assert!((s.ema_rtt - r).abs() < 1e-6 * r);
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use vigil_core::clock::{Clock, ScaledClock, SystemClock};
use vigil_core::collector::{CollectorModule, ModuleTable, RunContext};
use vigil_core::metric::{MetricValue, SeriesKey};
use vigil_core::predicate::{Predicate, PredicateSpec};
use vigil_core::probe::LINKS_CLUSTER;
use vigil_core::proto::Frame;
use vigil_core::registry::{EventKind, RegistryConfig};
use vigil_core::signing::TrustKey;
use vigil_core::subscription::{Aggregate, FilterSpec, History};
use vigil_core::supervisor::{Actuator, CheckOutcome, HealthCheck, SignedWatch, WatchSpec};
use vigil_net::config::{ProbeSection, SupervisorSection, TaskEntry};
use vigil_net::conn::FrameConn;
use vigil_net::station_client::StreamItem;
use vigil_net::{RegistryClient, RegistryServer, RegistryServerConfig, Station, StationClient, StationConfig, StationParts};

const KEY: &str = "trust-me";

/// Emits Load1 and Load5 for its target; value = due time mod 97.
struct Loads;

impl CollectorModule for Loads {
    fn name(&self) -> &str {
        "loads"
    }

    fn collect(&self, target: &str, ctx: &RunContext) -> Result<Vec<MetricValue>, String> {
        let v = (ctx.due % 97) as f64;
        Ok(["Load1", "Load5"]
            .iter()
            .map(|p| MetricValue::new(&SeriesKey::new("farm", "nodes", target, *p), 0, v))
            .collect())
    }
}

fn scaled() -> Arc<dyn Clock> {
    Arc::new(ScaledClock::new(1_000_000, 10.0))
}

fn base_config(id: &str) -> StationConfig {
    StationConfig {
        service_id: id.into(),
        groups: vec!["cms".into()],
        trust_key: KEY.into(),
        tasks: vec![TaskEntry {
            module: "loads".into(),
            targets: vec!["n1".into(), "n2".into()],
            period_ms: 1_000,
            deadline_ms: Some(500),
            stagger: true,
        }],
        ..StationConfig::default()
    }
}

fn parts() -> StationParts {
    StationParts {
        modules: ModuleTable::new().with(Loads),
        ..StationParts::default()
    }
}

fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let t0 = Instant::now();
    while t0.elapsed() < timeout {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(10));
    }
    f()
}

fn collect_values(sub: &vigil_net::Subscription, n: usize, timeout: Duration) -> Vec<MetricValue> {
    let t0 = Instant::now();
    let mut out = Vec::new();
    while out.len() < n && t0.elapsed() < timeout {
        if let Ok(Some(StreamItem::Values(v))) = sub.next_timeout(Duration::from_millis(50)) {
            out.extend(v);
        }
    }
    out
}

#[test]
fn subscription_delivers_only_matching_values() {
    let station = Station::start(base_config("st-sub"), parts(), scaled()).unwrap();
    let client = StationClient::new(station.endpoint());
    let spec = PredicateSpec::default().node("n1").param("Load5");
    let sub = client.subscribe(&[spec.clone()], Some("t")).unwrap();
    assert_eq!(sub.sub_ids().len(), 1);
    let got = collect_values(&sub, 5, Duration::from_secs(5));
    assert!(got.len() >= 5, "only {} values", got.len());
    let pred = Predicate::new(spec).unwrap();
    assert!(got.iter().all(|v| pred.matches(v)));
    // Values carry the due time as their timestamp.
    assert!(got.windows(2).all(|w| w[1].time - w[0].time == 1_000));
}

#[test]
fn history_filter_and_errors_over_the_wire() {
    let clock = scaled();
    let station = Station::start(base_config("st-hist"), parts(), clock.clone()).unwrap();
    let client = StationClient::new(station.endpoint());
    assert!(wait_until(Duration::from_secs(5), || station.stats().ingested >= 8));

    let now = clock.now_ms();
    let spec = PredicateSpec::default().param("Load1").between(0, now);
    match client.history(spec).unwrap() {
        History::Values(vs) => {
            assert!(vs.len() >= 2);
            assert!(vs.iter().all(|v| v.param == "Load1"));
        }
        other => panic!("expected raw values, got {other:?}"),
    }
    let err = client.history(PredicateSpec::default().between(10, 5)).unwrap_err();
    assert_eq!(err.code(), Some("INVALID"));
    let err = client.history(PredicateSpec::default().node("(")).unwrap_err();
    assert_eq!(err.code(), Some("INVALID"));

    let spec = FilterSpec {
        filter_id: "sum-load".into(),
        predicate: PredicateSpec::default().param("Load1"),
        aggregate: Aggregate::Sum,
        period_ms: 2_000,
        output: "load1_sum".into(),
    };
    let sig = TrustKey::new(KEY).sign(&spec);
    let mut tampered = spec.clone();
    tampered.period_ms = 1;
    assert_eq!(client.deploy_filter(tampered, sig.clone()).unwrap_err().code(), Some("BAD_SIGNATURE"));
    assert_eq!(client.deploy_filter(spec, sig).unwrap(), "sum-load");
    let out = client
        .subscribe(&[PredicateSpec::default().cluster("_filters").param("load1_sum")], None)
        .unwrap();
    let got = collect_values(&out, 1, Duration::from_secs(5));
    assert!(!got.is_empty(), "filter produced nothing");
    assert_eq!(got[0].farm, "st-hist");

    let err = client.request(&Frame::Lookup { groups: vec![], attributes: BTreeMap::new() }).unwrap_err();
    assert_eq!(err.code(), Some("UNSUPPORTED"));
}

#[test]
fn module_toggle_stops_and_resumes_collection() {
    let station = Station::start(base_config("st-toggle"), parts(), scaled()).unwrap();
    let client = StationClient::new(station.endpoint());
    assert!(wait_until(Duration::from_secs(5), || station.stats().collector.completed >= 2));
    assert!(client.module_toggle("loads", false).unwrap().contains("disabled"));
    std::thread::sleep(Duration::from_millis(150));
    let frozen = station.stats().collector.dispatched;
    std::thread::sleep(Duration::from_millis(400));
    assert_eq!(station.stats().collector.dispatched, frozen);
    client.module_toggle("loads", true).unwrap();
    assert!(wait_until(Duration::from_secs(3), || station.stats().collector.dispatched > frozen));
    assert_eq!(client.module_toggle("nope", false).unwrap_err().code(), Some("UNKNOWN_MODULE"));
}

#[test]
fn stalled_client_is_cut_and_told_on_reconnect() {
    let mut cfg = base_config("st-stall");
    cfg.queue_hwm = 5_000;
    let station = Station::start(cfg, parts(), scaled()).unwrap();
    let healthy = StationClient::new(station.endpoint()).subscribe(&[PredicateSpec::default()], None).unwrap();

    // A subscriber that never reads.
    let mut stalled = FrameConn::connect(station.endpoint()).unwrap();
    stalled
        .send(&Frame::Subscribe {
            predicate: PredicateSpec::default(),
            client: Some("slowpoke".into()),
        })
        .unwrap();
    // Flood the hub so the stalled socket buffers fill up.
    let big: Vec<MetricValue> = (0..1_000)
        .map(|i| MetricValue::new(&SeriesKey::new("farm", "bulk", "n", "p"), 1 + i, i as f64))
        .collect();
    for _ in 0..400 {
        station.ingest(&big);
        if station.hub().overflowed() > 0 {
            break;
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    assert!(wait_until(Duration::from_secs(5), || station.hub().overflowed() > 0));
    assert!(!healthy.is_closed());
    assert!(healthy.received() > 0);

    drop(stalled);
    let again = StationClient::new(station.endpoint())
        .subscribe(&[PredicateSpec::default().param("Load5")], Some("slowpoke"))
        .unwrap();
    let first = again.next_timeout(Duration::from_secs(2)).unwrap();
    assert!(matches!(first, Some(StreamItem::Overflow(n)) if n > 0), "{first:?}");
}

#[test]
fn station_registers_and_crash_expires_lease() {
    let registry = RegistryServer::start(
        RegistryServerConfig {
            registry: RegistryConfig {
                min_lease_ms: 100,
                sweep_ms: 50,
                ..RegistryConfig::default()
            },
            ..RegistryServerConfig::default()
        },
        Arc::new(SystemClock),
    )
    .unwrap();
    let reg_client = RegistryClient::new([registry.endpoint()]);
    let feed = reg_client
        .subscribe_events(&registry.endpoint(), &BTreeSet::from(["cms".to_string()]))
        .unwrap();
    let mut cfg = base_config("st-reg");
    cfg.registries = vec![registry.endpoint()];
    cfg.lease_ms = 300;
    let mut station = Station::start(cfg, parts(), Arc::new(SystemClock)).unwrap();

    let added = feed.next_timeout(Duration::from_secs(3)).unwrap().unwrap();
    assert_eq!(added.kind, EventKind::ServiceAdded);
    assert_eq!(added.descriptor.endpoint, station.endpoint());
    assert_eq!(added.descriptor.attributes["role"], "station");

    station.shutdown(false);
    let removed = feed.next_timeout(Duration::from_secs(3)).unwrap().unwrap();
    assert_eq!(removed.kind, EventKind::ServiceRemoved);
    assert_eq!(removed.descriptor.service_id, "st-reg");
}

fn free_udp() -> String {
    std::net::UdpSocket::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string()
}

#[test]
fn udp_agents_measure_each_other() {
    let clock = scaled();
    let (addr_a, addr_b) = (free_udp(), free_udp());
    let mk = |id: &str, listen: &str, peer: &str, peer_addr: &str| {
        let mut cfg = base_config(id);
        cfg.tasks.clear();
        cfg.probe = Some(ProbeSection {
            listen: Some(listen.to_string()),
            peers: BTreeMap::from([(peer.to_string(), peer_addr.to_string())]),
            ..ProbeSection::default()
        });
        Station::start(cfg, StationParts::default(), clock.clone()).unwrap()
    };
    let a = mk("refl-a", &addr_a, "refl-b", &addr_b);
    let b = mk("refl-b", &addr_b, "refl-a", &addr_a);
    assert_eq!(a.descriptor().attributes["probe"], addr_a);

    let sub = StationClient::new(a.endpoint())
        .subscribe(&[PredicateSpec::default().cluster(LINKS_CLUSTER)], None)
        .unwrap();
    let got = collect_values(&sub, 3, Duration::from_secs(5));
    let rtt = got.iter().find(|v| v.param == "rtt_ms").expect("rtt exported");
    assert_eq!(rtt.node, "refl-b");
    assert_eq!(rtt.farm, "refl-a");
    assert!(rtt.value > 0.0 && rtt.value < 50.0, "loopback rtt {}", rtt.value);
    let loss = got.iter().find(|v| v.param == "loss").unwrap();
    assert_eq!(loss.value, 0.0);
    assert_eq!(b.probe_addr().unwrap().to_string(), addr_b);
}

struct Flag(Arc<AtomicBool>);

impl HealthCheck for Flag {
    fn check(&self, _target: &str, _deadline_ms: u64) -> CheckOutcome {
        if self.0.load(Ordering::SeqCst) {
            CheckOutcome::Ok
        } else {
            CheckOutcome::Failed("down".into())
        }
    }
}

struct Broken;

impl Actuator for Broken {
    fn name(&self) -> &str {
        "sim-restart"
    }

    fn restart(&self, _target: &str) -> Result<(), String> {
        Err("actuator broken".into())
    }
}

#[test]
fn supervisor_escalates_and_publishes_alert() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("alerts.jsonl");
    let spec = WatchSpec::new("refl-9", 200, 50);
    let watch = SignedWatch {
        signature: TrustKey::new(KEY).sign(&spec),
        spec,
    };
    let mut cfg = base_config("st-sup");
    cfg.tasks.clear();
    cfg.supervisor = Some(SupervisorSection {
        watches: vec![watch],
        alert_log: Some(log.clone()),
        ..SupervisorSection::default()
    });
    let up = Arc::new(AtomicBool::new(false));
    let station = Station::start(
        cfg,
        StationParts {
            health_check: Some(Arc::new(Flag(up.clone()))),
            actuators: vec![Arc::new(Broken)],
            ..StationParts::default()
        },
        scaled(),
    )
    .unwrap();
    let sub = StationClient::new(station.endpoint())
        .subscribe(&[PredicateSpec::default().cluster("_alerts")], None)
        .unwrap();
    let got = collect_values(&sub, 1, Duration::from_secs(5));
    assert_eq!(got.len(), 1);
    assert_eq!(got[0].node, "refl-9");
    assert_eq!(got[0].value, 2.0);
    std::thread::sleep(Duration::from_millis(300));
    assert_eq!(station.alerts().len(), 1);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["attempts"].as_array().unwrap().len(), 2);

    let client = StationClient::new(station.endpoint());
    let err = client.restart_target("refl-9").unwrap_err();
    assert_eq!(err.code(), Some("RESTART_FAILED"));
    assert_eq!(client.restart_target("nobody").unwrap_err().code(), Some("RESTART_FAILED"));
}

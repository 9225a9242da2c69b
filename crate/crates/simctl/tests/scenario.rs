use vigil_sim::{run_scenario, FarmSpec, FaultAction, FaultEvent, LinkSpec, ScenarioConfig};

fn small(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        duration_ms: 12_000,
        time_factor: 4.0,
        farms: vec![
            FarmSpec {
                name: "alpha".into(),
                nodes: 12,
                params: 8,
                period_ms: 3_000,
                deadline_ms: 1_500,
                response_min_ms: 100,
                response_max_ms: 600,
                traffic: true,
            },
            FarmSpec {
                name: "beta".into(),
                nodes: 5,
                params: 3,
                period_ms: 2_000,
                deadline_ms: 1_000,
                response_min_ms: 50,
                response_max_ms: 200,
                traffic: false,
            },
        ],
        repository: vigil_sim::config::RepositorySim {
            enabled: false,
            ..Default::default()
        },
        ..ScenarioConfig::default()
    }
}

#[test]
fn same_seed_same_stream_and_matches_the_model() {
    let a = run_scenario(small(7)).unwrap();
    let b = run_scenario(small(7)).unwrap();
    let expected = a.expected_stream_hash.clone().unwrap();
    assert_eq!(a.stream_hash, expected, "{a:#?}");
    assert_eq!(b.stream_hash, expected);
    // (12 nodes x 4 rounds x (8 + 2)) + (5 nodes x 6 rounds x 3)
    assert_eq!(a.values, 12 * 4 * 10 + 5 * 6 * 3);
    assert_eq!(a.farms[0].collects_planned, 12 * 4 * 2);
    assert_eq!(a.farms[0].failed + a.farms[0].timeouts, 0);
    let other = vigil_sim::scenario::expected_stream_hash(&small(8)).unwrap();
    assert_ne!(other, expected);
}

#[test]
fn dead_nodes_time_out_and_unknown_targets_are_ignored() {
    let mut cfg = small(3);
    cfg.faults = vec![
        FaultEvent {
            at_ms: 0,
            action: FaultAction::KillNode { farm: "beta".into(), node: "n001".into() },
        },
        FaultEvent {
            at_ms: 0,
            action: FaultAction::KillNode { farm: "beta".into(), node: "n404".into() },
        },
        FaultEvent {
            at_ms: 1_000,
            action: FaultAction::KillReflector { id: "ghost".into() },
        },
    ];
    let r = run_scenario(cfg).unwrap();
    assert_eq!((r.faults_applied, r.faults_ignored), (1, 2));
    assert!(r.expected_stream_hash.is_none());
    let beta = &r.farms[1];
    assert!(beta.timeouts + beta.failed >= 1, "{beta:#?}");
    // four healthy nodes deliver every round
    assert_eq!(beta.values, 4 * 6 * 3);
    // latencies also cover runs finishing during the drain
    assert!(beta.healthy_latency.count as u64 >= 4 * 6);
    assert!(beta.healthy_latency.max <= 1_000);
}

#[test]
fn reflector_mesh_builds_a_tree_and_supervisor_restarts() {
    let cfg = ScenarioConfig {
        duration_ms: 30_000,
        time_factor: 5.0,
        farms: vec![],
        reflectors: vec!["r1".into(), "r2".into(), "r3".into()],
        links: vec![
            LinkSpec { a: "r1".into(), b: "r2".into(), rtt_ms: 10.0, jitter_ms: 0.0, loss: 0.0 },
            LinkSpec { a: "r2".into(), b: "r3".into(), rtt_ms: 20.0, jitter_ms: 0.0, loss: 0.0 },
            LinkSpec { a: "r1".into(), b: "r3".into(), rtt_ms: 90.0, jitter_ms: 0.0, loss: 0.0 },
        ],
        faults: vec![FaultEvent {
            at_ms: 5_000,
            action: FaultAction::KillReflector { id: "r3".into() },
        }],
        probe: vigil_core::probe::ProbeConfig {
            period_ms: 500,
            ..Default::default()
        },
        mst: vigil_core::overlay::MstConfig {
            recompute_period_ms: 2_000,
            ..Default::default()
        },
        ..ScenarioConfig::default()
    };
    let r = run_scenario(cfg).unwrap();
    assert_eq!(r.restarts, 1, "{r:#?}");
    assert_eq!(r.alerts, 0);
    let mst = r.mst.unwrap();
    let mut edges: Vec<(String, String)> = mst.edges.iter().map(|e| (e.u.clone(), e.v.clone())).collect();
    edges.sort();
    assert_eq!(edges, [("r1".to_string(), "r2".to_string()), ("r2".to_string(), "r3".to_string())]);
}

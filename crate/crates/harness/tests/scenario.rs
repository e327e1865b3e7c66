use dnp_controller::Endpoint;
use dnp_core::pool::CounterUnit;
use dnp_core::probe::{AttachPoint, ProbeKind, ProbeSpec};
use dnp_core::vm::{assemble, encode_block, ExecMode};
use dnp_core::MatchKey;
use dnp_harness::*;
use dnp_proto::Message;

const SEC: u64 = 1_000_000_000;

fn net() -> NetSpec {
    let mut n = NetSpec::line(3, 2_000);
    for l in &mut n.links {
        l.capacity_bps = 10_000_000_000;
    }
    n
}

fn traffic(seed: u64) -> TrafficProfile {
    TrafficProfile { seed, n_flows: 300, half_open_fraction: 0.2, ..Default::default() }
}

fn install(at: u64, device: u32, spec: ProbeSpec) -> Action {
    Action { at, kind: ActionKind::InstallProbe { device, spec } }
}

#[test]
fn empty_script_is_the_baseline_and_deterministic() {
    let tr = TrafficSource::Profile(traffic(3));
    let a = run_scenario(&net(), &tr, &Script::default()).unwrap();
    let b = run_scenario(&net(), &tr, &Script::default()).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    assert!(a.conserved());
    assert_eq!(a.in_flight, 0);
    assert_eq!(a.edge_emitted, a.injected);
    assert!(a.reports.is_empty());
}

#[test]
fn counter_installed_mid_run_matches_oracle() {
    let p = TrafficProfile { rate_pps: 500, n_flows: 200, data_packets: (3, 3), ..traffic(5) };
    let pkts = p.generate().1;
    let t_install = SEC;
    let end = pkts.last().unwrap().ts;
    assert!(end > t_install + SEC / 2, "stream spans {end}");
    let spec = ProbeSpec::new(
        ProbeKind::Counter { unit: CounterUnit::Packets, condition: None },
        AttachPoint::TableEntry { table: 0, key: MatchKey::exact(2, 8), priority: None },
    );
    let script = Script {
        actions: vec![
            install(t_install, 1, spec),
            Action { at: end, kind: ActionKind::ReadCounter { device: 1, counter: 0 } },
        ],
        ..Default::default()
    };
    let rec = run_scenario(&net(), &TrafficSource::Profile(p), &script).unwrap();
    let oracle = pkts.iter().filter(|x| x.ts >= t_install && x.ts < end).count();
    assert_eq!(rec.timeline[0].outcome, "probe 1");
    assert_eq!(rec.timeline[1].outcome, format!("value {oracle}"));
}

#[test]
fn catalog_probes_leave_forwarding_unchanged() {
    let tr = TrafficSource::Profile(traffic(11));
    let base = run_scenario(&net(), &tr, &Script::default()).unwrap();
    let end = tr.packets().last().unwrap().ts;
    let actions = probe_catalog()
        .into_iter()
        .enumerate()
        .map(|(i, (d, s))| install(end / 4 + i as u64 * 1_000, d, s))
        .collect();
    let rec = run_scenario(&net(), &tr, &Script { actions, ..Default::default() }).unwrap();
    assert!(rec.timeline.iter().all(|t| t.outcome.starts_with("probe")), "{:?}", rec.timeline);
    let d = compare_baseline(&base, &rec).unwrap();
    assert!(d.is_empty(), "{d:?}");
    assert_eq!(rec.traffic_drops(), 0);
    assert!(rec.conserved());
    assert!(d.probe_packets.1 > 0);
    assert!(!rec.reports.is_empty());
    // the latency probe packets are the only difference
    assert!(!diff_emissions(&base, &rec, true).unwrap().is_empty());
}

#[test]
fn packet_writing_block_is_detected() {
    let spec = net();
    let tr = traffic(2);
    let pkts = tr.generate().1;
    let base = run_scenario(&spec, &TrafficSource::Profile(tr.clone()), &Script::default()).unwrap();

    let mut sim = SimNetwork::new(&spec).unwrap();
    sim.record.seed = tr.seed;
    sim.device_mut(1).set_exec_mode(ExecMode::Permissive);
    let slot = sim.device(1).entries(0).unwrap().iter().find(|e| e.key == MatchKey::exact(2, 8)).unwrap().action;
    let code = assemble("SET_FIELD pkt:480:8, #170\nOUTPUT #2").unwrap();
    let block = match sim.ctl.call(1, Message::LoadBlock { block: encode_block(&code).unwrap() }).unwrap() {
        Message::LoadBlockReply { block } => block,
        m => panic!("{m:?}"),
    };
    sim.ctl.call(1, Message::SwitchPointer { slot, block }).unwrap();
    sim.inject(&pkts);
    sim.run_through(u64::MAX);
    let rec = sim.finish();
    let d = compare_baseline(&base, &rec).unwrap();
    assert!(!d.is_empty());
    assert_eq!(d.ports[0].device, 1);
}

#[test]
fn different_seeds_are_refused() {
    let a = run_scenario(&net(), &TrafficSource::Profile(traffic(1)), &Script::default()).unwrap();
    let b = run_scenario(&net(), &TrafficSource::Profile(traffic(2)), &Script::default()).unwrap();
    assert_eq!(compare_baseline(&a, &b), Err(HarnessError::SeedMismatch(1, 2)));
}

#[test]
fn latency_query_rows_equal_link_latency() {
    let spec = NetSpec::line(3, 2_000);
    let q = dnp_controller::Query {
        id: 4,
        mode: dnp_controller::Mode::Continuous,
        kind: dnp_controller::QueryKind::LinkLatency { from: Endpoint::new(1, 2), to: Endpoint::new(2, 1), rate: 1_000 },
    };
    let script = Script {
        end_ns: Some(20_000_000),
        collect_every_ns: Some(5_000_000),
        actions: vec![Action { at: 0, kind: ActionKind::RunQuery { query: q } }],
        ..Default::default()
    };
    let tr = TrafficSource::Trace { seed: 0, packets: vec![] };
    let rec = run_scenario(&spec, &tr, &script).unwrap();
    let rows: Vec<_> = rec.results.iter().filter(|r| r.query == 4).collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.value == Some(2_000.0)), "{rows:?}");
}

use std::cell::RefCell;
use std::rc::Rc;

use dnp_controller::*;
use dnp_core::field::FieldRef;
use dnp_core::pool::CounterUnit;
use dnp_core::vm::{assemble, DeviceCaps};
use dnp_core::*;
use dnp_proto::{LocalChannel, Message, ReportQueue};

struct Net {
    devs: Vec<Rc<RefCell<Device>>>,
    reports: Vec<ReportQueue>,
    ctl: Controller,
}

fn device(id: u32, caps: Option<DeviceCaps>) -> Device {
    let mut d = Device::new(DeviceConfig::new(id, [1, 2]));
    if let Some(c) = caps {
        d.set_caps(c);
    }
    d.create_table(TableDef::new(0, vec![FieldRef::pkt(0, 8)]), Position::End).unwrap();
    let (out, _) = d.load_action(assemble("OUTPUT #2").unwrap()).unwrap();
    d.insert_entry(0, EntrySpec { priority: 1, key: MatchKey::any(), action: out, params: vec![] }).unwrap();
    d
}

fn net(caps: [Option<DeviceCaps>; 3]) -> Net {
    let topo = Topology {
        devices: (1..=3).map(|id| TopoDevice { id, ports: vec![1, 2] }).collect(),
        links: vec![
            Link { a: Endpoint::new(1, 2), b: Endpoint::new(2, 1), latency_ns: 1000, capacity_bps: 0 },
            Link { a: Endpoint::new(2, 2), b: Endpoint::new(3, 1), latency_ns: 1000, capacity_bps: 0 },
        ],
    };
    let mut ctl = Controller::new(topo).unwrap();
    let mut devs = Vec::new();
    let mut reports = Vec::new();
    for (i, c) in caps.into_iter().enumerate() {
        let id = i as u32 + 1;
        let d = Rc::new(RefCell::new(device(id, c)));
        let (ch, q) = LocalChannel::new(d.clone());
        ctl.connect(id, Box::new(ch)).unwrap();
        devs.push(d);
        reports.push(q);
    }
    Net { devs, reports, ctl }
}

fn snapshots(n: &Net) -> Vec<Vec<u8>> {
    n.devs.iter().map(|d| d.borrow().snapshot().to_bytes()).collect()
}

fn port_load(id: u32) -> Query {
    Query {
        id,
        mode: Mode::Continuous,
        kind: QueryKind::PortLoad {
            ports: (1..=3).map(|d| Endpoint::new(d, 2)).collect(),
            unit: CounterUnit::Packets,
            poll_ns: Some(1_000),
        },
    }
}

fn flow_stats(id: u32, mode: Mode) -> Query {
    Query {
        id,
        mode,
        kind: QueryKind::FlowStats { device: 1, table: 0, key: MatchKey::exact(7, 8), unit: CounterUnit::Packets, poll_ns: Some(1_000) },
    }
}

fn send(n: &Net, dev: usize, first: u8, count: usize, now: u64) {
    for _ in 0..count {
        let mut pkt = vec![0u8; 64];
        pkt[0] = first;
        let o = n.devs[dev].borrow_mut().process_packet(1, pkt, now);
        for r in o.effects.reports {
            n.reports[dev].push(r);
        }
    }
}

#[test]
fn identical_queries_share_one_probe() {
    let mut n = net([None, None, None]);
    let before = snapshots(&n);
    n.ctl.deploy(&flow_stats(1, Mode::Continuous), 0).unwrap();
    n.ctl.deploy(&flow_stats(2, Mode::Continuous), 0).unwrap();
    let d1 = n.devs[0].borrow().probe_ids();
    assert_eq!(d1.len(), 1);
    assert_eq!(n.devs[0].borrow().probe(d1[0]).unwrap().subscribers.len(), 2);

    n.ctl.revoke_query(1).unwrap();
    assert_eq!(n.devs[0].borrow().probe_ids(), d1);
    n.ctl.revoke_query(2).unwrap();
    assert!(n.devs[0].borrow().probe_ids().is_empty());
    assert_eq!(snapshots(&n), before);
    assert!(matches!(n.ctl.revoke_query(2), Err(ControllerError::NoSuchQuery(2))));
}

#[test]
fn admission_is_all_or_nothing() {
    let tight = DeviceCaps::new(100.0, 50.0).with_floor(90.0);
    let mut n = net([None, None, Some(tight)]);
    let before = snapshots(&n);
    let err = n.ctl.deploy(&port_load(1), 0).unwrap_err();
    assert!(matches!(err, ControllerError::AdmissionRejected { device: 3, .. }), "{err:?}");
    assert_eq!(snapshots(&n), before);
    assert!(n.ctl.events().is_empty());
}

#[test]
fn injected_failure_rolls_back_every_device() {
    let mut n = net([None, None, None]);
    let before = snapshots(&n);
    n.ctl.call(2, Message::InjectFault { step: Some(1) }).unwrap();
    let err = n.ctl.deploy(&port_load(1), 0).unwrap_err();
    assert!(matches!(err, ControllerError::DeployFailed { device: 2, .. }), "{err:?}");
    assert_eq!(snapshots(&n), before);
    assert!(n.ctl.query_ids().is_empty());
    // Nothing is left half-deployed, so the same query can go in afterwards.
    n.ctl.deploy(&port_load(1), 0).unwrap();
    assert!(n.devs.iter().all(|d| d.borrow().probe_ids().len() == 1));
}

#[test]
fn continuous_flow_stats_reports_rates() {
    let mut n = net([None, None, None]);
    n.ctl.deploy(&flow_stats(1, Mode::Continuous), 0).unwrap();
    send(&n, 0, 7, 4, 500);
    send(&n, 0, 8, 9, 500);
    n.devs[0].borrow_mut().advance_clock(1_000);
    n.ctl.collect(1_000).unwrap();
    send(&n, 0, 7, 2, 1_500);
    n.devs[0].borrow_mut().advance_clock(2_000);
    n.ctl.collect(2_000).unwrap();
    n.ctl.collect(2_500).unwrap();
    let rows = &n.ctl.results(1).unwrap().rows;
    let got: Vec<_> = rows.iter().map(|r| (r.ts, r.fields[0], r.value)).collect();
    assert_eq!(got, vec![(1_000, 4, Some(4e6)), (2_000, 6, Some(2e6))]);
    assert!(!n.ctl.results(1).unwrap().complete);
}

#[test]
fn one_shot_yields_exactly_one_row() {
    let mut n = net([None, None, None]);
    let before = snapshots(&n);
    n.ctl.deploy(&flow_stats(5, Mode::OneShot), 0).unwrap();
    send(&n, 0, 7, 3, 10);
    n.devs[0].borrow_mut().advance_clock(1_000);
    n.ctl.collect(1_000).unwrap();
    n.ctl.collect(5_000).unwrap();
    let r = n.ctl.results(5).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].fields, vec![3]);
    assert!(r.complete);
    assert_eq!(snapshots(&n), before);
    assert_eq!(n.ctl.revoke_query(5).unwrap().rows.len(), 1);
}

#[test]
fn pushed_reports_route_to_their_query() {
    let mut n = net([None, None, None]);
    let q = Query {
        id: 9,
        mode: Mode::Continuous,
        kind: QueryKind::FilteredMirror { at: Endpoint::new(2, 1), fields: vec![FieldRef::pkt(0, 8)], sample_n: 2, condition: None },
    };
    n.ctl.deploy(&q, 0).unwrap();
    for i in 0..6 {
        send(&n, 1, i, 1, i as u64);
    }
    n.ctl.collect(10).unwrap();
    let rows = &n.ctl.results(9).unwrap().rows;
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.device == 2 && r.value.is_none()));
    assert_eq!(n.ctl.report_log().len(), 3);
}

#[test]
fn unreachable_selectors_fail_before_deploy() {
    let mut n = net([None, None, None]);
    let q = Query {
        id: 1,
        mode: Mode::Continuous,
        kind: QueryKind::LinkLatency { from: Endpoint::new(1, 1), to: Endpoint::new(3, 1), rate: 10 },
    };
    assert!(matches!(n.ctl.deploy(&q, 0), Err(ControllerError::UnresolvedSelector(_))));
    assert!(n.ctl.events().is_empty());
}

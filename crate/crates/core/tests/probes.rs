use dnp_core::probe::*;
use dnp_core::*;
use dnp_core::{field::FieldRef, ids::*, pool::CounterUnit, vm::assemble};
use proptest::prelude::*;

fn tcp(flags: u8, sig: u8) -> Vec<u8> {
    let mut p = vec![0u8; 64];
    p[0] = sig & 3;
    p[23] = 6;
    p[26] = sig;
    p[47] = flags;
    p
}

/// Two tables: table 0 sends some prefixes straight out and the rest to
/// table 1, which forwards by the first byte.
fn device() -> Device {
    let mut d = Device::new(DeviceConfig::new(1, [1, 2, 3]));
    d.create_table(TableDef::new(0, vec![FieldRef::pkt(0, 8)]), Position::End).unwrap();
    d.create_table(TableDef::new(1, vec![FieldRef::pkt(0, 8)]), Position::End).unwrap();
    let (out2, _) = d.load_action(assemble("OUTPUT #2").unwrap()).unwrap();
    let (out3, _) = d.load_action(assemble("OUTPUT #3").unwrap()).unwrap();
    let (next, _) = d.load_action(assemble("GOTO_TABLE 1").unwrap()).unwrap();
    let e = |priority, key, action| EntrySpec { priority, key, action, params: vec![] };
    d.insert_entry(0, e(5, MatchKey::exact(0, 8), out2)).unwrap();
    d.insert_entry(0, e(1, MatchKey::any(), next)).unwrap();
    d.insert_entry(1, e(3, MatchKey::new(1, 1), out3)).unwrap();
    d.insert_entry(1, e(2, MatchKey::any(), out2)).unwrap();
    d
}

fn specs() -> Vec<ProbeSpec> {
    use AttachPoint as A;
    use ProbeKind as K;
    let entry = |key| A::TableEntry { table: 1, key, priority: None };
    vec![
        ProbeSpec::new(K::Counter { unit: CounterUnit::Bytes, condition: None }, entry(MatchKey::any())),
        ProbeSpec::new(
            K::ThresholdPush { threshold: 3, flow_id: Some(FieldRef::pkt(208, 32)), unit: CounterUnit::Packets, condition: None },
            entry(MatchKey::exact(2, 8)),
        ),
        ProbeSpec::new(K::TimerPoll { interval_ns: 500, threshold: 0, unit: CounterUnit::Packets }, A::PortEgress { port: 2 }),
        ProbeSpec::new(K::FsmHalfOpen { layout: TcpLayout::default(), capacity: 64 }, A::TableMiss { table: 1 }),
        ProbeSpec::new(K::FsmHalfOpen { layout: TcpLayout::default(), capacity: 64 }, A::PortIngress { port: 1 }),
        ProbeSpec::new(K::FlowDuration { layout: TcpLayout::default() }, A::PortIngress { port: 1 }),
        ProbeSpec::new(K::QueueWatermark { low: Some(1), high: Some(2) }, A::Queue { port: 2 }),
        ProbeSpec::new(
            K::Filter { digest_fields: vec![FieldRef::pkt(208, 32)], sample_n: 2, condition: None },
            A::TableEntry { table: 0, key: MatchKey::exact(0, 8), priority: None },
        ),
        ProbeSpec::new(K::Filter { digest_fields: vec![], sample_n: 1, condition: None }, A::PortIngress { port: 1 }),
        ProbeSpec { extend_overlaps: true, ..ProbeSpec::new(K::Counter { unit: CounterUnit::Packets, condition: None }, entry(MatchKey::exact(5, 8))) },
        ProbeSpec::new(K::LatencySink, A::PortIngress { port: 1 }),
    ]
}

/// Runs a trace and returns the emitted (port, packet) sequence after queueing.
fn run(d: &mut Device, trace: &[(u8, u8)]) -> Vec<(PortId, Vec<u8>)> {
    let mut out = Vec::new();
    for (i, (flags, sig)) in trace.iter().enumerate() {
        let now = i as u64 * 100;
        d.advance_clock(now);
        let o = d.process_packet(1, tcp(*flags, *sig), now);
        if let Verdict::Forward(p) = o.verdict {
            d.enqueue(p, o.packet, now);
            if i % 2 == 0 {
                while let Some((pkt, _)) = d.dequeue(p, now) {
                    out.push((p, pkt));
                }
            }
        }
    }
    for p in [2, 3] {
        while let Some((pkt, _)) = d.dequeue(p, 0) {
            out.push((p, pkt));
        }
    }
    out
}

fn trace() -> impl Strategy<Value = Vec<(u8, u8)>> {
    prop::collection::vec((prop::sample::select(vec![0x02u8, 0x10, 0x12, 0x11, 0x01, 0x18]), 0u8..8), 1..60)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn probes_are_passive(t in trace(), pick in prop::sample::subsequence((0..11usize).collect::<Vec<_>>(), 1..5)) {
        let mut plain = device();
        let expected = run(&mut plain, &t);
        let mut probed = device();
        let all = specs();
        for i in &pick {
            probed.install(&all[*i]).unwrap();
        }
        prop_assert_eq!(run(&mut probed, &t), expected);
    }

    #[test]
    fn install_revoke_is_identity(pick in prop::sample::subsequence((0..11usize).collect::<Vec<_>>(), 1..6), rev in any::<bool>()) {
        let mut d = device();
        let before = d.snapshot().to_bytes();
        let stats = d.pool_stats();
        let all = specs();
        let mut ids: Vec<ProbeId> = pick.iter().map(|i| d.install(&all[*i]).unwrap()).collect();
        run(&mut d, &[(0x02, 1), (0x10, 1)]);
        if rev {
            ids.reverse();
        }
        for id in ids {
            d.revoke(id, false).unwrap();
        }
        prop_assert_eq!(d.pool_stats(), stats);
        prop_assert_eq!(d.snapshot().to_bytes(), before);
    }
}

#[test]
fn threshold_push_reports_floor_of_matched() {
    let mut d = device();
    let spec = &specs()[1];
    d.install(spec).unwrap();
    let mut reports = 0;
    for i in 0..100 {
        let o = d.process_packet(1, tcp(0x10, 2), i);
        reports += o.effects.reports.len();
    }
    assert_eq!(reports, 100 / 3);
}

#[test]
fn half_open_counter_tracks_syns_minus_acks() {
    let mut d = device();
    let p = d.install(&specs()[4]).unwrap();
    let info = d.probe(p).unwrap();
    let ResourceHandle::Counter(c) = info.handles[0] else { panic!() };
    let ResourceHandle::StateTable(t) = info.handles[1] else { panic!() };
    for sig in 0..5 {
        d.process_packet(1, tcp(0x02, sig), 0);
    }
    d.process_packet(1, tcp(0x02, 0), 0);
    d.process_packet(1, tcp(0x12, 1), 0);
    d.process_packet(1, tcp(0x10, 1), 0);
    d.process_packet(1, tcp(0x10, 3), 0);
    d.process_packet(1, tcp(0x10, 7), 0);
    assert_eq!(d.read_counter(c).unwrap().0, 3);
    assert_eq!(d.stb_dump(t).unwrap().len(), 3);
}

#[test]
fn flow_duration_reports_once_per_flow() {
    let mut d = device();
    let p = d.install(&specs()[5]).unwrap();
    let mut reports = vec![];
    for (flags, ts) in [(0x02, 100), (0x02, 150), (0x10, 200), (0x11, 900), (0x11, 950)] {
        reports.extend(d.process_packet(1, tcp(flags, 1), ts).effects.reports);
    }
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].tag, p.0);
    assert_eq!(reports[0].fields, vec![100, 900, 800]);
}

#[test]
fn timer_poll_pushes_periodically() {
    let mut d = device();
    let p = d.install(&specs()[2]).unwrap();
    for i in 0..4 {
        d.process_packet(1, tcp(0x10, 2), i);
    }
    let eff = d.advance_clock(1000);
    let got: Vec<_> = eff.reports.iter().map(|r| (r.tag, r.fields[..2].to_vec())).collect();
    assert_eq!(got, vec![(p.0, vec![2, 4]), (p.0, vec![2, 0])]);
}

#[test]
fn sampled_digest_filter() {
    let mut d = device();
    d.install(&specs()[7]).unwrap();
    let mut n = 0;
    for _ in 0..10 {
        let o = d.process_packet(1, tcp(0x10, 0), 0);
        assert_eq!(o.verdict, Verdict::Forward(2));
        n += o.effects.reports.len();
    }
    assert_eq!(n, 5);
}

#[test]
fn admitted_count_matches_closed_form() {
    let mut d = device();
    let (budget, floor) = (1_000_000.0, 90_000.0);
    d.set_caps(vm::DeviceCaps::new(100_000.0, budget).with_floor(floor));
    let spec = ProbeSpec::new(
        ProbeKind::Counter { unit: CounterUnit::Packets, condition: None },
        AttachPoint::PortIngress { port: 1 },
    );
    let mut admitted = 0;
    while d.install(&spec).is_ok() {
        admitted += 1;
    }
    assert_eq!(admitted, (budget / (1.0 * floor)).floor() as usize);
    assert!(matches!(d.install(&spec), Err(DeviceError::AdmissionRejected { .. })));
}

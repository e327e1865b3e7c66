//! Generators for protocol messages.

use dnp_core::field::{FieldRef, Space};
use dnp_core::ids::*;
use dnp_core::pool::{AllocRequest, ClassStats, CounterUnit, MeterConfig, StbRecord, TimerMode};
use dnp_core::probe::{AttachPoint, ProbeKind, ProbeSpec, TcpLayout};
use dnp_core::{EntrySpec, MatchKey, Position, Report, TableDef};
use dnp_proto::{Message, ProbeSummary};
use proptest::prelude::*;

pub fn field() -> impl Strategy<Value = FieldRef> {
    (prop::sample::select(vec![Space::Packet, Space::Metadata, Space::Params]), any::<u32>(), 1u8..=128)
        .prop_map(|(s, o, l)| FieldRef::new(s, o, l))
}

pub fn key() -> impl Strategy<Value = MatchKey> {
    (any::<u128>(), any::<u128>()).prop_map(|(v, m)| MatchKey::new(v & m, m))
}

pub fn bytes() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(any::<u8>(), 0..40)
}

pub fn real() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO
}

pub fn handle() -> impl Strategy<Value = ResourceHandle> {
    (0u8..6, any::<u32>()).prop_filter_map("timer", |(c, i)| {
        ResourceHandle::from_parts(ResourceClass::from_code(c).unwrap(), i)
    })
}

pub fn unit() -> impl Strategy<Value = CounterUnit> {
    prop::sample::select(vec![CounterUnit::Packets, CounterUnit::Bytes])
}

pub fn spec() -> impl Strategy<Value = ProbeSpec> {
    (unit(), any::<u64>(), key(), 0u16..8, any::<bool>()).prop_flat_map(|(u, n, k, port, ext)| {
        let specs = vec![
            ProbeSpec::new(ProbeKind::Counter { unit: u, condition: None }, AttachPoint::PortIngress { port }),
            ProbeSpec::new(
                ProbeKind::ThresholdPush { threshold: n, flow_id: Some(FieldRef::pkt(208, 32)), unit: u, condition: None },
                AttachPoint::TableEntry { table: port, key: k, priority: Some(3) },
            ),
            ProbeSpec::new(ProbeKind::FsmHalfOpen { layout: TcpLayout::default(), capacity: 64 }, AttachPoint::TableMiss { table: 1 }),
            ProbeSpec::new(ProbeKind::QueueWatermark { low: Some(1), high: None }, AttachPoint::Queue { port }),
            ProbeSpec::new(ProbeKind::LatencySource { port, interval_ns: n, one_shot: ext }, AttachPoint::Timer),
            ProbeSpec { extend_overlaps: ext, ..ProbeSpec::new(ProbeKind::LatencySink, AttachPoint::PortEgress { port }) },
        ];
        prop::sample::select(specs)
    })
}

pub fn report() -> impl Strategy<Value = Report> {
    (any::<u32>(), any::<u32>(), any::<u64>(), prop::collection::vec(any::<u128>(), 0..5), prop::option::of(bytes()))
        .prop_map(|(device, tag, ts, fields, packet)| Report { device, tag, ts, fields, packet })
}

pub fn alloc() -> impl Strategy<Value = AllocRequest> {
    prop_oneof![
        unit().prop_map(|unit| AllocRequest::Counter { unit }),
        (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>())
            .prop_map(|(cir, cbs, pir, pbs)| AllocRequest::Meter { config: MeterConfig { cir, cbs, pir, pbs } }),
        Just(AllocRequest::Register),
        (any::<u8>(), any::<u32>()).prop_map(|(key_width, capacity)| AllocRequest::StateTable { key_width, capacity }),
        Just(AllocRequest::Sampler),
    ]
}

pub fn message() -> impl Strategy<Value = Message> {
    use Message::*;
    let u = any::<u32>;
    prop_oneof![
        Just(Hello),
        Just(Ack),
        (any::<u16>(), ".{0,20}").prop_map(|(code, detail)| Error { code, detail }),
        Just(FeaturesReq),
        (u(), prop::collection::vec(any::<u16>(), 0..5), real(), real(), real())
            .prop_map(|(device, ports, base_pps, budget, floor)| FeaturesReply { device, ports, base_pps, budget, floor }),
        bytes().prop_map(|block| LoadAction { block }),
        (u(), u()).prop_map(|(s, b)| LoadActionReply { slot: SlotId(s), block: BlockId(b) }),
        u().prop_map(|s| DeleteAction { slot: SlotId(s) }),
        (u(), u()).prop_map(|(s, b)| SwitchPointer { slot: SlotId(s), block: BlockId(b) }),
        bytes().prop_map(|block| LoadBlock { block }),
        u().prop_map(|b| LoadBlockReply { block: BlockId(b) }),
        u().prop_map(|b| DeleteBlock { block: BlockId(b) }),
        (any::<u16>(), prop::collection::vec(field(), 0..4), u(), prop::option::of(u()), any::<bool>(), prop::option::of((any::<u16>(), any::<u16>())))
            .prop_map(|(id, key, max_entries, miss, writable_by_actions, edge)| CreateTable {
                def: TableDef { id, key, max_entries, miss: miss.map(SlotId), writable_by_actions },
                pos: edge.map_or(Position::End, |(from, to)| Position::Edge { from, to }),
            }),
        any::<u16>().prop_map(|table| DeleteTable { table }),
        (any::<u16>(), u(), key(), u(), bytes()).prop_map(|(table, priority, key, a, params)| InsertEntry {
            table,
            spec: EntrySpec { priority, key, action: SlotId(a), params }
        }),
        u().prop_map(|e| InsertEntryReply { entry: EntryId(e) }),
        u().prop_map(|e| DeleteEntry { entry: EntryId(e) }),
        (u(), prop::option::of(u()), prop::option::of(bytes()))
            .prop_map(|(e, a, params)| ModifyEntry { entry: EntryId(e), action: a.map(SlotId), params }),
        (any::<u16>(), u()).prop_map(|(table, s)| SetTableMiss { table, miss: SlotId(s) }),
        alloc().prop_map(|req| AllocResource { req }),
        handle().prop_map(|handle| AllocReply { handle }),
        handle().prop_map(|handle| ReleaseResource { handle }),
        Just(PoolStatsReq),
        prop::collection::btree_map(
            prop::sample::select(ResourceClass::ALL.to_vec()),
            (u(), u(), u()).prop_map(|(capacity, allocated, free)| ClassStats { capacity, allocated, free }),
            0..6
        )
        .prop_map(|stats| PoolStatsReply { stats }),
        (any::<u64>(), any::<bool>(), u()).prop_map(|(interval, p, s)| SetTimer {
            interval,
            mode: if p { TimerMode::Periodic } else { TimerMode::OneShot },
            slot: SlotId(s)
        }),
        u().prop_map(|t| SetTimerReply { timer: TimerId(t) }),
        u().prop_map(|t| CancelTimer { timer: TimerId(t) }),
        u().prop_map(|c| ReadCounterReq { counter: CounterId(c) }),
        (any::<u64>(), unit(), any::<u64>()).prop_map(|(value, unit, ts)| ReadCounterReply { value, unit, ts }),
        u().prop_map(|t| StbDumpReq { table: StbId(t) }),
        prop::collection::vec((any::<u128>(), any::<u64>(), any::<u64>()), 0..4).prop_map(|v| StbDumpReply {
            records: v.into_iter().map(|(key, value, insert_ts)| StbRecord { key, value, insert_ts }).collect()
        }),
        Just(SnapshotReq),
        bytes().prop_map(|bytes| SnapshotReply { bytes }),
        u().prop_map(|r| ReadRegisterReq { register: RegisterId(r) }),
        any::<u64>().prop_map(|value| ReadRegisterReply { value }),
        spec().prop_map(|spec| ProbeInstall { spec }),
        (u(), prop::collection::vec(handle(), 0..4), prop::collection::vec(u(), 0..4)).prop_map(|(p, handles, o)| {
            ProbeInstalled { probe: ProbeId(p), handles, overlaps: o.into_iter().map(EntryId).collect() }
        }),
        (u(), any::<bool>()).prop_map(|(p, force)| ProbeRevoke { probe: ProbeId(p), force }),
        (u(), u()).prop_map(|(p, a)| Subscribe { probe: ProbeId(p), app: AppId(a) }),
        (u(), u()).prop_map(|(p, a)| Unsubscribe { probe: ProbeId(p), app: AppId(a) }),
        u().prop_map(|count| SubscriberCount { count }),
        spec().prop_map(|spec| ProbeCheck { spec }),
        (any::<bool>(), real(), real(), u(), u())
            .prop_map(|(accept, estimate, floor, cost, active)| ProbeCheckReply { accept, estimate, floor, cost, active }),
        Just(ProbeListReq),
        prop::collection::vec((u(), spec(), prop::collection::vec(handle(), 0..3), u(), u()), 0..3).prop_map(|v| {
            ProbeList {
                probes: v
                    .into_iter()
                    .map(|(p, spec, handles, locations, cost)| ProbeSummary {
                        probe: ProbeId(p),
                        spec,
                        handles,
                        subscribers: vec![AppId(p / 2)],
                        locations,
                        cost,
                    })
                    .collect(),
            }
        }),
        report().prop_map(Report),
        prop::option::of(u()).prop_map(|step| InjectFault { step }),
    ]
}

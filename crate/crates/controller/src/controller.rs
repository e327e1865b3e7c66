use std::collections::{BTreeMap, BTreeSet};

use dnp_core::ids::*;
use dnp_core::vm::{estimate_throughput, DeviceCaps};
use dnp_core::{Report, TAG_DIAGNOSTIC, TAG_PACKET_IN};
use dnp_proto::{Channel, Message};

use crate::query::{compile, Mode, PostProcess, Query, QueryId, QueryPlan};
use crate::result::{ResultSet, Row};
use crate::topology::Topology;
use crate::ControllerError;

struct Conn {
    ch: Box<dyn Channel>,
    caps: DeviceCaps,
}

#[derive(Debug, Clone)]
pub struct Deployed {
    pub device: DeviceId,
    pub probe: ProbeId,
    pub handles: Vec<ResourceHandle>,
    pub poll: bool,
}

#[derive(Debug, Clone)]
struct Shared {
    probe: ProbeId,
    handles: Vec<ResourceHandle>,
}

#[derive(Debug, Default, Clone)]
struct SourceState {
    last: Option<(u64, u128)>,
    sum: u128,
    count: u64,
}

struct Active {
    query: Query,
    plan: QueryPlan,
    probes: Vec<Deployed>,
    live: bool,
    next_poll: Option<u64>,
    state: BTreeMap<(DeviceId, ProbeId), SourceState>,
    result: ResultSet,
}

/// A record of one control action taken during deployment or revocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlEvent {
    Installed { device: DeviceId, probe: ProbeId },
    Subscribed { device: DeviceId, probe: ProbeId, app: AppId },
    Unsubscribed { device: DeviceId, probe: ProbeId, app: AppId },
    Revoked { device: DeviceId, probe: ProbeId },
}

/// Compiles queries, deploys them across devices, and turns polls and
/// pushed reports into result rows. Each query subscribes to its probes as
/// application `AppId(query id)`.
pub struct Controller {
    topo: Topology,
    conns: BTreeMap<DeviceId, Conn>,
    queries: BTreeMap<QueryId, Active>,
    shared: BTreeMap<(DeviceId, String), Shared>,
    routes: BTreeMap<(DeviceId, ProbeId), BTreeSet<QueryId>>,
    report_log: Vec<Report>,
    events: Vec<ControlEvent>,
}

fn unexpected(device: DeviceId, m: Message) -> ControllerError {
    ControllerError::UnexpectedReply { device, got: m.name().to_string() }
}

impl Controller {
    pub fn new(topo: Topology) -> Result<Self, ControllerError> {
        topo.validate()?;
        Ok(Controller {
            topo,
            conns: BTreeMap::new(),
            queries: BTreeMap::new(),
            shared: BTreeMap::new(),
            routes: BTreeMap::new(),
            report_log: Vec::new(),
            events: Vec::new(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Greets the device and records its capabilities.
    pub fn connect(&mut self, device: DeviceId, mut ch: Box<dyn Channel>) -> Result<(), ControllerError> {
        if self.topo.device(device).is_none() {
            return Err(ControllerError::UnresolvedSelector(format!("no device {device}")));
        }
        let err = |source| ControllerError::Session { device, source };
        match ch.call(Message::Hello).map_err(err)? {
            Message::Hello => {}
            m => return Err(unexpected(device, m)),
        }
        let caps = match ch.call(Message::FeaturesReq).map_err(err)? {
            Message::FeaturesReply { device: id, base_pps, budget, floor, .. } if id == device => {
                DeviceCaps::new(base_pps, budget).with_floor(floor)
            }
            m => return Err(unexpected(device, m)),
        };
        self.conns.insert(device, Conn { ch, caps });
        Ok(())
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        self.conns.keys().copied().collect()
    }

    pub fn caps(&self, device: DeviceId) -> Option<DeviceCaps> {
        self.conns.get(&device).map(|c| c.caps)
    }

    /// Sends one request; an `Error` reply becomes `SessionError::Remote`.
    pub fn call(&mut self, device: DeviceId, msg: Message) -> Result<Message, ControllerError> {
        let conn = self.conns.get_mut(&device).ok_or(ControllerError::NotConnected(device))?;
        conn.ch.call(msg).map_err(|source| ControllerError::Session { device, source })
    }

    pub fn compile(&self, q: &Query) -> Result<QueryPlan, ControllerError> {
        compile(q, &self.topo)
    }

    /// Admits, then commits, every probe of the query's plan. Admission is
    /// checked on all devices before anything is installed. If any commit
    /// fails, everything this deployment did is undone.
    pub fn deploy(&mut self, q: &Query, now: u64) -> Result<QueryId, ControllerError> {
        if self.queries.contains_key(&q.id) {
            return Err(ControllerError::DuplicateQuery(q.id));
        }
        let plan = self.compile(q)?;
        let order = plan.topo_order()?;
        for p in &plan.probes {
            if !self.conns.contains_key(&p.device) {
                return Err(ControllerError::NotConnected(p.device));
            }
        }
        self.admit(&plan)?;

        let app = AppId(q.id);
        let mut done: Vec<(DeviceId, ProbeId, bool, bool)> = Vec::new();
        let mut deployed = vec![None; plan.probes.len()];
        for i in order {
            let p = &plan.probes[i];
            let key = (p.device, serde_json::to_string(&p.spec).expect("specs serialize"));
            let step = self.deploy_one(p.device, key, &p.spec, app, &mut done);
            match step {
                Ok(d) => deployed[i] = Some(Deployed { poll: p.poll, ..d }),
                Err(cause) => {
                    self.rollback(app, done);
                    return Err(ControllerError::DeployFailed { device: p.device, cause: cause.to_string() });
                }
            }
        }
        let probes: Vec<Deployed> = deployed.into_iter().map(|d| d.expect("every probe deployed")).collect();
        let mut state = BTreeMap::new();
        for d in &probes {
            self.routes.entry((d.device, d.probe)).or_default().insert(q.id);
            if d.poll {
                state.insert((d.device, d.probe), SourceState { last: Some((now, 0)), ..Default::default() });
            }
        }
        let next_poll = match (plan.mode, plan.poll_ns) {
            (_, Some(p)) => Some(now + p),
            (Mode::OneShot, None) if probes.iter().any(|d| d.poll) => Some(now),
            _ => None,
        };
        self.queries.insert(
            q.id,
            Active { query: q.clone(), plan, probes, live: true, next_poll, state, result: ResultSet::new(q.id) },
        );
        Ok(q.id)
    }

    fn admit(&mut self, plan: &QueryPlan) -> Result<(), ControllerError> {
        let mut fresh: BTreeMap<DeviceId, Vec<String>> = BTreeMap::new();
        for p in &plan.probes {
            let key = serde_json::to_string(&p.spec).expect("specs serialize");
            if !self.shared.contains_key(&(p.device, key.clone())) {
                let keys = fresh.entry(p.device).or_default();
                if !keys.contains(&key) {
                    keys.push(key);
                }
            }
        }
        for (device, keys) in fresh {
            let mut active = 0u64;
            let mut added = 0u64;
            for key in keys {
                let spec = serde_json::from_str(&key).expect("spec round-trips");
                match self.call(device, Message::ProbeCheck { spec }) {
                    Ok(Message::ProbeCheckReply { cost, active: a, .. }) => {
                        active = a as u64;
                        added += cost as u64;
                    }
                    Ok(m) => return Err(unexpected(device, m)),
                    Err(e) => return Err(ControllerError::DeployFailed { device, cause: e.to_string() }),
                }
            }
            let caps = self.conns[&device].caps;
            let estimate = estimate_throughput(active + added, &caps);
            if estimate < caps.throughput_floor {
                return Err(ControllerError::AdmissionRejected { device, estimate, floor: caps.throughput_floor });
            }
        }
        Ok(())
    }

    fn deploy_one(
        &mut self,
        device: DeviceId,
        key: (DeviceId, String),
        spec: &dnp_core::probe::ProbeSpec,
        app: AppId,
        done: &mut Vec<(DeviceId, ProbeId, bool, bool)>,
    ) -> Result<Deployed, ControllerError> {
        let (probe, handles) = match self.shared.get(&key) {
            Some(s) => {
                done.push((device, s.probe, false, false));
                (s.probe, s.handles.clone())
            }
            None => match self.call(device, Message::ProbeInstall { spec: spec.clone() })? {
                Message::ProbeInstalled { probe, handles, .. } => {
                    self.events.push(ControlEvent::Installed { device, probe });
                    self.shared.insert(key, Shared { probe, handles: handles.clone() });
                    done.push((device, probe, true, false));
                    (probe, handles)
                }
                m => return Err(unexpected(device, m)),
            },
        };
        match self.call(device, Message::Subscribe { probe, app })? {
            Message::SubscriberCount { .. } => {}
            m => return Err(unexpected(device, m)),
        }
        self.events.push(ControlEvent::Subscribed { device, probe, app });
        done.last_mut().expect("pushed above").3 = true;
        Ok(Deployed { device, probe, handles, poll: false })
    }

    fn rollback(&mut self, app: AppId, done: Vec<(DeviceId, ProbeId, bool, bool)>) {
        for (device, probe, fresh, subscribed) in done.into_iter().rev() {
            if subscribed && self.call(device, Message::Unsubscribe { probe, app }).is_ok() {
                self.events.push(ControlEvent::Unsubscribed { device, probe, app });
            }
            if fresh && self.call(device, Message::ProbeRevoke { probe, force: true }).is_ok() {
                self.events.push(ControlEvent::Revoked { device, probe });
                self.shared.retain(|(d, _), s| !(*d == device && s.probe == probe));
            }
        }
    }

    /// Unsubscribes the query from its probes and revokes every probe left
    /// without subscribers. Returns the query's results.
    pub fn revoke_query(&mut self, id: QueryId) -> Result<ResultSet, ControllerError> {
        let mut q = self.queries.remove(&id).ok_or(ControllerError::NoSuchQuery(id))?;
        if q.live {
            self.release(&mut q)?;
        }
        Ok(q.result)
    }

    fn release(&mut self, q: &mut Active) -> Result<(), ControllerError> {
        q.live = false;
        let app = AppId(q.query.id);
        let mut seen = BTreeSet::new();
        for d in &q.probes {
            if !seen.insert((d.device, d.probe)) {
                continue;
            }
            if let Some(qs) = self.routes.get_mut(&(d.device, d.probe)) {
                qs.remove(&q.query.id);
                if qs.is_empty() {
                    self.routes.remove(&(d.device, d.probe));
                }
            }
            let left = match self.call(d.device, Message::Unsubscribe { probe: d.probe, app })? {
                Message::SubscriberCount { count } => count,
                m => return Err(unexpected(d.device, m)),
            };
            self.events.push(ControlEvent::Unsubscribed { device: d.device, probe: d.probe, app });
            if left == 0 {
                self.call(d.device, Message::ProbeRevoke { probe: d.probe, force: false })?;
                self.events.push(ControlEvent::Revoked { device: d.device, probe: d.probe });
                self.shared.retain(|(dev, _), s| !(*dev == d.device && s.probe == d.probe));
            }
        }
        Ok(())
    }

    /// Drains pushed reports and runs due polls, appending rows to the
    /// affected queries. One-shot queries complete on their first row and
    /// release their probes. Returns the number of rows added.
    pub fn collect(&mut self, now: u64) -> Result<usize, ControllerError> {
        let mut added = 0;
        let mut reports = Vec::new();
        for conn in self.conns.values_mut() {
            reports.extend(conn.ch.drain_reports());
        }
        let mut fresh: BTreeMap<QueryId, Vec<Row>> = BTreeMap::new();
        for r in reports {
            if r.tag != TAG_PACKET_IN && r.tag != TAG_DIAGNOSTIC {
                if let Some(qs) = self.routes.get(&(r.device, ProbeId(r.tag))) {
                    for q in qs {
                        fresh.entry(*q).or_default().push(Row {
                            ts: r.ts,
                            device: r.device,
                            probe: ProbeId(r.tag),
                            fields: r.fields.clone(),
                            value: None,
                        });
                    }
                }
            }
            self.report_log.push(r);
        }

        let due: Vec<QueryId> = self
            .queries
            .iter()
            .filter(|(_, a)| a.live && a.next_poll.is_some_and(|t| t <= now))
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            let targets: Vec<(DeviceId, ProbeId, CounterId)> = self.queries[&id]
                .probes
                .iter()
                .filter(|d| d.poll)
                .filter_map(|d| match d.handles.first() {
                    Some(ResourceHandle::Counter(c)) => Some((d.device, d.probe, *c)),
                    _ => None,
                })
                .collect();
            for (device, probe, counter) in targets {
                match self.call(device, Message::ReadCounterReq { counter })? {
                    Message::ReadCounterReply { value, ts, .. } => fresh.entry(id).or_default().push(Row {
                        ts,
                        device,
                        probe,
                        fields: vec![value as u128],
                        value: None,
                    }),
                    m => return Err(unexpected(device, m)),
                }
            }
            let a = self.queries.get_mut(&id).expect("due query exists");
            a.next_poll = match (a.plan.mode, a.plan.poll_ns) {
                (Mode::Continuous, Some(p)) => {
                    let t = a.next_poll.expect("due");
                    Some(t + p * ((now - t) / p + 1))
                }
                _ => None,
            };
        }

        let mut finished = Vec::new();
        for (id, mut rows) in fresh {
            let Some(a) = self.queries.get_mut(&id) else { continue };
            if !a.live {
                continue;
            }
            rows.sort_by_key(|r| r.ts);
            for mut row in rows {
                let st = a.state.entry((row.device, row.probe)).or_default();
                row.value = reduce(a.plan.post, st, &row);
                a.result.rows.push(row);
                added += 1;
                if a.plan.mode == Mode::OneShot {
                    a.result.complete = true;
                    finished.push(id);
                    break;
                }
            }
        }
        for id in finished {
            let mut a = self.queries.remove(&id).expect("finished query exists");
            let r = self.release(&mut a);
            self.queries.insert(id, a);
            r?;
        }
        Ok(added)
    }

    pub fn results(&self, id: QueryId) -> Option<&ResultSet> {
        self.queries.get(&id).map(|a| &a.result)
    }

    pub fn query_ids(&self) -> Vec<QueryId> {
        self.queries.keys().copied().collect()
    }

    pub fn query(&self, id: QueryId) -> Option<(&Query, &QueryPlan, &[Deployed], bool)> {
        self.queries.get(&id).map(|a| (&a.query, &a.plan, a.probes.as_slice(), a.live))
    }

    /// Every report received from any device, in arrival order.
    pub fn report_log(&self) -> &[Report] {
        &self.report_log
    }

    /// Control actions taken so far, in order.
    pub fn events(&self) -> &[ControlEvent] {
        &self.events
    }
}

fn reduce(post: PostProcess, st: &mut SourceState, row: &Row) -> Option<f64> {
    let f = |i: usize| row.fields.get(i).copied();
    st.count += 1;
    match post {
        PostProcess::Subtract { minuend, subtrahend } => {
            let (a, b) = (f(minuend)?, f(subtrahend)?);
            Some(a as f64 - b as f64)
        }
        PostProcess::Sum { field } => {
            st.sum += f(field)?;
            Some(st.sum as f64)
        }
        PostProcess::Rate => {
            let v = f(0)?;
            let prev = st.last.replace((row.ts, v));
            match prev {
                Some((t0, v0)) if row.ts > t0 => Some((v as f64 - v0 as f64) * 1e9 / (row.ts - t0) as f64),
                _ => None,
            }
        }
        PostProcess::Count => Some(st.count as f64),
        PostProcess::Dump => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(ts: u64, fields: Vec<u128>) -> Row {
        Row { ts, device: 1, probe: ProbeId(1), fields, value: None }
    }

    #[test]
    fn reductions() {
        let mut st = SourceState { last: Some((0, 0)), ..Default::default() };
        assert_eq!(reduce(PostProcess::Rate, &mut st, &row(500_000_000, vec![10])), Some(20.0));
        assert_eq!(reduce(PostProcess::Rate, &mut st, &row(1_000_000_000, vec![15])), Some(10.0));
        let mut st = SourceState::default();
        assert_eq!(reduce(PostProcess::Rate, &mut st, &row(5, vec![15])), None);
        assert_eq!(reduce(PostProcess::Subtract { minuend: 1, subtrahend: 0 }, &mut st, &row(0, vec![3, 8])), Some(5.0));
        let mut st = SourceState::default();
        reduce(PostProcess::Sum { field: 0 }, &mut st, &row(0, vec![3]));
        assert_eq!(reduce(PostProcess::Sum { field: 0 }, &mut st, &row(0, vec![4])), Some(7.0));
        assert_eq!(reduce(PostProcess::Count, &mut st, &row(0, vec![])), Some(3.0));
        assert_eq!(reduce(PostProcess::Dump, &mut st, &row(0, vec![1])), None);
    }
}

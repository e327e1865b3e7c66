//! Device-side request handling.

use dnp_core::probe::Admission;
use dnp_core::vm::decode_block;
use dnp_core::{Device, DeviceError};

use crate::msg::{Message, ProbeSummary, ERR_BAD_FRAME, ERR_UNSUPPORTED};

fn error(e: DeviceError) -> Message {
    Message::Error { code: e.code(), detail: e.to_string() }
}

/// Serves one request against `dev` and returns the reply. Device errors
/// become `Error` replies carrying the device error code.
pub fn handle(dev: &mut Device, msg: Message) -> Message {
    match serve(dev, msg) {
        Ok(m) => m,
        Err(e) => error(e),
    }
}

fn serve(dev: &mut Device, msg: Message) -> Result<Message, DeviceError> {
    use Message::*;
    Ok(match msg {
        Hello => Hello,
        FeaturesReq => {
            let caps = *dev.caps();
            FeaturesReply {
                device: dev.id(),
                ports: dev.ports().iter().map(|p| p.id).collect(),
                base_pps: caps.base_pps,
                budget: caps.mem_access_budget,
                floor: caps.throughput_floor,
            }
        }
        LoadAction { block } => {
            let Some(block) = decode_block(&block).ok() else {
                return Ok(Error { code: ERR_BAD_FRAME, detail: "undecodable action block".into() });
            };
            let (slot, block) = dev.load_action(block)?;
            LoadActionReply { slot, block }
        }
        DeleteAction { slot } => {
            dev.delete_action(slot)?;
            Ack
        }
        SwitchPointer { slot, block } => {
            dev.switch_action_pointer(slot, block)?;
            Ack
        }
        LoadBlock { block } => {
            let Some(block) = decode_block(&block).ok() else {
                return Ok(Error { code: ERR_BAD_FRAME, detail: "undecodable action block".into() });
            };
            LoadBlockReply { block: dev.load_block(block)? }
        }
        DeleteBlock { block } => {
            dev.delete_block(block)?;
            Ack
        }
        CreateTable { def, pos } => {
            dev.create_table(def, pos)?;
            Ack
        }
        DeleteTable { table } => {
            dev.delete_table(table)?;
            Ack
        }
        InsertEntry { table, spec } => InsertEntryReply { entry: dev.insert_entry(table, spec)? },
        DeleteEntry { entry } => {
            dev.delete_entry(entry)?;
            Ack
        }
        ModifyEntry { entry, action, params } => {
            dev.modify_entry(entry, action, params)?;
            Ack
        }
        SetTableMiss { table, miss } => {
            dev.set_table_miss(table, miss)?;
            Ack
        }
        AllocResource { req } => AllocReply { handle: dev.alloc(req)? },
        ReleaseResource { handle } => {
            dev.release(handle)?;
            Ack
        }
        PoolStatsReq => PoolStatsReply { stats: dev.pool_stats() },
        SetTimer { interval, mode, slot } => SetTimerReply { timer: dev.set_timer(interval, mode, slot)? },
        CancelTimer { timer } => {
            dev.cancel_timer(timer)?;
            Ack
        }
        ReadCounterReq { counter } => {
            let (value, unit, ts) = dev.read_counter(counter)?;
            ReadCounterReply { value, unit, ts }
        }
        StbDumpReq { table } => StbDumpReply { records: dev.stb_dump(table)? },
        SnapshotReq => SnapshotReply { bytes: dev.snapshot().to_bytes() },
        ReadRegisterReq { register } => ReadRegisterReply { value: dev.read_register(register)? },
        ProbeInstall { spec } => {
            let plan = dev.plan_install(&spec)?;
            if let Admission::Reject { estimate, floor } = dev.admission_check(&plan) {
                return Err(DeviceError::AdmissionRejected { estimate, floor });
            }
            let (handles, overlaps) = (plan.handles.clone(), plan.overlaps.clone());
            ProbeInstalled { probe: dev.commit(plan)?, handles, overlaps }
        }
        ProbeRevoke { probe, force } => {
            dev.revoke(probe, force)?;
            Ack
        }
        Subscribe { probe, app } => SubscriberCount { count: dev.subscribe(probe, app)? as u32 },
        Unsubscribe { probe, app } => SubscriberCount { count: dev.unsubscribe(probe, app)? as u32 },
        ProbeCheck { spec } => {
            let plan = dev.plan_install(&spec)?;
            let floor = dev.caps().throughput_floor;
            let (accept, estimate) = match dev.admission_check(&plan) {
                Admission::Accept { estimate } => (true, estimate),
                Admission::Reject { estimate, .. } => (false, estimate),
            };
            ProbeCheckReply {
                accept,
                estimate,
                floor,
                cost: plan.cost_delta.mem_accesses,
                active: dev.active_cost().mem_accesses,
            }
        }
        ProbeListReq => {
            let mut probes = Vec::new();
            for id in dev.probe_ids() {
                let p = dev.probe(id)?;
                probes.push(ProbeSummary {
                    probe: id,
                    spec: p.spec,
                    handles: p.handles,
                    subscribers: p.subscribers.into_iter().collect(),
                    locations: p.locations.len() as u32,
                    cost: p.cost.mem_accesses,
                });
            }
            ProbeList { probes }
        }
        InjectFault { step } => {
            dev.inject_fault(step.map(|s| s as usize));
            Ack
        }
        other => Error { code: ERR_UNSUPPORTED, detail: format!("{} is not a request", other.name()) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dnp_core::ids::CounterId;
    use dnp_core::DeviceConfig;

    #[test]
    fn unknown_counter_is_device_error() {
        let mut d = Device::new(DeviceConfig::new(1, [1]));
        let r = handle(&mut d, Message::ReadCounterReq { counter: CounterId(9) });
        assert!(matches!(r, Message::Error { code, .. } if code != ERR_UNSUPPORTED && code != ERR_BAD_FRAME));
    }

    #[test]
    fn replies_are_not_requests() {
        let mut d = Device::new(DeviceConfig::new(1, [1]));
        let r = handle(&mut d, Message::Ack);
        assert!(matches!(r, Message::Error { code: ERR_UNSUPPORTED, .. }));
    }
}

//! Seeded TCP traffic and the binary trace file format.
//!
//! Generated packets are Ethernet/IPv4/TCP shaped: byte 0 carries the
//! destination port used by the built-in pipelines, bytes 12..14 the IPv4
//! ethertype, byte 23 the IP protocol, bytes 26..38 the flow signature
//! (addresses and ports) and byte 47 the TCP flags.

use std::io::{self, Read, Write};

use dnp_controller::Endpoint;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const FIN: u8 = 0x01;
pub const SYN: u8 = 0x02;
pub const PSH: u8 = 0x08;
pub const ACK: u8 = 0x10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracePacket {
    pub ts: u64,
    pub ingress: Endpoint,
    pub bytes: Vec<u8>,
}

/// One generated TCP flow.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowInfo {
    pub sig: [u8; 12],
    pub dst: u8,
    /// Flow never sends an ACK after its SYN.
    pub half_open: bool,
    pub packets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrafficProfile {
    pub seed: u64,
    pub n_flows: usize,
    /// Data packets per completed flow, besides SYN, ACK and FIN.
    pub data_packets: (usize, usize),
    pub sizes: (usize, usize),
    /// Fraction of flows that stop after the SYN.
    pub half_open_fraction: f64,
    /// Mean packets per second across all flows.
    pub rate_pps: u64,
    pub start_ns: u64,
    /// Where packets enter the network.
    pub ingress: Vec<Endpoint>,
    /// Destination byte values drawn per flow.
    pub dsts: Vec<u8>,
}

impl Default for TrafficProfile {
    fn default() -> Self {
        TrafficProfile {
            seed: 1,
            n_flows: 100,
            data_packets: (1, 8),
            sizes: (64, 1500),
            half_open_fraction: 0.0,
            rate_pps: 1_000_000,
            start_ns: 0,
            ingress: vec![Endpoint::new(1, 1)],
            dsts: vec![2],
        }
    }
}

/// Writes a TCP packet of `size` bytes.
pub fn tcp_packet(dst: u8, sig: &[u8; 12], flags: u8, size: usize) -> Vec<u8> {
    let mut p = vec![0u8; size.max(64)];
    p[0] = dst;
    p[12] = 0x08;
    p[13] = 0x00;
    p[14] = 0x45;
    p[23] = 6;
    p[26..38].copy_from_slice(sig);
    p[46] = 0x50;
    p[47] = flags;
    p
}

impl TrafficProfile {
    /// The flows and the packet sequence. Packets of different flows are
    /// interleaved at random; each flow keeps its own order. The same
    /// profile always yields the same output.
    pub fn generate(&self) -> (Vec<FlowInfo>, Vec<TracePacket>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut flows = Vec::with_capacity(self.n_flows);
        let mut per_flow: Vec<Vec<(u8, usize)>> = Vec::with_capacity(self.n_flows);
        let mut seen = std::collections::BTreeSet::new();
        while flows.len() < self.n_flows {
            let mut sig = [0u8; 12];
            rng.fill(&mut sig);
            if !seen.insert(sig) {
                continue;
            }
            let dst = *self.dsts.choose(&mut rng).expect("at least one destination");
            let half_open = rng.gen_bool(self.half_open_fraction.clamp(0.0, 1.0));
            let mut pkts = vec![(SYN, 64)];
            if !half_open {
                pkts.push((ACK, 64));
                let n = rng.gen_range(self.data_packets.0..=self.data_packets.1);
                for _ in 0..n {
                    pkts.push((ACK | PSH, rng.gen_range(self.sizes.0..=self.sizes.1)));
                }
                pkts.push((FIN | ACK, 64));
            }
            flows.push(FlowInfo { sig, dst, half_open, packets: pkts.len() });
            per_flow.push(pkts);
        }
        let total: usize = per_flow.iter().map(Vec::len).sum();
        let mut slots: Vec<usize> = per_flow.iter().enumerate().flat_map(|(i, p)| std::iter::repeat_n(i, p.len())).collect();
        slots.shuffle(&mut rng);
        let mut next = vec![0usize; per_flow.len()];
        let gap = 1_000_000_000 / self.rate_pps.max(1);
        let mut out = Vec::with_capacity(total);
        for (k, f) in slots.into_iter().enumerate() {
            let (flags, size) = per_flow[f][next[f]];
            next[f] += 1;
            let ingress = self.ingress[f % self.ingress.len()];
            out.push(TracePacket {
                ts: self.start_ns + k as u64 * gap,
                ingress,
                bytes: tcp_packet(flows[f].dst, &flows[f].sig, flags, size),
            });
        }
        (flows, out)
    }
}

/// Trace files are a sequence of records: ts u64, device u32, port u16,
/// length u32, then the packet bytes; all little-endian.
pub fn write_trace(w: &mut impl Write, packets: &[TracePacket]) -> io::Result<()> {
    for p in packets {
        w.write_all(&p.ts.to_le_bytes())?;
        w.write_all(&p.ingress.device.to_le_bytes())?;
        w.write_all(&p.ingress.port.to_le_bytes())?;
        w.write_all(&(p.bytes.len() as u32).to_le_bytes())?;
        w.write_all(&p.bytes)?;
    }
    Ok(())
}

pub fn read_trace(r: &mut impl Read) -> io::Result<Vec<TracePacket>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut out = Vec::new();
    let mut at = 0;
    let bad = || io::Error::new(io::ErrorKind::InvalidData, "truncated trace record");
    while at < buf.len() {
        let head = buf.get(at..at + 18).ok_or_else(bad)?;
        let ts = u64::from_le_bytes(head[0..8].try_into().expect("8 bytes"));
        let device = u32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
        let port = u16::from_le_bytes(head[12..14].try_into().expect("2 bytes"));
        let len = u32::from_le_bytes(head[14..18].try_into().expect("4 bytes")) as usize;
        let bytes = buf.get(at + 18..at + 18 + len).ok_or_else(bad)?.to_vec();
        out.push(TracePacket { ts, ingress: Endpoint::new(device, port), bytes });
        at += 18 + len;
    }
    Ok(out)
}

//! Wall-clock forwarding throughput against the number of counter probes
//! each packet passes.

use std::time::{Duration, Instant};

use dnp_core::config::PipelineConfig;
use dnp_core::pool::CounterUnit;
use dnp_core::probe::{AttachPoint, ProbeKind, ProbeSpec};
use dnp_core::vm::{estimate_throughput, DeviceCaps, MAX_BLOCK_LEN};
use dnp_core::{Device, MatchKey, Verdict};
use serde::{Deserialize, Serialize};

use crate::traffic::tcp_packet;
use crate::HarnessError;

/// Counters placed at one location, leaving room in the block for the
/// base action.
pub const PER_LOCATION: usize = MAX_BLOCK_LEN - 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOpts {
    /// Ingress port of the synthetic packets.
    pub in_port: u16,
    /// Destination byte of the synthetic packets.
    pub dst: u8,
    /// Locations the packets pass. Counters fill the first location up to
    /// [`PER_LOCATION`], then the next.
    pub locations: Vec<AttachPoint>,
    pub runs: usize,
    /// Length of one measurement.
    pub window: Duration,
    pub packets: usize,
}

impl BenchOpts {
    /// For the single-table route pipeline, traffic 1 → 2.
    pub fn route() -> Self {
        BenchOpts {
            in_port: 1,
            dst: 2,
            locations: vec![
                AttachPoint::TableEntry { table: 0, key: MatchKey::exact(2, 8), priority: None },
                AttachPoint::PortIngress { port: 1 },
                AttachPoint::PortEgress { port: 2 },
            ],
            runs: 3,
            window: Duration::from_millis(100),
            packets: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub mem_accesses: u64,
    pub runs: Vec<f64>,
    pub pps: f64,
    pub predicted: f64,
}

impl BenchPoint {
    pub fn ratio(&self) -> f64 {
        self.pps / self.predicted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchCurve {
    /// Cost model fitted on the calibration pass.
    pub caps: DeviceCaps,
    pub points: Vec<BenchPoint>,
}

impl BenchCurve {
    /// Comma-separated, one point per line, with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,mem_accesses,pps,predicted,ratio\n");
        for p in &self.points {
            s.push_str(&format!("{},{},{:.0},{:.0},{:.4}\n", p.n, p.mem_accesses, p.pps, p.predicted, p.ratio()));
        }
        s
    }

    /// Largest measured/predicted factor, either direction, over `n` in
    /// `range`.
    pub fn worst_factor(&self, range: std::ops::RangeInclusive<usize>) -> f64 {
        self.points
            .iter()
            .filter(|p| range.contains(&p.n))
            .map(|p| p.ratio().max(1.0 / p.ratio()))
            .fold(1.0, f64::max)
    }

    /// Whether every point is at most `slack` (relative) above the one
    /// before it.
    pub fn non_increasing(&self, slack: f64) -> bool {
        self.points.windows(2).all(|w| w[1].pps <= w[0].pps * (1.0 + slack))
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// A device from `cfg` with `n` packet counters on the locations.
/// Admission is opened up so that only the measurement limits `n`.
pub fn bench_device(cfg: &PipelineConfig, n: usize, opts: &BenchOpts) -> Result<Device, HarnessError> {
    let mut d = cfg.build().map_err(|e| HarnessError::Config(e.to_string()))?;
    d.set_caps(DeviceCaps::new(f64::MAX, f64::MAX).with_floor(0.0));
    if n > PER_LOCATION * opts.locations.len() {
        return Err(HarnessError::Config(format!("{n} counters exceed the bench locations")));
    }
    for i in 0..n {
        let attach = opts.locations[i / PER_LOCATION];
        let spec = ProbeSpec::new(ProbeKind::Counter { unit: CounterUnit::Packets, condition: None }, attach);
        d.install(&spec).map_err(|e| HarnessError::Config(format!("counter {i}: {e}")))?;
    }
    Ok(d)
}

fn measure(d: &mut Device, pkts: &[Vec<u8>], in_port: u16, window: Duration) -> f64 {
    let start = Instant::now();
    let mut count = 0u64;
    let mut now = 0u64;
    loop {
        for p in pkts {
            now += 1;
            let out = d.process_packet(in_port, p.clone(), now);
            debug_assert!(matches!(out.verdict, Verdict::Forward(_)));
            std::hint::black_box(out);
        }
        count += pkts.len() as u64;
        let el = start.elapsed();
        if el >= window {
            return count as f64 / el.as_secs_f64();
        }
    }
}

fn pass(cfg: &PipelineConfig, counts: &[usize], opts: &BenchOpts, runs: usize) -> Result<Vec<(u64, Vec<f64>)>, HarnessError> {
    let pkts: Vec<Vec<u8>> = (0..opts.packets)
        .map(|i| {
            let mut sig = [0u8; 12];
            sig[..8].copy_from_slice(&(i as u64).to_le_bytes());
            tcp_packet(opts.dst, &sig, 0x10, 64 + (i * 23) % 1400)
        })
        .collect();
    let mut devs = Vec::new();
    for &n in counts {
        let d = bench_device(cfg, n, opts)?;
        let acc = d.active_cost().mem_accesses as u64;
        devs.push((d, acc));
    }
    let mut out: Vec<(u64, Vec<f64>)> = devs.iter().map(|(_, a)| (*a, Vec::new())).collect();
    // warm-up, then runs interleaved across n so drift hits every point alike
    for (d, _) in &mut devs {
        measure(d, &pkts, opts.in_port, opts.window / 4);
    }
    for _ in 0..runs {
        for (i, (d, _)) in devs.iter_mut().enumerate() {
            out[i].1.push(measure(d, &pkts, opts.in_port, opts.window));
        }
    }
    Ok(out)
}

fn worst_log_error(caps: &DeviceCaps, pts: &[(u64, f64)]) -> f64 {
    pts.iter().map(|&(a, pps)| (pps / estimate_throughput(a, caps)).ln().abs()).fold(0.0, f64::max)
}

/// Fits `base_pps` and the memory access budget of the cost model to
/// measured (accesses, pps) pairs with accesses > 0, minimizing the worst
/// log error. Grid search in log space around the measured range.
pub fn calibrate(points: &[(u64, f64)]) -> DeviceCaps {
    let pts: Vec<(u64, f64)> = points.iter().copied().filter(|p| p.0 > 0).collect();
    let Some(top) = pts.iter().map(|p| p.1).reduce(f64::max) else {
        return DeviceCaps::default();
    };
    let max_a = pts.iter().map(|p| p.0).max().unwrap_or(1) as f64;
    let grid = |lo: f64, hi: f64, k: usize, steps: usize| (lo + (hi - lo) * k as f64 / steps as f64).exp();
    let (steps, inner) = (200, 400);
    let mut best = (f64::INFINITY, DeviceCaps::new(top, top));
    for i in 0..=steps {
        let base = grid((top / 4.0).ln(), (top * 4.0).ln(), i, steps);
        for j in 0..=inner {
            let budget = grid(base.ln() - 2.0, (base * max_a * 4.0).ln(), j, inner);
            let caps = DeviceCaps::new(base, budget);
            let e = worst_log_error(&caps, &pts);
            if e < best.0 {
                best = (e, caps);
            }
        }
    }
    best.1
}

/// Measures throughput for each probe count. Runs alternate between a
/// calibration set, which fits the cost model, and a measured set, median
/// of `opts.runs`, which gives the curve. Interleaving keeps machine drift
/// out of the fit. The zero-probe point is always measured but stays out of
/// the calibration.
pub fn bench_throughput(cfg: &PipelineConfig, counts: &[usize], opts: &BenchOpts) -> Result<BenchCurve, HarnessError> {
    let mut all: Vec<usize> = counts.to_vec();
    if !all.contains(&0) {
        all.insert(0, 0);
    }
    all.sort_unstable();
    all.dedup();
    let runs = opts.runs.max(3);
    let raw = pass(cfg, &all, opts, 2 * runs)?;
    let split = |r: &[f64], k: usize| -> Vec<f64> { r.iter().skip(k).step_by(2).copied().collect() };
    let cal_pts: Vec<(u64, f64)> = raw.iter().map(|(a, r)| (*a, median(&mut split(r, 0)))).collect();
    let caps = calibrate(&cal_pts);

    let points = all
        .iter()
        .zip(raw)
        .filter(|(n, _)| counts.contains(n))
        .map(|(&n, (acc, r))| {
            let mut r = split(&r, 1);
            BenchPoint { n, mem_accesses: acc, pps: median(&mut r), runs: r, predicted: estimate_throughput(acc, &caps) }
        })
        .collect();
    Ok(BenchCurve { caps, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netspec::route_pipeline;

    #[test]
    fn counters_fit_within_block_limits() {
        let opts = BenchOpts::route();
        let d = bench_device(&route_pipeline(1, &[1, 2]), 64, &opts).unwrap();
        assert_eq!(d.active_cost().mem_accesses, 64);
        assert_eq!(d.probe_ids().len(), 64);
        let max = PER_LOCATION * opts.locations.len();
        assert!(bench_device(&route_pipeline(1, &[1, 2]), max, &opts).is_ok());
        assert!(bench_device(&route_pipeline(1, &[1, 2]), max + 1, &opts).is_err());
    }

    #[test]
    fn calibration_recovers_a_min_model() {
        let truth = DeviceCaps::new(1000.0, 8000.0);
        let pts: Vec<(u64, f64)> = (0..=64).map(|a| (a, estimate_throughput(a, &truth))).collect();
        let caps = calibrate(&pts);
        assert!(worst_log_error(&caps, &pts[1..]) < 0.01, "{caps:?}");
    }

    #[test]
    fn short_curve_has_its_points() {
        let opts = BenchOpts { window: Duration::from_millis(5), ..BenchOpts::route() };
        let c = bench_throughput(&route_pipeline(1, &[1, 2]), &[0, 4], &opts).unwrap();
        assert_eq!(c.points.iter().map(|p| p.n).collect::<Vec<_>>(), vec![0, 4]);
        assert!(c.points.iter().all(|p| p.runs.len() == 3 && p.pps > 0.0));
        assert!(c.to_csv().lines().count() == 3);
    }
}

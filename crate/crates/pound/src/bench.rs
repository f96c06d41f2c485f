//! Flow generation and experiment statistics.
//!
//! A benchmark run publishes one or more periodic flows through a
//! transport, logs every delivery, and reduces the log to the usual
//! per-flow figures: mean inter-arrival period (the "jitter" J_d) and
//! its spread, transit delay D, message delivery ratio and consumed
//! bandwidth.

use std::collections::BTreeMap;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use thiserror::Error;

use crate::netsim::TransportKind;

/// One periodic message source.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSpec {
    pub name: String,
    pub flow_id: u16,
    pub message_size: usize,
    pub period_us: u64,
    /// Messages to publish. Zero means the flow is driven by an
    /// application hook instead of the periodic generator.
    pub count: u64,
    pub priority: u8,
    pub transport: TransportKind,
    pub src: usize,
    pub dst: usize,
    pub start_offset_us: u64,
}

impl FlowSpec {
    /// Offered load of the generator in bits per second.
    pub fn offered_bps(&self) -> f64 {
        self.message_size as f64 * 8.0 / (self.period_us as f64 / 1e6)
    }
}

/// Deterministic payload for (seed, flow, seq); the receiver can
/// regenerate it to verify bit-identical reassembly.
pub fn seeded_payload(seed: u64, flow_id: u16, seq: u32, len: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(
        seed ^ ((flow_id as u64) << 48) ^ ((seq as u64) << 8) ^ 0x706f756e64,
    );
    let mut buf = vec![0u8; len];
    rng.fill_bytes(&mut buf);
    buf
}

/// One delivered message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryRecord {
    pub flow_id: u16,
    pub seq: u32,
    pub publish_us: u64,
    pub deliver_us: u64,
    pub payload_len: usize,
    /// Whether the payload matched the seeded generator output
    /// (always true for application-driven flows).
    pub payload_ok: bool,
}

/// Everything a run measured: deliveries in delivery order plus the
/// per-flow publish counts.
#[derive(Debug, Clone, Default)]
pub struct SampleLog {
    pub deliveries: Vec<DeliveryRecord>,
    pub sent: BTreeMap<u16, u64>,
}

impl SampleLog {
    pub fn record_sent(&mut self, flow_id: u16) {
        *self.sent.entry(flow_id).or_insert(0) += 1;
    }

    pub fn record_delivery(&mut self, rec: DeliveryRecord) {
        self.deliveries.push(rec);
    }

    pub fn sent_count(&self, flow_id: u16) -> u64 {
        self.sent.get(&flow_id).copied().unwrap_or(0)
    }

    pub fn deliveries_for(&self, flow_id: u16) -> impl Iterator<Item = &DeliveryRecord> {
        self.deliveries.iter().filter(move |d| d.flow_id == flow_id)
    }
}

/// Per-flow results row (the figures of the experiment tables).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StatsRow {
    pub jd_ms: f64,
    pub jd_std_ms: f64,
    pub d_ms: f64,
    pub d_std_ms: f64,
    pub mdr_pct: f64,
    pub bw_mbps: f64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("no deliveries logged for flow {0}")]
    EmptyLog(u16),
}

fn mean_std(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    // Population standard deviation.
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reduces the log to one row for `flow_id`.
///
/// J_d samples are consecutive delivery-time differences, D samples
/// are per-message transit times, MDR is delivered/sent, and BW uses
/// the active span (first publish to last delivery) as denominator so
/// truncated runs stay unbiased.
pub fn compute_stats(log: &SampleLog, flow_id: u16) -> Result<StatsRow, StatsError> {
    let recs: Vec<&DeliveryRecord> = log.deliveries_for(flow_id).collect();
    if recs.is_empty() {
        return Err(StatsError::EmptyLog(flow_id));
    }
    let jd: Vec<f64> = recs
        .windows(2)
        .map(|w| (w[1].deliver_us - w[0].deliver_us) as f64 / 1000.0)
        .collect();
    let d: Vec<f64> = recs
        .iter()
        .map(|r| (r.deliver_us.saturating_sub(r.publish_us)) as f64 / 1000.0)
        .collect();
    let (jd_ms, jd_std_ms) = mean_std(&jd);
    let (d_ms, d_std_ms) = mean_std(&d);

    let sent = log.sent_count(flow_id).max(recs.len() as u64);
    let mdr_pct = recs.len() as f64 / sent as f64 * 100.0;

    let first_publish = recs.iter().map(|r| r.publish_us).min().unwrap();
    let last_deliver = recs.iter().map(|r| r.deliver_us).max().unwrap();
    let span_us = (last_deliver - first_publish).max(1);
    let bytes: u64 = recs.iter().map(|r| r.payload_len as u64).sum();
    let bw_mbps = bytes as f64 * 8.0 / span_us as f64;

    Ok(StatsRow {
        jd_ms,
        jd_std_ms,
        d_ms,
        d_std_ms,
        mdr_pct,
        bw_mbps,
    })
}

/// Histogram of J_d samples with `bin_width_ms` buckets; returns
/// (bin lower edge in ms, count) with counts summing to the number of
/// samples.
pub fn jitter_histogram(log: &SampleLog, flow_id: u16, bin_width_ms: f64) -> Vec<(f64, u64)> {
    assert!(bin_width_ms > 0.0, "bin width must be positive");
    let recs: Vec<&DeliveryRecord> = log.deliveries_for(flow_id).collect();
    let mut bins: BTreeMap<u64, u64> = BTreeMap::new();
    for w in recs.windows(2) {
        let jd_ms = (w[1].deliver_us - w[0].deliver_us) as f64 / 1000.0;
        let bin = (jd_ms / bin_width_ms).floor() as u64;
        *bins.entry(bin).or_insert(0) += 1;
    }
    bins.into_iter()
        .map(|(bin, count)| (bin as f64 * bin_width_ms, count))
        .collect()
}

/// Fraction of J_d samples falling in `[lo_ms, hi_ms)`.
pub fn jd_fraction_in(log: &SampleLog, flow_id: u16, lo_ms: f64, hi_ms: f64) -> f64 {
    let recs: Vec<&DeliveryRecord> = log.deliveries_for(flow_id).collect();
    if recs.len() < 2 {
        return 0.0;
    }
    let total = (recs.len() - 1) as f64;
    let hits = recs
        .windows(2)
        .filter(|w| {
            let jd_ms = (w[1].deliver_us - w[0].deliver_us) as f64 / 1000.0;
            jd_ms >= lo_ms && jd_ms < hi_ms
        })
        .count();
    hits as f64 / total
}

/// Reconnection gap after an outage, per flow: the delivery hole
/// around the outage minus one nominal period.
pub fn reconnection_gap_us(
    log: &SampleLog,
    flow_id: u16,
    outage_start_us: u64,
    period_us: u64,
) -> Option<u64> {
    let before = log
        .deliveries_for(flow_id)
        .filter(|r| r.deliver_us < outage_start_us)
        .map(|r| r.deliver_us)
        .max()?;
    let after = log
        .deliveries_for(flow_id)
        .filter(|r| r.deliver_us >= outage_start_us)
        .map(|r| r.deliver_us)
        .min()?;
    Some((after - before).saturating_sub(period_us))
}

//! Discrete-event simulator of a shared-medium multi-hop wireless chain.
//!
//! Time is integer microseconds and every random draw comes from one
//! seeded generator, so a (scenario, seed) pair always produces the
//! same event trace byte for byte. The model is deliberately small:
//! i.i.d. per-attempt frame loss with MAC retries, a fixed per-frame
//! overhead lumping preamble/ACK/backoff, FIFO OS transmit queues, and
//! a medium that carries one frame at a time when `shared_medium` is
//! set (which is what halves goodput through a relay).

mod sim;

pub use sim::{
    run_scenario, run_scenario_with_hooks, AppSend, NoHooks, SimError, SimHooks, SimResult,
    TimerSpec, Transmission, TransportKind,
};

use rand::Rng;

/// Shared-medium wireless link parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub rate_bps: u64,
    /// Per-attempt loss probability, i.i.d. across attempts.
    pub loss_prob: f64,
    /// MAC retransmission budget after the first attempt.
    pub max_retries: u32,
    /// Preamble + SIFS/DIFS + ACK + mean backoff, lumped.
    pub per_frame_overhead_us: u64,
    pub propagation_delay_us: u64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            rate_bps: 6_000_000,
            loss_prob: 0.0,
            max_retries: 7,
            per_frame_overhead_us: 200,
            propagation_delay_us: 0,
        }
    }
}

impl LinkModel {
    /// Airtime of one transmission attempt.
    pub fn attempt_cost_us(&self, frame_bytes: u64) -> u64 {
        (frame_bytes as u128 * 8 * 1_000_000 / self.rate_bps as u128) as u64
            + self.per_frame_overhead_us
    }
}

/// An n-node chain; link `i` connects nodes `i` and `i+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub nodes: usize,
    pub links: Vec<LinkModel>,
    /// One frame in flight network-wide at a time.
    pub shared_medium: bool,
    /// OS transmit queue depth, in frames, per node.
    pub os_queue_frames: usize,
}

impl Topology {
    pub fn chain(nodes: usize, link: LinkModel) -> Self {
        assert!(nodes >= 2, "a topology needs at least two nodes");
        Topology {
            nodes,
            links: vec![link; nodes - 1],
            shared_medium: true,
            os_queue_frames: 1000,
        }
    }
}

/// Outcome of pushing one frame through a link at the MAC level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransmitOutcome {
    Delivered { arrival_us: u64, attempts: u32 },
    Lost { after_us: u64, attempts: u32 },
}

/// Performs up to `1 + max_retries` Bernoulli attempts; each attempt
/// occupies the medium for the frame's serialization time plus the
/// fixed overhead.
pub fn transmit_frame(
    link: &LinkModel,
    frame_bytes: u64,
    now_us: u64,
    rng: &mut impl Rng,
) -> TransmitOutcome {
    debug_assert!(frame_bytes > 0);
    let cost = link.attempt_cost_us(frame_bytes);
    let max_attempts = 1 + link.max_retries;
    if link.loss_prob <= 0.0 {
        return TransmitOutcome::Delivered {
            arrival_us: now_us + cost + link.propagation_delay_us,
            attempts: 1,
        };
    }
    for attempt in 1..=max_attempts {
        if rng.gen::<f64>() >= link.loss_prob {
            return TransmitOutcome::Delivered {
                arrival_us: now_us + attempt as u64 * cost + link.propagation_delay_us,
                attempts: attempt,
            };
        }
    }
    TransmitOutcome::Lost {
        after_us: now_us + max_attempts as u64 * cost,
        attempts: max_attempts,
    }
}

/// Kinds of events a trace records for each frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Frame handed to the sending node's network stack.
    Enqueued,
    /// Transmission started on a link (once per hop).
    Sent,
    /// Frame reached its final destination node.
    Delivered,
    /// MAC retries exhausted or interface down.
    Lost,
    /// Dropped from a full OS queue, or a whole message dropped from
    /// the transmit queue (frame_id 0).
    Dropped,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Enqueued => "enqueued",
            EventKind::Sent => "sent",
            EventKind::Delivered => "delivered",
            EventKind::Lost => "lost",
            EventKind::Dropped => "dropped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub time_us: u64,
    pub node: u32,
    pub event: EventKind,
    pub frame_id: u64,
    pub flow_id: u16,
    pub message_seq: u32,
}

/// Ordered record of everything that happened to every frame.
#[derive(Debug, Clone, Default)]
pub struct EventTrace {
    pub records: Vec<TraceRecord>,
}

impl EventTrace {
    pub fn push(&mut self, rec: TraceRecord) {
        debug_assert!(
            self.records.last().map_or(true, |r| r.time_us <= rec.time_us),
            "trace times must be non-decreasing"
        );
        self.records.push(rec);
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.records.iter().filter(|r| r.event == kind).count()
    }

    /// CSV export: `time_us,node,event,frame_id,flow_id,message_seq`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_us,node,event,frame_id,flow_id,message_seq\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.time_us,
                r.node,
                r.event.as_str(),
                r.frame_id,
                r.flow_id,
                r.message_seq
            ));
        }
        out
    }
}

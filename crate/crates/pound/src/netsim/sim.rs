//! The event loop: flows publish messages, transports turn them into
//! frames, frames contend for the medium and hop through relay queues.
//!
//! Transport models, selectable per flow:
//! - `Pound`: the engine from [`crate::engine`] driven by virtual
//!   time. Fragments wait in the priority queue; the paced sender
//!   hands one frame at a time to the NIC and blocks until the medium
//!   accepts it, so backlog accumulates where priorities can act.
//! - `PerflowUnreliable`: every flow bursts its datagrams straight
//!   into the node's FIFO OS queue with no pacing; overflow is a
//!   silent drop.
//! - `ReliableOrdered`: a small-window reliable stream per flow with
//!   per-segment retransmission, cumulative delayed ACKs, optional
//!   sender-side coalescing of small messages while data is unacked,
//!   and a reconnect handshake after long outages. It never drops or
//!   reorders; congestion shows up as latency instead.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bench::{seeded_payload, DeliveryRecord, FlowSpec, SampleLog};
use crate::engine::{fragment, Message, Pacer, ReassemblyState, SessionConfig, TxQueue};
use crate::netsim::{
    transmit_frame, EventKind, EventTrace, LinkModel, Topology, TraceRecord, TransmitOutcome,
};
use crate::wire::Fragment;

const REL_WINDOW: usize = 4;
const REL_RTO_US: u64 = 200_000;
const REL_DELAYED_ACK_US: u64 = 40_000;
const REL_CONN_LOSS_US: u64 = 1_500_000;
const REL_SYN_RETRY_US: u64 = 300_000;
const REL_ACK_PAYLOAD_BYTES: usize = 8;

/// Transport model carried by each flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Pound,
    PerflowUnreliable,
    ReliableOrdered { nagle: bool },
}

impl TransportKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransportKind::Pound => "pound",
            TransportKind::PerflowUnreliable => "perflow_unreliable",
            TransportKind::ReliableOrdered { nagle: false } => "reliable_ordered",
            TransportKind::ReliableOrdered { nagle: true } => "reliable_ordered_nagle",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pound" => Some(TransportKind::Pound),
            "perflow_unreliable" => Some(TransportKind::PerflowUnreliable),
            "reliable_ordered" => Some(TransportKind::ReliableOrdered { nagle: false }),
            "reliable_ordered_nagle" => Some(TransportKind::ReliableOrdered { nagle: true }),
            _ => None,
        }
    }
}

/// Interface outage injected into a run (resilience experiments).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outage {
    pub node: usize,
    pub start_us: u64,
    pub duration_us: u64,
    /// Time the wireless card needs to rejoin after coming back up.
    pub rejoin_us: u64,
    /// Extra settling time per additional adjacent link (a relay has
    /// two links to re-form, an edge node one).
    pub extra_link_rejoin_us: u64,
    /// Connection re-establishment cost for reliable transports.
    pub handshake_us: u64,
}

impl Default for Outage {
    fn default() -> Self {
        Outage {
            node: 0,
            start_us: 2_000_000,
            duration_us: 5_000_000,
            rejoin_us: 200_000,
            extra_link_rejoin_us: 150_000,
            handshake_us: 700_000,
        }
    }
}

/// Periodic application timer registered by simulation hooks.
#[derive(Debug, Clone, Copy)]
pub struct TimerSpec {
    pub id: u32,
    pub node: usize,
    pub start_us: u64,
    pub period_us: u64,
}

/// A message an application hook wants published on one of the flows.
#[derive(Debug, Clone)]
pub struct AppSend {
    pub flow_idx: usize,
    pub payload: Vec<u8>,
}

/// Callbacks for application logic living inside the virtual clock
/// (the networked control loop uses these).
pub trait SimHooks {
    fn timers(&self) -> Vec<TimerSpec> {
        Vec::new()
    }
    fn on_timer(&mut self, _now_us: u64, _id: u32) -> Vec<AppSend> {
        Vec::new()
    }
    fn on_deliver(&mut self, _now_us: u64, _node: usize, _msg: &Message) -> Vec<AppSend> {
        Vec::new()
    }
}

/// Hook implementation that does nothing.
pub struct NoHooks;
impl SimHooks for NoHooks {}

/// One medium occupancy interval, for exclusivity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub channel: usize,
    pub node: usize,
    pub start_us: u64,
    pub end_us: u64,
}

/// Everything a run produced.
#[derive(Debug)]
pub struct SimResult {
    pub trace: EventTrace,
    pub log: SampleLog,
    pub transmissions: Vec<Transmission>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("topology needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("chain of {nodes} nodes needs {} links, got {links}", nodes - 1)]
    BadLinkCount { nodes: usize, links: usize },
    #[error("link {0}: loss probability must be in [0, 1)")]
    BadLossProb(usize),
    #[error("link {0}: rate must be positive")]
    BadLinkRate(usize),
    #[error("flow {name}: invalid endpoint (src {src}, dst {dst}) for {nodes} nodes")]
    BadFlowEndpoints {
        name: String,
        src: usize,
        dst: usize,
        nodes: usize,
    },
    #[error("flow {name}: period must be positive")]
    BadFlowPeriod { name: String },
    #[error("duplicate flow id {0}")]
    DuplicateFlowId(u16),
    #[error("session: mtu must exceed header overhead")]
    BadSession,
    #[error("outage node {node} out of range for {nodes} nodes")]
    BadOutageNode { node: usize, nodes: usize },
}

fn validate(
    topo: &Topology,
    session: &SessionConfig,
    flows: &[FlowSpec],
    outage: Option<&Outage>,
) -> Result<(), SimError> {
    if topo.nodes < 2 {
        return Err(SimError::TooFewNodes(topo.nodes));
    }
    if topo.links.len() != topo.nodes - 1 {
        return Err(SimError::BadLinkCount {
            nodes: topo.nodes,
            links: topo.links.len(),
        });
    }
    for (i, link) in topo.links.iter().enumerate() {
        if !(0.0..1.0).contains(&link.loss_prob) {
            return Err(SimError::BadLossProb(i));
        }
        if link.rate_bps == 0 {
            return Err(SimError::BadLinkRate(i));
        }
    }
    if session.mtu <= session.header_overhead {
        return Err(SimError::BadSession);
    }
    let mut seen = std::collections::BTreeSet::new();
    for f in flows {
        if f.src >= topo.nodes || f.dst >= topo.nodes || f.src == f.dst {
            return Err(SimError::BadFlowEndpoints {
                name: f.name.clone(),
                src: f.src,
                dst: f.dst,
                nodes: topo.nodes,
            });
        }
        if f.period_us == 0 {
            return Err(SimError::BadFlowPeriod {
                name: f.name.clone(),
            });
        }
        if !seen.insert(f.flow_id) {
            return Err(SimError::DuplicateFlowId(f.flow_id));
        }
    }
    if let Some(o) = outage {
        if o.node >= topo.nodes {
            return Err(SimError::BadOutageNode {
                node: o.node,
                nodes: topo.nodes,
            });
        }
    }
    Ok(())
}

/// Runs a scenario with periodic flows only.
pub fn run_scenario(
    topo: &Topology,
    session: &SessionConfig,
    flows: &[FlowSpec],
    duration_us: u64,
    seed: u64,
) -> Result<SimResult, SimError> {
    run_scenario_with_hooks(topo, session, flows, duration_us, seed, None, &mut NoHooks)
}

/// Runs a scenario with an optional outage and application hooks.
pub fn run_scenario_with_hooks(
    topo: &Topology,
    session: &SessionConfig,
    flows: &[FlowSpec],
    duration_us: u64,
    seed: u64,
    outage: Option<Outage>,
    hooks: &mut dyn SimHooks,
) -> Result<SimResult, SimError> {
    validate(topo, session, flows, outage.as_ref())?;
    let mut sim = Simulator::new(topo, session, flows, duration_us, seed, outage, hooks);
    sim.run();
    Ok(SimResult {
        trace: sim.trace,
        log: sim.log,
        transmissions: sim.transmissions,
    })
}

// ---------------------------------------------------------------------------
// internals
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
enum FrameKind {
    Data(Fragment),
    RelData { conn: usize, seg: u64, frags: Vec<Fragment> },
    RelAck { conn: usize, through: u64 },
    RelSyn { conn: usize, reply: bool },
}

#[derive(Debug, Clone)]
struct Frame {
    id: u64,
    flow_id: u16,
    message_seq: u32,
    dst: usize,
    bytes: u64,
    kind: FrameKind,
}

#[derive(Debug, Clone, Copy)]
enum SweepTarget {
    PoundEp(usize),
    Perflow(usize),
}

#[derive(Debug)]
enum Ev {
    FlowPublish { flow: usize },
    PoundWake { ep: usize },
    NicKick { node: usize },
    MediumFree { ch: usize },
    FrameArrive { node: usize, frame: Frame },
    FrameLost { node: usize, frame: Frame },
    AppTimer { id: u32 },
    RelRto { conn: usize, seg: u64, gen: u32 },
    RelDelayedAck { conn: usize, gen: u32 },
    RelSynRetry { conn: usize, gen: u32 },
    RelResume { conn: usize },
    ReasmSweep { target: SweepTarget },
}

struct EvEntry {
    time: u64,
    tie: u64,
    ev: Ev,
}

impl PartialEq for EvEntry {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.tie == other.tie
    }
}
impl Eq for EvEntry {}
impl PartialOrd for EvEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for EvEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time, self.tie).cmp(&(other.time, other.tie))
    }
}

#[derive(Debug, Clone, Copy)]
enum Binding {
    Pound { ep: usize },
    Perflow { rx: usize },
    Reliable { conn: usize },
}

struct FlowRuntime {
    spec: FlowSpec,
    next_seq: u32,
    binding: Binding,
}

struct NodeState {
    os_queue: VecDeque<Frame>,
    nic_busy: bool,
}

struct Channel {
    busy: bool,
    waiters: VecDeque<TxSource>,
}

#[derive(Debug, Clone, Copy)]
enum TxSource {
    Nic(usize),
    PoundEp(usize),
}

/// Pound endpoint: one per (source, destination) node pair; all pound
/// flows on that pair share its queue, so priorities interact exactly
/// where competing flows meet.
struct PoundEp {
    src: usize,
    dst: usize,
    tx: TxQueue,
    pacer: Pacer,
    active: bool,
    in_hand: Option<Frame>,
    rx: ReassemblyState,
    sweep_scheduled: bool,
}

struct PerflowRx {
    state: ReassemblyState,
    sweep_scheduled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RelState {
    Connected,
    Reconnecting,
    Resuming,
}

struct RelOutstanding {
    frags: Vec<Fragment>,
    first_sent_us: u64,
    rto_gen: u32,
}

struct RelConn {
    flow_id: u16,
    src: usize,
    dst: usize,
    nagle: bool,
    // sender side
    next_seg: u64,
    send_buf: VecDeque<Vec<Fragment>>,
    outstanding: BTreeMap<u64, RelOutstanding>,
    nagle_buf: VecDeque<Fragment>,
    state: RelState,
    syn_gen: u32,
    // receiver side
    expected_seg: u64,
    ooo: BTreeMap<u64, Vec<Fragment>>,
    ack_armed: bool,
    ack_gen: u32,
    rx: ReassemblyState,
}

struct Simulator<'h> {
    topo: Topology,
    session: SessionConfig,
    seed: u64,
    duration_us: u64,
    now: u64,
    tie: u64,
    events: BinaryHeap<Reverse<EvEntry>>,
    rng: ChaCha8Rng,
    flows: Vec<FlowRuntime>,
    flow_by_id: BTreeMap<u16, usize>,
    nodes: Vec<NodeState>,
    channels: Vec<Channel>,
    pound_eps: Vec<PoundEp>,
    perflow_rx: Vec<PerflowRx>,
    conns: Vec<RelConn>,
    outage: Option<Outage>,
    outage_down_until: u64,
    handshake_us: u64,
    hooks: &'h mut dyn SimHooks,
    timer_specs: Vec<TimerSpec>,
    trace: EventTrace,
    log: SampleLog,
    transmissions: Vec<Transmission>,
    next_frame_id: u64,
}

impl<'h> Simulator<'h> {
    fn new(
        topo: &Topology,
        session: &SessionConfig,
        specs: &[FlowSpec],
        duration_us: u64,
        seed: u64,
        outage: Option<Outage>,
        hooks: &'h mut dyn SimHooks,
    ) -> Self {
        let mut sim = Simulator {
            topo: topo.clone(),
            session: *session,
            seed,
            duration_us,
            now: 0,
            tie: 0,
            events: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            flows: Vec::new(),
            flow_by_id: BTreeMap::new(),
            nodes: (0..topo.nodes)
                .map(|_| NodeState {
                    os_queue: VecDeque::new(),
                    nic_busy: false,
                })
                .collect(),
            channels: Vec::new(),
            pound_eps: Vec::new(),
            perflow_rx: Vec::new(),
            conns: Vec::new(),
            outage,
            outage_down_until: 0,
            handshake_us: outage.map_or(700_000, |o| o.handshake_us),
            hooks,
            timer_specs: Vec::new(),
            trace: EventTrace::default(),
            log: SampleLog::default(),
            transmissions: Vec::new(),
            next_frame_id: 1,
        };

        let n_channels = if topo.shared_medium {
            1
        } else {
            topo.nodes - 1
        };
        sim.channels = (0..n_channels)
            .map(|_| Channel {
                busy: false,
                waiters: VecDeque::new(),
            })
            .collect();

        if let Some(o) = &sim.outage {
            let adjacent = if o.node == 0 || o.node == topo.nodes - 1 {
                1
            } else {
                2
            };
            sim.outage_down_until = o.start_us
                + o.duration_us
                + o.rejoin_us
                + o.extra_link_rejoin_us * (adjacent as u64 - 1);
        }

        // Bind each flow to its transport instance.
        let mut pound_by_pair: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for spec in specs {
            let binding = match spec.transport {
                TransportKind::Pound => {
                    let ep = *pound_by_pair.entry((spec.src, spec.dst)).or_insert_with(|| {
                        sim.pound_eps.push(PoundEp {
                            src: spec.src,
                            dst: spec.dst,
                            tx: TxQueue::new(session.queue_capacity_bytes),
                            pacer: Pacer::new(session.link_rate_bps),
                            active: false,
                            in_hand: None,
                            rx: ReassemblyState::new(session.reassembly_timeout_us),
                            sweep_scheduled: false,
                        });
                        sim.pound_eps.len() - 1
                    });
                    sim.pound_eps[ep]
                        .rx
                        .set_flow_timeout(spec.flow_id, 2 * spec.period_us);
                    Binding::Pound { ep }
                }
                TransportKind::PerflowUnreliable => {
                    let mut rx = ReassemblyState::new(session.reassembly_timeout_us);
                    rx.set_flow_timeout(spec.flow_id, 2 * spec.period_us);
                    sim.perflow_rx.push(PerflowRx {
                        state: rx,
                        sweep_scheduled: false,
                    });
                    Binding::Perflow {
                        rx: sim.perflow_rx.len() - 1,
                    }
                }
                TransportKind::ReliableOrdered { nagle } => {
                    sim.conns.push(RelConn {
                        flow_id: spec.flow_id,
                        src: spec.src,
                        dst: spec.dst,
                        nagle,
                        next_seg: 0,
                        send_buf: VecDeque::new(),
                        outstanding: BTreeMap::new(),
                        nagle_buf: VecDeque::new(),
                        state: RelState::Connected,
                        syn_gen: 0,
                        expected_seg: 0,
                        ooo: BTreeMap::new(),
                        ack_armed: false,
                        ack_gen: 0,
                        // The reliable stream retries forever; nothing
                        // may time out of reassembly.
                        rx: ReassemblyState::new(u64::MAX / 4),
                    });
                    Binding::Reliable {
                        conn: sim.conns.len() - 1,
                    }
                }
            };
            sim.flow_by_id.insert(spec.flow_id, sim.flows.len());
            sim.flows.push(FlowRuntime {
                spec: spec.clone(),
                next_seq: 0,
                binding,
            });
        }

        let starts: Vec<(usize, u64)> = sim
            .flows
            .iter()
            .enumerate()
            .filter(|(_, f)| f.spec.count > 0)
            .map(|(idx, f)| (idx, f.spec.start_offset_us))
            .collect();
        for (idx, at) in starts {
            sim.schedule_at(at, Ev::FlowPublish { flow: idx });
        }
        sim.timer_specs = sim.hooks.timers();
        let timers: Vec<(u64, u32)> = sim.timer_specs.iter().map(|t| (t.start_us, t.id)).collect();
        for (at, id) in timers {
            sim.schedule_at(at, Ev::AppTimer { id });
        }
        sim
    }

    fn schedule_at(&mut self, time: u64, ev: Ev) {
        self.tie += 1;
        self.events.push(Reverse(EvEntry {
            time,
            tie: self.tie,
            ev,
        }));
    }

    fn schedule_in(&mut self, delay: u64, ev: Ev) {
        self.schedule_at(self.now + delay, ev);
    }

    fn record(&mut self, node: usize, event: EventKind, frame_id: u64, flow_id: u16, seq: u32) {
        self.trace.push(TraceRecord {
            time_us: self.now,
            node: node as u32,
            event,
            frame_id,
            flow_id,
            message_seq: seq,
        });
    }

    fn node_down(&self, node: usize) -> bool {
        match &self.outage {
            Some(o) => node == o.node && self.now >= o.start_us && self.now < self.outage_down_until,
            None => false,
        }
    }

    fn run(&mut self) {
        while let Some(Reverse(entry)) = self.events.pop() {
            if entry.time > self.duration_us {
                break;
            }
            debug_assert!(entry.time >= self.now);
            self.now = entry.time;
            self.dispatch(entry.ev);
        }
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::FlowPublish { flow } => self.flow_publish(flow),
            Ev::PoundWake { ep } => self.pound_wake(ep),
            Ev::NicKick { node } => {
                self.nodes[node].nic_busy = false;
                self.nic_maybe_start(node);
            }
            Ev::MediumFree { ch } => self.medium_free(ch),
            Ev::FrameArrive { node, frame } => self.frame_arrive(node, frame),
            Ev::FrameLost { node, frame } => {
                self.record(node, EventKind::Lost, frame.id, frame.flow_id, frame.message_seq);
            }
            Ev::AppTimer { id } => self.app_timer(id),
            Ev::RelRto { conn, seg, gen } => self.rel_rto(conn, seg, gen),
            Ev::RelDelayedAck { conn, gen } => {
                if self.conns[conn].ack_armed && self.conns[conn].ack_gen == gen {
                    self.conns[conn].ack_armed = false;
                    self.rel_send_ack(conn);
                }
            }
            Ev::RelSynRetry { conn, gen } => self.rel_syn_retry(conn, gen),
            Ev::RelResume { conn } => self.rel_resume(conn),
            Ev::ReasmSweep { target } => self.reasm_sweep(target),
        }
    }

    // -- flow generation ----------------------------------------------------

    fn flow_publish(&mut self, flow: usize) {
        let (flow_id, size, period, count, seq_done) = {
            let f = &self.flows[flow];
            (
                f.spec.flow_id,
                f.spec.message_size,
                f.spec.period_us,
                f.spec.count,
                f.next_seq as u64,
            )
        };
        if seq_done >= count {
            return;
        }
        let payload = seeded_payload(self.seed, flow_id, seq_done as u32, size);
        self.publish(flow, payload);
        if (seq_done + 1) < count {
            self.schedule_in(period, Ev::FlowPublish { flow });
        }
    }

    fn publish(&mut self, flow: usize, payload: Vec<u8>) {
        let (msg, binding, priority) = {
            let f = &mut self.flows[flow];
            let seq = f.next_seq;
            f.next_seq += 1;
            (
                Message {
                    flow_id: f.spec.flow_id,
                    seq,
                    payload,
                    publish_time_us: self.now,
                },
                f.binding,
                f.spec.priority,
            )
        };
        self.log.record_sent(msg.flow_id);
        let max_payload = self.session.max_fragment_payload();
        match binding {
            Binding::Pound { ep } => {
                let frags = fragment(&msg, max_payload, priority, self.now);
                let report = self.pound_eps[ep].tx.enqueue(frags);
                let src = self.pound_eps[ep].src;
                for (flow_id, seq) in &report.evicted {
                    self.record(src, EventKind::Dropped, 0, *flow_id, *seq);
                }
                if report.rejected {
                    self.record(src, EventKind::Dropped, 0, msg.flow_id, msg.seq);
                }
                if report.accepted && !self.pound_eps[ep].active {
                    self.pound_eps[ep].active = true;
                    self.schedule_in(0, Ev::PoundWake { ep });
                }
            }
            Binding::Perflow { .. } => {
                let f = &self.flows[flow];
                let (src, dst) = (f.spec.src, f.spec.dst);
                let frags = fragment(&msg, max_payload, priority, self.now);
                for frag in frags {
                    let bytes = self.session.frame_bytes(frag.payload.len());
                    let frame = self.new_frame(
                        msg.flow_id,
                        frag.header.message_seq,
                        src,
                        dst,
                        bytes,
                        FrameKind::Data(frag),
                    );
                    self.push_os_queue(src, frame);
                }
                self.nic_maybe_start(src);
            }
            Binding::Reliable { conn } => self.rel_publish(conn, msg, priority),
        }
    }

    fn new_frame(
        &mut self,
        flow_id: u16,
        message_seq: u32,
        src: usize,
        dst: usize,
        bytes: u64,
        kind: FrameKind,
    ) -> Frame {
        let id = self.next_frame_id;
        self.next_frame_id += 1;
        self.record(src, EventKind::Enqueued, id, flow_id, message_seq);
        Frame {
            id,
            flow_id,
            message_seq,
            dst,
            bytes,
            kind,
        }
    }

    // -- OS queue and NIC ---------------------------------------------------

    fn push_os_queue(&mut self, node: usize, frame: Frame) {
        if self.nodes[node].os_queue.len() >= self.topo.os_queue_frames {
            self.record(node, EventKind::Dropped, frame.id, frame.flow_id, frame.message_seq);
            return;
        }
        self.nodes[node].os_queue.push_back(frame);
    }

    fn nic_maybe_start(&mut self, node: usize) {
        if self.nodes[node].nic_busy {
            return;
        }
        if self.node_down(node) {
            self.drain_lost(node);
            return;
        }
        let Some(head_dst) = self.nodes[node].os_queue.front().map(|f| f.dst) else {
            return;
        };
        self.nodes[node].nic_busy = true;
        let ch = self.channel_for(node, head_dst);
        self.request_channel(ch, TxSource::Nic(node));
    }

    fn drain_lost(&mut self, node: usize) {
        while let Some(frame) = self.nodes[node].os_queue.pop_front() {
            self.record(node, EventKind::Lost, frame.id, frame.flow_id, frame.message_seq);
        }
    }

    fn channel_for(&self, node: usize, dst: usize) -> usize {
        if self.topo.shared_medium {
            0
        } else {
            let next = next_hop(node, dst);
            node.min(next)
        }
    }

    // -- medium -------------------------------------------------------------

    fn request_channel(&mut self, ch: usize, source: TxSource) {
        if self.channels[ch].busy {
            self.channels[ch].waiters.push_back(source);
        } else {
            self.try_begin(ch, source);
        }
    }

    fn medium_free(&mut self, ch: usize) {
        self.channels[ch].busy = false;
        while !self.channels[ch].busy {
            let Some(source) = self.channels[ch].waiters.pop_front() else {
                break;
            };
            self.try_begin(ch, source);
        }
    }

    /// Starts a transmission for `source`; leaves the channel free if
    /// the source turns out to have nothing valid to send.
    fn try_begin(&mut self, ch: usize, source: TxSource) {
        match source {
            TxSource::Nic(node) => {
                if self.node_down(node) {
                    self.drain_lost(node);
                    self.nodes[node].nic_busy = false;
                    return;
                }
                let Some(frame) = self.nodes[node].os_queue.pop_front() else {
                    self.nodes[node].nic_busy = false;
                    return;
                };
                self.transmit(ch, node, frame, true);
            }
            TxSource::PoundEp(ep) => {
                let frame = self.pound_eps[ep]
                    .in_hand
                    .take()
                    .expect("granted endpoint holds a frame");
                // Pacing runs from the moment the NIC accepts the frame.
                let wait = self.pound_eps[ep].pacer.on_sent(frame.bytes);
                self.schedule_in(wait, Ev::PoundWake { ep });
                let src = self.pound_eps[ep].src;
                if self.node_down(src) {
                    self.record(src, EventKind::Lost, frame.id, frame.flow_id, frame.message_seq);
                    return;
                }
                self.transmit(ch, src, frame, false);
            }
        }
    }

    fn transmit(&mut self, ch: usize, node: usize, frame: Frame, from_nic: bool) {
        let next = next_hop(node, frame.dst);
        let link: LinkModel = self.topo.links[node.min(next)];
        self.record(node, EventKind::Sent, frame.id, frame.flow_id, frame.message_seq);

        let outcome = if self.node_down(next) {
            let attempts = link.max_retries + 1;
            TransmitOutcome::Lost {
                after_us: self.now + attempts as u64 * link.attempt_cost_us(frame.bytes),
                attempts,
            }
        } else {
            transmit_frame(&link, frame.bytes, self.now, &mut self.rng)
        };

        let (busy_end, arrival) = match outcome {
            TransmitOutcome::Delivered { arrival_us, .. } => {
                (arrival_us - link.propagation_delay_us, Some(arrival_us))
            }
            TransmitOutcome::Lost { after_us, .. } => (after_us, None),
        };

        self.transmissions.push(Transmission {
            channel: ch,
            node,
            start_us: self.now,
            end_us: busy_end,
        });
        self.channels[ch].busy = true;
        self.schedule_at(busy_end, Ev::MediumFree { ch });
        if from_nic {
            self.schedule_at(busy_end, Ev::NicKick { node });
        }
        match arrival {
            Some(t) => self.schedule_at(t, Ev::FrameArrive { node: next, frame }),
            None => self.schedule_at(busy_end, Ev::FrameLost { node, frame }),
        }
    }

    // -- pound endpoint -----------------------------------------------------

    fn pound_wake(&mut self, ep: usize) {
        if self.pound_eps[ep].in_hand.is_some() {
            return;
        }
        let Some(frag) = self.pound_eps[ep].tx.pop_next() else {
            self.pound_eps[ep].active = false;
            self.pound_eps[ep].pacer.reset();
            return;
        };
        let (src, dst) = (self.pound_eps[ep].src, self.pound_eps[ep].dst);
        let bytes = self.session.frame_bytes(frag.payload.len());
        let (flow_id, seq) = (frag.header.flow_id, frag.header.message_seq);
        let frame = self.new_frame(flow_id, seq, src, dst, bytes, FrameKind::Data(frag));
        if self.node_down(src) {
            // send() fails with the interface down: count, drop, keep pacing.
            self.record(src, EventKind::Lost, frame.id, flow_id, seq);
            let wait = self.pound_eps[ep].pacer.on_sent(bytes);
            self.schedule_in(wait.max(1), Ev::PoundWake { ep });
            return;
        }
        self.pound_eps[ep].in_hand = Some(frame);
        let ch = self.channel_for(src, dst);
        self.request_channel(ch, TxSource::PoundEp(ep));
    }

    // -- frame arrival ------------------------------------------------------

    fn frame_arrive(&mut self, node: usize, frame: Frame) {
        if self.node_down(node) {
            // Interface came down while the frame was in the air.
            self.record(node, EventKind::Lost, frame.id, frame.flow_id, frame.message_seq);
            return;
        }
        if node != frame.dst {
            self.push_os_queue(node, frame);
            self.nic_maybe_start(node);
            return;
        }
        self.record(node, EventKind::Delivered, frame.id, frame.flow_id, frame.message_seq);
        match frame.kind.clone() {
            FrameKind::Data(frag) => self.data_arrive(node, frame.flow_id, frag),
            FrameKind::RelData { conn, seg, frags } => self.rel_data_arrive(conn, seg, frags),
            FrameKind::RelAck { conn, through } => self.rel_ack_arrive(conn, through),
            FrameKind::RelSyn { conn, reply } => self.rel_syn_arrive(conn, reply),
        }
    }

    fn data_arrive(&mut self, node: usize, flow_id: u16, frag: Fragment) {
        let Some(&flow_idx) = self.flow_by_id.get(&flow_id) else {
            return;
        };
        let binding = self.flows[flow_idx].binding;
        let completed = match binding {
            Binding::Pound { ep } => {
                let report = self.pound_eps[ep].rx.ingest_fragment(frag, self.now);
                let completed = report.ok().and_then(|r| r.completed);
                self.ensure_sweep(SweepTarget::PoundEp(ep));
                completed
            }
            Binding::Perflow { rx } => {
                let report = self.perflow_rx[rx].state.ingest_fragment(frag, self.now);
                let completed = report.ok().and_then(|r| r.completed);
                self.ensure_sweep(SweepTarget::Perflow(rx));
                completed
            }
            Binding::Reliable { .. } => None,
        };
        if let Some(msg) = completed {
            self.deliver_message(node, msg);
        }
    }

    fn ensure_sweep(&mut self, target: SweepTarget) {
        let (pending, scheduled, next) = match target {
            SweepTarget::PoundEp(ep) => {
                let e = &self.pound_eps[ep];
                (e.rx.pending_count(), e.sweep_scheduled, e.rx.next_expiry_us())
            }
            SweepTarget::Perflow(rx) => {
                let r = &self.perflow_rx[rx];
                (r.state.pending_count(), r.sweep_scheduled, r.state.next_expiry_us())
            }
        };
        if pending == 0 || scheduled {
            return;
        }
        let at = next.unwrap_or(self.now) + 1;
        match target {
            SweepTarget::PoundEp(ep) => self.pound_eps[ep].sweep_scheduled = true,
            SweepTarget::Perflow(rx) => self.perflow_rx[rx].sweep_scheduled = true,
        }
        self.schedule_at(at.max(self.now), Ev::ReasmSweep { target });
    }

    fn reasm_sweep(&mut self, target: SweepTarget) {
        match target {
            SweepTarget::PoundEp(ep) => {
                self.pound_eps[ep].sweep_scheduled = false;
                self.pound_eps[ep].rx.expire_stale(self.now);
            }
            SweepTarget::Perflow(rx) => {
                self.perflow_rx[rx].sweep_scheduled = false;
                self.perflow_rx[rx].state.expire_stale(self.now);
            }
        }
        self.ensure_sweep(target);
    }

    fn deliver_message(&mut self, node: usize, msg: Message) {
        let payload_ok = match self.flow_by_id.get(&msg.flow_id) {
            Some(&idx) if self.flows[idx].spec.count > 0 => {
                let spec = &self.flows[idx].spec;
                msg.payload.len() == spec.message_size
                    && msg.payload == seeded_payload(self.seed, msg.flow_id, msg.seq, spec.message_size)
            }
            _ => true,
        };
        self.log.record_delivery(DeliveryRecord {
            flow_id: msg.flow_id,
            seq: msg.seq,
            publish_us: msg.publish_time_us,
            deliver_us: self.now,
            payload_len: msg.payload.len(),
            payload_ok,
        });
        let sends = self.hooks.on_deliver(self.now, node, &msg);
        for s in sends {
            self.publish(s.flow_idx, s.payload);
        }
    }

    fn app_timer(&mut self, id: u32) {
        let sends = self.hooks.on_timer(self.now, id);
        for s in sends {
            self.publish(s.flow_idx, s.payload);
        }
        if let Some(spec) = self.timer_specs.iter().find(|t| t.id == id) {
            let period = spec.period_us;
            self.schedule_in(period, Ev::AppTimer { id });
        }
    }

    // -- reliable transport -------------------------------------------------

    fn rel_publish(&mut self, conn: usize, msg: Message, priority: u8) {
        let max_payload = self.session.max_fragment_payload();
        let frags = fragment(&msg, max_payload, priority, self.now);
        let small = msg.payload.len() < max_payload;
        let c = &mut self.conns[conn];
        if c.nagle && small && !c.outstanding.is_empty() {
            // Coalesce small writes while data is in flight.
            c.nagle_buf.extend(frags);
        } else {
            for frag in frags {
                c.send_buf.push_back(vec![frag]);
            }
        }
        self.rel_pump(conn);
    }

    fn rel_pump(&mut self, conn: usize) {
        loop {
            let c = &mut self.conns[conn];
            if c.state != RelState::Connected
                || c.outstanding.len() >= REL_WINDOW
                || c.send_buf.is_empty()
            {
                break;
            }
            let frags = c.send_buf.pop_front().unwrap();
            let seg = c.next_seg;
            c.next_seg += 1;
            c.outstanding.insert(
                seg,
                RelOutstanding {
                    frags: frags.clone(),
                    first_sent_us: self.now,
                    rto_gen: 0,
                },
            );
            self.rel_send_data(conn, seg, frags);
            self.schedule_in(REL_RTO_US, Ev::RelRto { conn, seg, gen: 0 });
        }
    }

    fn rel_send_data(&mut self, conn: usize, seg: u64, frags: Vec<Fragment>) {
        let c = &self.conns[conn];
        let (src, dst, flow_id) = (c.src, c.dst, c.flow_id);
        let payload: usize = frags.iter().map(|f| f.payload.len()).sum();
        let seq = frags[0].header.message_seq;
        let bytes = self.session.frame_bytes(payload);
        let frame = self.new_frame(flow_id, seq, src, dst, bytes, FrameKind::RelData { conn, seg, frags });
        self.push_os_queue(src, frame);
        self.nic_maybe_start(src);
    }

    fn rel_send_ack(&mut self, conn: usize) {
        let c = &self.conns[conn];
        let (src, dst, flow_id) = (c.dst, c.src, c.flow_id);
        let through = c.expected_seg.wrapping_sub(1);
        let bytes = self.session.frame_bytes(REL_ACK_PAYLOAD_BYTES);
        let frame = self.new_frame(flow_id, 0, src, dst, bytes, FrameKind::RelAck { conn, through });
        self.push_os_queue(src, frame);
        self.nic_maybe_start(src);
    }

    fn rel_data_arrive(&mut self, conn: usize, seg: u64, frags: Vec<Fragment>) {
        let expected = self.conns[conn].expected_seg;
        if seg < expected {
            // Duplicate after an ack loss: re-ack immediately.
            self.rel_send_ack(conn);
            return;
        }
        if seg > expected {
            self.conns[conn].ooo.insert(seg, frags);
        } else {
            let mut deliver = vec![frags];
            {
                let c = &mut self.conns[conn];
                c.expected_seg += 1;
                while let Some(next) = c.ooo.remove(&c.expected_seg) {
                    deliver.push(next);
                    c.expected_seg += 1;
                }
            }
            let node = self.conns[conn].dst;
            for group in deliver {
                for frag in group {
                    let completed = {
                        let c = &mut self.conns[conn];
                        c.rx.ingest_fragment(frag, self.now)
                            .ok()
                            .and_then(|r| r.completed)
                    };
                    if let Some(msg) = completed {
                        self.deliver_message(node, msg);
                    }
                }
            }
        }
        // Delayed ack: first segment arms the timer, the second (or the
        // timer) releases a cumulative ack.
        if self.conns[conn].ack_armed {
            self.conns[conn].ack_armed = false;
            self.rel_send_ack(conn);
        } else {
            let c = &mut self.conns[conn];
            c.ack_armed = true;
            c.ack_gen += 1;
            let gen = c.ack_gen;
            self.schedule_in(REL_DELAYED_ACK_US, Ev::RelDelayedAck { conn, gen });
        }
    }

    fn rel_ack_arrive(&mut self, conn: usize, through: u64) {
        {
            let c = &mut self.conns[conn];
            let acked: Vec<u64> = c
                .outstanding
                .range(..=through)
                .map(|(&s, _)| s)
                .collect();
            for s in acked {
                c.outstanding.remove(&s);
            }
        }
        if self.conns[conn].outstanding.is_empty() {
            let buffered: Vec<Fragment> = self.conns[conn].nagle_buf.drain(..).collect();
            for frag in buffered {
                self.conns[conn].send_buf.push_back(vec![frag]);
            }
        }
        self.rel_pump(conn);
    }

    fn rel_rto(&mut self, conn: usize, seg: u64, gen: u32) {
        let (stale, lost_for) = {
            let c = &self.conns[conn];
            match c.outstanding.get(&seg) {
                Some(o) if o.rto_gen == gen && c.state == RelState::Connected => {
                    (false, self.now.saturating_sub(o.first_sent_us))
                }
                _ => (true, 0),
            }
        };
        if stale {
            return;
        }
        if lost_for > REL_CONN_LOSS_US {
            // The peer looks gone: stop retransmitting data and probe
            // for reconnection instead.
            let c = &mut self.conns[conn];
            c.state = RelState::Reconnecting;
            c.syn_gen += 1;
            let gen = c.syn_gen;
            self.schedule_in(0, Ev::RelSynRetry { conn, gen });
            return;
        }
        let frags = {
            let c = &mut self.conns[conn];
            let o = c.outstanding.get_mut(&seg).unwrap();
            o.rto_gen += 1;
            o.frags.clone()
        };
        let gen = self.conns[conn].outstanding[&seg].rto_gen;
        self.rel_send_data(conn, seg, frags);
        self.schedule_in(REL_RTO_US, Ev::RelRto { conn, seg, gen });
    }

    fn rel_syn_retry(&mut self, conn: usize, gen: u32) {
        let c = &self.conns[conn];
        if c.state != RelState::Reconnecting || c.syn_gen != gen {
            return;
        }
        let (src, dst, flow_id) = (c.src, c.dst, c.flow_id);
        let bytes = self.session.frame_bytes(REL_ACK_PAYLOAD_BYTES);
        let frame = self.new_frame(flow_id, 0, src, dst, bytes, FrameKind::RelSyn { conn, reply: false });
        self.push_os_queue(src, frame);
        self.nic_maybe_start(src);
        self.schedule_in(REL_SYN_RETRY_US, Ev::RelSynRetry { conn, gen });
    }

    fn rel_syn_arrive(&mut self, conn: usize, reply: bool) {
        if !reply {
            let c = &self.conns[conn];
            let (src, dst, flow_id) = (c.dst, c.src, c.flow_id);
            let bytes = self.session.frame_bytes(REL_ACK_PAYLOAD_BYTES);
            let frame = self.new_frame(flow_id, 0, src, dst, bytes, FrameKind::RelSyn { conn, reply: true });
            self.push_os_queue(src, frame);
            self.nic_maybe_start(src);
            return;
        }
        if self.conns[conn].state == RelState::Reconnecting {
            self.conns[conn].state = RelState::Resuming;
            self.schedule_in(self.handshake_us, Ev::RelResume { conn });
        }
    }

    fn rel_resume(&mut self, conn: usize) {
        self.conns[conn].state = RelState::Connected;
        let outstanding: Vec<(u64, Vec<Fragment>, u32)> = {
            let c = &mut self.conns[conn];
            c.outstanding
                .iter_mut()
                .map(|(&seg, o)| {
                    o.rto_gen += 1;
                    o.first_sent_us = self.now;
                    (seg, o.frags.clone(), o.rto_gen)
                })
                .collect()
        };
        for (seg, frags, gen) in outstanding {
            self.rel_send_data(conn, seg, frags);
            self.schedule_in(REL_RTO_US, Ev::RelRto { conn, seg, gen });
        }
        self.rel_pump(conn);
    }
}

fn next_hop(node: usize, dst: usize) -> usize {
    if dst > node {
        node + 1
    } else {
        node - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laser(transport: TransportKind) -> FlowSpec {
        FlowSpec {
            name: "laser".into(),
            flow_id: 1,
            message_size: 1024,
            period_us: 20_000,
            count: 100,
            priority: 7,
            transport,
            src: 0,
            dst: 1,
            start_offset_us: 0,
        }
    }

    #[test]
    fn zero_flows_yield_an_empty_trace() {
        let topo = Topology::chain(2, LinkModel::default());
        let r = run_scenario(&topo, &SessionConfig::default(), &[], 1_000_000, 1).unwrap();
        assert!(r.trace.records.is_empty());
        assert!(r.log.deliveries.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let topo = Topology::chain(3, LinkModel {
            loss_prob: 0.1,
            ..LinkModel::default()
        });
        let flows = [laser(TransportKind::Pound)];
        let a = run_scenario(&topo, &SessionConfig::default(), &flows, 3_000_000, 9).unwrap();
        let b = run_scenario(&topo, &SessionConfig::default(), &flows, 3_000_000, 9).unwrap();
        assert_eq!(a.trace.records, b.trace.records);
        assert_eq!(a.log.deliveries, b.log.deliveries);
        let c = run_scenario(&topo, &SessionConfig::default(), &flows, 3_000_000, 10).unwrap();
        assert_ne!(a.trace.records, c.trace.records);
    }

    #[test]
    fn configuration_errors_are_reported_before_running() {
        let topo = Topology::chain(2, LinkModel::default());
        let mut bad = laser(TransportKind::Pound);
        bad.dst = 5;
        let err = run_scenario(&topo, &SessionConfig::default(), &[bad], 1, 1).unwrap_err();
        assert!(matches!(err, SimError::BadFlowEndpoints { .. }));

        let mut lossy = Topology::chain(2, LinkModel::default());
        lossy.links[0].loss_prob = 1.0;
        let err = run_scenario(&lossy, &SessionConfig::default(), &[laser(TransportKind::Pound)], 1, 1)
            .unwrap_err();
        assert_eq!(err, SimError::BadLossProb(0));
    }

    #[test]
    fn lossless_pound_flow_delivers_every_message_exactly_once() {
        let topo = Topology::chain(2, LinkModel {
            loss_prob: 0.0,
            ..LinkModel::default()
        });
        let flows = [laser(TransportKind::Pound)];
        let r = run_scenario(&topo, &SessionConfig::default(), &flows, 5_000_000, 3).unwrap();
        assert_eq!(r.log.deliveries.len(), 100);
        assert!(r.log.deliveries.iter().all(|d| d.payload_ok));
        let mut seqs: Vec<u32> = r.log.deliveries.iter().map(|d| d.seq).collect();
        seqs.sort_unstable();
        seqs.dedup();
        assert_eq!(seqs.len(), 100);
    }

    #[test]
    fn shared_medium_transmissions_never_overlap() {
        let topo = Topology::chain(3, LinkModel {
            loss_prob: 0.05,
            ..LinkModel::default()
        });
        let flows = [laser(TransportKind::Pound)];
        let mut spec2 = laser(TransportKind::PerflowUnreliable);
        spec2.flow_id = 2;
        spec2.dst = 2;
        let flows: Vec<FlowSpec> = flows.into_iter().chain([spec2]).collect();
        let r = run_scenario(&topo, &SessionConfig::default(), &flows, 3_000_000, 5).unwrap();
        let mut txs = r.transmissions.clone();
        txs.sort_by_key(|t| t.start_us);
        for w in txs.windows(2) {
            assert!(
                w[1].start_us >= w[0].end_us,
                "overlap: {:?} then {:?}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn every_enqueued_frame_reaches_exactly_one_terminal_state() {
        let mut link = LinkModel::default();
        link.loss_prob = 0.3;
        link.max_retries = 1;
        let mut topo = Topology::chain(3, link);
        topo.os_queue_frames = 20;
        let mut image = laser(TransportKind::PerflowUnreliable);
        image.flow_id = 3;
        image.message_size = 40_000;
        image.period_us = 100_000;
        image.count = 20;
        image.dst = 2;
        // Stop generating long before the horizon so everything drains.
        let r = run_scenario(&topo, &SessionConfig::default(), &[image], 60_000_000, 7).unwrap();
        use std::collections::BTreeMap;
        let mut per_frame: BTreeMap<u64, (u32, u32)> = BTreeMap::new();
        for rec in &r.trace.records {
            if rec.frame_id == 0 {
                continue;
            }
            let e = per_frame.entry(rec.frame_id).or_insert((0, 0));
            match rec.event {
                EventKind::Enqueued => e.0 += 1,
                EventKind::Delivered | EventKind::Lost | EventKind::Dropped => e.1 += 1,
                EventKind::Sent => {}
            }
        }
        for (frame, (enq, term)) in per_frame {
            assert_eq!(enq, 1, "frame {frame} enqueued {enq} times");
            assert_eq!(term, 1, "frame {frame} reached {term} terminal states");
        }
    }
}

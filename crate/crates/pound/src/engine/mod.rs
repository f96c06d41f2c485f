//! The Pound transport engine: message fragmentation, the priority
//! transmit queue, pacing, and receiver-side reassembly.
//!
//! The engine is channel-agnostic. It runs over a real datagram socket
//! (see [`crate::udpnet`]) or inside the discrete-event simulator
//! (see [`crate::netsim`]); both drive the same queue, pacer and
//! reassembly state.

mod pacer;
mod queue;
mod reassembly;
mod sender;

pub use pacer::{pacing_interval_us, Pacer};
pub use queue::{EnqueueReport, TxQueue};
pub use reassembly::{
    DiscardReason, DiscardedMessage, IngestError, IngestReport, ReassemblyState,
};
pub use sender::{run_sender, DatagramSink, SharedTxQueue};

use crate::wire::{Fragment, FragmentHeader};

/// One logical unit of flow data, as handed to the transport by the
/// application and as reconstructed at the receiver.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub flow_id: u16,
    /// Strictly increasing per flow at the sender.
    pub seq: u32,
    pub payload: Vec<u8>,
    /// Sender-epoch microseconds at publication.
    pub publish_time_us: u64,
}

/// Static per-flow transport configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub flow_id: u16,
    /// 0 = lowest, 255 = highest.
    pub priority: u8,
    /// Source period of the flow; drives the reassembly timeout.
    pub nominal_period_us: u64,
    pub max_message_len: u32,
}

/// Session-wide transport parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    /// Largest frame the link carries without fragmenting.
    pub mtu: u32,
    /// Bytes subtracted from the MTU to get the fragment payload size.
    /// The default 52 accounts for the 24-byte wire header plus 28
    /// bytes of IP/UDP headers. Reproduction scenarios that treat the
    /// full MTU as payload set this to 0.
    pub header_overhead: u32,
    /// Nominal link rate used for pacing. The rate is configured, not
    /// measured; the pacing sleep is only meant to keep the OS
    /// transmit queue from overflowing.
    pub link_rate_bps: u64,
    /// Fallback discard timeout for incomplete messages on flows with
    /// no known period.
    pub reassembly_timeout_us: u64,
    pub queue_capacity_bytes: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            mtu: 1500,
            header_overhead: 52,
            link_rate_bps: 6_000_000,
            reassembly_timeout_us: 500_000,
            queue_capacity_bytes: 256 * 1024,
        }
    }
}

impl SessionConfig {
    /// Largest fragment payload a datagram of this session may carry.
    pub fn max_fragment_payload(&self) -> usize {
        debug_assert!(self.mtu > self.header_overhead);
        (self.mtu - self.header_overhead) as usize
    }

    /// Frame size charged to the link for a fragment payload of
    /// `payload_len` bytes: payload + IP/UDP/wire overhead + header.
    pub fn frame_bytes(&self, payload_len: usize) -> u64 {
        payload_len as u64 + self.header_overhead as u64 + crate::wire::HEADER_LEN as u64
    }
}

/// Splits a message into `ceil(len / max_payload)` fragments (at least
/// one, so empty liveness messages stay expressible). Concatenating the
/// payloads in `frag_index` order reproduces the message payload.
pub fn fragment(m: &Message, max_payload: usize, priority: u8, now_us: u64) -> Vec<Fragment> {
    assert!(max_payload > 0, "max_payload must be positive");
    let total = m.payload.len();
    let count = if total == 0 {
        1
    } else {
        total.div_ceil(max_payload)
    };
    assert!(
        count <= u16::MAX as usize,
        "message of {} bytes needs more than 65535 fragments",
        total
    );
    let mut frags = Vec::with_capacity(count);
    for idx in 0..count {
        let lo = idx * max_payload;
        let hi = ((idx + 1) * max_payload).min(total);
        frags.push(Fragment {
            header: FragmentHeader {
                priority,
                flow_id: m.flow_id,
                message_seq: m.seq,
                frag_index: idx as u16,
                frag_count: count as u16,
                total_message_len: total as u32,
                send_timestamp_us: now_us,
            },
            payload: m.payload[lo..hi].to_vec(),
        });
    }
    frags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn msg(len: usize) -> Message {
        Message {
            flow_id: 3,
            seq: 9,
            payload: (0..len).map(|i| (i % 251) as u8).collect(),
            publish_time_us: 42,
        }
    }

    #[test]
    fn a_64k_message_splits_into_44_mtu_fragments() {
        let frags = fragment(&msg(65536), 1500, 1, 0);
        assert_eq!(frags.len(), 44);
        assert!(frags.iter().all(|f| f.header.frag_count == 44));
        assert_eq!(frags.last().unwrap().payload.len(), 65536 - 43 * 1500);
    }

    #[test]
    fn small_message_is_one_fragment() {
        let frags = fragment(&msg(100), 1448, 5, 7);
        assert_eq!(frags.len(), 1);
        let h = frags[0].header;
        assert_eq!(h.frag_count, 1);
        assert_eq!(h.priority, 5);
        assert_eq!(h.send_timestamp_us, 7);
        assert_eq!(h.total_message_len, 100);
    }

    #[test]
    fn empty_message_is_one_empty_fragment() {
        let frags = fragment(&msg(0), 1448, 0, 0);
        assert_eq!(frags.len(), 1);
        assert!(frags[0].payload.is_empty());
        assert_eq!(frags[0].header.total_message_len, 0);
    }

    #[test]
    fn default_session_payload_is_mtu_minus_overhead() {
        let cfg = SessionConfig::default();
        assert_eq!(cfg.max_fragment_payload(), 1448);
        assert_eq!(cfg.frame_bytes(1448), 1500 + 24);
    }

    proptest! {
        #[test]
        fn concatenated_fragments_reproduce_the_payload(
            len in 0usize..10 * 1400,
            max_payload in 1usize..1500,
        ) {
            let m = msg(len);
            let frags = fragment(&m, max_payload, 2, 11);
            prop_assert_eq!(frags.len(), len.div_ceil(max_payload).max(1));
            let mut rebuilt = Vec::new();
            for (i, f) in frags.iter().enumerate() {
                prop_assert_eq!(f.header.frag_index as usize, i);
                prop_assert_eq!(f.header.frag_count as usize, frags.len());
                prop_assert_eq!(f.header.total_message_len as usize, len);
                rebuilt.extend_from_slice(&f.payload);
            }
            prop_assert_eq!(rebuilt, m.payload);
        }
    }
}

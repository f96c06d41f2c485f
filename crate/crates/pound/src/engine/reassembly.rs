//! Receiver-side message reconstruction.
//!
//! Fragments of a message may arrive in any order, interleaved across
//! flows. A message is delivered exactly once, when its last missing
//! fragment arrives. There are no retransmissions, so an incomplete
//! message is eventually discarded: either because a newer message on
//! the same flow starts or finishes reassembly (late data is useless),
//! or because it outlived the flow's reassembly timeout.

use std::collections::HashMap;

use thiserror::Error;

use crate::engine::Message;
use crate::wire::Fragment;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    /// A newer message on the same flow began or completed reassembly.
    SupersededByNewer,
    /// The message sat incomplete longer than the reassembly timeout.
    TimedOut,
    /// Fragments of the message carried contradictory headers.
    InconsistentHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscardedMessage {
    pub flow_id: u16,
    pub seq: u32,
    pub reason: DiscardReason,
}

/// What one ingested fragment produced.
#[derive(Debug, Default)]
pub struct IngestReport {
    /// Set when this fragment completed its message.
    pub completed: Option<Message>,
    /// Pending messages purged as a side effect.
    pub discarded: Vec<DiscardedMessage>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("fragment headers disagree for flow {flow_id} seq {seq}; message dropped")]
    InconsistentHeader { flow_id: u16, seq: u32 },
}

#[derive(Debug)]
struct Pending {
    frag_count: u16,
    total_len: u32,
    received: usize,
    slots: Vec<Option<Vec<u8>>>,
    first_arrival_us: u64,
    priority: u8,
    send_timestamp_us: u64,
}

#[derive(Debug)]
pub struct ReassemblyState {
    pending: HashMap<(u16, u32), Pending>,
    /// Highest completed seq per flow; late fragments of delivered or
    /// superseded messages are dropped silently.
    completed_hwm: HashMap<u16, u32>,
    flow_timeout_us: HashMap<u16, u64>,
    default_timeout_us: u64,
}

impl ReassemblyState {
    pub fn new(default_timeout_us: u64) -> Self {
        ReassemblyState {
            pending: HashMap::new(),
            completed_hwm: HashMap::new(),
            flow_timeout_us: HashMap::new(),
            default_timeout_us,
        }
    }

    /// Overrides the discard timeout for one flow (typically twice the
    /// flow's nominal period).
    pub fn set_flow_timeout(&mut self, flow_id: u16, timeout_us: u64) {
        self.flow_timeout_us.insert(flow_id, timeout_us);
    }

    fn timeout_for(&self, flow_id: u16) -> u64 {
        self.flow_timeout_us
            .get(&flow_id)
            .copied()
            .unwrap_or(self.default_timeout_us)
    }

    pub fn pending_count(&self) -> usize {
        self.pending.len()
    }

    /// Feeds one decoded fragment into the state.
    pub fn ingest_fragment(
        &mut self,
        frag: Fragment,
        now_us: u64,
    ) -> Result<IngestReport, IngestError> {
        let h = frag.header;
        let key = (h.flow_id, h.message_seq);
        let mut report = IngestReport::default();

        // Fragments at or below a flow's completion high-water mark
        // belong to delivered or superseded messages.
        if let Some(&hwm) = self.completed_hwm.get(&h.flow_id) {
            if h.message_seq <= hwm {
                return Ok(report);
            }
        }

        // A stale pending entry is purged before the fragment is
        // considered; the fragment then starts a fresh attempt.
        if let Some(p) = self.pending.get(&key) {
            if now_us.saturating_sub(p.first_arrival_us) > self.timeout_for(h.flow_id) {
                self.pending.remove(&key);
                report.discarded.push(DiscardedMessage {
                    flow_id: h.flow_id,
                    seq: h.message_seq,
                    reason: DiscardReason::TimedOut,
                });
            }
        }

        let began = !self.pending.contains_key(&key);
        {
            let p = self.pending.entry(key).or_insert_with(|| Pending {
                frag_count: h.frag_count,
                total_len: h.total_message_len,
                received: 0,
                slots: vec![None; h.frag_count as usize],
                first_arrival_us: now_us,
                priority: h.priority,
                send_timestamp_us: h.send_timestamp_us,
            });
            if p.frag_count != h.frag_count || p.total_len != h.total_message_len {
                self.pending.remove(&key);
                return Err(IngestError::InconsistentHeader {
                    flow_id: h.flow_id,
                    seq: h.message_seq,
                });
            }
            let slot = &mut p.slots[h.frag_index as usize];
            if slot.is_none() {
                *slot = Some(frag.payload);
                p.received += 1;
            }
        }

        let complete = {
            let p = &self.pending[&key];
            p.received == p.frag_count as usize
        };
        if complete {
            let p = self.pending.remove(&key).expect("entry present");
            let mut payload = Vec::with_capacity(p.total_len as usize);
            for slot in p.slots {
                payload.extend_from_slice(&slot.expect("all slots filled"));
            }
            if payload.len() != p.total_len as usize {
                return Err(IngestError::InconsistentHeader {
                    flow_id: h.flow_id,
                    seq: h.message_seq,
                });
            }
            let hwm = self.completed_hwm.entry(h.flow_id).or_insert(0);
            *hwm = (*hwm).max(h.message_seq);
            report.completed = Some(Message {
                flow_id: h.flow_id,
                seq: h.message_seq,
                payload,
                publish_time_us: p.send_timestamp_us,
            });
        }

        if began || complete {
            // A newer message starting or finishing on a flow obsoletes
            // every older pending message of that flow.
            let stale: Vec<(u16, u32)> = self
                .pending
                .keys()
                .filter(|&&(flow, seq)| flow == h.flow_id && seq < h.message_seq)
                .copied()
                .collect();
            for old in stale {
                self.pending.remove(&old);
                report.discarded.push(DiscardedMessage {
                    flow_id: old.0,
                    seq: old.1,
                    reason: DiscardReason::SupersededByNewer,
                });
            }
        }

        Ok(report)
    }

    /// Purges every pending message older than its flow's timeout.
    pub fn expire_stale(&mut self, now_us: u64) -> Vec<DiscardedMessage> {
        let stale: Vec<(u16, u32)> = self
            .pending
            .iter()
            .filter(|(&(flow, _), p)| {
                now_us.saturating_sub(p.first_arrival_us) > self.timeout_for(flow)
            })
            .map(|(&k, _)| k)
            .collect();
        stale
            .into_iter()
            .map(|key| {
                self.pending.remove(&key);
                DiscardedMessage {
                    flow_id: key.0,
                    seq: key.1,
                    reason: DiscardReason::TimedOut,
                }
            })
            .collect()
    }

    /// Earliest deadline at which `expire_stale` would purge something.
    pub fn next_expiry_us(&self) -> Option<u64> {
        self.pending
            .iter()
            .map(|(&(flow, _), p)| p.first_arrival_us + self.timeout_for(flow))
            .min()
    }

    /// Priority recorded for a pending message, if any (diagnostics).
    pub fn pending_priority(&self, flow_id: u16, seq: u32) -> Option<u8> {
        self.pending.get(&(flow_id, seq)).map(|p| p.priority)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::fragment;
    use rand::seq::SliceRandom;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn mk_message(flow: u16, seq: u32, len: usize) -> Message {
        Message {
            flow_id: flow,
            seq,
            payload: (0..len).map(|i| ((i * 31 + seq as usize) % 256) as u8).collect(),
            publish_time_us: 1000,
        }
    }

    #[test]
    fn single_fragment_message_completes_immediately() {
        let mut r = ReassemblyState::new(500_000);
        let m = mk_message(1, 0, 100);
        let frags = fragment(&m, 1448, 5, 2000);
        let report = r.ingest_fragment(frags.into_iter().next().unwrap(), 2500).unwrap();
        let got = report.completed.unwrap();
        assert_eq!(got.payload, m.payload);
        assert_eq!(got.publish_time_us, 2000);
        assert_eq!(r.pending_count(), 0);
    }

    #[test]
    fn newer_message_discards_older_incomplete_one() {
        let mut r = ReassemblyState::new(500_000);
        let old = fragment(&mk_message(1, 0, 4000), 1448, 5, 0);
        // Fragments 0 and 1 of a 3-fragment message arrive.
        r.ingest_fragment(old[0].clone(), 10).unwrap();
        r.ingest_fragment(old[1].clone(), 20).unwrap();
        assert_eq!(r.pending_count(), 1);

        // First fragment of the next seq begins reassembly: the old one goes.
        let new = fragment(&mk_message(1, 1, 4000), 1448, 5, 100);
        let report = r.ingest_fragment(new[0].clone(), 110).unwrap();
        assert_eq!(
            report.discarded,
            vec![DiscardedMessage {
                flow_id: 1,
                seq: 0,
                reason: DiscardReason::SupersededByNewer
            }]
        );

        // Remaining fragments complete the newer message.
        r.ingest_fragment(new[1].clone(), 120).unwrap();
        let report = r.ingest_fragment(new[2].clone(), 130).unwrap();
        assert_eq!(report.completed.unwrap().seq, 1);

        // Stragglers of the discarded message no longer resurrect it.
        let report = r.ingest_fragment(old[2].clone(), 140).unwrap();
        assert!(report.completed.is_none());
        assert_eq!(r.pending_count(), 0);
    }

    #[test]
    fn random_arrival_order_rebuilds_bit_identical_payload() {
        let mut rng = StdRng::seed_from_u64(46);
        let m = mk_message(7, 3, 46 * 1448 - 17);
        let mut frags = fragment(&m, 1448, 1, 0);
        assert_eq!(frags.len(), 46);
        for _ in 0..10 {
            frags.shuffle(&mut rng);
            let mut r = ReassemblyState::new(500_000);
            let mut delivered = None;
            for f in frags.clone() {
                let report = r.ingest_fragment(f, 0).unwrap();
                if let Some(msg) = report.completed {
                    assert!(delivered.is_none(), "delivered more than once");
                    delivered = Some(msg);
                }
            }
            assert_eq!(delivered.unwrap().payload, m.payload);
        }
    }

    #[test]
    fn duplicates_are_idempotent() {
        let mut r = ReassemblyState::new(500_000);
        let frags = fragment(&mk_message(1, 0, 3000), 1448, 5, 0);
        r.ingest_fragment(frags[0].clone(), 0).unwrap();
        let rep = r.ingest_fragment(frags[0].clone(), 1).unwrap();
        assert!(rep.completed.is_none());
        r.ingest_fragment(frags[1].clone(), 2).unwrap();
        let rep = r.ingest_fragment(frags[2].clone(), 3).unwrap();
        assert!(rep.completed.is_some());
        // Replay after completion delivers nothing.
        for f in frags {
            assert!(r.ingest_fragment(f, 4).unwrap().completed.is_none());
        }
    }

    #[test]
    fn stale_pending_message_times_out() {
        let mut r = ReassemblyState::new(500_000);
        r.set_flow_timeout(1, 40_000); // 2 x 20 ms period
        let frags = fragment(&mk_message(1, 0, 3000), 1448, 5, 0);
        r.ingest_fragment(frags[0].clone(), 0).unwrap();
        assert_eq!(r.next_expiry_us(), Some(40_000));
        assert!(r.expire_stale(40_000).is_empty());
        let discarded = r.expire_stale(40_001);
        assert_eq!(
            discarded,
            vec![DiscardedMessage {
                flow_id: 1,
                seq: 0,
                reason: DiscardReason::TimedOut
            }]
        );
        assert_eq!(r.pending_count(), 0);
    }

    #[test]
    fn contradictory_headers_drop_the_message() {
        let mut r = ReassemblyState::new(500_000);
        let frags = fragment(&mk_message(1, 0, 3000), 1448, 5, 0);
        r.ingest_fragment(frags[0].clone(), 0).unwrap();
        let mut bad = frags[1].clone();
        bad.header.total_message_len = 999;
        assert_eq!(
            r.ingest_fragment(bad, 1).unwrap_err(),
            IngestError::InconsistentHeader { flow_id: 1, seq: 0 }
        );
        assert_eq!(r.pending_count(), 0);
    }
}

//! Bounded transmit queue ordered by flow priority.
//!
//! Fragments are queued per message and drained in (priority desc,
//! enqueue order asc) order, so a small high-priority message never
//! waits behind the remaining fragments of a large low-priority one.
//! On overflow, whole messages are evicted starting from the lowest
//! priority present; a partial message is useless at the receiver, so
//! eviction is never fragment-granular.

use std::cmp::Reverse;
use std::collections::{BTreeMap, VecDeque};

use crate::wire::Fragment;

/// Sort key: priority descending, then enqueue order ascending.
type QueueKey = (Reverse<u8>, u64);

#[derive(Debug)]
struct QueuedMessage {
    flow_id: u16,
    seq: u32,
    frags: VecDeque<Fragment>,
    bytes: usize,
}

/// Outcome of an enqueue: either the message was accepted (possibly
/// evicting lower-priority messages) or rejected leaving the queue
/// unchanged. Rejection is an in-band outcome, not an error.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EnqueueReport {
    pub accepted: bool,
    /// Whole messages removed to make room, as (flow_id, seq).
    pub evicted: Vec<(u16, u32)>,
    pub rejected: bool,
}

#[derive(Debug)]
pub struct TxQueue {
    messages: BTreeMap<QueueKey, QueuedMessage>,
    capacity_bytes: usize,
    current_bytes: usize,
    next_order: u64,
}

impl TxQueue {
    pub fn new(capacity_bytes: usize) -> Self {
        TxQueue {
            messages: BTreeMap::new(),
            capacity_bytes,
            current_bytes: 0,
            next_order: 0,
        }
    }

    pub fn current_bytes(&self) -> usize {
        self.current_bytes
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Number of queued fragments.
    pub fn len(&self) -> usize {
        self.messages.values().map(|m| m.frags.len()).sum()
    }

    /// Enqueues all fragments of one message.
    ///
    /// If free capacity does not suffice, victims are evicted whole,
    /// lowest priority first (oldest first within a priority level),
    /// considering only messages of strictly lower priority than the
    /// incoming one. If even that cannot make room, the incoming
    /// message is rejected and the queue is left untouched.
    pub fn enqueue(&mut self, frags: Vec<Fragment>) -> EnqueueReport {
        assert!(!frags.is_empty(), "a message has at least one fragment");
        let head = frags[0].header;
        debug_assert!(frags.iter().all(|f| {
            f.header.flow_id == head.flow_id
                && f.header.message_seq == head.message_seq
                && f.header.priority == head.priority
        }));
        let needed: usize = frags.iter().map(Fragment::encoded_len).sum();

        if self.current_bytes + needed > self.capacity_bytes {
            // Plan evictions among strictly lower-priority messages,
            // lowest priority first, oldest first within a level.
            let mut candidates: Vec<(QueueKey, usize)> = self
                .messages
                .iter()
                .filter(|((Reverse(prio), _), _)| *prio < head.priority)
                .map(|(&key, m)| (key, m.bytes))
                .collect();
            candidates.sort_by_key(|&((Reverse(prio), order), _)| (prio, order));

            let mut freed = 0usize;
            let mut victims = Vec::new();
            for (key, bytes) in candidates {
                if self.current_bytes - freed + needed <= self.capacity_bytes {
                    break;
                }
                freed += bytes;
                victims.push(key);
            }
            if self.current_bytes - freed + needed > self.capacity_bytes {
                return EnqueueReport {
                    accepted: false,
                    evicted: Vec::new(),
                    rejected: true,
                };
            }
            let mut evicted = Vec::with_capacity(victims.len());
            for key in victims {
                let m = self.messages.remove(&key).expect("victim present");
                self.current_bytes -= m.bytes;
                evicted.push((m.flow_id, m.seq));
            }
            self.insert(head.priority, head.flow_id, head.message_seq, frags, needed);
            return EnqueueReport {
                accepted: true,
                evicted,
                rejected: false,
            };
        }

        self.insert(head.priority, head.flow_id, head.message_seq, frags, needed);
        EnqueueReport {
            accepted: true,
            evicted: Vec::new(),
            rejected: false,
        }
    }

    fn insert(&mut self, priority: u8, flow_id: u16, seq: u32, frags: Vec<Fragment>, bytes: usize) {
        let key = (Reverse(priority), self.next_order);
        self.next_order += 1;
        self.current_bytes += bytes;
        self.messages.insert(
            key,
            QueuedMessage {
                flow_id,
                seq,
                frags: frags.into(),
                bytes,
            },
        );
    }

    /// Removes and returns the front fragment under the queue order.
    pub fn pop_next(&mut self) -> Option<Fragment> {
        let mut entry = self.messages.first_entry()?;
        let m = entry.get_mut();
        let frag = m.frags.pop_front().expect("queued messages are non-empty");
        m.bytes -= frag.encoded_len();
        self.current_bytes -= frag.encoded_len();
        if m.frags.is_empty() {
            entry.remove();
        }
        Some(frag)
    }

    /// Priority of the fragment `pop_next` would return.
    pub fn peek_priority(&self) -> Option<u8> {
        self.messages.keys().next().map(|(Reverse(p), _)| *p)
    }
}

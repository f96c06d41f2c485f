//! Real-time transmit loop.
//!
//! One thread owns the loop: pop the most-priority fragment, hand it to
//! the datagram channel, then sleep the fragment's pacing interval
//! before the next pop. Send failures are counted and the fragment is
//! dropped; the transport never retransmits. The queue is shared with
//! any number of producer threads.
//!
//! The discrete-event simulator does not use this loop; it drives the
//! same [`TxQueue`] and [`Pacer`] from its virtual clock instead.

use std::io;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use crate::engine::{EnqueueReport, Pacer, SessionConfig, TxQueue};
use crate::wire::{encode_fragment, Fragment};

/// Datagram-send capability; implemented by UDP endpoints and by test
/// channels.
pub trait DatagramSink {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()>;
}

impl<F: FnMut(&[u8]) -> io::Result<()>> DatagramSink for F {
    fn send(&mut self, datagram: &[u8]) -> io::Result<()> {
        self(datagram)
    }
}

/// Transmit queue shared between producers and the sender loop.
/// All mutation happens under one mutex; producers wake the sender.
pub struct SharedTxQueue {
    queue: Mutex<TxQueue>,
    nonempty: Condvar,
}

impl SharedTxQueue {
    pub fn new(capacity_bytes: usize) -> Self {
        SharedTxQueue {
            queue: Mutex::new(TxQueue::new(capacity_bytes)),
            nonempty: Condvar::new(),
        }
    }

    pub fn enqueue(&self, frags: Vec<Fragment>) -> EnqueueReport {
        let report = self.queue.lock().unwrap().enqueue(frags);
        if report.accepted {
            self.nonempty.notify_one();
        }
        report
    }

    pub fn pop_next(&self) -> Option<Fragment> {
        self.queue.lock().unwrap().pop_next()
    }

    pub fn current_bytes(&self) -> usize {
        self.queue.lock().unwrap().current_bytes()
    }
}

/// Live counters of the transmit loop.
#[derive(Debug, Default)]
pub struct SenderCounters {
    pub sent: AtomicU64,
    pub failed: AtomicU64,
}

/// Runs the paced transmit loop until `stop` is raised.
pub fn run_sender<S: DatagramSink>(
    queue: &SharedTxQueue,
    sink: &mut S,
    cfg: &SessionConfig,
    stop: &AtomicBool,
    counters: &SenderCounters,
) {
    let mut pacer = Pacer::new(cfg.link_rate_bps);
    while !stop.load(Ordering::Acquire) {
        let popped = queue.queue.lock().unwrap().pop_next();
        match popped {
            Some(frag) => {
                let frame_bytes = cfg.frame_bytes(frag.payload.len());
                match sink.send(&encode_fragment(&frag)) {
                    Ok(()) => {
                        counters.sent.fetch_add(1, Ordering::Relaxed);
                    }
                    Err(_) => {
                        counters.failed.fetch_add(1, Ordering::Relaxed);
                    }
                }
                let wait = pacer.on_sent(frame_bytes);
                if wait > 0 {
                    std::thread::sleep(Duration::from_micros(wait));
                }
            }
            None => {
                pacer.reset();
                let guard = queue.queue.lock().unwrap();
                // Bounded wait so a raised stop flag is noticed promptly.
                let _unused = self_park(&queue.nonempty, guard);
            }
        }
    }
}

fn self_park<'a>(
    condvar: &Condvar,
    guard: std::sync::MutexGuard<'a, TxQueue>,
) -> std::sync::MutexGuard<'a, TxQueue> {
    let (guard, _timeout) = condvar
        .wait_timeout_while(guard, Duration::from_millis(20), |q| q.is_empty())
        .unwrap();
    guard
}

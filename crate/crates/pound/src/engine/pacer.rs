//! Transmit pacing at the nominal link rate.
//!
//! After sending a frame the transmit loop sleeps for roughly the
//! frame's serialization time, so the OS queue never receives a burst
//! it cannot drain. A 1024-byte frame at 6 Mbps sleeps 1365 us.

/// Serialization time of `bytes` at `link_rate_bps`, in whole
/// microseconds (rounded down).
pub fn pacing_interval_us(bytes: u64, link_rate_bps: u64) -> u64 {
    assert!(link_rate_bps > 0, "link rate must be positive");
    ((bytes as u128 * 8 * 1_000_000) / link_rate_bps as u128) as u64
}

/// Pacing accumulator for one busy period of the transmit loop.
///
/// Per-frame waits are derived from the cumulative byte count so that
/// rounding never drifts: after sending B total frame-bytes within a
/// busy period, the waits sum to exactly `ceil(B * 8e6 / rate)` us.
#[derive(Debug, Clone)]
pub struct Pacer {
    link_rate_bps: u64,
    busy_bytes: u64,
    waited_us: u64,
}

impl Pacer {
    pub fn new(link_rate_bps: u64) -> Self {
        assert!(link_rate_bps > 0, "link rate must be positive");
        Pacer {
            link_rate_bps,
            busy_bytes: 0,
            waited_us: 0,
        }
    }

    /// Accounts one sent frame and returns the wait before the next pop.
    pub fn on_sent(&mut self, frame_bytes: u64) -> u64 {
        self.busy_bytes += frame_bytes;
        let bits = self.busy_bytes as u128 * 8 * 1_000_000;
        let target = bits.div_ceil(self.link_rate_bps as u128) as u64;
        let wait = target - self.waited_us;
        self.waited_us = target;
        wait
    }

    /// Ends the busy period; called when the queue runs dry.
    pub fn reset(&mut self) {
        self.busy_bytes = 0;
        self.waited_us = 0;
    }
}

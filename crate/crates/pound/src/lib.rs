//! Priority transport for competing message flows over a single
//! unreliable datagram channel, plus a discrete-event wireless network
//! simulator and the benchmark harness used to evaluate it.
//!
//! The transport fragments messages into MTU-sized datagrams, keeps a
//! bounded transmit queue ordered by flow priority, paces transmission
//! at the nominal link rate, and reassembles messages at the receiver,
//! discarding incomplete ones instead of retransmitting.
//!
//! Crate layout:
//! - [`wire`]: the fragment wire format (bit-exact, little-endian).
//! - [`engine`]: fragmentation, priority queue, pacing, reassembly.
//! - [`netsim`]: deterministic simulator of a shared-medium wireless
//!   chain with MAC retries, OS transmit queues and baseline
//!   transports for comparison.
//! - [`bench`]: flow generation and jitter/delay/MDR/bandwidth
//!   statistics.
//! - [`control`]: the networked RLC control-loop experiment.
//! - [`udpnet`]: real UDP socket backend and the echo-based delay
//!   probe.
//! - [`scenario`]: experiment configuration files and CSV artifact
//!   writers used by the CLI.

pub mod bench;
pub mod control;
pub mod engine;
pub mod netsim;
pub mod scenario;
pub mod udpnet;
pub mod wire;

//! Fragment wire format (protocol v1).
//!
//! Every datagram carries one fragment: a fixed 24-byte little-endian
//! header followed by the payload slice. The layout below is the wire
//! protocol and must stay bit-exact across implementations:
//!
//! ```text
//! offset  size  field
//!      0     1  version (always 1)
//!      1     1  priority (0 = lowest, 255 = highest)
//!    2-3     2  flow_id
//!    4-7     4  message_seq
//!    8-9     2  frag_index
//!  10-11     2  frag_count
//!  12-15     4  total_message_len (bytes)
//!  16-23     8  send_timestamp_us (sender-epoch microseconds)
//! ```
//!
//! The timestamp is sender-epoch, not wall clock: delay measurement is
//! done by echoing the timestamp back to the sender, so receiver clocks
//! never enter the arithmetic. There is no checksum; the UDP/link layer
//! already provides one.

use thiserror::Error;

/// Encoded header size in bytes.
pub const HEADER_LEN: usize = 24;

/// Current (and only) wire protocol version.
pub const WIRE_VERSION: u8 = 1;

/// Fixed-size header prepended to every fragment payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentHeader {
    pub priority: u8,
    pub flow_id: u16,
    /// Per-flow monotone message counter.
    pub message_seq: u32,
    pub frag_index: u16,
    pub frag_count: u16,
    /// Length of the whole message this fragment belongs to.
    pub total_message_len: u32,
    pub send_timestamp_us: u64,
}

/// One MTU-sized slice of a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fragment {
    pub header: FragmentHeader,
    pub payload: Vec<u8>,
}

impl Fragment {
    /// Size of the encoded datagram: header plus payload.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("buffer too short for fragment header: {0} bytes")]
    TooShort(usize),
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("invalid fragment counts: index {index} of {count}")]
    BadCounts { index: u16, count: u16 },
}

/// Encodes a fragment into its datagram bytes. Encoding a valid
/// fragment cannot fail.
pub fn encode_fragment(f: &Fragment) -> Vec<u8> {
    let h = &f.header;
    let mut buf = Vec::with_capacity(HEADER_LEN + f.payload.len());
    buf.push(WIRE_VERSION);
    buf.push(h.priority);
    buf.extend_from_slice(&h.flow_id.to_le_bytes());
    buf.extend_from_slice(&h.message_seq.to_le_bytes());
    buf.extend_from_slice(&h.frag_index.to_le_bytes());
    buf.extend_from_slice(&h.frag_count.to_le_bytes());
    buf.extend_from_slice(&h.total_message_len.to_le_bytes());
    buf.extend_from_slice(&h.send_timestamp_us.to_le_bytes());
    debug_assert_eq!(buf.len(), HEADER_LEN);
    buf.extend_from_slice(&f.payload);
    buf
}

/// Decodes a datagram; the whole buffer past the header is the payload.
pub fn decode_fragment(buf: &[u8]) -> Result<Fragment, DecodeError> {
    if buf.len() < HEADER_LEN {
        return Err(DecodeError::TooShort(buf.len()));
    }
    if buf[0] != WIRE_VERSION {
        return Err(DecodeError::BadVersion(buf[0]));
    }
    let header = FragmentHeader {
        priority: buf[1],
        flow_id: u16::from_le_bytes([buf[2], buf[3]]),
        message_seq: u32::from_le_bytes([buf[4], buf[5], buf[6], buf[7]]),
        frag_index: u16::from_le_bytes([buf[8], buf[9]]),
        frag_count: u16::from_le_bytes([buf[10], buf[11]]),
        total_message_len: u32::from_le_bytes([buf[12], buf[13], buf[14], buf[15]]),
        send_timestamp_us: u64::from_le_bytes([
            buf[16], buf[17], buf[18], buf[19], buf[20], buf[21], buf[22], buf[23],
        ]),
    };
    if header.frag_count == 0 || header.frag_index >= header.frag_count {
        return Err(DecodeError::BadCounts {
            index: header.frag_index,
            count: header.frag_count,
        });
    }
    Ok(Fragment {
        header,
        payload: buf[HEADER_LEN..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frag(header: FragmentHeader, payload: Vec<u8>) -> Fragment {
        Fragment { header, payload }
    }

    #[test]
    fn all_zero_fields_encode_to_one_then_zeros() {
        let f = frag(
            FragmentHeader {
                priority: 0,
                flow_id: 0,
                message_seq: 0,
                frag_index: 0,
                frag_count: 1,
                total_message_len: 0,
                send_timestamp_us: 0,
            },
            vec![],
        );
        let bytes = encode_fragment(&f);
        assert_eq!(bytes.len(), 24);
        assert_eq!(bytes[0], 0x01);
        // frag_count=1 lives at offset 10
        let mut expected = vec![0u8; 24];
        expected[0] = 0x01;
        expected[10] = 0x01;
        assert_eq!(bytes, expected);
    }

    #[test]
    fn header_layout_matches_hand_built_bytes() {
        // Independent byte-layout oracle: build the expected buffer by
        // direct indexing, never through the encoder.
        let h = FragmentHeader {
            priority: 7,
            flow_id: 258,
            message_seq: 1,
            frag_index: 0,
            frag_count: 2,
            total_message_len: 2000,
            send_timestamp_us: 1_000_000,
        };
        let payload = vec![0xABu8; 1448];
        let bytes = encode_fragment(&frag(h, payload.clone()));
        assert_eq!(bytes.len(), 24 + 1448);
        assert_eq!(&bytes[..8], &[0x01, 0x07, 0x02, 0x01, 0x01, 0x00, 0x00, 0x00]);

        let mut expected = vec![0u8; 24];
        expected[0] = 1;
        expected[1] = 7;
        expected[2] = (258 % 256) as u8;
        expected[3] = (258 / 256) as u8;
        expected[4] = 1;
        expected[8] = 0;
        expected[10] = 2;
        expected[12] = (2000 % 256) as u8;
        expected[13] = (2000 / 256) as u8;
        expected[16] = (1_000_000u64 & 0xFF) as u8;
        expected[17] = ((1_000_000u64 >> 8) & 0xFF) as u8;
        expected[18] = ((1_000_000u64 >> 16) & 0xFF) as u8;
        assert_eq!(&bytes[..24], &expected[..]);
        assert_eq!(&bytes[24..], &payload[..]);
    }

    #[test]
    fn too_short_buffer_is_rejected() {
        assert_eq!(decode_fragment(&[0u8; 23]), Err(DecodeError::TooShort(23)));
        assert_eq!(decode_fragment(&[]), Err(DecodeError::TooShort(0)));
    }

    #[test]
    fn bad_version_is_rejected() {
        let mut buf = vec![0u8; 24];
        buf[0] = 2;
        buf[10] = 1;
        assert_eq!(decode_fragment(&buf), Err(DecodeError::BadVersion(2)));
    }

    #[test]
    fn bad_counts_are_rejected() {
        let mut buf = vec![0u8; 24];
        buf[0] = 1;
        // frag_count = 0
        assert!(matches!(
            decode_fragment(&buf),
            Err(DecodeError::BadCounts { count: 0, .. })
        ));
        // frag_index == frag_count
        buf[8] = 3;
        buf[10] = 3;
        assert!(matches!(
            decode_fragment(&buf),
            Err(DecodeError::BadCounts { index: 3, count: 3 })
        ));
    }

    prop_compose! {
        fn arb_fragment()(
            priority in any::<u8>(),
            flow_id in any::<u16>(),
            message_seq in any::<u32>(),
            frag_count in 1u16..200,
            total_message_len in any::<u32>(),
            send_timestamp_us in any::<u64>(),
            payload in proptest::collection::vec(any::<u8>(), 0..3000),
        )(
            frag_index in 0..frag_count,
            priority in Just(priority),
            flow_id in Just(flow_id),
            message_seq in Just(message_seq),
            frag_count in Just(frag_count),
            total_message_len in Just(total_message_len),
            send_timestamp_us in Just(send_timestamp_us),
            payload in Just(payload),
        ) -> Fragment {
            Fragment {
                header: FragmentHeader {
                    priority, flow_id, message_seq, frag_index, frag_count,
                    total_message_len, send_timestamp_us,
                },
                payload,
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(f in arb_fragment()) {
            let bytes = encode_fragment(&f);
            prop_assert_eq!(bytes.len(), 24 + f.payload.len());
            let back = decode_fragment(&bytes).unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn encode_is_deterministic(f in arb_fragment()) {
            prop_assert_eq!(encode_fragment(&f), encode_fragment(&f));
        }
    }
}

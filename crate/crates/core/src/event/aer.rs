//! Fixed 8-byte AER codec.
//!
//! Layout of one record, all little-endian:
//!
//! | bytes | field                                            |
//! |-------|--------------------------------------------------|
//! | 0..4  | `t`, unsigned microseconds                       |
//! | 4..6  | `x`, unsigned column                             |
//! | 6..8  | bit 15: polarity (1 = on, 0 = off); bits 0..15: `y` |

use super::{EventRecord, EventStream, Polarity, MAX_AER_ROWS};
use crate::error::{Error, Result};

pub const AER_RECORD_BYTES: usize = 8;

const POLARITY_BIT: u16 = 0x8000;

pub fn parse_aer(bytes: &[u8], height: usize, width: usize) -> Result<EventStream> {
    if !bytes.len().is_multiple_of(AER_RECORD_BYTES) {
        return Err(Error::TruncatedRecord(bytes.len()));
    }
    let records = bytes
        .chunks_exact(AER_RECORD_BYTES)
        .map(|c| {
            let t = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let x = u16::from_le_bytes([c[4], c[5]]);
            let yp = u16::from_le_bytes([c[6], c[7]]);
            let p = if yp & POLARITY_BIT != 0 {
                Polarity::On
            } else {
                Polarity::Off
            };
            EventRecord::new(t, x, yp & !POLARITY_BIT, p)
        })
        .collect();
    EventStream::new(height, width, records)
}

pub fn serialize_aer(stream: &EventStream) -> Vec<u8> {
    debug_assert!(stream.height() <= MAX_AER_ROWS);
    let mut out = Vec::with_capacity(stream.len() * AER_RECORD_BYTES);
    for r in stream.records() {
        out.extend_from_slice(&r.t.to_le_bytes());
        out.extend_from_slice(&r.x.to_le_bytes());
        let mut yp = r.y;
        if r.p == Polarity::On {
            yp |= POLARITY_BIT;
        }
        out.extend_from_slice(&yp.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_EVENT: [u8; 8] = [0x0A, 0x00, 0x00, 0x00, 0x05, 0x00, 0x03, 0x80];

    #[test]
    fn empty_input_gives_empty_stream() {
        let s = parse_aer(&[], 4, 4).unwrap();
        assert!(s.is_empty());
        assert!(serialize_aer(&s).is_empty());
    }

    #[test]
    fn hand_decoded_record() {
        let s = parse_aer(&ONE_EVENT, 8, 8).unwrap();
        assert_eq!(s.records(), &[EventRecord::new(10, 5, 3, Polarity::On)]);
        assert_eq!(serialize_aer(&s), ONE_EVENT.to_vec());
    }

    #[test]
    fn off_polarity_clears_top_bit() {
        let s = EventStream::new(8, 8, vec![EventRecord::new(10, 5, 3, Polarity::Off)]).unwrap();
        assert_eq!(serialize_aer(&s)[6..8], [0x03, 0x00]);
    }

    #[test]
    fn truncated_input_rejected() {
        assert!(matches!(
            parse_aer(&ONE_EVENT[..7], 8, 8),
            Err(Error::TruncatedRecord(7))
        ));
    }

    #[test]
    fn coordinates_outside_sensor_rejected() {
        assert!(matches!(
            parse_aer(&ONE_EVENT, 3, 8),
            Err(Error::OutOfBounds { y: 3, .. })
        ));
        assert!(matches!(
            parse_aer(&ONE_EVENT, 8, 5),
            Err(Error::OutOfBounds { x: 5, .. })
        ));
    }

    #[test]
    fn unsorted_input_is_reordered() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&[20, 0, 0, 0, 1, 0, 1, 0x80]);
        bytes.extend_from_slice(&ONE_EVENT);
        let s = parse_aer(&bytes, 8, 8).unwrap();
        assert_eq!(s.records()[0].t, 10);
        assert_eq!(s.records()[1].t, 20);
    }
}

//! Event-camera data: AER records, event streams and their temporal
//! aggregation into fixed-size tensors.

mod aer;
mod evt0;
mod voxel;

pub use aer::{parse_aer, serialize_aer, AER_RECORD_BYTES};
pub use evt0::{read_evt0, write_evt0, Planar};
pub use voxel::{normalize_tensor, voxelize, EventTensor};

use crate::error::{Error, Result};

/// Largest row index representable in the 15-bit AER `y` field.
pub const MAX_AER_ROWS: usize = 1 << 15;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Off,
    On,
}

impl Polarity {
    pub fn sign(self) -> i32 {
        match self {
            Polarity::On => 1,
            Polarity::Off => -1,
        }
    }

    pub fn from_sign(sign: f64) -> Polarity {
        if sign >= 0.0 {
            Polarity::On
        } else {
            Polarity::Off
        }
    }

    pub fn flipped(self) -> Polarity {
        match self {
            Polarity::On => Polarity::Off,
            Polarity::Off => Polarity::On,
        }
    }
}

/// A single event: timestamp in microseconds, pixel column/row, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct EventRecord {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl EventRecord {
    pub fn new(t: u32, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }

    fn order_key(&self) -> (u32, u16, u16) {
        (self.t, self.y, self.x)
    }
}

/// Events of one sensor, sorted by timestamp with ties broken by `(y, x)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    height: usize,
    width: usize,
    records: Vec<EventRecord>,
}

impl EventStream {
    /// Builds a stream, checking coordinates and restoring the canonical order.
    ///
    /// The sort is stable, so events sharing `(t, y, x)` keep their relative order.
    pub fn new(height: usize, width: usize, mut records: Vec<EventRecord>) -> Result<Self> {
        if height == 0 || width == 0 || height > MAX_AER_ROWS || width > u16::MAX as usize + 1 {
            return Err(Error::BadConfig(format!(
                "unsupported sensor resolution {height}x{width}"
            )));
        }
        for r in &records {
            if r.x as usize >= width || r.y as usize >= height {
                return Err(Error::OutOfBounds {
                    x: r.x as u32,
                    y: r.y as u32,
                    width,
                    height,
                });
            }
        }
        if !records
            .windows(2)
            .all(|w| w[0].order_key() <= w[1].order_key())
        {
            records.sort_by_key(EventRecord::order_key);
        }
        Ok(Self {
            height,
            width,
            records,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, Vec::new())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Copy of the stream with every polarity inverted.
    pub fn with_flipped_polarity(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            records: self
                .records
                .iter()
                .map(|r| EventRecord {
                    p: r.p.flipped(),
                    ..*r
                })
                .collect(),
        }
    }

    /// Copy of the stream with all timestamps moved by `offset` microseconds.
    pub fn shifted(&self, offset: i64) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| {
                let t = r.t as i64 + offset;
                u32::try_from(t)
                    .map(|t| EventRecord { t, ..*r })
                    .map_err(|_| Error::InvalidWindow(format!("timestamp {t} out of u32 range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            height: self.height,
            width: self.width,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_sorts_by_time_then_row_then_column() {
        let recs = vec![
            EventRecord::new(5, 1, 0, Polarity::On),
            EventRecord::new(5, 0, 1, Polarity::Off),
            EventRecord::new(5, 0, 0, Polarity::On),
            EventRecord::new(1, 3, 3, Polarity::On),
        ];
        let s = EventStream::new(4, 4, recs).unwrap();
        let keys: Vec<_> = s.records().iter().map(|r| (r.t, r.y, r.x)).collect();
        assert_eq!(keys, vec![(1, 3, 3), (5, 0, 0), (5, 0, 1), (5, 1, 0)]);
    }

    #[test]
    fn out_of_bounds_rejected() {
        let err =
            EventStream::new(4, 4, vec![EventRecord::new(0, 4, 0, Polarity::On)]).unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { x: 4, .. }));
    }
}

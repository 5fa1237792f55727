use super::EventStream;
use crate::error::{Error, Result};

/// Signed event integrals around an exposure midpoint, `2M x H x W`.
///
/// Channel `c` holds `S_c` for `c < M` and `S_{c+1}` otherwise; the
/// identically-zero `S_M` is not stored.
#[derive(Clone, Debug, PartialEq)]
pub struct EventTensor {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// Exposure midpoint, microseconds.
    pub t_f: f64,
    /// Exposure duration, microseconds.
    pub duration: f64,
    /// Half-interval count.
    pub m: usize,
}

impl EventTensor {
    pub fn zeros(m: usize, height: usize, width: usize, t_f: f64, duration: f64) -> Self {
        Self {
            data: vec![0.0; 2 * m * height * width],
            height,
            width,
            t_f,
            duration,
            m,
        }
    }

    pub fn channels(&self) -> usize {
        2 * self.m
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.height + y) * self.width + x]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Boundary `m` of the aggregation window, `0 <= m <= 2M`.
    pub fn boundary(&self, m: usize) -> f64 {
        boundary(self.t_f, self.duration, self.m, m)
    }
}

pub(crate) fn boundary(t_f: f64, duration: f64, half: usize, m: usize) -> f64 {
    t_f + (m as f64 - half as f64) * duration / (2 * half) as f64
}

/// Aggregates `stream` into `2M` signed integrals anchored at `t_f`.
///
/// For `m > M`, `S_m` sums polarities over `(t_f, b_m]`; for `m < M`,
/// `S_m` is minus the polarity sum over `[b_m, t_f)`. Events at exactly
/// `t_f` or outside `[b_0, b_2M]` contribute nothing.
pub fn voxelize(stream: &EventStream, t_f: f64, duration: f64, m: usize) -> Result<EventTensor> {
    if m == 0 {
        return Err(Error::InvalidWindow(
            "half-interval count M must be >= 1".into(),
        ));
    }
    if !(duration > 0.0) || !duration.is_finite() || !t_f.is_finite() {
        return Err(Error::InvalidWindow(format!(
            "exposure T={duration} at t_f={t_f}"
        )));
    }
    let (h, w) = (stream.height(), stream.width());
    let mut out = EventTensor::zeros(m, h, w, t_f, duration);
    let plane = h * w;
    let bounds: Vec<f64> = (0..=2 * m).map(|i| boundary(t_f, duration, m, i)).collect();

    for r in stream.records() {
        let t = r.t as f64;
        let sign = r.p.sign() as f32;
        let pix = r.y as usize * w + r.x as usize;
        if t > t_f {
            // Every forward boundary at or beyond t sees the event.
            for (bm, &b) in bounds.iter().enumerate().skip(m + 1) {
                if t <= b {
                    out.data[(bm - 1) * plane + pix] += sign;
                }
            }
        } else if t < t_f {
            for (bm, &b) in bounds.iter().enumerate().take(m) {
                if t >= b {
                    out.data[bm * plane + pix] -= sign;
                }
            }
        }
    }
    Ok(out)
}

/// Scales by the largest magnitude so entries land in `[-1, 1]`.
pub fn normalize_tensor(t: &EventTensor) -> EventTensor {
    let max = t.max_abs();
    let mut out = t.clone();
    if max > 0.0 {
        out.data.iter_mut().for_each(|v| *v /= max);
    }
    out
}

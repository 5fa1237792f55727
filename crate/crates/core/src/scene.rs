//! Procedural latent videos with physically consistent blur and events, and
//! the analytic event double-integral deblurring used as ground truth.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::event::{EventRecord, EventStream, Planar, Polarity};

/// Lowest intensity any generated pixel may take.
pub const INTENSITY_FLOOR: f64 = 0.05;

// Crossing tolerance in log-intensity units; absorbs exp/log round-off.
const CROSSING_EPS: f64 = 1e-6;

/// Single-channel intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn to_planar(&self) -> Planar {
        Planar {
            channels: 1,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    Static,
    /// Pixels per frame, wrapping around the image borders.
    Translate {
        vx: f64,
        vy: f64,
    },
    /// Global log-intensity step between the two frames around mid-exposure.
    Step {
        delta_log: f64,
    },
}

impl Motion {
    pub fn is_static(&self) -> bool {
        matches!(self, Motion::Static)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pattern {
    Bars,
    Checker,
    Noise,
}

/// `static`, `translate:VX,VY` or `step:DELTA`.
impl FromStr for Motion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::BadConfig(format!(
                "motion must be static, translate:VX,VY or step:DELTA, got {s:?}"
            ))
        };
        let num = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(bad)
        };
        let (kind, args) = s.split_once(':').unwrap_or((s, ""));
        match kind.trim() {
            "static" if args.is_empty() => Ok(Motion::Static),
            "translate" => {
                let (vx, vy) = args.split_once(',').ok_or_else(bad)?;
                Ok(Motion::Translate {
                    vx: num(vx)?,
                    vy: num(vy)?,
                })
            }
            "step" => Ok(Motion::Step {
                delta_log: num(args)?,
            }),
            _ => Err(bad()),
        }
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bars" => Ok(Pattern::Bars),
            "checker" => Ok(Pattern::Checker),
            "noise" => Ok(Pattern::Noise),
            _ => Err(Error::BadConfig(format!("unknown pattern {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub motion: Motion,
    pub pattern: Pattern,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Frame spacing, microseconds.
    pub frame_dt: f64,
    /// Start of the exposure, microseconds.
    pub t_start: f64,
    /// Contrast threshold in log-intensity units.
    pub contrast: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn new(pattern: Pattern, motion: Motion, seed: u64) -> Self {
        Self {
            motion,
            pattern,
            height: 32,
            width: 32,
            frames: 9,
            frame_dt: 1000.0,
            t_start: 10_000.0,
            contrast: 0.15,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::BadConfig(format!(
                "scene must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(Error::BadConfig("scene needs at least one frame".into()));
        }
        if !(self.contrast > 0.0) {
            return Err(Error::BadConfig(format!(
                "contrast threshold must be positive, got {}",
                self.contrast
            )));
        }
        if !(self.frame_dt >= 2.0) || !(self.t_start >= 0.0) {
            return Err(Error::BadConfig(
                "frame spacing must be >= 2us and start >= 0".into(),
            ));
        }
        let end = self.t_start + self.frames as f64 * self.frame_dt;
        if end > u32::MAX as f64 {
            return Err(Error::BadConfig(
                "video extends past the u32 timestamp range".into(),
            ));
        }
        if let Motion::Step { delta_log } = self.motion {
            if !(delta_log.abs() < 2.5) {
                return Err(Error::BadConfig(format!(
                    "step of {delta_log} log units cannot fit in [{INTENSITY_FLOOR}, 1]"
                )));
            }
        }
        if let Motion::Translate { vx, vy } = self.motion {
            if !vx.is_finite() || !vy.is_finite() {
                return Err(Error::BadConfig("non-finite velocity".into()));
            }
        }
        Ok(())
    }
}

/// Sharp frames sampled at the centres of `frames` equal sub-intervals of
/// the exposure `[t_start, t_start + N_f * frame_dt]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    pub frames: Vec<Image>,
    pub frame_dt: f64,
    pub t_start: f64,
}

impl LatentVideo {
    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    /// Exposure duration `T`.
    pub fn span(&self) -> f64 {
        self.frames.len() as f64 * self.frame_dt
    }

    /// Exposure midpoint `t_f`.
    pub fn midpoint(&self) -> f64 {
        self.t_start + 0.5 * self.span()
    }

    pub fn frame_time(&self, i: usize) -> f64 {
        self.t_start + (i as f64 + 0.5) * self.frame_dt
    }

    /// Latent image at time `t`: log-linear between frame centres, held
    /// constant before the first and after the last centre.
    pub fn latent_at(&self, t: f64) -> Image {
        let n = self.frames.len();
        let pos = (t - self.t_start) / self.frame_dt - 0.5;
        if n == 1 || pos <= 0.0 {
            return self.frames[0].clone();
        }
        if pos >= (n - 1) as f64 {
            return self.frames[n - 1].clone();
        }
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        if frac == 0.0 {
            return self.frames[i].clone();
        }
        let (a, b) = (&self.frames[i], &self.frames[i + 1]);
        Image {
            height: a.height,
            width: a.width,
            data: a
                .data
                .iter()
                .zip(&b.data)
                .map(|(&u, &v)| ((1.0 - frac) * u.ln() + frac * v.ln()).exp())
                .collect(),
        }
    }

    /// The sharp frame at the exposure midpoint.
    pub fn sharp_midpoint(&self) -> Image {
        self.latent_at(self.midpoint())
    }
}

fn base_pattern(cfg: &SceneConfig, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Image {
    let (h, w) = (cfg.height, cfg.width);
    let mut img = Image::filled(h, w, lo);
    match cfg.pattern {
        Pattern::Bars => {
            let period = rng.random_range(4.0..(w.min(h) as f64 / 2.0).max(5.0));
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let phase = rng.random_range(0.0..period);
            let (ct, st) = (theta.cos(), theta.sin());
            for y in 0..h {
                for x in 0..w {
                    let u = (x as f64 * ct + y as f64 * st + phase).rem_euclid(period);
                    img.data[y * w + x] = if u < period / 2.0 { hi } else { lo };
                }
            }
        }
        Pattern::Checker => {
            let cell = rng.random_range(3..=8usize);
            let (ox, oy) = (rng.random_range(0..cell), rng.random_range(0..cell));
            for y in 0..h {
                for x in 0..w {
                    let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
                    img.data[y * w + x] = if on { hi } else { lo };
                }
            }
        }
        Pattern::Noise => {
            let cell = rng.random_range(2..=4usize);
            let (gh, gw) = (h.div_ceil(cell), w.div_ceil(cell));
            let cells: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(lo..=hi)).collect();
            for y in 0..h {
                for x in 0..w {
                    img.data[y * w + x] = cells[(y / cell) * gw + x / cell];
                }
            }
        }
    }
    img
}

// Bilinear sample of `img` at fractional position with wrap-around.
fn sample_wrapped(img: &Image, y: f64, x: f64) -> f64 {
    let (h, w) = (img.height as f64, img.width as f64);
    let (y, x) = (y.rem_euclid(h), x.rem_euclid(w));
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as usize % img.height, x0 as usize % img.width);
    let (y1, x1) = ((y0 + 1) % img.height, (x0 + 1) % img.width);
    let top = img.at(y0, x0) * (1.0 - fx) + if fx > 0.0 { img.at(y0, x1) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = img.at(y1, x0) * (1.0 - fx) + if fx > 0.0 { img.at(y1, x1) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Generates a deterministic latent video from `cfg`.
pub fn gen_scene(cfg: &SceneConfig) -> Result<LatentVideo> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (u_lo, u_hi): (f64, f64) = (rng.random(), rng.random());
    // Both sides of a step must stay inside [floor, 1].
    let (floor, ceil) = match cfg.motion {
        Motion::Step { delta_log } => (
            INTENSITY_FLOOR * (-delta_log).exp().max(1.0),
            (-delta_log).exp().min(1.0),
        ),
        _ => (INTENSITY_FLOOR, 1.0),
    };
    let range = ceil - floor;
    let lo = floor + 0.25 * u_lo * range;
    let hi = floor + (0.6 + 0.4 * u_hi) * range;
    let base = base_pattern(cfg, &mut rng, lo, hi);

    let frames = (0..cfg.frames)
        .map(|i| match cfg.motion {
            Motion::Static => base.clone(),
            Motion::Translate { vx, vy } => {
                let (dx, dy) = (vx * i as f64, vy * i as f64);
                let mut f = Image::filled(base.height, base.width, 0.0);
                for y in 0..base.height {
                    for x in 0..base.width {
                        f.data[y * base.width + x] =
                            sample_wrapped(&base, y as f64 - dy, x as f64 - dx);
                    }
                }
                f
            }
            Motion::Step { delta_log } => {
                if i >= cfg.frames / 2 && cfg.frames > 1 {
                    base.scaled(delta_log.exp())
                } else {
                    base.clone()
                }
            }
        })
        .map(|mut f| {
            f.data
                .iter_mut()
                .for_each(|v| *v = v.clamp(INTENSITY_FLOOR, 1.0));
            f
        })
        .collect();

    Ok(LatentVideo {
        frames,
        frame_dt: cfg.frame_dt,
        t_start: cfg.t_start,
    })
}

/// Pixel-wise mean of the frames: the Riemann sum of the exposure integral.
pub fn render_blurry(v: &LatentVideo) -> Image {
    let n = v.frames.len() as f64;
    let mut acc = Image::filled(v.height(), v.width(), 0.0);
    for f in &v.frames {
        for (a, b) in acc.data.iter_mut().zip(&f.data) {
            *a += b;
        }
    }
    acc.data.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Emits an event each time a pixel's log-intensity moves a further `c`
/// away from its reference level; the reference then jumps to the crossed
/// level. Log-intensity is linear between frame centres.
pub fn simulate_events(v: &LatentVideo, c: f64) -> Result<EventStream> {
    if !(c > 0.0) {
        return Err(Error::BadConfig(format!(
            "contrast threshold must be positive, got {c}"
        )));
    }
    let (h, w) = (v.height(), v.width());
    let mut records = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let mut reference = v.frames[0].data[idx].ln();
            for i in 0..v.frames.len().saturating_sub(1) {
                let a = v.frames[i].data[idx].ln();
                let b = v.frames[i + 1].data[idx].ln();
                if a == b {
                    continue;
                }
                let dir = (b - a).signum();
                let t0 = v.frame_time(i);
                while dir * (b - reference) >= c - CROSSING_EPS {
                    let level = reference + dir * c;
                    let frac = ((level - a) / (b - a)).clamp(0.0, 1.0);
                    let t = (t0 + frac * v.frame_dt).round() as u32;
                    records.push(EventRecord::new(
                        t,
                        x as u16,
                        y as u16,
                        Polarity::from_sign(dir),
                    ));
                    reference = level;
                }
            }
        }
    }
    EventStream::new(h, w, records)
}

/// Signed event integral `E(t)` from `t_f` to `t` for every pixel.
///
/// Uses the same half-open convention as voxelization: after `t_f` the
/// interval is `(t_f, t]`, before it `[t, t_f)` with the sign reversed.
pub fn event_integral(stream: &EventStream, t_f: f64, t: f64) -> Vec<f64> {
    let mut e = vec![0.0; stream.height() * stream.width()];
    for r in stream.records() {
        let te = r.t as f64;
        let pix = r.y as usize * stream.width() + r.x as usize;
        if t > t_f && te > t_f && te <= t {
            e[pix] += r.p.sign() as f64;
        } else if t < t_f && te < t_f && te >= t {
            e[pix] -= r.p.sign() as f64;
        }
    }
    e
}

/// Midpoint-rule nodes over the exposure window.
pub fn quadrature_nodes(t_f: f64, duration: f64, steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|k| t_f - duration / 2.0 + (k as f64 + 0.5) * duration / steps as f64)
        .collect()
}

/// Recovers the latent frame at `t_f` from a blurry image and its events:
/// `blurry * T / sum_k w_k exp(c E(t_k))`, clamped to `(0, 1]`.
pub fn edi_deblur(
    blurry: &Image,
    stream: &EventStream,
    c: f64,
    t_f: f64,
    duration: f64,
    steps: usize,
) -> Result<Image> {
    if steps < 2 {
        return Err(Error::BadConfig(format!(
            "need at least 2 quadrature steps, got {steps}"
        )));
    }
    if !(duration > 0.0) {
        return Err(Error::InvalidWindow(format!("exposure T={duration}")));
    }
    if stream.height() != blurry.height || stream.width() != blurry.width {
        return Err(Error::shape(format!(
            "blurry {}x{} vs events {}x{}",
            blurry.height,
            blurry.width,
            stream.height(),
            stream.width()
        )));
    }
    if let Some(bad) = blurry.data.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::NonPositiveInput(format!("blurry pixel value {bad}")));
    }
    let weight = duration / steps as f64;
    let mut denom = vec![0.0; blurry.data.len()];
    for t in quadrature_nodes(t_f, duration, steps) {
        for (d, e) in denom.iter_mut().zip(event_integral(stream, t_f, t)) {
            *d += weight * (c * e).exp();
        }
    }
    Ok(Image {
        height: blurry.height,
        width: blurry.width,
        data: blurry
            .data
            .iter()
            .zip(&denom)
            .map(|(b, d)| (b * duration / d).min(1.0))
            .collect(),
    })
}

//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use jeit::dataset::{synth_dataset, DatasetSpec, Sample};
use jeit::event::{EventRecord, EventStream, Polarity};
use jeit::pipeline::ModelConfig;
use jeit::scene::{event_integral, LatentVideo};
use jeit::transforms::{Mode, TransformConfig};
use rand::Rng;

pub fn random_records<R: Rng>(
    rng: &mut R,
    h: usize,
    w: usize,
    n: usize,
    t: (u32, u32),
) -> Vec<EventRecord> {
    (0..n)
        .map(|_| {
            let p = if rng.random_bool(0.5) {
                Polarity::On
            } else {
                Polarity::Off
            };
            EventRecord::new(
                rng.random_range(t.0..=t.1),
                rng.random_range(0..w) as u16,
                rng.random_range(0..h) as u16,
                p,
            )
        })
        .collect()
}

/// Direct evaluation of every stored integral: for boundary `b_k` after the
/// midpoint, the polarity sum over `(t_f, b_k]`; before it, minus the sum
/// over `[b_k, t_f)`. One full scan of the events per pixel and channel.
pub fn voxel_oracle(
    records: &[EventRecord],
    h: usize,
    w: usize,
    t_f: f64,
    duration: f64,
    m: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(2 * m * h * w);
    for k in (0..=2 * m).filter(|&k| k != m) {
        let b = t_f + (k as f64 - m as f64) * duration / (2 * m) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0i64;
                for r in records
                    .iter()
                    .filter(|r| (r.x as usize, r.y as usize) == (x, y))
                {
                    let t = r.t as f64;
                    let p = r.p.sign() as i64;
                    if k > m && t > t_f && t <= b {
                        acc += p;
                    }
                    if k < m && t < t_f && t >= b {
                        acc -= p;
                    }
                }
                out.push(acc as f32);
            }
        }
    }
    out
}

/// Worst pixel gap between the blurry image and `sharp(t_f) * mean_k exp(c E(t_k))`
/// over the frame times `t_k`.
pub fn formation_residual(v: &LatentVideo, events: &EventStream, blurry: &[f64], c: f64) -> f64 {
    let n = v.frames.len();
    let mut factor = vec![0.0; blurry.len()];
    for k in 0..n {
        for (f, e) in factor
            .iter_mut()
            .zip(event_integral(events, v.midpoint(), v.frame_time(k)))
        {
            *f += (c * e).exp() / n as f64;
        }
    }
    let sharp = v.sharp_midpoint();
    blurry
        .iter()
        .zip(&sharp.data)
        .zip(&factor)
        .fold(0.0, |worst, ((b, s), f)| worst.max((b - s * f).abs()))
}

/// Probability mass of a unit Gaussian on `[-1/2, 1/2]` by composite Simpson.
pub fn unit_gaussian_bin_mass() -> f64 {
    let n = 2000;
    let (a, b) = (-0.5f64, 0.5f64);
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        s += pdf(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// 8x8 model with two-by-two patches, small enough for exhaustive checks.
pub fn desk_config(mode: Mode) -> ModelConfig {
    let mut cfg = ModelConfig {
        transform: TransformConfig {
            height: 8,
            width: 8,
            patch: 2,
            image_channels: 3,
            event_channels: 2,
            embed: 6,
            hidden: 8,
            latent: [4, 4, 4],
            hyper: 3,
            norm_eps: 1.0,
        },
        ..ModelConfig::default()
    };
    cfg.weights.mode = mode;
    cfg
}

pub fn desk_samples(n: usize, seed: u64) -> Vec<Sample> {
    let spec = DatasetSpec {
        count: n,
        height: 8,
        width: 8,
        m: 1,
        speed: (0.5, 1.0),
        seed,
        ..DatasetSpec::default()
    };
    synth_dataset(&spec)
        .unwrap()
        .iter()
        .map(|s| s.to_sample().unwrap())
        .collect()
}

pub fn default_samples(seed: u64) -> Vec<Sample> {
    let spec = DatasetSpec {
        seed,
        ..DatasetSpec::default()
    };
    synth_dataset(&spec)
        .unwrap()
        .iter()
        .map(|s| s.to_sample().unwrap())
        .collect()
}

/// Worst relative error between tape gradients (exact clamp derivatives)
/// and central differences over `coords` random parameter entries. Noise is
/// frozen by reseeding and the channel is noiseless. Parameters are jittered
/// first so the check runs at a generic point.
pub fn end_to_end_gradient_error(mode: Mode, coords: usize, seed: u64) -> f64 {
    use jeit::autodiff::{gradcheck::relative_error, ParamStore};
    use jeit::channel::Snr;
    use jeit::pipeline::{Batch, Model, Quantizer, TrainOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut cfg = desk_config(mode);
    cfg.transform.patch = 4;
    // At the default 255^2 the loss is large enough that central differences
    // of the small rate gradients drown in roundoff.
    cfg.weights.distortion_scale = 1.0;
    let mut model = Model::new(cfg).unwrap();
    // Zero biases put zero-input units on the activation kink; move off it.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model
            .store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-0.05..0.05));
    }
    let samples = desk_samples(2, seed);
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &model.cfg.transform).unwrap();
    let opts = TrainOptions {
        quantizer: Quantizer::Noise,
        snr: Snr::Noiseless,
    };
    let loss_at = |store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        m.forward_train(&batch, &opts, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap()
    };
    let pass = loss_at(&model.store);
    let grads = pass.tape.backward_exact(pass.loss).unwrap();

    let ids: Vec<_> = model
        .store
        .ids()
        .filter(|&id| grads.param(id).is_some())
        .collect();
    let mut probe = model.store.clone();
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let id = ids[rng.random_range(0..ids.len())];
        let index = rng.random_range(0..model.store.get(id).len());
        let orig = model.store.get(id).data()[index];
        let mut at = |x: f64| {
            probe.get_mut(id).data_mut()[index] = x;
            let p = loss_at(&probe);
            p.tape.value(p.loss).data()[0]
        };
        let numeric = (at(orig + eps) - at(orig - eps)) / (2.0 * eps);
        probe.get_mut(id).data_mut()[index] = orig;
        let analytic = grads.param(id).unwrap().data()[index];
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

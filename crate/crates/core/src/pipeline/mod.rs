//! The end-to-end model: loss for training, evaluation through the symbol
//! channel, the training loop and allocation reports.
//!
//! Every latent stream has its own hyperprior. In [`Mode::Full`] the three
//! latents go over the channel separately and three decoders run at the
//! receiver. In [`Mode::DeblurOnly`] the transmitter fuses the quantized
//! latents into one feature stream and only the deblurred image is decoded.

mod eval;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{
    inject_uniform_noise, quantize, read_checkpoint, write_checkpoint, ParamStore, Tape, Tensor,
    Var,
};
use crate::channel::{component_noise_std, Snr};
use crate::config::{KeyValues, KvDocument};
use crate::dataset::Sample;
use crate::entropy::{likelihood_conditional, rate_bits_var, FactorizedDensity};
use crate::error::{Error, Result};
use crate::rate_alloc::{MaskMaps, STREAMS};
use crate::transforms::{patchify, stack_rows, Mode, TransformConfig, Transforms};

pub use eval::{
    allocation_report, eval_table, evaluate, AllocationReport, EvalOptions, EvalOutput,
};
pub use train::{dataset_loss, train, TrainConfig, TrainReport};

/// Distortion weights and the length scale of the allocator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda_t: f64,
    /// Symbols per bit when turning per-vector rates into lengths.
    pub eta: f64,
    pub mode: Mode,
    /// Multiplies every squared error before weighting. The default, 255²,
    /// measures errors in 8-bit intensity steps: with errors on the `[0, 1]`
    /// scale a bit costs more than any pixel-level variance can repay, and
    /// the optimum sends nothing.
    pub distortion_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda_t: 2.0,
            eta: 0.24,
            mode: Mode::Full,
            distortion_scale: 65025.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda0", self.lambda0),
            ("lambda1", self.lambda1),
            ("lambda_t", self.lambda_t),
            ("eta", self.eta),
            ("distortion_scale", self.distortion_scale),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::BadConfig(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model before loading its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub transform: TransformConfig,
    pub weights: LossWeights,
    /// Initial spread of the factorized hyper-latent densities.
    pub density_init: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            transform: TransformConfig::default(),
            weights: LossWeights::default(),
            density_init: 4.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn to_kv(&self) -> KeyValues {
        let t = &self.transform;
        let w = &self.weights;
        let mut kv = KeyValues::new();
        kv.set("mode", w.mode);
        kv.set("height", t.height);
        kv.set("width", t.width);
        kv.set("patch", t.patch);
        kv.set("image_channels", t.image_channels);
        kv.set("event_channels", t.event_channels);
        kv.set("embed", t.embed);
        kv.set("hidden", t.hidden);
        for (i, c) in t.latent.iter().enumerate() {
            kv.set(&format!("latent{i}"), c);
        }
        kv.set("hyper", t.hyper);
        kv.set("norm_eps", t.norm_eps);
        kv.set("lambda0", w.lambda0);
        kv.set("lambda1", w.lambda1);
        kv.set("lambda_t", w.lambda_t);
        kv.set("eta", w.eta);
        kv.set("distortion_scale", w.distortion_scale);
        kv.set("density_init", self.density_init);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads known keys, falling back to defaults for absent ones.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let (dt, dw) = (&d.transform, &d.weights);
        let mut latent = dt.latent;
        for (i, c) in latent.iter_mut().enumerate() {
            *c = kv.get_or(&format!("latent{i}"), *c)?;
        }
        let cfg = Self {
            transform: TransformConfig {
                height: kv.get_or("height", dt.height)?,
                width: kv.get_or("width", dt.width)?,
                patch: kv.get_or("patch", dt.patch)?,
                image_channels: kv.get_or("image_channels", dt.image_channels)?,
                event_channels: kv.get_or("event_channels", dt.event_channels)?,
                embed: kv.get_or("embed", dt.embed)?,
                hidden: kv.get_or("hidden", dt.hidden)?,
                latent,
                hyper: kv.get_or("hyper", dt.hyper)?,
                norm_eps: kv.get_or("norm_eps", dt.norm_eps)?,
            },
            weights: LossWeights {
                lambda0: kv.get_or("lambda0", dw.lambda0)?,
                lambda1: kv.get_or("lambda1", dw.lambda1)?,
                lambda_t: kv.get_or("lambda_t", dw.lambda_t)?,
                eta: kv.get_or("eta", dw.eta)?,
                mode: kv.get_or("mode", dw.mode)?,
                distortion_scale: kv.get_or("distortion_scale", dw.distortion_scale)?,
            },
            density_init: kv.get_or("density_init", d.density_init)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.transform.validate()?;
        cfg.weights.validate()?;
        Ok(cfg)
    }
}

/// Path of the config file stored next to a checkpoint.
pub fn config_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("cfg")
}

/// A batch in row layout: `B * N` patch rows per input.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: Tensor,
    pub size: usize,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample], cfg: &TransformConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (h, w) = (cfg.height, cfg.width);
        let mut parts = [Vec::new(), Vec::new(), Vec::new()];
        for s in samples {
            for (k, (p, c)) in [
                (&s.x0, cfg.image_channels),
                (&s.x1, cfg.event_channels),
                (&s.t, cfg.image_channels),
            ]
            .into_iter()
            .enumerate()
            {
                if (p.channels, p.height, p.width) != (c, h, w) {
                    return Err(Error::shape(format!(
                        "sample {}: input {k} is {}x{}x{}, model expects {c}x{h}x{w}",
                        s.id, p.channels, p.height, p.width
                    )));
                }
                parts[k].push(patchify(p, cfg.patch)?);
            }
        }
        let [x0, x1, t] = parts;
        Ok(Self {
            x0: stack_rows(&x0)?,
            x1: stack_rows(&x1)?,
            t: stack_rows(&t)?,
            size: samples.len(),
        })
    }
}

/// How latents are quantized in [`Model::forward_train`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantizer {
    /// Additive `U(-1/2, 1/2)` noise.
    Noise,
    /// Rounding with a straight-through gradient.
    Round,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub quantizer: Quantizer,
    pub snr: Snr,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            quantizer: Quantizer::Noise,
            snr: Snr::Db(10.0),
        }
    }
}

/// Batch-averaged loss terms. Distortions are per-sample sums of squared
/// errors; rates are in bits. `d0`/`d1` are absent for deblur-only models.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub d0: Option<f64>,
    pub d1: Option<f64>,
    pub dt: f64,
    pub ry: [f64; STREAMS],
    pub rz: [f64; STREAMS],
}

impl LossParts {
    /// Weighted terms whose sum is the loss, labelled.
    pub fn terms(&self, w: &LossWeights) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        if let Some(d0) = self.d0 {
            out.push(("D0", w.distortion_scale * w.lambda0 * d0));
        }
        if let Some(d1) = self.d1 {
            out.push(("D1", w.distortion_scale * w.lambda1 * d1));
        }
        out.push(("Dt", w.distortion_scale * w.lambda_t * self.dt));
        for (name, v) in ["Ry0", "Ry1", "Ry2"].into_iter().zip(self.ry) {
            out.push((name, v));
        }
        for (name, v) in ["Rz0", "Rz1", "Rz2"].into_iter().zip(self.rz) {
            out.push((name, v));
        }
        out
    }

    pub fn total(&self, w: &LossWeights) -> f64 {
        self.terms(w).iter().map(|(_, v)| v).sum()
    }

    pub fn rate(&self) -> f64 {
        self.ry.iter().chain(&self.rz).sum()
    }

    fn accumulate(&mut self, other: &LossParts, k: f64) {
        let add = |a: &mut Option<f64>, b: Option<f64>| {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + k * b);
            }
        };
        add(&mut self.d0, other.d0);
        add(&mut self.d1, other.d1);
        self.dt += k * other.dt;
        for i in 0..STREAMS {
            self.ry[i] += k * other.ry[i];
            self.rz[i] += k * other.rz[i];
        }
    }
}

/// A recorded training forward pass, ready for `tape.backward(loss)`.
pub struct TrainPass {
    pub tape: Tape,
    pub loss: Var,
    pub parts: LossParts,
}

/// Parameters plus the modules that read them.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub transforms: Transforms,
    pub densities: [FactorizedDensity; STREAMS],
    /// Mask maps per transmitted stream.
    pub masks: [Option<MaskMaps>; STREAMS],
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let t = &cfg.transform;
        let transforms = Transforms::new(&mut store, t.clone(), cfg.weights.mode, &mut rng)?;
        let densities = [
            FactorizedDensity::new(&mut store, "density0", t.hyper, cfg.density_init, &mut rng)?,
            FactorizedDensity::new(&mut store, "density1", t.hyper, cfg.density_init, &mut rng)?,
            FactorizedDensity::new(&mut store, "density2", t.hyper, cfg.density_init, &mut rng)?,
        ];
        let masks = match cfg.weights.mode {
            Mode::Full => [
                Some(MaskMaps::new(&mut store, "mask0", t.latent[0])?),
                Some(MaskMaps::new(&mut store, "mask1", t.latent[1])?),
                Some(MaskMaps::new(&mut store, "mask2", t.latent[2])?),
            ],
            Mode::DeblurOnly => [
                None,
                None,
                Some(MaskMaps::new(&mut store, "mask2", t.embed)?),
            ],
        };
        Ok(Self {
            cfg,
            store,
            transforms,
            densities,
            masks,
        })
    }

    pub fn mode(&self) -> Mode {
        self.cfg.weights.mode
    }

    /// Real entries per vector of each transmitted stream.
    pub fn stream_dims(&self) -> [usize; STREAMS] {
        let t = &self.cfg.transform;
        match self.mode() {
            Mode::Full => t.latent,
            Mode::DeblurOnly => [t.latent[0], t.latent[1], t.embed],
        }
    }

    /// Writes the weights to `ckpt` and the config to `ckpt` with a `.cfg` extension.
    pub fn save(&self, ckpt: &Path) -> Result<()> {
        if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_checkpoint(fs::File::create(ckpt)?, &self.store)?;
        let doc = KvDocument {
            global: self.cfg.to_kv(),
            blocks: Vec::new(),
        };
        fs::write(config_path(ckpt), doc.render())?;
        Ok(())
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let open = |p: &Path| {
            fs::read(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingFile(p.to_path_buf()),
                _ => Error::Io(e),
            })
        };
        let cfg_text = String::from_utf8(open(&config_path(ckpt))?)
            .map_err(|e| Error::format("model config", e.to_string()))?;
        let cfg = ModelConfig::from_kv(&KvDocument::parse(&cfg_text)?.global)?;
        let mut model = Model::new(cfg)?;
        let stored = read_checkpoint(&open(ckpt)?[..])?;
        model.store.load_from(&stored)?;
        Ok(model)
    }

    /// Noisy-latent forward pass and loss. Decoders see every latent entry;
    /// no masking happens here.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        opts: &TrainOptions,
        rng: &mut R,
    ) -> Result<TrainPass> {
        let w = &self.cfg.weights;
        let s = &self.store;
        let tf = &self.transforms;
        let inv_b = 1.0 / batch.size as f64;
        let mut tape = Tape::new();
        let x0 = tape.constant(batch.x0.clone());
        let x1 = tape.constant(batch.x1.clone());
        let target = tape.constant(batch.t.clone());
        let lat = tf.encode(&mut tape, s, x0, x1)?;

        let mut parts = LossParts::default();
        let mut terms = Vec::new();
        let mut y_hat = lat.y;
        for i in 0..STREAMS {
            let z = tf.hyper[i].encode(&mut tape, s, lat.y[i])?;
            let (yh, zh) = match opts.quantizer {
                Quantizer::Noise => {
                    let yh = inject_uniform_noise(&mut tape, lat.y[i], rng);
                    (yh, inject_uniform_noise(&mut tape, z, rng))
                }
                Quantizer::Round => (
                    round_through(&mut tape, lat.y[i])?,
                    round_through(&mut tape, z)?,
                ),
            };
            let (mu, sigma) = tf.hyper[i].decode(&mut tape, s, zh)?;
            let py = likelihood_conditional(&mut tape, mu, sigma, yh)?;
            let pz = self.densities[i].likelihood(&mut tape, s, zh)?;
            let by = rate_bits_var(&mut tape, py);
            let by = tape.scale(by, inv_b);
            let bz = rate_bits_var(&mut tape, pz);
            let bz = tape.scale(bz, inv_b);
            parts.ry[i] = scalar(&tape, by);
            parts.rz[i] = scalar(&tape, bz);
            terms.push(by);
            terms.push(bz);
            y_hat[i] = yh;
        }

        let mut distortion =
            |tape: &mut Tape, out: Var, reference: Var, weight: f64| -> Result<f64> {
                let d = tape.sub(out, reference)?;
                let d = tape.square(d);
                let d = tape.sum(d);
                let d = tape.scale(d, inv_b);
                let value = scalar(tape, d);
                terms.push(tape.scale(d, w.distortion_scale * weight));
                Ok(value)
            };
        match self.mode() {
            Mode::Full => {
                let [n0, n1, n2] = add_channel_noise(&mut tape, y_hat, batch.size, opts.snr, rng)?;
                let r0 = tf.decode_image(&mut tape, s, n0, n2)?;
                let r1 = tf.decode_event(&mut tape, s, n1, n2)?;
                let rt = tf.decode_deblur(&mut tape, s, n0, n1, n2)?;
                parts.d0 = Some(distortion(&mut tape, r0, x0, w.lambda0)?);
                parts.d1 = Some(distortion(&mut tape, r1, x1, w.lambda1)?);
                parts.dt = distortion(&mut tape, rt, target, w.lambda_t)?;
            }
            Mode::DeblurOnly => {
                let f = tf.fuse_for_deblur(&mut tape, s, y_hat[0], y_hat[1], y_hat[2])?;
                let [f] = add_channel_noise(&mut tape, [f], batch.size, opts.snr, rng)?;
                let rt = tf.synthesize_deblur(&mut tape, s, f)?;
                parts.dt = distortion(&mut tape, rt, target, w.lambda_t)?;
            }
        }
        let mut loss = terms[0];
        for &t in &terms[1..] {
            loss = tape.add(loss, t)?;
        }
        Ok(TrainPass { tape, loss, parts })
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// `round(x)` in the forward pass, identity gradient.
fn round_through(tape: &mut Tape, x: Var) -> Result<Var> {
    let v = tape.value(x);
    let delta = quantize(v)
        .data()
        .iter()
        .zip(v.data())
        .map(|(r, x)| r - x)
        .collect();
    let delta = tape.constant(Tensor::new(v.shape().to_vec(), delta)?);
    tape.add(x, delta)
}

/// Adds complex Gaussian noise at `snr` relative to each sample's average
/// symbol power over all given streams. The noise level is a constant of
/// the pass, so gradients flow through the signal only.
fn add_channel_noise<R: Rng + ?Sized, const K: usize>(
    tape: &mut Tape,
    streams: [Var; K],
    batch: usize,
    snr: Snr,
    rng: &mut R,
) -> Result<[Var; K]> {
    if snr == Snr::Noiseless {
        return Ok(streams);
    }
    let mut energy = vec![0.0; batch];
    let mut reals = vec![0usize; batch];
    for &v in &streams {
        let (rows, cols) = tape.value(v).dims2()?;
        let per = rows / batch;
        for (r, row) in tape.value(v).data().chunks(cols.max(1)).enumerate() {
            energy[r / per] += row.iter().map(|x| x * x).sum::<f64>();
            reals[r / per] += cols;
        }
    }
    // Average complex power is twice the mean square of the real components.
    let std: Vec<f64> = energy
        .iter()
        .zip(&reals)
        .map(|(&e, &n)| component_noise_std(2.0 * e / n.max(1) as f64, snr))
        .collect();
    let mut out = streams;
    for v in out.iter_mut() {
        let (rows, cols) = tape.value(*v).dims2()?;
        let per = rows / batch;
        let noise = Tensor::from_fn(&[rows, cols], |i| {
            let z: f64 = rng.sample(StandardNormal);
            std[i / cols / per] * z
        });
        let n = tape.constant(noise);
        *v = tape.add(*v, n)?;
    }
    Ok(out)
}

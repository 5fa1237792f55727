//! Evaluation through the symbol channel and the reports built on it.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Batch, Model};
use crate::autodiff::{quantize, Tape, Tensor};
use crate::channel::{channel_roundtrip, Snr};
use crate::dataset::{MotionLabel, Sample};
use crate::entropy::{likelihood_conditional, rate_bits};
use crate::error::{Error, Result};
use crate::event::Planar;
use crate::metrics::{fmt_db, median, mse, psnr, CsvTable};
use crate::rate_alloc::{
    cbr, compute_lengths, mask_decode, mask_encode, Cbr, LengthPlan, SymbolFrame, STREAMS,
};
use crate::transforms::{unpatchify, Mode};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub snr: Snr,
    /// Truncate vectors to their planned lengths. Without it every entry is sent.
    pub masking: bool,
    /// Replace the received event-specific latent with zeros (for the
    /// deblur-only model, zero it before fusion).
    pub zero_event_latent: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            snr: Snr::Db(10.0),
            masking: true,
            zero_event_latent: false,
        }
    }
}

/// Result of sending one sample through the model and channel.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutput {
    pub id: String,
    pub label: MotionLabel,
    /// Reconstructed blurry image; absent for deblur-only models.
    pub x0: Option<Planar>,
    /// Reconstructed event tensor; absent for deblur-only models.
    pub x1: Option<Planar>,
    /// Deblurred image.
    pub t: Planar,
    /// The transmitted frame, before the channel.
    pub frame: SymbolFrame,
    pub cbr: Cbr,
    /// Bits of each quantized latent under its conditional model.
    pub rates: [f64; STREAMS],
    /// Sums of squared errors.
    pub d0: Option<f64>,
    pub d1: Option<f64>,
    pub dt: f64,
    pub psnr0: Option<f64>,
    pub psnr_t: f64,
    pub event_mse: Option<f64>,
}

impl EvalOutput {
    pub fn plan(&self) -> &LengthPlan {
        &self.frame.plan
    }

    /// Mean squared error of the deblurred image.
    pub fn deblur_mse(&self) -> f64 {
        self.dt / self.t.data.len() as f64
    }
}

fn sum_sq(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Rounded latents, per-vector bits and per-stream bits.
type QuantizedLatents = (Vec<Tensor>, Vec<Vec<f64>>, [f64; STREAMS]);

impl Model {
    /// Rounded latents of a batch with each vector's bit cost under the
    /// conditional model, and each stream's total.
    fn quantized_latents(&self, batch: &Batch) -> Result<QuantizedLatents> {
        let s = &self.store;
        let tf = &self.transforms;
        let mut tape = Tape::new();
        let x0 = tape.constant(batch.x0.clone());
        let x1 = tape.constant(batch.x1.clone());
        let lat = tf.encode(&mut tape, s, x0, x1)?;
        let mut y_hat: Vec<Tensor> = Vec::with_capacity(STREAMS);
        let mut per_vector: Vec<Vec<f64>> = Vec::with_capacity(STREAMS);
        let mut rates = [0.0; STREAMS];
        for i in 0..STREAMS {
            let z = tf.hyper[i].encode(&mut tape, s, lat.y[i])?;
            let zq = quantize(tape.value(z));
            let zq = tape.constant(zq);
            let (mu, sigma) = tf.hyper[i].decode(&mut tape, s, zq)?;
            let yq = quantize(tape.value(lat.y[i]));
            let yv = tape.constant(yq.clone());
            let p = likelihood_conditional(&mut tape, mu, sigma, yv)?;
            let r = rate_bits(tape.value(p))?;
            rates[i] = r.total;
            per_vector.push(r.per_vector);
            y_hat.push(yq);
        }
        Ok((y_hat, per_vector, rates))
    }

    /// Fits every stream's mask maps to the principal axes of the latents
    /// that stream carries over `samples`. The transforms are untouched.
    pub fn fit_mask_maps(&mut self, samples: &[Sample]) -> Result<()> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dims = self.stream_dims();
        let mut rows: [Vec<f64>; STREAMS] = Default::default();
        for sample in samples {
            let batch = Batch::from_samples(&[sample], &self.cfg.transform)?;
            let (y_hat, _, _) = self.quantized_latents(&batch)?;
            match self.mode() {
                Mode::Full => {
                    for (r, y) in rows.iter_mut().zip(&y_hat) {
                        r.extend_from_slice(y.data());
                    }
                }
                Mode::DeblurOnly => {
                    let mut tape = Tape::new();
                    let v: Vec<_> = y_hat.into_iter().map(|t| tape.constant(t)).collect();
                    let f = self.transforms.fuse_for_deblur(
                        &mut tape,
                        &self.store,
                        v[0],
                        v[1],
                        v[2],
                    )?;
                    rows[2].extend_from_slice(tape.value(f).data());
                }
            }
        }
        for i in 0..STREAMS {
            if let Some(maps) = &self.masks[i] {
                let n = rows[i].len() / dims[i];
                let t = Tensor::new(vec![n, dims[i]], std::mem::take(&mut rows[i]))?;
                maps.fit_principal(&mut self.store, &t)?;
            }
        }
        Ok(())
    }

    /// Rounds the latents, plans lengths from their bit costs, sends the
    /// masked frame over the channel and decodes at the receiver.
    pub fn forward_eval<R: Rng + ?Sized>(
        &self,
        sample: &Sample,
        opts: &EvalOptions,
        rng: &mut R,
    ) -> Result<EvalOutput> {
        let cfg = &self.cfg.transform;
        let eta = self.cfg.weights.eta;
        let s = &self.store;
        let tf = &self.transforms;
        let batch = Batch::from_samples(&[sample], cfg)?;
        let vectors = cfg.vectors();
        let dims = self.stream_dims();

        let (mut y_hat, per_vector, rates) = self.quantized_latents(&batch)?;
        let mut tape = Tape::new();

        let full = |d: usize| vec![d; vectors];
        let (sent, lengths): ([Option<Tensor>; STREAMS], [Vec<usize>; STREAMS]) = match self.mode()
        {
            Mode::Full => {
                let lengths = [0, 1, 2].map(|i| {
                    if opts.masking {
                        compute_lengths(&per_vector[i], eta, dims[i])
                    } else {
                        Ok(full(dims[i]))
                    }
                });
                let [l0, l1, l2] = lengths;
                let [y0, y1, y2]: [Tensor; 3] = y_hat.try_into().expect("three streams");
                ([Some(y0), Some(y1), Some(y2)], [l0?, l1?, l2?])
            }
            Mode::DeblurOnly => {
                if opts.zero_event_latent {
                    y_hat[1] = Tensor::zeros(y_hat[1].shape());
                }
                let v = y_hat
                    .iter()
                    .map(|t| tape.constant(t.clone()))
                    .collect::<Vec<_>>();
                let f = tf.fuse_for_deblur(&mut tape, s, v[0], v[1], v[2])?;
                let summed: Vec<f64> = (0..vectors)
                    .map(|j| per_vector.iter().map(|r| r[j]).sum())
                    .collect();
                let l2 = if opts.masking {
                    compute_lengths(&summed, eta, dims[2])?
                } else {
                    full(dims[2])
                };
                (
                    [None, None, Some(tape.value(f).clone())],
                    [Vec::new(), Vec::new(), l2],
                )
            }
        };
        let plan = LengthPlan::new(lengths, dims)?;
        let mut payloads: [Vec<f64>; STREAMS] = Default::default();
        for i in 0..STREAMS {
            if let (Some(maps), Some(y)) = (&self.masks[i], &sent[i]) {
                payloads[i] = mask_encode(maps, s, y, plan.lengths(i))?;
            }
        }
        let frame = SymbolFrame::assemble(plan.clone(), payloads)?;
        let received = SymbolFrame {
            payload: channel_roundtrip(&frame.payload, opts.snr, rng),
            ..frame.clone()
        };
        let rx = received.split()?;
        let mut decoded: Vec<Option<Tensor>> = vec![None; STREAMS];
        for i in 0..STREAMS {
            if let Some(maps) = &self.masks[i] {
                decoded[i] = Some(mask_decode(maps, s, &rx[i], plan.lengths(i))?);
            }
        }

        let mut tape = Tape::new();
        let patch = cfg.patch;
        let (h, w) = (cfg.height, cfg.width);
        let out = match self.mode() {
            Mode::Full => {
                if opts.zero_event_latent {
                    decoded[1] = decoded[1].as_ref().map(|t| Tensor::zeros(t.shape()));
                }
                let v: Vec<_> = decoded
                    .into_iter()
                    .map(|t| tape.constant(t.expect("full model decodes every stream")))
                    .collect();
                let r0 = tf.decode_image(&mut tape, s, v[0], v[2])?;
                let r1 = tf.decode_event(&mut tape, s, v[1], v[2])?;
                let rt = tf.decode_deblur(&mut tape, s, v[0], v[1], v[2])?;
                let (r0, r1, rt) = (tape.value(r0), tape.value(r1), tape.value(rt));
                EvalOutput {
                    id: sample.id.clone(),
                    label: sample.label,
                    x0: Some(unpatchify(r0, cfg.image_channels, h, w, patch)?),
                    x1: Some(unpatchify(r1, cfg.event_channels, h, w, patch)?),
                    t: unpatchify(rt, cfg.image_channels, h, w, patch)?,
                    cbr: cbr(&plan, cfg.n0())?,
                    frame,
                    rates,
                    d0: Some(sum_sq(r0, &batch.x0)),
                    d1: Some(sum_sq(r1, &batch.x1)),
                    dt: sum_sq(rt, &batch.t),
                    psnr0: Some(psnr(r0.data(), batch.x0.data(), 1.0)?),
                    psnr_t: psnr(rt.data(), batch.t.data(), 1.0)?,
                    event_mse: Some(mse(r1.data(), batch.x1.data())?),
                }
            }
            Mode::DeblurOnly => {
                let f = tape.constant(decoded[2].take().expect("fused stream"));
                let rt = tf.synthesize_deblur(&mut tape, s, f)?;
                let rt = tape.value(rt);
                EvalOutput {
                    id: sample.id.clone(),
                    label: sample.label,
                    x0: None,
                    x1: None,
                    t: unpatchify(rt, cfg.image_channels, h, w, patch)?,
                    cbr: cbr(&plan, cfg.n0())?,
                    frame,
                    rates,
                    d0: None,
                    d1: None,
                    dt: sum_sq(rt, &batch.t),
                    psnr0: None,
                    psnr_t: psnr(rt.data(), batch.t.data(), 1.0)?,
                    event_mse: None,
                }
            }
        };
        Ok(out)
    }
}

/// Evaluates every sample; sample `i` draws channel noise from a generator
/// seeded with `seed + i`.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    opts: &EvalOptions,
    seed: u64,
) -> Result<Vec<EvalOutput>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            model.forward_eval(
                s,
                opts,
                &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64)),
            )
        })
        .collect()
}

fn opt_cell(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map_or_else(|| "-".into(), f)
}

/// One row per evaluated sample.
pub fn eval_table(outputs: &[EvalOutput]) -> CsvTable {
    let mut t = CsvTable::new(&[
        "id",
        "motion",
        "rho",
        "rho0",
        "rho1",
        "rho2",
        "psnr_x0",
        "psnr_t",
        "event_mse",
    ]);
    for o in outputs {
        let c = &o.cbr;
        t.push(vec![
            o.id.clone(),
            o.label.to_string(),
            format!("{:.6}", c.rho),
            format!("{:.6}", c.rho0),
            format!("{:.6}", c.rho1),
            format!("{:.6}", c.rho2),
            opt_cell(o.psnr0, fmt_db),
            fmt_db(o.psnr_t),
            opt_cell(o.event_mse, |v| format!("{v:.6}")),
        ]);
    }
    t
}

/// Per-sample bandwidth ratios with per-label medians.
#[derive(Clone, Debug, PartialEq)]
pub struct AllocationReport {
    pub rows: CsvTable,
    pub medians: BTreeMap<MotionLabel, Cbr>,
}

impl AllocationReport {
    pub fn summary(&self) -> CsvTable {
        let mut t = CsvTable::new(&[
            "motion",
            "median_rho0",
            "median_rho1",
            "median_rho2",
            "median_rho",
        ]);
        for (label, c) in &self.medians {
            t.push(vec![
                label.to_string(),
                format!("{:.6}", c.rho0),
                format!("{:.6}", c.rho1),
                format!("{:.6}", c.rho2),
                format!("{:.6}", c.rho),
            ]);
        }
        t
    }
}

/// Lengths depend only on the encoder side, so the channel is left noiseless.
pub fn allocation_report(model: &Model, samples: &[Sample]) -> Result<AllocationReport> {
    let opts = EvalOptions {
        snr: Snr::Noiseless,
        masking: true,
        zero_event_latent: false,
    };
    let outputs = evaluate(model, samples, &opts, 0)?;
    let mut rows = CsvTable::new(&["id", "motion", "rho0", "rho1", "rho2", "rho"]);
    let mut groups: BTreeMap<MotionLabel, Vec<Cbr>> = BTreeMap::new();
    for o in &outputs {
        let c = o.cbr;
        rows.push(vec![
            o.id.clone(),
            o.label.to_string(),
            format!("{:.6}", c.rho0),
            format!("{:.6}", c.rho1),
            format!("{:.6}", c.rho2),
            format!("{:.6}", c.rho),
        ]);
        groups.entry(o.label).or_default().push(c);
    }
    let medians = groups
        .into_iter()
        .map(|(label, cs)| {
            let m =
                |f: fn(&Cbr) -> f64| median(&cs.iter().map(f).collect::<Vec<_>>()).unwrap_or(0.0);
            let c = Cbr {
                rho0: m(|c| c.rho0),
                rho1: m(|c| c.rho1),
                rho2: m(|c| c.rho2),
                rho: m(|c| c.rho),
            };
            (label, c)
        })
        .collect();
    Ok(AllocationReport { rows, medians })
}

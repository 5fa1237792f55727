//! Analysis and synthesis transforms.
//!
//! Images and event tensors are cut into non-overlapping `p x p` patches.
//! A batch of `B` samples becomes a `[B * N, c * p * p]` matrix where
//! `N = (H/p) * (W/p)` and rows run sample-major, then grid row-major. Every
//! latent is a `[B * N, C]` matrix with one embedding vector per row.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::entropy::scale_from_raw;
use crate::error::{Error, Result};
use crate::event::Planar;

/// Slope of the leaky rectifier used throughout.
pub const LEAK: f64 = 0.2;

/// Shape parameters of the transforms.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub image_channels: usize,
    pub event_channels: usize,
    /// Feature width inside the fusion blocks.
    pub embed: usize,
    pub hidden: usize,
    /// Latent channels of the image-specific, event-specific and shared streams.
    pub latent: [usize; 3],
    pub hyper: usize,
    /// Added to the per-vector variance before standardization in fusion blocks.
    pub norm_eps: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            patch: 4,
            image_channels: 3,
            event_channels: 6,
            embed: 32,
            hidden: 64,
            latent: [16, 16, 16],
            hyper: 8,
            norm_eps: 1.0,
        }
    }
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.height,
            self.width,
            self.patch,
            self.image_channels,
            self.event_channels,
            self.embed,
            self.hidden,
            self.hyper,
        ];
        if dims.contains(&0) || self.latent.contains(&0) {
            return Err(Error::BadConfig(
                "all transform dimensions must be >= 1".into(),
            ));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::BadConfig(format!(
                "{}x{} is not divisible by patch {}",
                self.height, self.width, self.patch
            )));
        }
        let (gh, gw) = self.grid();
        if gh % 2 != 0 || gw % 2 != 0 {
            return Err(Error::BadConfig(format!(
                "latent grid {gh}x{gw} must have even sides for 2x2 pooling"
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::BadConfig("norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Embedding vectors per sample.
    pub fn vectors(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn image_patch_len(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    pub fn event_patch_len(&self) -> usize {
        self.event_channels * self.patch * self.patch
    }

    /// Source dimension `n0 = 3 * H * W` used for bandwidth ratios.
    pub fn n0(&self) -> usize {
        self.image_channels * self.height * self.width
    }
}

/// Rows of `p x p` patches from a `C x H x W` tensor.
pub fn patchify(t: &Planar, patch: usize) -> Result<Tensor> {
    let (c, h, w) = (t.channels, t.height, t.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} not divisible by patch {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let len = c * patch * patch;
    let mut out = vec![0.0; gh * gw * len];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &mut out[(gy * gw + gx) * len..(gy * gw + gx + 1) * len];
            for ch in 0..c {
                for py in 0..patch {
                    for px in 0..patch {
                        let src = ch * h * w + (gy * patch + py) * w + gx * patch + px;
                        row[(ch * patch + py) * patch + px] = t.data[src] as f64;
                    }
                }
            }
        }
    }
    Tensor::matrix(gh * gw, len, out)
}

/// Inverse of [`patchify`] for one sample.
pub fn unpatchify(
    rows: &Tensor,
    channels: usize,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<Planar> {
    let (n, len) = rows.dims2()?;
    let (gh, gw) = (height / patch, width / patch);
    if n != gh * gw
        || len != channels * patch * patch
        || !height.is_multiple_of(patch)
        || !width.is_multiple_of(patch)
    {
        return Err(Error::shape(format!(
            "{n}x{len} rows for {channels}x{height}x{width} with patch {patch}"
        )));
    }
    let mut data = vec![0.0f32; channels * height * width];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = &rows.data()[(gy * gw + gx) * len..(gy * gw + gx + 1) * len];
            for ch in 0..channels {
                for py in 0..patch {
                    for px in 0..patch {
                        let dst = ch * height * width + (gy * patch + py) * width + gx * patch + px;
                        data[dst] = row[(ch * patch + py) * patch + px] as f32;
                    }
                }
            }
        }
    }
    Planar::new(channels, height, width, data)
}

/// Stacks per-sample row blocks into one batch matrix.
pub fn stack_rows(blocks: &[Tensor]) -> Result<Tensor> {
    let first = blocks.first().ok_or_else(|| Error::shape("empty batch"))?;
    let cols = first.dims2()?.1;
    let mut rows = 0;
    let mut data = Vec::new();
    for b in blocks {
        let (r, c) = b.dims2()?;
        if c != cols {
            return Err(Error::shape(format!("batch rows of width {c} and {cols}")));
        }
        rows += r;
        data.extend_from_slice(b.data());
    }
    Tensor::matrix(rows, cols, data)
}

/// Averages 2x2 blocks of each sample's grid: `[B*N/4, B*N]`.
fn pool_matrix(batch: usize, gh: usize, gw: usize) -> Tensor {
    let (ph, pw) = (gh / 2, gw / 2);
    let (n, m) = (gh * gw, ph * pw);
    let mut data = vec![0.0; batch * m * batch * n];
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                let r = b * m + (gy / 2) * pw + gx / 2;
                let c = b * n + gy * gw + gx;
                data[r * batch * n + c] = 0.25;
            }
        }
    }
    Tensor::new(vec![batch * m, batch * n], data).expect("pool matrix shape")
}

/// A single affine layer `x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = Tensor::from_fn(&[inputs, outputs], |_| rng.random_range(-bound..=bound));
        Ok(Self {
            w: store.insert(format!("{name}.w"), w)?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[outputs]))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }
}

/// Affine layers with leaky rectifiers between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Dense::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<Var> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.apply(tape, store, x)?;
            if i + 1 < self.layers.len() {
                x = tape.leaky_relu(x, LEAK);
            }
        }
        Ok(x)
    }
}

/// Zero-mean, unit-scale rows: `(a - mean) / sqrt(var + eps)`.
pub fn standardize_rows(tape: &mut Tape, a: Var, eps: f64) -> Result<Var> {
    let mean = tape.mean_axis(a, 1)?;
    let d = tape.sub(a, mean)?;
    let sq = tape.square(d);
    let var = tape.mean_axis(sq, 1)?;
    let var = tape.offset(var, eps);
    let sd = tape.sqrt(var);
    tape.div(d, sd)
}

/// Two-input fusion: standardize both, concatenate, then a linear mix
/// plus a two-layer perceptron branch, summed.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    mix: Dense,
    mlp: Mlp,
    eps: f64,
}

impl FusionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: (usize, usize),
        hidden: usize,
        outputs: usize,
        eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cat = inputs.0 + inputs.1;
        Ok(Self {
            mix: Dense::new(store, &format!("{name}.mix"), cat, outputs, rng)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), &[cat, hidden, outputs], rng)?,
            eps,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let na = standardize_rows(tape, a, self.eps)?;
        let nb = standardize_rows(tape, b, self.eps)?;
        let cat = tape.concat(&[na, nb], 1)?;
        let m = self.mix.apply(tape, store, cat)?;
        let p = self.mlp.apply(tape, store, cat)?;
        tape.add(m, p)
    }
}

/// One-level U-shaped fusion of image and event patches into shared features.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    feat_img: Dense,
    feat_evt: Dense,
    fuse: Dense,
    gate0: Dense,
    mix: Dense,
    gate1: Dense,
    pre: Mlp,
}

impl SharedEncoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &TransformConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let e = cfg.embed;
        Ok(Self {
            feat_img: Dense::new(store, "shared.feat_img", cfg.image_patch_len(), e, rng)?,
            feat_evt: Dense::new(store, "shared.feat_evt", cfg.event_patch_len(), e, rng)?,
            fuse: Dense::new(store, "shared.fuse", 2 * e, e, rng)?,
            gate0: Dense::new(store, "shared.gate0", e, e, rng)?,
            mix: Dense::new(store, "shared.mix", e, e, rng)?,
            gate1: Dense::new(store, "shared.gate1", e, e, rng)?,
            pre: Mlp::new(store, "shared.pre", &[e, cfg.hidden, cfg.latent[2]], rng)?,
        })
    }

    fn gated(&self, gate: &Dense, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = gate.apply(tape, store, x)?;
        let g = tape.sigmoid(g);
        tape.mul(x, g)
    }

    fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cfg: &TransformConfig,
        x0: Var,
        x1: Var,
    ) -> Result<Var> {
        let f0 = self.feat_img.apply(tape, store, x0)?;
        let f0 = tape.leaky_relu(f0, LEAK);
        let f1 = self.feat_evt.apply(tape, store, x1)?;
        let f1 = tape.leaky_relu(f1, LEAK);
        let cat = tape.concat(&[f0, f1], 1)?;
        let fused = self.fuse.apply(tape, store, cat)?;
        let fused = tape.leaky_relu(fused, LEAK);
        let level0 = self.gated(&self.gate0, tape, store, fused)?;

        let rows = tape.shape(level0)[0];
        let n = cfg.vectors();
        let (gh, gw) = cfg.grid();
        let pool = pool_matrix(rows / n, gh, gw);
        let up = pool.transpose()?.map(|v| 4.0 * v);
        let pool = tape.constant(pool);
        let up = tape.constant(up);

        let down = tape.matmul(pool, level0)?;
        let mixed = self.mix.apply(tape, store, down)?;
        let mixed = tape.leaky_relu(mixed, LEAK);
        let level1 = self.gated(&self.gate1, tape, store, mixed)?;
        let back = tape.matmul(up, level1)?;
        let skip = tape.add(back, level0)?;
        self.pre.apply(tape, store, skip)
    }
}

/// Hyperprior pair for one latent stream.
#[derive(Clone, Debug)]
pub struct HyperPrior {
    enc: Mlp,
    dec: Mlp,
    latent: usize,
}

impl HyperPrior {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        latent: usize,
        hidden: usize,
        hyper: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            enc: Mlp::new(store, &format!("{name}.enc"), &[latent, hidden, hyper], rng)?,
            dec: Mlp::new(
                store,
                &format!("{name}.dec"),
                &[hyper, hidden, 2 * latent],
                rng,
            )?,
            latent,
        })
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, y: Var) -> Result<Var> {
        self.enc.apply(tape, store, y)
    }

    /// `(mu, sigma)` with `sigma >= SIGMA_MIN`.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<(Var, Var)> {
        let out = self.dec.apply(tape, store, z)?;
        let mu = tape.slice(out, 1, 0, self.latent)?;
        let raw = tape.slice(out, 1, self.latent, self.latent)?;
        Ok((mu, scale_from_raw(tape, raw)))
    }
}

/// Fusion followed by per-patch synthesis into a bounded range.
#[derive(Clone, Debug)]
pub struct FusionDecoder {
    fuse: FusionBlock,
    synth: Mlp,
    range: (f64, f64),
}

impl FusionDecoder {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: (usize, usize),
        cfg: &TransformConfig,
        out_len: usize,
        range: (f64, f64),
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fuse: FusionBlock::new(
                store,
                &format!("{name}.fuse"),
                inputs,
                cfg.hidden,
                cfg.embed,
                cfg.norm_eps,
                rng,
            )?,
            synth: Mlp::new(
                store,
                &format!("{name}.synth"),
                &[cfg.embed, cfg.hidden, out_len],
                rng,
            )?,
            range,
        })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, a: Var, b: Var) -> Result<Var> {
        let f = self.fuse.apply(tape, store, a, b)?;
        let f = tape.leaky_relu(f, LEAK);
        let out = self.synth.apply(tape, store, f)?;
        Ok(tape.bound(out, self.range.0, self.range.1))
    }
}

/// Deblurring decoder: fuses the two domain-specific streams, then the shared one.
#[derive(Clone, Debug)]
pub struct DeblurDecoder {
    fuse_specific: FusionBlock,
    fuse_shared: FusionBlock,
    synth: Mlp,
}

impl DeblurDecoder {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &TransformConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let [c0, c1, c2] = cfg.latent;
        let e = cfg.embed;
        Ok(Self {
            fuse_specific: FusionBlock::new(
                store,
                &format!("{name}.fuse01"),
                (c0, c1),
                cfg.hidden,
                e,
                cfg.norm_eps,
                rng,
            )?,
            fuse_shared: FusionBlock::new(
                store,
                &format!("{name}.fuse2"),
                (e, c2),
                cfg.hidden,
                e,
                cfg.norm_eps,
                rng,
            )?,
            synth: Mlp::new(
                store,
                &format!("{name}.synth"),
                &[e, cfg.hidden, cfg.image_patch_len()],
                rng,
            )?,
        })
    }

    /// Fused features before synthesis, `[rows, embed]`.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y0: Var,
        y1: Var,
        y2: Var,
    ) -> Result<Var> {
        let f01 = self.fuse_specific.apply(tape, store, y0, y1)?;
        let f01 = tape.leaky_relu(f01, LEAK);
        let f = self.fuse_shared.apply(tape, store, f01, y2)?;
        Ok(tape.leaky_relu(f, LEAK))
    }

    pub fn synthesize(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        let out = self.synth.apply(tape, store, f)?;
        Ok(tape.bound(out, 0.0, 1.0))
    }
}

/// Which outputs the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Reconstructs both sources and the deblurred image.
    Full,
    /// Deblurred image only; fusion moves to the transmitter.
    DeblurOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Full => "jeit",
            Mode::DeblurOnly => "jeit-t",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jeit" => Ok(Mode::Full),
            "jeit-t" => Ok(Mode::DeblurOnly),
            _ => Err(Error::BadConfig(format!(
                "unknown mode {s:?}, expected jeit or jeit-t"
            ))),
        }
    }
}

/// All learned transforms of one model.
#[derive(Clone, Debug)]
pub struct Transforms {
    pub cfg: TransformConfig,
    pub mode: Mode,
    enc_img: Mlp,
    enc_evt: Mlp,
    shared: SharedEncoder,
    pub hyper: [HyperPrior; 3],
    dec_img: Option<FusionDecoder>,
    dec_evt: Option<FusionDecoder>,
    deblur: DeblurDecoder,
}

/// Encoder-side latents of a batch.
#[derive(Clone, Copy, Debug)]
pub struct Latents {
    pub y: [Var; 3],
}

impl Transforms {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: TransformConfig,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let [c0, c1, c2] = cfg.latent;
        let enc_img = Mlp::new(store, "enc_img", &[cfg.image_patch_len(), h, h, c0], rng)?;
        let enc_evt = Mlp::new(store, "enc_evt", &[cfg.event_patch_len(), h, h, c1], rng)?;
        let shared = SharedEncoder::new(store, &cfg, rng)?;
        let hyper = [
            HyperPrior::new(store, "hyper0", c0, h, cfg.hyper, rng)?,
            HyperPrior::new(store, "hyper1", c1, h, cfg.hyper, rng)?,
            HyperPrior::new(store, "hyper2", c2, h, cfg.hyper, rng)?,
        ];
        let (dec_img, dec_evt) = match mode {
            Mode::Full => (
                Some(FusionDecoder::new(
                    store,
                    "dec_img",
                    (c0, c2),
                    &cfg,
                    cfg.image_patch_len(),
                    (0.0, 1.0),
                    rng,
                )?),
                Some(FusionDecoder::new(
                    store,
                    "dec_evt",
                    (c1, c2),
                    &cfg,
                    cfg.event_patch_len(),
                    (-1.0, 1.0),
                    rng,
                )?),
            ),
            Mode::DeblurOnly => (None, None),
        };
        let deblur = DeblurDecoder::new(store, "deblur", &cfg, rng)?;
        Ok(Self {
            cfg,
            mode,
            enc_img,
            enc_evt,
            shared,
            hyper,
            dec_img,
            dec_evt,
            deblur,
        })
    }

    fn check_rows(&self, tape: &Tape, v: Var, cols: usize, what: &str) -> Result<usize> {
        match tape.shape(v) {
            [r, c] if *c == cols && r % self.cfg.vectors() == 0 && *r > 0 => Ok(*r),
            s => Err(Error::shape(format!(
                "{what}: expected [B*{}, {cols}], got {s:?}",
                self.cfg.vectors()
            ))),
        }
    }

    pub fn encode_image(&self, tape: &mut Tape, store: &ParamStore, x0: Var) -> Result<Var> {
        self.check_rows(tape, x0, self.cfg.image_patch_len(), "image patches")?;
        self.enc_img.apply(tape, store, x0)
    }

    pub fn encode_event(&self, tape: &mut Tape, store: &ParamStore, x1: Var) -> Result<Var> {
        self.check_rows(tape, x1, self.cfg.event_patch_len(), "event patches")?;
        self.enc_evt.apply(tape, store, x1)
    }

    pub fn encode_shared(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x0: Var,
        x1: Var,
    ) -> Result<Var> {
        let r0 = self.check_rows(tape, x0, self.cfg.image_patch_len(), "image patches")?;
        let r1 = self.check_rows(tape, x1, self.cfg.event_patch_len(), "event patches")?;
        if r0 != r1 {
            return Err(Error::shape(format!("{r0} image rows vs {r1} event rows")));
        }
        self.shared.apply(tape, store, &self.cfg, x0, x1)
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x0: Var, x1: Var) -> Result<Latents> {
        Ok(Latents {
            y: [
                self.encode_image(tape, store, x0)?,
                self.encode_event(tape, store, x1)?,
                self.encode_shared(tape, store, x0, x1)?,
            ],
        })
    }

    pub fn decode_image(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y0: Var,
        y2: Var,
    ) -> Result<Var> {
        let dec = self
            .dec_img
            .as_ref()
            .ok_or_else(|| Error::BadConfig("deblur-only model has no image decoder".into()))?;
        dec.apply(tape, store, y0, y2)
    }

    pub fn decode_event(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y1: Var,
        y2: Var,
    ) -> Result<Var> {
        let dec = self
            .dec_evt
            .as_ref()
            .ok_or_else(|| Error::BadConfig("deblur-only model has no event decoder".into()))?;
        dec.apply(tape, store, y1, y2)
    }

    pub fn decode_deblur(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y0: Var,
        y1: Var,
        y2: Var,
    ) -> Result<Var> {
        let f = self.deblur.fuse(tape, store, y0, y1, y2)?;
        self.deblur.synthesize(tape, store, f)
    }

    /// Transmitter-side fusion of the deblur-only model.
    pub fn fuse_for_deblur(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        y0: Var,
        y1: Var,
        y2: Var,
    ) -> Result<Var> {
        self.deblur.fuse(tape, store, y0, y1, y2)
    }

    /// Receiver-side synthesis of the deblur-only model.
    pub fn synthesize_deblur(&self, tape: &mut Tape, store: &ParamStore, f: Var) -> Result<Var> {
        self.deblur.synthesize(tape, store, f)
    }
}

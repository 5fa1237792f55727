use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use jeit::channel::Snr;
use jeit::config::{KeyValues, KvDocument};
use jeit::dataset::{load_dataset, pack_dataset, synth_dataset, DatasetSpec, Sample};
use jeit::event::{serialize_aer, write_evt0, Planar};
use jeit::metrics::{fmt_db, median, CsvTable};
use jeit::pipeline::{
    allocation_report, eval_table, evaluate, train, EvalOptions, Model, ModelConfig, TrainConfig,
};
use jeit::rate_alloc::serialize_frame;
use jeit::scene::{gen_scene, render_blurry, simulate_events, Motion, Pattern, SceneConfig};

#[derive(Parser)]
#[command(
    name = "jeit",
    version,
    about = "Joint event and image transmission over a simulated wireless channel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one scene: events, blurry and sharp images, latent video.
    Synth {
        #[arg(long, default_value = "checker")]
        pattern: Pattern,
        /// static, translate:VX,VY (px/frame) or step:DELTA (log intensity)
        #[arg(long, default_value = "translate:2,1")]
        motion: Motion,
        /// Image size as HxW, or a single number for a square.
        #[arg(long, default_value = "32x32", value_parser = parse_hw)]
        hw: (usize, usize),
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 0.15)]
        contrast: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Generate and pack a mixed static/moving training set.
    MakeDataset {
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value = "32x32", value_parser = parse_hw)]
        hw: (usize, usize),
        #[arg(long, default_value_t = 9)]
        frames: usize,
        #[arg(long, default_value_t = 0.15)]
        contrast: f64,
        /// Temporal bins per polarity of the event tensor.
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model on a packed dataset and write a checkpoint.
    Train {
        /// key = value file with model and training settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds both the initialization and the training noise.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint through the channel, one row per sample.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Channel SNR in dB, or "noiseless".
        #[arg(long, default_value = "10")]
        snr_db: Snr,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Send full latents instead of entropy-planned lengths.
        #[arg(long)]
        no_masking: bool,
        /// Write the table here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Send one sample and optionally dump the transmitted frame.
    Transmit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Sample id from the manifest.
        #[arg(long)]
        sample: String,
        #[arg(long, default_value = "10")]
        snr_db: Snr,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the frame in the JEIF wire format.
        #[arg(long)]
        dump_frame: Option<PathBuf>,
        /// Write the deblurred image as an EVT0 tensor.
        #[arg(long)]
        out_image: Option<PathBuf>,
    },
    /// Per-sample bandwidth ratios and per-motion medians on a noiseless channel.
    ReportAllocation {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data_dir: PathBuf,
        /// Also write the per-sample table here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad size {s:?}, expected HxW"))
    };
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h)?, parse(w)?)),
        None => parse(s).map(|n| (n, n)),
    }
}

fn write_planar(path: &Path, p: &Planar) -> Result<()> {
    let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_evt0(std::io::BufWriter::new(f), p)?;
    Ok(())
}

fn emit(table: &CsvTable, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            fs::write(p, table.to_string()).with_context(|| format!("writing {}", p.display()))?
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn load_samples(dir: &Path) -> Result<Vec<Sample>> {
    let samples =
        load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    if samples.is_empty() {
        bail!("dataset {} has no samples", dir.display());
    }
    Ok(samples)
}

fn synth(cfg: SceneConfig, out_dir: &Path) -> Result<()> {
    let video = gen_scene(&cfg)?;
    let events = simulate_events(&video, cfg.contrast)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("events.aer"), serialize_aer(&events))?;
    write_planar(
        &out_dir.join("blurry.evt0"),
        &render_blurry(&video).to_planar(),
    )?;
    write_planar(
        &out_dir.join("sharp.evt0"),
        &video.sharp_midpoint().to_planar(),
    )?;
    let frames = Planar::new(
        video.frames.len(),
        video.height(),
        video.width(),
        video
            .frames
            .iter()
            .flat_map(|f| f.data.iter().map(|&v| v as f32))
            .collect(),
    )?;
    write_planar(&out_dir.join("video.evt0"), &frames)?;
    let mut kv = KeyValues::new();
    kv.set("height", video.height());
    kv.set("width", video.width());
    kv.set("frames", video.frames.len());
    kv.set("t_f", video.midpoint());
    kv.set("duration", video.span());
    kv.set("contrast", cfg.contrast);
    kv.set("events", events.len());
    let mut text = String::new();
    kv.write_to(&mut text);
    fs::write(out_dir.join("scene.txt"), &text)?;
    println!(
        "{} events, {} frames of {}x{} -> {}",
        events.len(),
        video.frames.len(),
        video.height(),
        video.width(),
        out_dir.display()
    );
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    data_dir: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let kv = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            KvDocument::parse(&text)?.global
        }
        None => KeyValues::new(),
    };
    let samples = load_samples(data_dir)?;
    let first = &samples[0];
    let mut kv = kv;
    // Input geometry follows the data unless the config pins it.
    for (key, value) in [
        ("height", first.x0.height),
        ("width", first.x0.width),
        ("event_channels", first.x1.channels),
    ] {
        if kv.raw(key).is_none() {
            kv.set(key, value);
        }
    }
    let mut model_cfg = ModelConfig::from_kv(&kv)?;
    let mut train_cfg = TrainConfig::from_kv(&kv)?;
    if let Some(e) = epochs {
        train_cfg.epochs = e;
    }
    if let Some(s) = seed {
        model_cfg.seed = s;
        train_cfg.seed = s;
    }
    let mut model = Model::new(model_cfg)?;
    let report = train(&mut model, &samples, &train_cfg)?;
    let w = model.cfg.weights;
    for (epoch, parts) in report.epoch_parts.iter().enumerate() {
        let terms: Vec<String> = parts
            .terms(&w)
            .iter()
            .map(|(k, v)| format!("{k}={v:.4e}"))
            .collect();
        println!(
            "epoch {:>3} lr {:.2e} loss {:.6e} {}",
            epoch + 1,
            train_cfg.lr_at(epoch),
            parts.total(&w),
            terms.join(" ")
        );
    }
    model.save(out)?;
    println!(
        "saved {} ({} steps)",
        out.display(),
        report.step_losses.len()
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Synth {
            pattern,
            motion,
            hw,
            frames,
            contrast,
            seed,
            out_dir,
        } => {
            let mut cfg = SceneConfig::new(pattern, motion, seed);
            (cfg.height, cfg.width) = hw;
            cfg.frames = frames;
            cfg.contrast = contrast;
            synth(cfg, &out_dir)
        }
        Command::MakeDataset {
            count,
            hw,
            frames,
            contrast,
            m,
            seed,
            out_dir,
        } => {
            let spec = DatasetSpec {
                count,
                height: hw.0,
                width: hw.1,
                frames,
                contrast,
                m,
                seed,
                ..DatasetSpec::default()
            };
            let scenes = synth_dataset(&spec)?;
            let manifest = pack_dataset(&out_dir, &scenes)?;
            println!("{} samples -> {}", scenes.len(), manifest.display());
            Ok(())
        }
        Command::Train {
            config,
            data_dir,
            epochs,
            seed,
            out,
        } => train_cmd(config.as_deref(), &data_dir, epochs, seed, &out),
        Command::Eval {
            ckpt,
            data_dir,
            snr_db,
            seed,
            no_masking,
            report,
        } => {
            let model =
                Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let samples = load_samples(&data_dir)?;
            let opts = EvalOptions {
                snr: snr_db,
                masking: !no_masking,
                ..EvalOptions::default()
            };
            let outputs = evaluate(&model, &samples, &opts, seed)?;
            emit(&eval_table(&outputs), report.as_deref())?;
            let psnr: Vec<f64> = outputs.iter().map(|o| o.psnr_t).collect();
            let rho: Vec<f64> = outputs.iter().map(|o| o.cbr.rho).collect();
            eprintln!(
                "median psnr_t {} dB, median rho {:.6} at snr {snr_db}",
                fmt_db(median(&psnr).unwrap_or(f64::NAN)),
                median(&rho).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Transmit {
            ckpt,
            data_dir,
            sample,
            snr_db,
            seed,
            dump_frame,
            out_image,
        } => {
            let model =
                Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let samples = load_samples(&data_dir)?;
            let s = samples
                .iter()
                .find(|s| s.id == sample)
                .with_context(|| format!("no sample {sample:?} in {}", data_dir.display()))?;
            let opts = EvalOptions {
                snr: snr_db,
                ..EvalOptions::default()
            };
            let out = model.forward_eval(s, &opts, &mut ChaCha8Rng::seed_from_u64(seed))?;
            print!("{}", eval_table(std::slice::from_ref(&out)));
            let k = out.plan().totals();
            eprintln!(
                "k = {k:?}, {} complex uses, {} side-info bytes",
                out.frame.complex_uses(),
                out.plan().side_info_bytes()
            );
            if let Some(p) = dump_frame {
                fs::write(&p, serialize_frame(&out.frame))
                    .with_context(|| format!("writing {}", p.display()))?;
            }
            if let Some(p) = out_image {
                write_planar(&p, &out.t)?;
            }
            Ok(())
        }
        Command::ReportAllocation {
            ckpt,
            data_dir,
            report,
        } => {
            let model =
                Model::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let samples = load_samples(&data_dir)?;
            let rep = allocation_report(&model, &samples)?;
            if let Some(p) = report {
                emit(&rep.rows, Some(&p))?;
            }
            print!("{}", rep.summary());
            Ok(())
        }
    }
}

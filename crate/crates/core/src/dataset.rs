//! Synthetic event-image samples, their on-disk packaging and loading.
//!
//! A dataset directory holds `manifest.txt` plus, per sample, the blurry
//! and sharp images as `EVT0` tensors and the raw events as an `.aer` file.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{KeyValues, KvDocument};
use crate::error::{Error, Result};
use crate::event::{
    normalize_tensor, parse_aer, read_evt0, serialize_aer, voxelize, write_evt0, EventStream,
    Planar,
};
use crate::scene::{
    gen_scene, render_blurry, simulate_events, Image, Motion, Pattern, SceneConfig,
};

pub const MANIFEST: &str = "manifest.txt";

/// Coarse motion class of a scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionLabel {
    Static,
    Moving,
    Step,
}

impl MotionLabel {
    pub fn of(m: &Motion) -> Self {
        match m {
            Motion::Static => MotionLabel::Static,
            Motion::Translate { .. } => MotionLabel::Moving,
            Motion::Step { .. } => MotionLabel::Step,
        }
    }
}

impl fmt::Display for MotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MotionLabel::Static => "static",
            MotionLabel::Moving => "moving",
            MotionLabel::Step => "step",
        })
    }
}

impl FromStr for MotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(MotionLabel::Static),
            "moving" => Ok(MotionLabel::Moving),
            "step" => Ok(MotionLabel::Step),
            _ => Err(Error::BadConfig(format!("unknown motion label {s:?}"))),
        }
    }
}

/// A generated scene before voxelization.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub label: MotionLabel,
    /// `3 x H x W` blurry exposure.
    pub blurry: Planar,
    /// `3 x H x W` latent frame at the exposure midpoint.
    pub sharp: Planar,
    pub events: EventStream,
    pub t_f: f64,
    pub duration: f64,
    pub m: usize,
    pub contrast: f64,
}

impl SceneSample {
    /// Voxelizes and normalizes the events into a model input.
    pub fn to_sample(&self) -> Result<Sample> {
        let vox = normalize_tensor(&voxelize(&self.events, self.t_f, self.duration, self.m)?);
        let x1 = Planar::new(vox.channels(), vox.height, vox.width, vox.data)?;
        Ok(Sample {
            id: self.id.clone(),
            label: self.label,
            x0: self.blurry.clone(),
            x1,
            t: self.sharp.clone(),
        })
    }
}

/// Model input and target for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: MotionLabel,
    /// Blurry image, `3 x H x W` in `[0, 1]`.
    pub x0: Planar,
    /// Normalized event tensor, `2M x H x W` in `[-1, 1]`.
    pub x1: Planar,
    /// Sharp midpoint image, `3 x H x W`.
    pub t: Planar,
}

impl Sample {
    /// Copy with the event input replaced by zeros.
    pub fn without_events(&self) -> Self {
        let mut s = self.clone();
        s.x1.data.iter_mut().for_each(|v| *v = 0.0);
        s
    }
}

/// What [`synth_dataset`] generates.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub contrast: f64,
    pub m: usize,
    /// Even-indexed samples are static, odd ones move at this many px/frame (range).
    pub speed: (f64, f64),
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            count: 32,
            height: 32,
            width: 32,
            frames: 9,
            contrast: 0.15,
            m: 3,
            speed: (1.5, 3.0),
            seed: 0,
        }
    }
}

fn tinted(img: &Image, tint: [f64; 3]) -> Planar {
    let data = tint
        .iter()
        .flat_map(|&k| img.data.iter().map(move |&v| (k * v) as f32))
        .collect();
    Planar {
        channels: 3,
        height: img.height,
        width: img.width,
        data,
    }
}

/// Builds one scene sample: blurry image, events and sharp midpoint frame.
/// Colour comes from a per-scene tint of the grey latent video; events are
/// simulated on the grey intensities.
pub fn synth_sample(
    id: String,
    cfg: &SceneConfig,
    m: usize,
    tint: [f64; 3],
) -> Result<SceneSample> {
    let video = gen_scene(cfg)?;
    let events = simulate_events(&video, cfg.contrast)?;
    Ok(SceneSample {
        id,
        label: MotionLabel::of(&cfg.motion),
        blurry: tinted(&render_blurry(&video), tint),
        sharp: tinted(&video.sharp_midpoint(), tint),
        events,
        t_f: video.midpoint(),
        duration: video.span(),
        m,
        contrast: cfg.contrast,
    })
}

/// Alternating static and moving scenes with random patterns and tints.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| {
            let pattern = [Pattern::Bars, Pattern::Checker, Pattern::Noise][rng.random_range(0..3)];
            let motion = if i % 2 == 0 {
                Motion::Static
            } else {
                let speed = rng.random_range(spec.speed.0..=spec.speed.1);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                Motion::Translate {
                    vx: speed * angle.cos(),
                    vy: speed * angle.sin(),
                }
            };
            let tint = [0; 3].map(|_| rng.random_range(0.6..1.0));
            let mut cfg = SceneConfig::new(pattern, motion, rng.random());
            cfg.height = spec.height;
            cfg.width = spec.width;
            cfg.frames = spec.frames;
            cfg.contrast = spec.contrast;
            synth_sample(format!("s{i:04}"), &cfg, spec.m, tint)
        })
        .collect()
}

/// Writes samples and a manifest into `dir`, creating it if needed.
pub fn pack_dataset(dir: &Path, samples: &[SceneSample]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut doc = KvDocument::default();
    if let Some(s) = samples.first() {
        doc.global.set("height", s.blurry.height);
        doc.global.set("width", s.blurry.width);
    }
    for s in samples {
        let blurry = format!("{}_blurry.evt0", s.id);
        let sharp = format!("{}_sharp.evt0", s.id);
        let aer = format!("{}.aer", s.id);
        write_evt0(fs::File::create(dir.join(&blurry))?, &s.blurry)?;
        write_evt0(fs::File::create(dir.join(&sharp))?, &s.sharp)?;
        fs::write(dir.join(&aer), serialize_aer(&s.events))?;
        let mut kv = KeyValues::new();
        kv.set("id", &s.id);
        kv.set("motion", s.label);
        kv.set("blurry", blurry);
        kv.set("sharp", sharp);
        kv.set("events", aer);
        kv.set("t_f", s.t_f);
        kv.set("duration", s.duration);
        kv.set("m", s.m);
        kv.set("contrast", s.contrast);
        doc.blocks.push(("sample".into(), kv));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, doc.render())?;
    Ok(path)
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path),
        _ => Error::Io(e),
    })
}

/// Reads back the scene samples listed in `dir/manifest.txt`, in manifest order.
pub fn load_scenes(dir: &Path) -> Result<Vec<SceneSample>> {
    let text = String::from_utf8(read_file(dir, MANIFEST)?)
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    let doc = KvDocument::parse(&text)?;
    if doc.blocks.is_empty() {
        return Ok(Vec::new());
    }
    let height: usize = doc.global.require("height")?;
    let width: usize = doc.global.require("width")?;
    doc.blocks
        .iter()
        .map(|(name, kv)| {
            if name != "sample" {
                return Err(Error::format("manifest", format!("unknown block [{name}]")));
            }
            let blurry = read_evt0(&read_file(dir, kv.raw("blurry").unwrap_or_default())?[..])?;
            let sharp = read_evt0(&read_file(dir, kv.raw("sharp").unwrap_or_default())?[..])?;
            for (what, p) in [("blurry", &blurry), ("sharp", &sharp)] {
                if (p.channels, p.height, p.width) != (3, height, width) {
                    return Err(Error::shape(format!(
                        "{what} image is {}x{}x{}, manifest says 3x{height}x{width}",
                        p.channels, p.height, p.width
                    )));
                }
            }
            let events = parse_aer(
                &read_file(dir, kv.raw("events").unwrap_or_default())?,
                height,
                width,
            )?;
            Ok(SceneSample {
                id: kv.require("id")?,
                label: kv.require("motion")?,
                blurry,
                sharp,
                events,
                t_f: kv.require("t_f")?,
                duration: kv.require("duration")?,
                m: kv.require("m")?,
                contrast: kv.require("contrast")?,
            })
        })
        .collect()
}

/// Model-ready samples from a packed dataset.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    load_scenes(dir)?
        .iter()
        .map(SceneSample::to_sample)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_alternates_labels_and_is_deterministic() {
        let spec = DatasetSpec {
            count: 4,
            ..DatasetSpec::default()
        };
        let a = synth_dataset(&spec).unwrap();
        let labels: Vec<_> = a.iter().map(|s| s.label).collect();
        assert_eq!(
            labels,
            [
                MotionLabel::Static,
                MotionLabel::Moving,
                MotionLabel::Static,
                MotionLabel::Moving
            ]
        );
        assert!(a[0].events.is_empty() && !a[1].events.is_empty());
        assert_eq!(a, synth_dataset(&spec).unwrap());
        let s = a[1].to_sample().unwrap();
        assert_eq!((s.x1.channels, s.x1.height), (6, 32));
        assert!(s.x1.data.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn labels_parse() {
        for l in [MotionLabel::Static, MotionLabel::Moving, MotionLabel::Step] {
            assert_eq!(l.to_string().parse::<MotionLabel>().unwrap(), l);
        }
        assert!("fast".parse::<MotionLabel>().is_err());
    }
}

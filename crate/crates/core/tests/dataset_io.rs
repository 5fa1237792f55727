mod common;

use jeit::dataset::{
    load_dataset, load_scenes, pack_dataset, synth_dataset, DatasetSpec, MANIFEST,
};
use jeit::metrics::psnr;
use jeit::pipeline::{evaluate, EvalOptions, Model};
use jeit::transforms::Mode;
use jeit::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        count: 4,
        height: 8,
        width: 8,
        m: 2,
        seed: 3,
        ..DatasetSpec::default()
    }
}

#[test]
fn packed_dataset_reloads_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth_dataset(&small_spec()).unwrap();
    pack_dataset(dir.path(), &scenes).unwrap();
    let back = load_scenes(dir.path()).unwrap();
    assert_eq!(back, scenes);
    let samples: Vec<_> = scenes.iter().map(|s| s.to_sample().unwrap()).collect();
    assert_eq!(load_dataset(dir.path()).unwrap(), samples);
    assert_eq!(
        back.iter().map(|s| s.label).collect::<Vec<_>>(),
        scenes.iter().map(|s| s.label).collect::<Vec<_>>()
    );
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    pack_dataset(dir.path(), &[]).unwrap();
    assert!(load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn missing_payload_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth_dataset(&small_spec()).unwrap();
    pack_dataset(dir.path(), &scenes).unwrap();
    std::fs::remove_file(dir.path().join(format!("{}_sharp.evt0", scenes[1].id))).unwrap();
    assert!(matches!(
        load_scenes(dir.path()),
        Err(Error::MissingFile(_))
    ));

    let empty = tempfile::tempdir().unwrap();
    assert!(
        matches!(load_scenes(empty.path()), Err(Error::MissingFile(p)) if p.ends_with(MANIFEST))
    );
}

#[test]
fn image_size_disagreeing_with_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = synth_dataset(&small_spec()).unwrap();
    pack_dataset(dir.path(), &scenes).unwrap();
    let manifest = dir.path().join(MANIFEST);
    let text = std::fs::read_to_string(&manifest)
        .unwrap()
        .replacen("width = 8", "width = 16", 1);
    std::fs::write(&manifest, text).unwrap();
    assert!(matches!(
        load_scenes(dir.path()),
        Err(Error::ShapeMismatch(_))
    ));
}

#[test]
fn saved_model_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut model = Model::new(common::desk_config(Mode::Full)).unwrap();
    // Checkpoints hold f32, so start from f32-representable weights.
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model
            .store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
    }
    model.save(&ckpt).unwrap();
    let loaded = Model::load(&ckpt).unwrap();
    assert_eq!(loaded.cfg, model.cfg);
    let samples = common::desk_samples(3, 5);
    let opts = EvalOptions::default();
    assert_eq!(
        evaluate(&model, &samples, &opts, 9).unwrap(),
        evaluate(&loaded, &samples, &opts, 9).unwrap()
    );
}

#[test]
fn psnr_falls_as_noise_grows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let x: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..1.0)).collect();
        let dir: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let at = |s: f64| {
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            psnr(&x, &y, 1.0).unwrap()
        };
        let (lo, hi) = (rng.random_range(0.01..0.5), rng.random_range(0.5..1.0));
        assert!(at(lo) > at(hi));
    }
}

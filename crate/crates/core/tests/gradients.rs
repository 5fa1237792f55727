mod common;

use jeit::autodiff::{gaussian_cdf, Tape};
use jeit::pipeline::{Batch, Model, TrainOptions};
use jeit::transforms::{unpatchify, Mode, TransformConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn full_model_gradients_match_finite_differences() {
    for seed in 0..3 {
        let err = common::end_to_end_gradient_error(Mode::Full, 10, seed);
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn deblur_only_gradients_match_finite_differences() {
    let err = common::end_to_end_gradient_error(Mode::DeblurOnly, 10, 4);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn training_pass_replays_bit_for_bit() {
    let model = Model::new(common::desk_config(Mode::Full)).unwrap();
    let samples = common::desk_samples(3, 1);
    let refs: Vec<_> = samples.iter().collect();
    let batch = Batch::from_samples(&refs, &model.cfg.transform).unwrap();
    let run = || {
        let p = model
            .forward_train(
                &batch,
                &TrainOptions::default(),
                &mut ChaCha8Rng::seed_from_u64(8),
            )
            .unwrap();
        let g = p.tape.backward(p.loss).unwrap();
        (
            p.tape.value(p.loss).data()[0].to_bits(),
            g.global_norm().to_bits(),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn patch_encoders_are_local() {
    let model = Model::new(common::desk_config(Mode::Full)).unwrap();
    let cfg = model.cfg.transform;
    let (_, gw) = cfg.grid();
    let sample = &common::desk_samples(2, 2)[1];
    let batch = Batch::from_samples(&[sample], &cfg).unwrap();
    let latents = |x0: &jeit::autodiff::Tensor| {
        let mut tape = Tape::new();
        let a = tape.constant(x0.clone());
        let b = tape.constant(batch.x1.clone());
        let lat = model
            .transforms
            .encode(&mut tape, &model.store, a, b)
            .unwrap();
        lat.y.map(|v| tape.value(v).clone())
    };
    let base = latents(&batch.x0);
    let row = 5;
    let mut bumped = batch.x0.clone();
    let width = cfg.image_patch_len();
    bumped.data_mut()[row * width..(row + 1) * width]
        .iter_mut()
        .for_each(|v| *v += 0.3);
    let moved = latents(&bumped);
    let block = |r: usize| (r / gw / 2, r % gw / 2);
    for r in 0..cfg.vectors() {
        let same = |i: usize, c: usize| {
            base[i].data()[r * c..(r + 1) * c] == moved[i].data()[r * c..(r + 1) * c]
        };
        assert_eq!(same(0, cfg.latent[0]), r != row, "image latent row {r}");
        assert!(same(1, cfg.latent[1]), "event latent row {r}");
        if block(r) != block(row) {
            assert!(
                same(2, cfg.latent[2]),
                "shared latent row {r} outside the pooled block"
            );
        }
    }
}

#[test]
fn decoders_return_input_shapes() {
    for (h, w, p) in [(8, 8, 2), (8, 16, 4), (16, 8, 2)] {
        let mut cfg = common::desk_config(Mode::Full);
        cfg.transform = TransformConfig {
            height: h,
            width: w,
            patch: p,
            ..cfg.transform
        };
        let model = Model::new(cfg).unwrap();
        let tc = model.cfg.transform;
        let rows = 2 * tc.vectors();
        let x0 = jeit::autodiff::Tensor::zeros(&[rows, tc.image_patch_len()]);
        let x1 = jeit::autodiff::Tensor::zeros(&[rows, tc.event_patch_len()]);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x0), tape.constant(x1));
        let lat = model
            .transforms
            .encode(&mut tape, &model.store, a, b)
            .unwrap();
        let r0 = model
            .transforms
            .decode_image(&mut tape, &model.store, lat.y[0], lat.y[2])
            .unwrap();
        let r1 = model
            .transforms
            .decode_event(&mut tape, &model.store, lat.y[1], lat.y[2])
            .unwrap();
        let rt = model
            .transforms
            .decode_deblur(&mut tape, &model.store, lat.y[0], lat.y[1], lat.y[2])
            .unwrap();
        assert_eq!(tape.shape(r0), [rows, tc.image_patch_len()]);
        assert_eq!(tape.shape(r1), [rows, tc.event_patch_len()]);
        assert_eq!(tape.shape(rt), [rows, tc.image_patch_len()]);
        let first = jeit::autodiff::Tensor::new(
            vec![tc.vectors(), tc.image_patch_len()],
            tape.value(rt).data()[..tc.vectors() * tc.image_patch_len()].to_vec(),
        )
        .unwrap();
        let img = unpatchify(&first, 3, h, w, p).unwrap();
        assert_eq!((img.channels, img.height, img.width), (3, h, w));
    }
}

proptest! {
    #[test]
    fn gaussian_cdf_is_symmetric_and_monotone(x in -8.0f64..8.0, dx in 0.0f64..2.0) {
        prop_assert!((gaussian_cdf(x) + gaussian_cdf(-x) - 1.0).abs() < 1e-6);
        prop_assert!(gaussian_cdf(x + dx) >= gaussian_cdf(x));
    }
}

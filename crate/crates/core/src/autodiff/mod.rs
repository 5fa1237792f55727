//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use params::{ParamId, ParamStore};
pub use tape::{gaussian_cdf, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softplus;

use rand::Rng;

/// Adds i.i.d. `U(-1/2, 1/2)` noise as a constant, so gradients pass
/// through to `x` unchanged.
pub fn inject_uniform_noise<R: Rng + ?Sized>(tape: &mut Tape, x: Var, rng: &mut R) -> Var {
    let shape = tape.shape(x).to_vec();
    let noise = Tensor::from_fn(&shape, |_| rng.random_range(-0.5..0.5));
    let u = tape.constant(noise);
    tape.add(x, u).expect("noise has the input's shape")
}

/// Evaluation-time quantizer: round half away from zero.
pub fn quantize(x: &Tensor) -> Tensor {
    x.map(f64::round)
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_input_gradients;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_unary(f: impl Fn(&mut Tape, Var) -> Var, lo: f64, hi: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[4, 5], |_| rng.random_range(lo..hi));
        let err = check_input_gradients(&[x], 1e-3, |t, v| {
            let y = f(t, v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn analytic_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::scalar(0.0));
        let sp = t.softplus(z);
        let cdf = t.gaussian_cdf(z);
        assert!((t.value(sp).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(t.value(cdf).data()[0], 0.5);
    }

    #[test]
    fn identity_affine_is_identity() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0));
        let w = t.constant(Tensor::eye(4));
        let b = t.constant(Tensor::zeros(&[4]));
        let y = t.affine(x, w, b).unwrap();
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn sum_and_mean_square_gradients() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 1.0]);

        let sq = t.square(x);
        let m = t.mean(sq);
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn lower_bound_gradient_only_pushes_up() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = t.lower_bound(x, 0.0);
        assert_eq!(t.value(y).data(), &[0.0, 2.0]);
        // Loss decreasing in y: the floored entry still receives gradient.
        let n = t.neg(y);
        let l = t.sum(n);
        assert_eq!(t.backward(l).unwrap().wrt(x).unwrap().data(), &[-1.0, -1.0]);
        let l = t.sum(y);
        assert_eq!(t.backward(l).unwrap().wrt(x).unwrap().data(), &[0.0, 1.0]);

        let x = t.constant(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
        let y = t.bound(x, 0.0, 1.0);
        assert_eq!(t.value(y).data(), &[0.0, 0.5, 1.0]);
        let l = t.sum(y);
        assert_eq!(
            t.backward(l).unwrap().wrt(x).unwrap().data(),
            &[0.0, 1.0, 1.0]
        );
        let n = t.neg(y);
        let l = t.sum(n);
        assert_eq!(
            t.backward(l).unwrap().wrt(x).unwrap().data(),
            &[-1.0, -1.0, 0.0]
        );
        assert_eq!(
            t.backward_exact(l).unwrap().wrt(x).unwrap().data(),
            &[0.0, -1.0, 0.0]
        );
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(t.backward(x), Err(crate::Error::NonScalarLoss(4))));
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[3, 2]));
        assert!(t.add(a, b).is_err());
        assert!(t.concat(&[a, b], 1).is_err());
        assert!(t.slice(a, 1, 2, 2).is_err());
        let w = t.constant(Tensor::zeros(&[2, 2]));
        let bias = t.constant(Tensor::zeros(&[2]));
        assert!(t.affine(a, w, bias).is_err());
    }

    #[test]
    fn unary_primitives_match_finite_differences() {
        fd_unary(|t, v| t.leaky_relu(v, 0.1), 0.05, 2.0);
        fd_unary(|t, v| t.leaky_relu(v, 0.1), -2.0, -0.05);
        fd_unary(|t, v| t.softplus(v), -3.0, 3.0);
        fd_unary(|t, v| t.sigmoid(v), -3.0, 3.0);
        fd_unary(|t, v| t.tanh(v), -2.0, 2.0);
        fd_unary(|t, v| t.exp(v), -2.0, 2.0);
        fd_unary(|t, v| t.log(v), 0.5, 3.0);
        fd_unary(|t, v| t.square(v), -2.0, 2.0);
        fd_unary(|t, v| t.sqrt(v), 0.5, 3.0);
        fd_unary(|t, v| t.gaussian_cdf(v), -3.0, 3.0);
        fd_unary(|t, v| t.clamp(v, -5.0, 5.0), -2.0, 2.0);
        fd_unary(|t, v| t.abs(v), 0.1, 2.0);
        fd_unary(|t, v| t.abs(v), -2.0, -0.1);
        fd_unary(|t, v| t.lower_bound(v, -5.0), -2.0, 2.0);
        fd_unary(|t, v| t.bound(v, -5.0, 5.0), -2.0, 2.0);
        fd_unary(|t, v| t.mean(v), -2.0, 2.0);
    }

    #[test]
    fn structural_primitives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
        let (a, b, w, bias, c) = (r(&[3, 4]), r(&[1, 4]), r(&[4, 2]), r(&[2]), r(&[3, 1]));
        let err = check_input_gradients(&[a, b, w, bias, c], 1e-3, |t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[4])?;
            let q = t.sub(p, v[1])?;
            let d = t.offset(v[4], 3.0);
            let q = t.div(q, d)?;
            let y = t.affine(q, v[2], v[3])?;
            let m = t.matmul(q, v[2])?;
            let cat = t.concat(&[y, m, q], 1)?;
            let sl = t.slice(cat, 1, 1, 5)?;
            let rs = t.reshape(sl, &[5, 3])?;
            let sa = t.sum_axis(rs, 0)?;
            let ma = t.mean_axis(rs, 1)?;
            let sq1 = t.square(sa);
            let sq2 = t.square(ma);
            let l1 = t.sum(sq1);
            let l2 = t.sum(sq2);
            let l = t.add(l1, l2)?;
            Ok(t.scale(l, 0.5))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn three_layer_network_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
        let ins = [
            r(&[5, 6]),
            r(&[6, 8]),
            r(&[8]),
            r(&[8, 8]),
            r(&[8]),
            r(&[8, 3]),
            r(&[3]),
        ];
        let err = check_input_gradients(&ins, 1e-3, |t, v| {
            let h = t.affine(v[0], v[1], v[2])?;
            let h = t.tanh(h);
            let h = t.affine(h, v[3], v[4])?;
            let h = t.softplus(h);
            let y = t.affine(h, v[5], v[6])?;
            let y = t.square(y);
            Ok(t.mean(y))
        })
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradients_reach_parameters_and_accumulate() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        let p = t.mul(a, b).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        assert_eq!(g.param(id).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn noise_is_straight_through_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_fn(&[1000], |i| i as f64 * 0.01));
        let y = inject_uniform_noise(&mut t, x, &mut rng);
        for (a, b) in t.value(y).data().iter().zip(t.value(x).data()) {
            let d = a - b;
            assert!((-0.5..0.5).contains(&d));
        }
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::ones(&[3])).unwrap();
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let z = t.scale(w, 0.0);
        let l = t.sum(z);
        let g = t.backward(l).unwrap();
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &g, &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::new();
        let id = store
            .insert("w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let k = t.constant(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        let p = t.mul(w, k).unwrap();
        let l = t.sum(p);
        let g = t.backward(l).unwrap();
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let mut st = AdamState::new(&store);
        adam_step(&mut store, &g, &mut st, &cfg).unwrap();
        for (p, g) in store.get(id).data().iter().zip([3.0f64, -0.5]) {
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((p - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quantize_rounds_half_away() {
        let q = quantize(&Tensor::new(vec![4], vec![0.5, -0.5, 1.49, -2.5]).unwrap());
        assert_eq!(q.data(), &[1.0, -1.0, 1.0, -3.0]);
    }
}

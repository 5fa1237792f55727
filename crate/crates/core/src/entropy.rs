//! Discrete likelihood models for quantized latents and their bit costs.
//!
//! Latents are laid out as `[N, C]`: one row per spatial embedding vector,
//! one column per channel.

use rand::Rng;

use crate::autodiff::{softplus, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Floor applied to every discrete likelihood.
pub const P_MIN: f64 = 1e-9;
/// Smallest scale the conditional model accepts.
pub const SIGMA_MIN: f64 = 0.05;

const HIDDEN: [usize; 3] = [3, 3, 3];

/// Per-channel learned CDF `c(v) = sigmoid(f_K(...f_1(v)))` with monotone layers.
#[derive(Clone, Debug)]
pub struct FactorizedDensity {
    channels: usize,
    dims: Vec<usize>,
    // Per layer: raw weights [d_out*d_in, C], biases [d_out, C], gate factors [d_out, C].
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
    gates: Vec<ParamId>,
}

impl FactorizedDensity {
    /// Registers parameters under `prefix`. `init_scale` sets the initial
    /// spread of the density; biases start uniform in `[-1/2, 1/2)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if channels == 0 || !(init_scale > 0.0) {
            return Err(Error::BadConfig(format!(
                "factorized density with {channels} channels, scale {init_scale}"
            )));
        }
        let mut dims = vec![1];
        dims.extend(HIDDEN);
        dims.push(1);
        let layers = dims.len() - 1;
        let scale = init_scale.powf(1.0 / layers as f64);
        let (mut weights, mut biases, mut gates) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..layers {
            let (din, dout) = (dims[k], dims[k + 1]);
            let init = (1.0 / scale / dout as f64).exp_m1().ln();
            weights.push(store.insert(
                format!("{prefix}.w{k}"),
                Tensor::full(&[dout * din, channels], init),
            )?);
            let b = Tensor::from_fn(&[dout, channels], |_| rng.random_range(-0.5..0.5));
            biases.push(store.insert(format!("{prefix}.b{k}"), b)?);
            if k + 1 < layers {
                gates.push(
                    store.insert(format!("{prefix}.a{k}"), Tensor::zeros(&[dout, channels]))?,
                );
            }
        }
        Ok(Self {
            channels,
            dims,
            weights,
            biases,
            gates,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logits of the CDF at each entry of `x: [N, C]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.channels {
            return Err(Error::shape(format!(
                "factorized density over {} channels got {shape:?}",
                self.channels
            )));
        }
        let mut units = vec![x];
        for k in 0..self.dims.len() - 1 {
            let (din, dout) = (self.dims[k], self.dims[k + 1]);
            let w = tape.param(store, self.weights[k]);
            let w = tape.softplus(w);
            let b = tape.param(store, self.biases[k]);
            let gate = if k < self.gates.len() {
                let a = tape.param(store, self.gates[k]);
                Some(tape.tanh(a))
            } else {
                None
            };
            let mut next = Vec::with_capacity(dout);
            for o in 0..dout {
                let mut acc = tape.slice(b, 0, o, 1)?;
                for (i, &u) in units.iter().enumerate().take(din) {
                    let wi = tape.slice(w, 0, o * din + i, 1)?;
                    let term = tape.mul(u, wi)?;
                    acc = tape.add(acc, term)?;
                }
                if let Some(g) = gate {
                    let go = tape.slice(g, 0, o, 1)?;
                    let th = tape.tanh(acc);
                    let gated = tape.mul(th, go)?;
                    acc = tape.add(acc, gated)?;
                }
                next.push(acc);
            }
            units = next;
        }
        Ok(units[0])
    }

    /// `c(z + 1/2) - c(z - 1/2)` floored at [`P_MIN`].
    pub fn likelihood(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let n = tape.shape(z)[0];
        let up = tape.offset(z, 0.5);
        let lo = tape.offset(z, -0.5);
        let both = tape.concat(&[up, lo], 0)?;
        let logits = self.logits(tape, store, both)?;
        let u = tape.slice(logits, 0, 0, n)?;
        let l = tape.slice(logits, 0, n, n)?;
        // Evaluate in the tail nearer zero probability mass so the
        // difference of two sigmoids does not cancel.
        let s = {
            let lu = tape.value(u).data().iter().zip(tape.value(l).data());
            let signs = lu
                .map(|(a, b)| if a + b > 0.0 { -1.0 } else { 1.0 })
                .collect();
            tape.constant(Tensor::new(tape.shape(u).to_vec(), signs)?)
        };
        let su = tape.mul(u, s)?;
        let sl = tape.mul(l, s)?;
        let cu = tape.sigmoid(su);
        let cl = tape.sigmoid(sl);
        let d = tape.sub(cu, cl)?;
        let p = tape.mul(d, s)?;
        Ok(tape.lower_bound(p, P_MIN))
    }

    /// Tape-free evaluation of [`FactorizedDensity::likelihood`].
    pub fn likelihood_values(&self, store: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(z.clone());
        let p = self.likelihood(&mut tape, store, v)?;
        Ok(tape.value(p).clone())
    }

    /// Tape-free CDF values at `x: [N, C]`.
    pub fn cdf_values(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let l = self.logits(&mut tape, store, v)?;
        let c = tape.sigmoid(l);
        Ok(tape.value(c).clone())
    }
}

/// Gaussian with mean `mu` and scale `sigma` convolved with `U(-1/2, 1/2)`,
/// evaluated at `y`. All three share one shape. The upper tail is used so the
/// two CDF values never cancel catastrophically.
pub fn likelihood_conditional(tape: &mut Tape, mu: Var, sigma: Var, y: Var) -> Result<Var> {
    let d = tape.sub(y, mu)?;
    let v = tape.abs(d);
    let hi = tape.neg(v);
    let hi = tape.offset(hi, 0.5);
    let lo = tape.offset(hi, -1.0);
    let hi = tape.div(hi, sigma)?;
    let lo = tape.div(lo, sigma)?;
    let ch = tape.gaussian_cdf(hi);
    let cl = tape.gaussian_cdf(lo);
    let p = tape.sub(ch, cl)?;
    Ok(tape.lower_bound(p, P_MIN))
}

/// Tape-free [`likelihood_conditional`].
pub fn likelihood_conditional_values(mu: &Tensor, sigma: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (m, s, v) = (
        tape.constant(mu.clone()),
        tape.constant(sigma.clone()),
        tape.constant(y.clone()),
    );
    let p = likelihood_conditional(&mut tape, m, s, v)?;
    Ok(tape.value(p).clone())
}

/// `softplus(raw) + SIGMA_MIN`, the scale head used by the hyper decoders.
pub fn scale_from_raw(tape: &mut Tape, raw: Var) -> Var {
    let s = tape.softplus(raw);
    tape.offset(s, SIGMA_MIN)
}

pub fn scale_from_raw_value(raw: f64) -> f64 {
    softplus(raw) + SIGMA_MIN
}

/// Bits `-log2 p` summed over all entries, and per row of a `[N, C]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Rate {
    pub total: f64,
    pub per_vector: Vec<f64>,
}

pub fn rate_bits(probs: &Tensor) -> Result<Rate> {
    if let Some(bad) = probs.data().iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(Error::DomainError(format!(
            "probability {bad} outside (0, 1]"
        )));
    }
    let cols = match probs.shape() {
        [_, c] => *c,
        _ => probs.len().max(1),
    };
    let per_vector: Vec<f64> = probs
        .data()
        .chunks(cols.max(1))
        .map(|row| row.iter().map(|p| -p.log2()).sum())
        .collect();
    Ok(Rate {
        total: per_vector.iter().sum(),
        per_vector,
    })
}

/// Differentiable total bits of a likelihood tensor.
pub fn rate_bits_var(tape: &mut Tape, probs: Var) -> Var {
    let l = tape.log(probs);
    let s = tape.sum(l);
    tape.scale(s, -std::f64::consts::LOG2_E)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn density(channels: usize) -> (ParamStore, FactorizedDensity) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = FactorizedDensity::new(&mut store, "fd", channels, 4.0, &mut rng).unwrap();
        (store, d)
    }

    #[test]
    fn conditional_at_center_unit_scale() {
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let p = likelihood_conditional_values(&t(0.0), &t(1.0), &t(0.0)).unwrap();
        // Simpson integration of the standard normal density over [-1/2, 1/2].
        let n = 1000;
        let h = 1.0 / n as f64;
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = pdf(-0.5) + pdf(0.5);
        for i in 1..n {
            let x = -0.5 + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        let oracle = acc * h / 3.0;
        assert!((p.data()[0] - oracle).abs() < 1e-9);
        assert!((oracle - 0.38292).abs() < 1e-5);
    }

    #[test]
    fn conditional_grid_sums_to_one() {
        let mu = 0.37;
        let y: Vec<f64> = (-20..=20).map(|k| (mu + k as f64).round()).collect();
        let n = y.len();
        let p = likelihood_conditional_values(
            &Tensor::full(&[n, 1], mu),
            &Tensor::full(&[n, 1], 1.3),
            &Tensor::new(vec![n, 1], y).unwrap(),
        )
        .unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn narrow_scale_concentrates_mass() {
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let p = likelihood_conditional_values(&t(2.1), &t(SIGMA_MIN), &t(2.0)).unwrap();
        assert!(p.data()[0] > 0.99);
    }

    #[test]
    fn conditional_is_translation_invariant() {
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let a = likelihood_conditional_values(&t(0.3), &t(0.7), &t(1.0)).unwrap();
        let b = likelihood_conditional_values(&t(5.3), &t(0.7), &t(6.0)).unwrap();
        assert!((a.data()[0] - b.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn factorized_grid_sum_after_init() {
        let (store, d) = density(4);
        let grid: Vec<f64> = (-30..=30).flat_map(|n| [n as f64; 4]).collect();
        let p = d
            .likelihood_values(&store, &Tensor::new(vec![61, 4], grid).unwrap())
            .unwrap();
        for c in 0..4 {
            let s: f64 = (0..61).map(|r| p.data()[r * 4 + c]).sum();
            assert!((0.99..=1.0 + 1e-6).contains(&s), "channel {c}: {s}");
        }
    }

    #[test]
    fn factorized_cdf_monotone_and_saturates() {
        let (store, d) = density(2);
        let xs: Vec<f64> = (-200..=200).flat_map(|i| [i as f64 * 0.25; 2]).collect();
        let c = d
            .cdf_values(&store, &Tensor::new(vec![401, 2], xs).unwrap())
            .unwrap();
        for w in c.data().chunks(2).collect::<Vec<_>>().windows(2) {
            assert!(w[1][0] >= w[0][0] && w[1][1] >= w[0][1]);
        }
        assert!(c.data()[0] < 1e-3 && c.data()[801] > 1.0 - 1e-3);
        let tail = d
            .likelihood_values(&store, &Tensor::full(&[1, 2], 1e4))
            .unwrap();
        assert!(tail.data().iter().all(|&p| p == P_MIN));
    }

    #[test]
    fn factorized_gradients_match_finite_differences() {
        let (store, d) = density(2);
        let z = Tensor::new(vec![3, 2], vec![-1.0, 0.0, 2.0, 1.0, 0.0, -3.0]).unwrap();
        let coords: Vec<_> = store
            .ids()
            .flat_map(|id| (0..store.get(id).len()).map(move |i| (id, i)))
            .collect();
        let checks = check_param_gradients(&store, &coords, 1e-3, |t, s| {
            let zv = t.constant(z.clone());
            let p = d.likelihood(t, s, zv)?;
            Ok(rate_bits_var(t, p))
        })
        .unwrap();
        for c in checks {
            assert!(c.relative_error() < 1e-4, "{c:?}");
        }
    }

    #[test]
    fn rate_examples() {
        let r = rate_bits(&Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(r.total, 0.0);
        let r = rate_bits(&Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        assert_eq!(r.total, 1.0);
        let r = rate_bits(&Tensor::new(vec![2, 1], vec![0.25, 0.5]).unwrap()).unwrap();
        assert_eq!(r.total, 3.0);
        assert_eq!(r.per_vector, vec![2.0, 1.0]);
        assert!(matches!(
            rate_bits(&Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
            Err(Error::DomainError(_))
        ));
    }

    #[test]
    fn tighter_scale_lowers_rate_when_centered() {
        let t = |v: f64| Tensor::new(vec![1, 1], vec![v]).unwrap();
        let bits = |s: f64| {
            let p = likelihood_conditional_values(&t(1.0), &t(s), &t(1.0)).unwrap();
            rate_bits(&p).unwrap().total
        };
        assert!(bits(0.2) < bits(0.5) && bits(0.5) < bits(1.0) && bits(1.0) < bits(3.0));
    }
}

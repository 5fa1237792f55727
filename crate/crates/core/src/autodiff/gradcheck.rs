//! Central finite-difference checks against tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn scalar(tape: &Tape, v: Var) -> Result<f64> {
    tape.value(v)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(tape.value(v).len()))
}

/// Checks every entry of every input tensor. `f` receives the inputs as
/// constant leaves and returns a scalar. Returns the worst relative error.
pub fn check_input_gradients<F>(inputs: &[Tensor], eps: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut eval = |ins: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(input.shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zero).clone();
        for i in 0..input.len() {
            let mut probe = inputs.to_vec();
            probe[k].data_mut()[i] += eps;
            let (t, _, o) = eval(&probe)?;
            let plus = scalar(&t, o)?;
            probe[k].data_mut()[i] -= 2.0 * eps;
            let (t, _, o) = eval(&probe)?;
            let minus = scalar(&t, o)?;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}

/// One checked parameter coordinate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordCheck {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl CoordCheck {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Checks selected `(parameter, flat index)` coordinates of a store.
/// `f` must be deterministic: any noise has to be frozen by the caller.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    coords: &[(ParamId, usize)],
    eps: f64,
    mut f: F,
) -> Result<Vec<CoordCheck>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut probe = store.clone();
    coords
        .iter()
        .map(|&(id, index)| {
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[index]);
            let orig = store.get(id).data()[index];
            let mut at = |delta: f64| -> Result<f64> {
                probe.get_mut(id).data_mut()[index] = orig + delta;
                let mut t = Tape::new();
                let o = f(&mut t, &probe)?;
                scalar(&t, o)
            };
            let numeric = (at(eps)? - at(-eps)?) / (2.0 * eps);
            probe.get_mut(id).data_mut()[index] = orig;
            Ok(CoordCheck {
                param: id,
                index,
                analytic,
                numeric,
            })
        })
        .collect()
}

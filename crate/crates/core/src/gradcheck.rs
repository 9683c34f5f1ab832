//! Central finite-difference checks for tape gradients.

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the tape gradient of the scalar `f(x)` and
/// central differences with step `h`, over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    assert!(h > 0.0, "step must be positive");
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let loss = f(&mut tape, xv)?;
        let grads = tape.backward(loss)?;
        grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe);
        let loss = f(&mut tape, xv)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// One checked parameter coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamProbe {
    pub param: ParamId,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl ParamProbe {
    pub fn relative_error(&self) -> f64 {
        relative_error(self.analytic, self.numeric)
    }
}

/// Checks `d loss / d param[offset]` for each requested coordinate, where
/// `loss` is built by `f` from a tape bound to the store.
pub fn grad_check_params<F>(
    store: &ParamStore<f64>,
    coords: &[(ParamId, usize)],
    f: F,
    h: f64,
) -> Result<Vec<ParamProbe>>
where
    F: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut tape = Tape::with_params(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?.into_param_grads(store)
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut probes = Vec::with_capacity(coords.len());
    let mut work = store.clone();
    for &(id, offset) in coords {
        let orig = work.get(id).data()[offset];
        work.get_mut(id).data_mut()[offset] = orig + h;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[offset] = orig - h;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[offset] = orig;
        probes.push(ParamProbe {
            param: id,
            offset,
            analytic: grads[id.index()].data()[offset],
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(probes)
}

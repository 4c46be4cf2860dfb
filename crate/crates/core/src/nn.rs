//! Small layer helpers shared by the model components. Parameters live in a
//! `ParamStore` under `<prefix>.weight` / `<prefix>.bias` style names.

use gst_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::error::Result;

pub(crate) fn weight(prefix: &str) -> String {
    format!("{prefix}.weight")
}

pub(crate) fn bias(prefix: &str) -> String {
    format!("{prefix}.bias")
}

/// Xavier-uniform weight `[fan_in, fan_out]`, zero bias `[1, fan_out]`.
pub(crate) fn init_linear(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
) {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let w = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    store.insert(
        weight(prefix),
        Tensor::matrix(fan_in, fan_out, w).expect("positive extents"),
    );
    store.insert(bias(prefix), Tensor::zeros(&[1, fan_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    store.insert(format!("{prefix}.gain"), Tensor::ones(&[1, dim]));
    store.insert(bias(prefix), Tensor::zeros(&[1, dim]));
}

/// `x W + b`.
pub(crate) fn linear(tape: &mut Tape, p: &Bindings, x: Var, prefix: &str) -> Result<Var> {
    let xw = tape.matmul(x, p.get(&weight(prefix))?)?;
    Ok(tape.add_row(xw, p.get(&bias(prefix))?)?)
}

pub(crate) fn layer_norm(
    tape: &mut Tape,
    p: &Bindings,
    x: Var,
    prefix: &str,
    eps: f64,
) -> Result<Var> {
    let n = tape.layer_norm(x, eps)?;
    let g = tape.mul_row(n, p.get(&format!("{prefix}.gain"))?)?;
    Ok(tape.add_row(g, p.get(&bias(prefix))?)?)
}

/// Additive mask with `rows` identical rows: `0` where `keep[j]`, else `-inf`.
pub(crate) fn key_mask(rows: usize, keep: &[bool]) -> Tensor {
    let row: Vec<f64> = keep
        .iter()
        .map(|&k| if k { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    Tensor::matrix(rows, keep.len(), row.repeat(rows)).expect("positive extents")
}

/// Zero rows where `keep` is false; the kept rows are copied bit-for-bit.
pub(crate) fn mask_rows(tape: &mut Tape, x: Var, keep: &[bool]) -> Result<Var> {
    let zeros = tape.constant(Tensor::zeros(tape.shape(x)));
    Ok(tape.select_rows(keep, x, zeros)?)
}

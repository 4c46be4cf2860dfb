//! Mask-gated LSTM and the displacement head.

use gst_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{GstError, Result};
use crate::nn;

pub(crate) const LSTM_INPUT: &str = "decoder.lstm.input";
pub(crate) const LSTM_HIDDEN: &str = "decoder.lstm.hidden";
pub(crate) const HEAD: &str = "decoder.head";

pub(crate) fn init_params(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) {
    let h = cfg.hidden_dim;
    nn::init_linear(store, rng, LSTM_INPUT, cfg.node_dim, 4 * h);
    nn::init_linear(store, rng, LSTM_HIDDEN, h, 4 * h);
    nn::init_linear(store, rng, HEAD, h, 2);
}

/// Per-pedestrian recurrent state, `N x hidden` each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenState {
    pub h: Tensor,
    pub c: Tensor,
}

impl HiddenState {
    pub fn zeros(n: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[n, hidden]),
            c: Tensor::zeros(&[n, hidden]),
        }
    }
}

/// Gate order in the fused projection: input, forget, cell, output.
pub(crate) fn lstm_cell_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    x: Var,
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(h)[1];
    let xi = nn::linear(tape, p, x, LSTM_INPUT)?;
    let hh = tape.matmul(h, p.get(&nn::weight(LSTM_HIDDEN))?)?;
    let hh = tape.add_row(hh, p.get(&nn::bias(LSTM_HIDDEN))?)?;
    let gates = tape.add(xi, hh)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice_cols(gates, k * hidden..(k + 1) * hidden);
    let i = gate(tape, 0)?;
    let f = gate(tape, 1)?;
    let g = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Rows with `mask[i]` take the LSTM update; the others keep `h` and `c`
/// verbatim.
pub(crate) fn masked_step_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    x: Var,
    mask: &[bool],
    h: Var,
    c: Var,
) -> Result<(Var, Var)> {
    let (h_new, c_new) = lstm_cell_on_tape(tape, p, x, h, c)?;
    let h = tape.select_rows(mask, h_new, h)?;
    let c = tape.select_rows(mask, c_new, c)?;
    Ok((h, c))
}

pub(crate) fn head_on_tape(tape: &mut Tape, p: &Bindings, h: Var) -> Result<Var> {
    nn::linear(tape, p, h, HEAD)
}

fn check_shapes(x: &Tensor, state: &HiddenState, cfg: &ModelConfig) -> Result<usize> {
    let n = x.rows();
    if x.shape() != [n, cfg.node_dim]
        || state.h.shape() != [n, cfg.hidden_dim]
        || state.c.shape() != [n, cfg.hidden_dim]
    {
        return Err(GstError::InvalidArgument(format!(
            "lstm input {:?}, state {:?}/{:?}",
            x.shape(),
            state.h.shape(),
            state.c.shape()
        )));
    }
    Ok(n)
}

/// Plain LSTM cell on every row.
pub fn lstm_cell(
    x: &Tensor,
    state: &HiddenState,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<HiddenState> {
    check_shapes(x, state, cfg)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let h = tape.constant(state.h.clone());
    let c = tape.constant(state.c.clone());
    let (h, c) = lstm_cell_on_tape(&mut tape, &p, xv, h, c)?;
    Ok(HiddenState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    })
}

/// One mask-gated step.
pub fn step(
    encoded: &Tensor,
    mask: &[bool],
    state: &HiddenState,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<HiddenState> {
    let n = check_shapes(encoded, state, cfg)?;
    if mask.len() != n {
        return Err(GstError::InvalidArgument(format!(
            "{} mask entries for {n} rows",
            mask.len()
        )));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(encoded.clone());
    let h = tape.constant(state.h.clone());
    let c = tape.constant(state.c.clone());
    let (h, c) = masked_step_on_tape(&mut tape, &p, xv, mask, h, c)?;
    Ok(HiddenState {
        h: tape.value(h).clone(),
        c: tape.value(c).clone(),
    })
}

//! Transformer encoder over the pedestrian set, gated by a float adjacency.
//!
//! Each head computes masked scaled dot-product probabilities `p_ij`, then
//! uses `w_ij = p_ij * ã_ij / sum_k p_ik * ã_ik` (zero row stays zero). For
//! a binary adjacency this is ordinary masked attention. Post-norm layers, no
//! positional encoding.

use gst_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{GstError, Result};
use crate::nn;

pub(crate) fn layer_prefix(layer: usize) -> String {
    format!("encoder.layer{layer}")
}

pub(crate) fn init_params(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) {
    let d = cfg.node_dim;
    for l in 0..cfg.encoder_layers {
        let pre = layer_prefix(l);
        for proj in ["query", "key", "value", "out"] {
            nn::init_linear(store, rng, &format!("{pre}.attn.{proj}"), d, d);
        }
        nn::init_linear(
            store,
            rng,
            &format!("{pre}.ff.hidden"),
            d,
            cfg.feed_forward_dim,
        );
        nn::init_linear(
            store,
            rng,
            &format!("{pre}.ff.out"),
            cfg.feed_forward_dim,
            d,
        );
        nn::init_layer_norm(store, &format!("{pre}.norm1"), d);
        nn::init_layer_norm(store, &format!("{pre}.norm2"), d);
    }
}

fn attention(
    tape: &mut Tape,
    p: &Bindings,
    cfg: &ModelConfig,
    pre: &str,
    x: Var,
    adj: Var,
    key_mask: &Tensor,
) -> Result<Var> {
    let heads = cfg.encoder_heads;
    let dk = cfg.node_dim / heads;
    let q = nn::linear(tape, p, x, &format!("{pre}.attn.query"))?;
    let k = nn::linear(tape, p, x, &format!("{pre}.attn.key"))?;
    let v = nn::linear(tape, p, x, &format!("{pre}.attn.value"))?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        let qh = tape.slice_cols(q, cols.clone())?;
        let kh = tape.slice_cols(k, cols.clone())?;
        let vh = tape.slice_cols(v, cols)?;
        let kt = tape.transpose(kh)?;
        let s = tape.matmul(qh, kt)?;
        let s = tape.scale(s, scale);
        let probs = tape.masked_softmax(s, key_mask)?;
        let gated = tape.mul(probs, adj)?;
        let w = tape.row_normalize(gated)?;
        outs.push(tape.matmul(w, vh)?);
    }
    let cat = tape.concat(&outs, 1)?;
    nn::linear(tape, p, cat, &format!("{pre}.attn.out"))
}

/// `v` is `N x d_v`, `adj` is `N x N`. Rows with `mask[i] == false` are zero
/// after every layer.
pub(crate) fn encode_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    cfg: &ModelConfig,
    v: Var,
    adj: Var,
    mask: &[bool],
) -> Result<Var> {
    let n = mask.len();
    let key_mask = nn::key_mask(n, mask);
    let eps = cfg.layer_norm_eps;
    let mut x = v;
    for l in 0..cfg.encoder_layers {
        let pre = layer_prefix(l);
        let a = attention(tape, p, cfg, &pre, x, adj, &key_mask)?;
        let r = tape.add(x, a)?;
        let x1 = nn::layer_norm(tape, p, r, &format!("{pre}.norm1"), eps)?;
        let hidden = nn::linear(tape, p, x1, &format!("{pre}.ff.hidden"))?;
        let hidden = tape.relu(hidden);
        let ff = nn::linear(tape, p, hidden, &format!("{pre}.ff.out"))?;
        let r2 = tape.add(x1, ff)?;
        let x2 = nn::layer_norm(tape, p, r2, &format!("{pre}.norm2"), eps)?;
        x = nn::mask_rows(tape, x2, mask)?;
    }
    Ok(x)
}

/// Checks that every valid row of `adj` sums to 1 within `1e-6`.
pub fn check_row_stochastic(adj: &Tensor, mask: &[bool]) -> Result<()> {
    for (i, &valid) in mask.iter().enumerate() {
        if !valid {
            continue;
        }
        let sum: f64 = adj.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(GstError::NotRowStochastic { row: i, sum });
        }
    }
    Ok(())
}

/// Encodes node features `v` (`N x d_v`) over the weighted adjacency `adj`.
pub fn encode_nodes(
    v: &Tensor,
    adj: &Tensor,
    mask: &[bool],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let n = mask.len();
    if v.shape() != [n, cfg.node_dim] || adj.shape() != [n, n] {
        return Err(GstError::InvalidArgument(format!(
            "encoder input {:?} / adjacency {:?} for {n} nodes",
            v.shape(),
            adj.shape()
        )));
    }
    check_row_stochastic(adj, mask)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(v.clone());
    let a = tape.constant(adj.clone());
    let out = encode_on_tape(&mut tape, &p, cfg, x, a, mask)?;
    Ok(tape.value(out).clone())
}

/// Row-normalized binary adjacency; what the encoder sees with sparsity off.
pub fn normalized_adjacency(adjacency: &[bool], n: usize) -> Tensor {
    let mut data: Vec<f64> = adjacency
        .iter()
        .map(|&a| if a { 1.0 } else { 0.0 })
        .collect();
    for row in data.chunks_mut(n) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    Tensor::matrix(n, n, data).expect("positive extents")
}

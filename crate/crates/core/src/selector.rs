//! Edge selector: augmented edge features, edge-level multi-head attention,
//! per-head logits over neighbors, and Gumbel-softmax sampling of a sparse
//! row-stochastic adjacency.
//!
//! Noise is drawn from a counter-based stream keyed by `(seed, step, head,
//! target)`, so every row's draw is independent of evaluation order.

use gst_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::distributions::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SamplingMode};
use crate::error::{GstError, Result};
use crate::graph::{GraphVars, InteractionGraph};
use crate::nn;

pub(crate) const ATTN_QUERY: &str = "selector.attn.query";
pub(crate) const ATTN_KEY: &str = "selector.attn.key";
pub(crate) const ATTN_VALUE: &str = "selector.attn.value";
pub(crate) const MLP_HIDDEN: &str = "selector.mlp.hidden";
pub(crate) const MLP_OUT: &str = "selector.mlp.out";

pub(crate) fn init_params(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) {
    let d = cfg.augmented_dim();
    for name in [ATTN_QUERY, ATTN_KEY, ATTN_VALUE] {
        nn::init_linear(store, rng, name, d, d);
    }
    let dk = cfg.selector_head_dim();
    nn::init_linear(store, rng, MLP_HIDDEN, dk, dk);
    nn::init_linear(store, rng, MLP_OUT, dk, 1);
}

/// `[v_j | v_i | e_ij]` for every ordered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedEdgeFeatures {
    /// `N*N x (2 d_v + d_e)`, row `i*N + j`.
    pub features: Tensor,
    pub num_nodes: usize,
}

impl AugmentedEdgeFeatures {
    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        self.features.row(i * self.num_nodes + j)
    }
}

/// Row selectors: `neighbor[(i,j)] = e_j`, `target[(i,j)] = e_i`.
fn pair_selectors(n: usize) -> (Tensor, Tensor) {
    let mut nb = vec![0.0; n * n * n];
    let mut tg = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            let row = (i * n + j) * n;
            nb[row + j] = 1.0;
            tg[row + i] = 1.0;
        }
    }
    (
        Tensor::matrix(n * n, n, nb).expect("positive extents"),
        Tensor::matrix(n * n, n, tg).expect("positive extents"),
    )
}

pub(crate) fn augment_on_tape(
    tape: &mut Tape,
    node_features: Var,
    edge_features: Var,
    n: usize,
) -> Result<Var> {
    let (nb, tg) = pair_selectors(n);
    let nb = tape.constant(nb);
    let tg = tape.constant(tg);
    let vj = tape.matmul(nb, node_features)?;
    let vi = tape.matmul(tg, node_features)?;
    Ok(tape.concat(&[vj, vi, edge_features], 1)?)
}

pub fn augment_edges(graph: &InteractionGraph) -> Result<AugmentedEdgeFeatures> {
    let n = graph.num_nodes();
    let mut tape = Tape::new();
    let v = tape.constant(graph.node_features.clone());
    let e = tape.constant(graph.edge_features.clone());
    let out = augment_on_tape(&mut tape, v, e, n)?;
    Ok(AugmentedEdgeFeatures {
        features: tape.value(out).clone(),
        num_nodes: n,
    })
}

/// Edge-level attention. For each target `i`, the `N` candidate edges
/// `(i, .)` attend to each other with key mask `a[i][.]`. Output rows are
/// ordered `(head, target, neighbor)`, each of width `d_aug / heads`, before
/// any output projection. Rows of invalid edges are zero.
pub(crate) fn edge_attention_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    aug: Var,
    adjacency: &[bool],
    heads: usize,
) -> Result<Var> {
    let (rows, d) = tape.value(aug).dims2("edge_attention")?;
    let n = (rows as f64).sqrt().round() as usize;
    if n * n != rows || adjacency.len() != rows || d % heads != 0 {
        return Err(GstError::InvalidArgument(format!(
            "edge attention over {rows} x {d} features, {} adjacency entries, {heads} heads",
            adjacency.len()
        )));
    }
    let dk = d / heads;
    let q = nn::linear(tape, p, aug, ATTN_QUERY)?;
    let k = nn::linear(tape, p, aug, ATTN_KEY)?;
    let v = nn::linear(tape, p, aug, ATTN_VALUE)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut blocks = Vec::with_capacity(heads * n);
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..n {
            let keep = &adjacency[i * n..(i + 1) * n];
            if !keep.iter().any(|k| *k) {
                blocks.push(tape.constant(Tensor::zeros(&[n, dk])));
                continue;
            }
            let r = i * n..(i + 1) * n;
            let qi = tape.slice(q, r.clone(), cols.clone())?;
            let ki = tape.slice(k, r.clone(), cols.clone())?;
            let vi = tape.slice(v, r, cols.clone())?;
            let kt = tape.transpose(ki)?;
            let s = tape.matmul(qi, kt)?;
            let s = tape.scale(s, scale);
            let w = tape.masked_softmax(s, &nn::key_mask(n, keep))?;
            let o = tape.matmul(w, vi)?;
            blocks.push(nn::mask_rows(tape, o, keep)?);
        }
    }
    Ok(tape.concat(&blocks, 0)?)
}

/// Per-head aggregated edge features.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeAttentionOutput {
    pub heads: usize,
    pub num_nodes: usize,
    /// `heads*N*N x d_aug/heads`, row `(k*N + i)*N + j`.
    pub features: Tensor,
}

impl EdgeAttentionOutput {
    pub fn get(&self, head: usize, i: usize, j: usize) -> &[f64] {
        let n = self.num_nodes;
        self.features.row((head * n + i) * n + j)
    }
}

pub fn edge_attention(
    aug: &AugmentedEdgeFeatures,
    adjacency: &[bool],
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<EdgeAttentionOutput> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let a = tape.constant(aug.features.clone());
    let out = edge_attention_on_tape(&mut tape, &p, a, adjacency, cfg.neighbors)?;
    Ok(EdgeAttentionOutput {
        heads: cfg.neighbors,
        num_nodes: aug.num_nodes,
        features: tape.value(out).clone(),
    })
}

/// MLP over each per-head edge feature, reshaped to `heads*N x N` with row
/// `(head, target)`.
pub(crate) fn logits_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    attended: Var,
    heads: usize,
    n: usize,
) -> Result<Var> {
    let hidden = nn::linear(tape, p, attended, MLP_HIDDEN)?;
    let hidden = tape.relu(hidden);
    let out = nn::linear(tape, p, hidden, MLP_OUT)?;
    Ok(tape.reshape(out, &[heads * n, n])?)
}

/// Selector logits for attended edges; edges outside `adjacency` get `-inf`.
pub fn edge_logits(
    attended: &EdgeAttentionOutput,
    adjacency: &[bool],
    params: &ParamStore,
) -> Result<EdgeLogits> {
    let (heads, n) = (attended.heads, attended.num_nodes);
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let a = tape.constant(attended.features.clone());
    let out = logits_on_tape(&mut tape, &p, a, heads, n)?;
    EdgeLogits::masked(heads, n, tape.value(out), adjacency)
}

/// Log-probabilities over neighbors, one categorical per `(head, target)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeLogits {
    pub heads: usize,
    pub num_nodes: usize,
    /// `heads*N x N`; invalid edges hold `-inf`.
    pub values: Tensor,
}

impl EdgeLogits {
    pub fn new(heads: usize, num_nodes: usize, values: Tensor) -> Result<Self> {
        if values.shape() != [heads * num_nodes, num_nodes] {
            return Err(GstError::InvalidArgument(format!(
                "logits of shape {:?} for {heads} heads over {num_nodes} nodes",
                values.shape()
            )));
        }
        Ok(Self {
            heads,
            num_nodes,
            values,
        })
    }

    /// Applies the `-inf` sentinel to edges outside `adjacency`.
    pub fn masked(
        heads: usize,
        num_nodes: usize,
        raw: &Tensor,
        adjacency: &[bool],
    ) -> Result<Self> {
        let n = num_nodes;
        let data = raw
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &v)| {
                let (row, j) = (idx / n, idx % n);
                if adjacency[(row % n) * n + j] {
                    v
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Self::new(heads, n, Tensor::matrix(heads * n, n, data)?)
    }
}

/// Gumbel(0, 1) noise for every `(head, target)` row at `step`.
pub fn gumbel_noise(seed: u64, step: usize, heads: usize, n: usize) -> Tensor {
    let mut data = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            data.extend(gumbel_row(seed, step, h, i, n));
        }
    }
    Tensor::matrix(heads * n, n, data).expect("positive extents")
}

fn gumbel_row(seed: u64, step: usize, head: usize, target: usize, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 40) ^ ((head as u64) << 20) ^ target as u64);
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect()
}

/// Sampling controls for one step.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StepSampling {
    pub tau: f64,
    pub mode: SamplingMode,
    pub seed: u64,
    pub step: usize,
}

/// Returns `(per_head, averaged)`: `heads*N x N` and `N x N`.
pub(crate) fn sample_on_tape(
    tape: &mut Tape,
    logits: Var,
    adjacency: &[bool],
    heads: usize,
    sampling: StepSampling,
) -> Result<(Var, Var)> {
    if !(sampling.tau > 0.0) {
        return Err(GstError::InvalidArgument(format!(
            "temperature must be positive, got {}",
            sampling.tau
        )));
    }
    let n = tape.shape(logits)[1];
    let mask_row: Vec<f64> = adjacency
        .iter()
        .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
        .collect();
    let mask = Tensor::matrix(heads * n, n, mask_row.repeat(heads))?;
    let perturbed = match sampling.mode {
        SamplingMode::Deterministic => logits,
        SamplingMode::Soft | SamplingMode::Hard => {
            let g = tape.constant(gumbel_noise(sampling.seed, sampling.step, heads, n));
            tape.add(logits, g)?
        }
    };
    let z = tape.scale(perturbed, 1.0 / sampling.tau);
    let mut y = tape.masked_softmax(z, &mask)?;
    if sampling.mode == SamplingMode::Hard {
        y = tape.straight_through(y)?;
    }
    let mut sum = tape.slice_rows(y, 0..n)?;
    for h in 1..heads {
        let part = tape.slice_rows(y, h * n..(h + 1) * n)?;
        sum = tape.add(sum, part)?;
    }
    let averaged = tape.scale(sum, 1.0 / heads as f64);
    Ok((y, averaged))
}

/// Sampled weighted adjacency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseAdjacency {
    /// One `N x N` matrix per head.
    pub per_head: Vec<Tensor>,
    /// Mean over heads.
    pub averaged: Tensor,
    pub tau: f64,
    pub mode: SamplingMode,
}

/// Draws `ã` from `logits` at `(seed, step)`.
pub fn sample_adjacency(
    logits: &EdgeLogits,
    tau: f64,
    mode: SamplingMode,
    seed: u64,
    step: usize,
) -> Result<SparseAdjacency> {
    let (heads, n) = (logits.heads, logits.num_nodes);
    // a row's valid set is whatever is not masked in its first head
    let adjacency: Vec<bool> = logits.values.data()[..n * n]
        .iter()
        .map(|v| *v != f64::NEG_INFINITY)
        .collect();
    let finite = logits
        .values
        .map(|v| if v == f64::NEG_INFINITY { 0.0 } else { v });
    let mut tape = Tape::new();
    let a = tape.constant(finite);
    let (y, avg) = sample_on_tape(
        &mut tape,
        a,
        &adjacency,
        heads,
        StepSampling {
            tau,
            mode,
            seed,
            step,
        },
    )?;
    let y = tape.value(y);
    let per_head = (0..heads)
        .map(|h| Tensor::matrix(n, n, y.data()[h * n * n..(h + 1) * n * n].to_vec()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(SparseAdjacency {
        per_head,
        averaged: tape.value(avg).clone(),
        tau,
        mode,
    })
}

/// Head-averaged sampled adjacency for one step.
pub(crate) fn select_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    cfg: &ModelConfig,
    graph: &GraphVars,
    sampling: StepSampling,
) -> Result<Var> {
    let n = graph.num_nodes();
    let heads = cfg.neighbors;
    let aug = augment_on_tape(tape, graph.node_features, graph.edge_features, n)?;
    let attended = edge_attention_on_tape(tape, p, aug, &graph.adjacency, heads)?;
    let logits = logits_on_tape(tape, p, attended, heads, n)?;
    let (_, averaged) = sample_on_tape(tape, logits, &graph.adjacency, heads, sampling)?;
    Ok(averaged)
}

//! Per-step interaction graph: node masks, binary adjacency, displacement
//! node features and relative-position edge features.

use gst_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{GstError, Result};
use crate::nn;

pub(crate) const NODE_EMBED: &str = "embed.node";
pub(crate) const EDGE_EMBED: &str = "embed.edge";

/// World-frame positions (meters) of `N` pedestrian slots at one step.
/// Invalid slots hold the filler `[0, 0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Positions {
    pub xy: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

impl Positions {
    pub fn new(xy: Vec<[f64; 2]>, valid: Vec<bool>) -> Result<Self> {
        if xy.len() != valid.len() {
            return Err(GstError::InvalidArgument(format!(
                "{} positions but {} validity flags",
                xy.len(),
                valid.len()
            )));
        }
        Ok(Self { xy, valid })
    }

    pub fn len(&self) -> usize {
        self.xy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xy.is_empty()
    }

    /// `N x 2` tensor with invalid rows replaced by the filler.
    pub fn to_tensor(&self) -> Tensor {
        positions_tensor(&self.xy, &self.valid)
    }
}

pub(crate) fn positions_tensor(xy: &[[f64; 2]], valid: &[bool]) -> Tensor {
    let data = xy
        .iter()
        .zip(valid)
        .flat_map(|(p, &ok)| if ok { *p } else { [0.0, 0.0] })
        .collect();
    Tensor::matrix(xy.len(), 2, data).expect("at least one pedestrian")
}

/// `m_i = valid at t-1 and valid at t`.
pub fn node_mask(prev_valid: &[bool], curr_valid: &[bool]) -> Vec<bool> {
    prev_valid
        .iter()
        .zip(curr_valid)
        .map(|(a, b)| *a && *b)
        .collect()
}

/// Row-major `N x N` outer AND of the node mask; self-edges included.
pub fn adjacency(mask: &[bool]) -> Vec<bool> {
    mask.iter()
        .flat_map(|&mi| mask.iter().map(move |&mj| mi && mj))
        .collect()
}

/// Prediction-period mask, one row per predicted step. A pedestrian stays
/// active iff recorded at the last observed step; anyone gone by then never
/// returns.
pub fn masks_for_prediction(
    observed_presence: &[Vec<bool>],
    pred_len: usize,
) -> Result<Vec<Vec<bool>>> {
    if observed_presence.len() < 2 {
        return Err(GstError::InvalidArgument(format!(
            "need at least 2 observed steps, got {}",
            observed_presence.len()
        )));
    }
    let last = observed_presence.last().expect("non-empty").clone();
    Ok(vec![last; pred_len])
}

/// Values of one interaction graph.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionGraph {
    /// `N x d_v`
    pub node_features: Tensor,
    /// `N*N x d_e`, row `i*N + j` is the edge from target `i` to neighbor `j`.
    pub edge_features: Tensor,
    pub node_mask: Vec<bool>,
    /// Row-major `N x N`.
    pub adjacency: Vec<bool>,
    pub timestep: usize,
}

impl InteractionGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_mask.len()
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        self.edge_features.row(i * self.num_nodes() + j)
    }
}

/// Tape handles for one graph.
#[derive(Clone, Debug)]
pub(crate) struct GraphVars {
    pub node_features: Var,
    pub edge_features: Var,
    pub node_mask: Vec<bool>,
    pub adjacency: Vec<bool>,
}

impl GraphVars {
    pub fn num_nodes(&self) -> usize {
        self.node_mask.len()
    }
}

/// `N*N x N` operator whose row `i*N + j` computes `x_j - x_i`.
pub(crate) fn pair_difference(n: usize) -> Tensor {
    let mut d = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            let row = (i * n + j) * n;
            d[row + j] += 1.0;
            d[row + i] -= 1.0;
        }
    }
    Tensor::matrix(n * n, n, d).expect("positive extents")
}

pub(crate) fn init_params(store: &mut ParamStore, rng: &mut impl Rng, cfg: &ModelConfig) {
    nn::init_linear(store, rng, NODE_EMBED, 2, cfg.node_dim);
    nn::init_linear(store, rng, EDGE_EMBED, 2, cfg.edge_dim);
}

/// Builds the graph from two `N x 2` position nodes.
pub(crate) fn graph_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    prev: Var,
    curr: Var,
    mask: &[bool],
) -> Result<GraphVars> {
    let n = mask.len();
    if tape.shape(prev) != [n, 2] || tape.shape(curr) != [n, 2] {
        return Err(GstError::InvalidArgument(format!(
            "positions {:?} / {:?} do not match {n} mask entries",
            tape.shape(prev),
            tape.shape(curr)
        )));
    }
    let disp = tape.sub(curr, prev)?;
    let v = nn::linear(tape, p, disp, NODE_EMBED)?;
    let node_features = nn::mask_rows(tape, v, mask)?;

    let adjacency = adjacency(mask);
    let diff = tape.constant(pair_difference(n));
    let rel = tape.matmul(diff, curr)?;
    let e = nn::linear(tape, p, rel, EDGE_EMBED)?;
    let edge_features = nn::mask_rows(tape, e, &adjacency)?;
    Ok(GraphVars {
        node_features,
        edge_features,
        node_mask: mask.to_vec(),
        adjacency,
    })
}

/// Builds `G^t` from positions at `t-1` and `t`.
pub fn build_graph(
    prev: &Positions,
    curr: &Positions,
    params: &ParamStore,
    timestep: usize,
) -> Result<InteractionGraph> {
    if prev.len() != curr.len() {
        return Err(GstError::InvalidArgument(format!(
            "previous step has {} pedestrians, current step has {}",
            prev.len(),
            curr.len()
        )));
    }
    if curr.is_empty() {
        return Err(GstError::EmptyInput("build_graph"));
    }
    let mask = node_mask(&prev.valid, &curr.valid);
    let mut tape = Tape::new();
    let mut sub = ParamStore::new();
    for name in [NODE_EMBED, EDGE_EMBED] {
        for key in [nn::weight(name), nn::bias(name)] {
            sub.insert(key.clone(), params.get(&key)?.clone());
        }
    }
    let p = sub.bind(&mut tape);
    let a = tape.constant(prev.to_tensor());
    let b = tape.constant(curr.to_tensor());
    let g = graph_on_tape(&mut tape, &p, a, b, &mask)?;
    Ok(InteractionGraph {
        node_features: tape.value(g.node_features).clone(),
        edge_features: tape.value(g.edge_features).clone(),
        node_mask: g.node_mask,
        adjacency: g.adjacency,
        timestep,
    })
}

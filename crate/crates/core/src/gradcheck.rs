//! Central finite differences against the tape gradients of each
//! differentiable block, on small random instances.

use std::fmt;

use gst_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, SamplingMode, OBS_LEN};
use crate::error::{GstError, Result};
use crate::model::Model;
use crate::rollout::{rollout_on_tape, RolloutOptions};
use crate::selector::StepSampling;
use crate::{decoder, encoder, graph, selector};

const STEP: f64 = 1e-5;
/// Disagreement between the `STEP` and `STEP / 2` estimates beyond which the
/// coordinate is taken to sit on a ReLU kink and is skipped.
const KINK: f64 = 1e-3;
/// Denominator floor of the relative error.
const FLOOR: f64 = 1e-3;
/// Coordinates probed per tensor.
const MAX_COORDS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    NodeEmbedding,
    EdgeEmbedding,
    EdgeAttention,
    /// Soft Gumbel-softmax with the noise held fixed.
    GumbelSoftmax,
    Encoder,
    Lstm,
    Head,
    /// Observation through two prediction steps, deterministic selector.
    Rollout,
}

impl Block {
    pub const ALL: [Block; 8] = [
        Block::NodeEmbedding,
        Block::EdgeEmbedding,
        Block::EdgeAttention,
        Block::GumbelSoftmax,
        Block::Encoder,
        Block::Lstm,
        Block::Head,
        Block::Rollout,
    ];

    pub fn tolerance(self) -> f64 {
        match self {
            Block::Rollout => 1e-3,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::NodeEmbedding => "node-embedding",
            Block::EdgeEmbedding => "edge-embedding",
            Block::EdgeAttention => "edge-attention",
            Block::GumbelSoftmax => "gumbel-softmax",
            Block::Encoder => "encoder",
            Block::Lstm => "lstm",
            Block::Head => "head",
            Block::Rollout => "rollout",
        })
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub block: Block,
    pub num_nodes: usize,
    pub worst_relative_error: f64,
    /// Name of the tensor holding the worst coordinate.
    pub worst_tensor: String,
    pub coordinates: usize,
    /// Coordinates skipped because a kink lies within the probe step.
    pub kinks: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_relative_error < self.block.tolerance()
    }
}

/// Small architecture so the probes stay fast.
fn probe_config(neighbors: usize, sparsity: bool) -> ModelConfig {
    ModelConfig {
        node_dim: 8,
        edge_dim: 8,
        hidden_dim: 6,
        encoder_layers: 3,
        encoder_heads: 2,
        feed_forward_dim: 12,
        sparsity,
        neighbors,
        layer_norm_eps: 1e-5,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..len).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape matches data")
}

/// Model parameters with every entry jittered so biases are nonzero.
fn jittered_params(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    let model = Model::init(cfg, rng.gen())?;
    let mut out = ParamStore::new();
    for (name, t) in model.params.iter() {
        let data = t
            .data()
            .iter()
            .map(|v| v + rng.gen_range(-0.1..0.1))
            .collect();
        out.insert(name.clone(), Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.75)).collect();
    let keep = rng.gen_range(0..n);
    m[keep] = true;
    m
}

/// Sum of `y` weighted elementwise by fixed random constants.
fn weighted_sum(tape: &mut Tape, ys: &[Var], seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total: Option<Var> = None;
    for &y in ys {
        let w = uniform(&mut rng, tape.shape(y), -1.0, 1.0);
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        let s = tape.sum(p);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    total.ok_or(GstError::EmptyInput("weighted_sum"))
}

type Forward<'a> = dyn Fn(&mut Tape, &Bindings) -> Result<Vec<Var>> + 'a;

/// Compares backward against central differences on a sample of the
/// coordinates of every tensor in `store`.
fn compare(
    block: Block,
    n: usize,
    store: &ParamStore,
    f: &Forward<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<GradCheck> {
    let weight_seed: u64 = rng.gen();
    let scalar = |s: &ParamStore| -> Result<(Tape, Bindings, Var)> {
        let mut tape = Tape::new();
        let p = s.bind(&mut tape);
        let ys = f(&mut tape, &p)?;
        let root = weighted_sum(&mut tape, &ys, weight_seed)?;
        Ok((tape, p, root))
    };
    let (tape, p, root) = scalar(store)?;
    let analytic = p.collect(&tape.backward(root)?);

    let mut report = GradCheck {
        block,
        num_nodes: n,
        worst_relative_error: 0.0,
        worst_tensor: String::new(),
        coordinates: 0,
        kinks: 0,
    };
    let mut work = store.clone();
    for (name, t) in store.iter() {
        let picks = sample(rng, t.len(), t.len().min(MAX_COORDS));
        for e in picks {
            let mut eval = |delta: f64| -> Result<f64> {
                let mut data = t.data().to_vec();
                data[e] += delta;
                *work.get_mut(name)? = Tensor::new(t.shape().to_vec(), data)?;
                let (tape, _, r) = scalar(&work)?;
                Ok(tape.value(r).data()[0])
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let half = (eval(STEP / 2.0)? - eval(-STEP / 2.0)?) / STEP;
            *work.get_mut(name)? = t.clone();
            if (numeric - half).abs() / numeric.abs().max(half.abs()).max(FLOOR) > KINK {
                report.kinks += 1;
                continue;
            }
            let a = analytic.get(name).map_or(0.0, |g| g.data()[e]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            if err >= report.worst_relative_error {
                report.worst_relative_error = err;
                report.worst_tensor = name.clone();
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

fn subset(params: &ParamStore, prefixes: &[&str]) -> Result<ParamStore> {
    let mut out = ParamStore::new();
    for (name, t) in params.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name.clone(), t.clone());
        }
    }
    if out.is_empty() {
        return Err(GstError::InvalidArgument(format!(
            "no parameters under {prefixes:?}"
        )));
    }
    Ok(out)
}

/// Runs one check on a random instance with `n` pedestrians.
pub fn check_block(block: Block, n: usize, seed: u64) -> Result<GradCheck> {
    if n == 0 {
        return Err(GstError::EmptyInput("check_block"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match block {
        Block::NodeEmbedding | Block::EdgeEmbedding => {
            let cfg = probe_config(1, false);
            let params = jittered_params(cfg, &mut rng)?;
            let mut store = subset(&params, &[graph::NODE_EMBED, graph::EDGE_EMBED])?;
            store.insert("input.prev", uniform(&mut rng, &[n, 2], -3.0, 3.0));
            store.insert("input.curr", uniform(&mut rng, &[n, 2], -3.0, 3.0));
            let mask = random_mask(&mut rng, n);
            let f = move |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                let g = graph::graph_on_tape(
                    tape,
                    p,
                    p.get("input.prev")?,
                    p.get("input.curr")?,
                    &mask,
                )?;
                Ok(vec![if block == Block::NodeEmbedding {
                    g.node_features
                } else {
                    g.edge_features
                }])
            };
            compare(block, n, &store, &f, &mut rng)
        }
        Block::EdgeAttention => {
            let heads = if n % 2 == 0 { 2 } else { 1 };
            let cfg = probe_config(heads, true);
            let params = jittered_params(cfg.clone(), &mut rng)?;
            let mut store = subset(&params, &["selector."])?;
            store.insert(
                "input.aug",
                uniform(&mut rng, &[n * n, cfg.augmented_dim()], -1.0, 1.0),
            );
            let adjacency = graph::adjacency(&random_mask(&mut rng, n));
            let f = move |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                let att = selector::edge_attention_on_tape(
                    tape,
                    p,
                    p.get("input.aug")?,
                    &adjacency,
                    heads,
                )?;
                let logits = selector::logits_on_tape(tape, p, att, heads, n)?;
                Ok(vec![att, logits])
            };
            compare(block, n, &store, &f, &mut rng)
        }
        Block::GumbelSoftmax => {
            let heads = 2;
            let mut store = ParamStore::new();
            store.insert(
                "input.logits",
                uniform(&mut rng, &[heads * n, n], -2.0, 2.0),
            );
            let adjacency = graph::adjacency(&random_mask(&mut rng, n));
            let sampling = StepSampling {
                tau: 0.5,
                mode: SamplingMode::Soft,
                seed: rng.gen(),
                step: rng.gen_range(1..20),
            };
            let f = move |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                let (y, avg) = selector::sample_on_tape(
                    tape,
                    p.get("input.logits")?,
                    &adjacency,
                    heads,
                    sampling,
                )?;
                Ok(vec![y, avg])
            };
            compare(block, n, &store, &f, &mut rng)
        }
        Block::Encoder => {
            let cfg = probe_config(1, true);
            let params = jittered_params(cfg.clone(), &mut rng)?;
            let mut store = subset(&params, &["encoder."])?;
            let mask = random_mask(&mut rng, n);
            store.insert("input.v", uniform(&mut rng, &[n, cfg.node_dim], -1.0, 1.0));
            let raw = uniform(&mut rng, &[n, n], 0.1, 1.0);
            let adj: Vec<f64> = (0..n * n)
                .map(|k| {
                    if mask[k / n] && mask[k % n] {
                        raw.data()[k]
                    } else {
                        0.0
                    }
                })
                .collect();
            store.insert("input.adj", Tensor::matrix(n, n, adj)?);
            let f = move |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                let out = encoder::encode_on_tape(
                    tape,
                    p,
                    &cfg,
                    p.get("input.v")?,
                    p.get("input.adj")?,
                    &mask,
                )?;
                Ok(vec![out])
            };
            compare(block, n, &store, &f, &mut rng)
        }
        Block::Lstm => {
            let cfg = probe_config(1, true);
            let params = jittered_params(cfg.clone(), &mut rng)?;
            let mut store = subset(&params, &[decoder::LSTM_INPUT, decoder::LSTM_HIDDEN])?;
            store.insert("input.x", uniform(&mut rng, &[n, cfg.node_dim], -1.0, 1.0));
            store.insert(
                "input.h",
                uniform(&mut rng, &[n, cfg.hidden_dim], -1.0, 1.0),
            );
            store.insert(
                "input.c",
                uniform(&mut rng, &[n, cfg.hidden_dim], -1.0, 1.0),
            );
            let mask = random_mask(&mut rng, n);
            let f = move |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                let (h, c) = decoder::masked_step_on_tape(
                    tape,
                    p,
                    p.get("input.x")?,
                    &mask,
                    p.get("input.h")?,
                    p.get("input.c")?,
                )?;
                Ok(vec![h, c])
            };
            compare(block, n, &store, &f, &mut rng)
        }
        Block::Head => {
            let cfg = probe_config(1, true);
            let params = jittered_params(cfg.clone(), &mut rng)?;
            let mut store = subset(&params, &[decoder::HEAD])?;
            store.insert(
                "input.h",
                uniform(&mut rng, &[n, cfg.hidden_dim], -1.0, 1.0),
            );
            let f = |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                Ok(vec![decoder::head_on_tape(tape, p, p.get("input.h")?)?])
            };
            compare(block, n, &store, &f, &mut rng)
        }
        Block::Rollout => {
            let heads = if n % 2 == 0 { 2 } else { 1 };
            let cfg = probe_config(heads, true);
            let mut store = jittered_params(cfg.clone(), &mut rng)?;
            let mut presence: Vec<Vec<bool>> = vec![vec![true; n]; OBS_LEN];
            // one pedestrian may enter late
            if n > 1 && rng.gen_bool(0.5) {
                let late = rng.gen_range(0..n);
                let enter = rng.gen_range(1..OBS_LEN - 1);
                for row in presence.iter_mut().take(enter) {
                    row[late] = false;
                }
            }
            let start = uniform(&mut rng, &[n, 2], -3.0, 3.0).data().to_vec();
            let vel = uniform(&mut rng, &[n, 2], -0.5, 0.5);
            for (t, row) in presence.iter().enumerate() {
                let xy: Vec<f64> = (0..2 * n)
                    .map(|k| {
                        if row[k / 2] {
                            start[k] + vel.data()[k] * t as f64
                        } else {
                            0.0
                        }
                    })
                    .collect();
                store.insert(format!("input.obs{t}"), Tensor::matrix(n, 2, xy)?);
            }
            let opts = RolloutOptions {
                tau: 0.5,
                mode: SamplingMode::Deterministic,
                seed: 0,
                pred_len: 2,
            };
            let f = move |tape: &mut Tape, p: &Bindings| -> Result<Vec<Var>> {
                let observed = (0..OBS_LEN)
                    .map(|t| p.get(&format!("input.obs{t}")).map_err(GstError::from))
                    .collect::<Result<Vec<_>>>()?;
                let vars = rollout_on_tape(tape, p, &cfg, &observed, &presence, &opts)?;
                Ok(vars.positions)
            };
            compare(block, n, &store, &f, &mut rng)
        }
    }
}

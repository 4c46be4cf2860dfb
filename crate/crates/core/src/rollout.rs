//! Observation warm-up followed by recursive prediction.
//!
//! Steps are 0-based window indices. Graph step `t` uses positions at `t-1`
//! and `t`; the observation contributes steps `1..T_obs`, and every predicted
//! position `x̂^{t+1}` feeds the graph of step `t+1` until the horizon.

use gst_autodiff::{Bindings, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SamplingMode};
use crate::decoder::{self, HiddenState};
use crate::encoder;
use crate::error::{GstError, Result};
use crate::graph::{self, positions_tensor};
use crate::model::Model;
use crate::selector::{self, StepSampling};

/// Observed prefix of a scene: `T_obs` steps of `N` slots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `T_obs x N`, meters; values at absent steps are ignored.
    pub positions: Vec<Vec<[f64; 2]>>,
    pub presence: Vec<Vec<bool>>,
}

impl Observation {
    pub fn new(positions: Vec<Vec<[f64; 2]>>, presence: Vec<Vec<bool>>) -> Result<Self> {
        if positions.len() < 2 || positions.len() != presence.len() {
            return Err(GstError::InvalidArgument(format!(
                "observation needs at least 2 steps with matching presence ({} vs {})",
                positions.len(),
                presence.len()
            )));
        }
        let n = positions[0].len();
        if n == 0 {
            return Err(GstError::EmptyInput("observation"));
        }
        if positions.iter().any(|r| r.len() != n) || presence.iter().any(|r| r.len() != n) {
            return Err(GstError::InvalidArgument("ragged observation".into()));
        }
        Ok(Self {
            positions,
            presence,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.positions[0].len()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Keeps only the listed slots, in the given order.
    pub fn select(&self, agents: &[usize]) -> Self {
        Self {
            positions: self
                .positions
                .iter()
                .map(|r| agents.iter().map(|&i| r[i]).collect())
                .collect(),
            presence: self
                .presence
                .iter()
                .map(|r| agents.iter().map(|&i| r[i]).collect())
                .collect(),
        }
    }
}

/// Sampling policy for one rollout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub tau: f64,
    pub mode: SamplingMode,
    pub seed: u64,
    pub pred_len: usize,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        Self {
            tau: 0.03,
            mode: SamplingMode::Soft,
            seed: 0,
            pred_len: crate::config::PRED_LEN,
        }
    }
}

/// Adjacency the encoder consumed at one graph step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAdjacency {
    pub step: usize,
    /// `N x N`, row-stochastic on valid rows.
    pub matrix: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRollout {
    /// Slot index in the caller's input for every agent column.
    pub agents: Vec<usize>,
    /// `T_pred x N`, meters.
    pub positions: Vec<Vec<[f64; 2]>>,
    /// `T_pred x N`; false entries carry no prediction.
    pub masks: Vec<Vec<bool>>,
    pub adjacency: Vec<StepAdjacency>,
    /// State that produced each predicted step.
    pub hidden: Vec<HiddenState>,
}

impl PredictionRollout {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Tape handles of a rollout.
pub(crate) struct RolloutVars {
    /// `T_pred` nodes of shape `N x 2`.
    pub positions: Vec<Var>,
    pub masks: Vec<Vec<bool>>,
    pub adjacency: Vec<(usize, Var)>,
    pub hidden: Vec<(Var, Var)>,
}

struct Recurrent {
    h: Var,
    c: Var,
}

#[allow(clippy::too_many_arguments)]
fn graph_step(
    tape: &mut Tape,
    p: &Bindings,
    cfg: &ModelConfig,
    prev: Var,
    curr: Var,
    mask: &[bool],
    state: Recurrent,
    sampling: StepSampling,
) -> Result<(Recurrent, Var)> {
    let n = mask.len();
    let g = graph::graph_on_tape(tape, p, prev, curr, mask)?;
    let adj = if cfg.sparsity {
        selector::select_on_tape(tape, p, cfg, &g, sampling)?
    } else {
        tape.constant(encoder::normalized_adjacency(&g.adjacency, n))
    };
    let encoded = encoder::encode_on_tape(tape, p, cfg, g.node_features, adj, mask)?;
    let (h, c) = decoder::masked_step_on_tape(tape, p, encoded, mask, state.h, state.c)?;
    Ok((Recurrent { h, c }, adj))
}

pub(crate) fn rollout_on_tape(
    tape: &mut Tape,
    p: &Bindings,
    cfg: &ModelConfig,
    observed: &[Var],
    presence: &[Vec<bool>],
    opts: &RolloutOptions,
) -> Result<RolloutVars> {
    if opts.pred_len < 1 {
        return Err(GstError::InvalidArgument(
            "prediction length must be at least 1".into(),
        ));
    }
    let obs_len = observed.len();
    let pred_masks = graph::masks_for_prediction(presence, opts.pred_len)?;
    let n = presence[0].len();
    let sampling = |step: usize| StepSampling {
        tau: opts.tau,
        mode: opts.mode,
        seed: opts.seed,
        step,
    };
    let mut state = Recurrent {
        h: tape.constant(Tensor::zeros(&[n, cfg.hidden_dim])),
        c: tape.constant(Tensor::zeros(&[n, cfg.hidden_dim])),
    };
    let mut adjacency = Vec::with_capacity(obs_len - 1 + opts.pred_len - 1);
    for t in 1..obs_len {
        let mask = graph::node_mask(&presence[t - 1], &presence[t]);
        let (s, adj) = graph_step(
            tape,
            p,
            cfg,
            observed[t - 1],
            observed[t],
            &mask,
            state,
            sampling(t),
        )?;
        state = s;
        adjacency.push((t, adj));
    }

    let mut positions = Vec::with_capacity(opts.pred_len);
    let mut hidden = Vec::with_capacity(opts.pred_len);
    let mut prev = observed[obs_len - 2];
    let mut curr = observed[obs_len - 1];
    for (k, mask) in pred_masks.iter().enumerate() {
        if k > 0 {
            let t = obs_len - 1 + k;
            let (s, adj) = graph_step(tape, p, cfg, prev, curr, mask, state, sampling(t))?;
            state = s;
            adjacency.push((t, adj));
        }
        hidden.push((state.h, state.c));
        let delta = decoder::head_on_tape(tape, p, state.h)?;
        let moved = tape.add(curr, delta)?;
        let next = tape.select_rows(mask, moved, curr)?;
        positions.push(next);
        prev = curr;
        curr = next;
    }
    Ok(RolloutVars {
        positions,
        masks: pred_masks,
        adjacency,
        hidden,
    })
}

/// Constants for the observed positions, absent entries replaced by the filler.
pub(crate) fn observed_on_tape(tape: &mut Tape, obs: &Observation) -> Vec<Var> {
    obs.positions
        .iter()
        .zip(&obs.presence)
        .map(|(xy, valid)| tape.constant(positions_tensor(xy, valid)))
        .collect()
}

fn tensor_rows(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

/// Predicts `opts.pred_len` steps past the end of `obs`.
pub fn rollout(
    model: &Model,
    obs: &Observation,
    opts: &RolloutOptions,
) -> Result<PredictionRollout> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let observed = observed_on_tape(&mut tape, obs);
    let vars = rollout_on_tape(&mut tape, &p, &model.config, &observed, &obs.presence, opts)?;
    Ok(PredictionRollout {
        agents: (0..obs.num_agents()).collect(),
        positions: vars
            .positions
            .iter()
            .map(|v| tensor_rows(tape.value(*v)))
            .collect(),
        masks: vars.masks,
        adjacency: vars
            .adjacency
            .iter()
            .map(|(step, v)| StepAdjacency {
                step: *step,
                matrix: tape.value(*v).clone(),
            })
            .collect(),
        hidden: vars
            .hidden
            .iter()
            .map(|(h, c)| HiddenState {
                h: tape.value(*h).clone(),
                c: tape.value(*c).clone(),
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{OBS_LEN, PRED_LEN};
    use crate::nn;

    fn walkers(n: usize) -> Observation {
        let positions = (0..OBS_LEN)
            .map(|t| (0..n).map(|i| [0.4 * t as f64, i as f64]).collect())
            .collect();
        Observation::new(positions, vec![vec![true; n]; OBS_LEN]).unwrap()
    }

    fn det() -> RolloutOptions {
        RolloutOptions {
            mode: SamplingMode::Deterministic,
            ..RolloutOptions::default()
        }
    }

    #[test]
    fn zero_head_keeps_last_position() {
        let mut m = Model::init(ModelConfig::default(), 1).unwrap();
        for k in [nn::weight(decoder::HEAD), nn::bias(decoder::HEAD)] {
            let shape = m.params.get(&k).unwrap().shape().to_vec();
            m.params.insert(k, Tensor::zeros(&shape));
        }
        let obs = walkers(3);
        let r = rollout(&m, &obs, &det()).unwrap();
        assert_eq!(r.positions.len(), PRED_LEN);
        for step in &r.positions {
            assert_eq!(step, &obs.positions[OBS_LEN - 1]);
        }
        assert_eq!(r.adjacency.len(), OBS_LEN - 1 + PRED_LEN - 1);
    }

    #[test]
    fn zero_prediction_length_rejected() {
        let m = Model::init(ModelConfig::default(), 1).unwrap();
        let opts = RolloutOptions {
            pred_len: 0,
            ..det()
        };
        assert!(rollout(&m, &walkers(2), &opts).is_err());
    }

    #[test]
    fn vanished_pedestrian_is_flagged_and_frozen() {
        let m = Model::init(ModelConfig::default(), 2).unwrap();
        let mut obs = walkers(3);
        for row in obs.presence.iter_mut().skip(OBS_LEN - 2) {
            row[1] = false;
        }
        let r = rollout(&m, &obs, &det()).unwrap();
        assert!(r.masks.iter().all(|m| m == &vec![true, false, true]));
        assert!(r.positions.iter().all(|p| p[1] == [0.0, 0.0]));
    }

    #[test]
    fn telescoping_identity() {
        let m = Model::init(ModelConfig::default(), 3).unwrap();
        let obs = walkers(2);
        let r = rollout(&m, &obs, &det()).unwrap();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let mut acc = obs.positions[OBS_LEN - 1].clone();
        for (k, hs) in r.hidden.iter().enumerate() {
            let h = tape.constant(hs.h.clone());
            let d = decoder::head_on_tape(&mut tape, &p, h).unwrap();
            let d = tape.value(d);
            for (i, a) in acc.iter_mut().enumerate() {
                a[0] += d.at(i, 0);
                a[1] += d.at(i, 1);
                assert!((a[0] - r.positions[k][i][0]).abs() < 1e-12);
                assert!((a[1] - r.positions[k][i][1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_and_sparse_adjacency_rows_are_stochastic() {
        for sparsity in [false, true] {
            let cfg = ModelConfig {
                sparsity,
                neighbors: 4,
                ..ModelConfig::default()
            };
            let m = Model::init(cfg, 4).unwrap();
            let r = rollout(&m, &walkers(3), &RolloutOptions::default()).unwrap();
            for a in &r.adjacency {
                for i in 0..3 {
                    let s: f64 = a.matrix.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}

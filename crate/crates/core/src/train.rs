//! Training loop: recursive rollouts, masked MSE, annealed temperature, Adam.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gst_autodiff::{
    accumulate_grads, clip_global_norm, Adam, AdamConfig, NamedGrads, Tape, Tensor, Var,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, SamplingMode, OBS_LEN, PRED_LEN};
use crate::dataset::{rotate_augment, DatasetSplit, TrajectoryWindow};
use crate::error::{GstError, Result};
use crate::model::{Model, ModelCheckpoint};
use crate::rollout::{self, PredictionRollout, RolloutOptions, RolloutVars};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub neighbors: usize,
    pub partial_input: bool,
    pub sparsity: bool,
    pub seed: u64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Random rotation about the observed centroid.
    pub augment: bool,
    pub clip_norm: f64,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    pub mode: SamplingMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            learning_rate: 1e-3,
            tau_start: 0.5,
            tau_end: 0.03,
            neighbors: 1,
            partial_input: true,
            sparsity: true,
            seed: 0,
            batch_size: 16,
            augment: true,
            clip_norm: 10.0,
            checkpoint_every: 10,
            mode: SamplingMode::Soft,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            sparsity: self.sparsity,
            neighbors: self.neighbors,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(GstError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(GstError::Config("batch_size must be at least 1".into()));
        }
        if !(self.tau_start > 0.0 && self.tau_end > 0.0) {
            return Err(GstError::Config("temperatures must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.clip_norm > 0.0) {
            return Err(GstError::Config(
                "learning_rate and clip_norm must be positive".into(),
            ));
        }
        self.model_config().validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GstError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain fields serialize")
    }
}

/// Linear from `tau_start` at epoch 1 to `tau_end` at the last epoch.
pub fn anneal_tau(epoch: usize, config: &TrainConfig) -> f64 {
    if config.epochs <= 1 {
        return config.tau_start;
    }
    let frac = (epoch.clamp(1, config.epochs) - 1) as f64 / (config.epochs - 1) as f64;
    config.tau_start + frac * (config.tau_end - config.tau_start)
}

fn term_valid(
    pred: &[Vec<bool>],
    truth: &TrajectoryWindow,
    agents: &[usize],
    k: usize,
    col: usize,
) -> bool {
    pred[k][col] && truth.presence[OBS_LEN + k][agents[col]]
}

/// Squared error summed over valid terms, and the number of terms (two per
/// valid pedestrian-step).
pub fn squared_error(pred: &PredictionRollout, truth: &TrajectoryWindow) -> Result<(f64, usize)> {
    if pred.positions.len() > truth.positions.len() - OBS_LEN
        || pred.agents.iter().any(|&a| a >= truth.num_pedestrians())
    {
        return Err(GstError::InvalidArgument(
            "rollout does not fit the window".into(),
        ));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (k, step) in pred.positions.iter().enumerate() {
        for (col, p) in step.iter().enumerate() {
            if term_valid(&pred.masks, truth, &pred.agents, k, col) {
                let t = truth.positions[OBS_LEN + k][pred.agents[col]];
                sum += (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
                count += 2;
            }
        }
    }
    Ok((sum, count))
}

/// Mean squared error per coordinate over pedestrians present in the
/// ground truth at each predicted step.
pub fn masked_mse(pred: &PredictionRollout, truth: &TrajectoryWindow) -> Result<f64> {
    let (sum, count) = squared_error(pred, truth)?;
    if count == 0 {
        return Err(GstError::DegenerateWindow);
    }
    Ok(sum / count as f64)
}

/// Sum of squared errors on tape, with the term count.
fn squared_error_on_tape(
    tape: &mut Tape,
    vars: &RolloutVars,
    truth: &TrajectoryWindow,
    agents: &[usize],
) -> Result<Option<(Var, usize)>> {
    let n = agents.len();
    let mut total: Option<Var> = None;
    let mut count = 0;
    for (k, &pos) in vars.positions.iter().enumerate() {
        let valid: Vec<bool> = (0..n)
            .map(|c| term_valid(&vars.masks, truth, agents, k, c))
            .collect();
        let terms = valid.iter().filter(|v| **v).count();
        if terms == 0 {
            continue;
        }
        count += 2 * terms;
        let target: Vec<f64> = agents
            .iter()
            .zip(&valid)
            .flat_map(|(&a, &ok)| {
                if ok {
                    truth.positions[OBS_LEN + k][a]
                } else {
                    [0.0, 0.0]
                }
            })
            .collect();
        let target = tape.constant(Tensor::matrix(n, 2, target)?);
        let diff = tape.sub(pos, target)?;
        let zeros = tape.constant(Tensor::zeros(&[n, 2]));
        let diff = tape.select_rows(&valid, diff, zeros)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| (t, count)))
}

/// Gradient of the summed squared error for one window. `None` when the
/// window contributes no terms.
pub fn window_gradient(
    model: &Model,
    window: &TrajectoryWindow,
    partial_input: bool,
    opts: &RolloutOptions,
) -> Result<Option<(f64, usize, NamedGrads)>> {
    let agents = window.input_agents(partial_input);
    if agents.is_empty() {
        return Ok(None);
    }
    let obs = window.observation(&agents)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let observed = rollout::observed_on_tape(&mut tape, &obs);
    let vars =
        rollout::rollout_on_tape(&mut tape, &p, &model.config, &observed, &obs.presence, opts)?;
    let Some((loss, count)) = squared_error_on_tape(&mut tape, &vars, window, &agents)? else {
        return Ok(None);
    };
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    Ok(Some((value, count, p.collect(&grads))))
}

/// Rollout of one window restricted to its model inputs; `agents` hold
/// window slot indices.
pub fn predict_window(
    model: &Model,
    window: &TrajectoryWindow,
    partial_input: bool,
    opts: &RolloutOptions,
) -> Result<Option<PredictionRollout>> {
    let agents = window.input_agents(partial_input);
    if agents.is_empty() {
        return Ok(None);
    }
    let mut r = rollout::rollout(model, &window.observation(&agents)?, opts)?;
    r.agents = agents;
    Ok(Some(r))
}

/// Per-term mean squared error over a window set, no gradients.
pub fn evaluate_loss(
    model: &Model,
    windows: &[TrajectoryWindow],
    partial_input: bool,
    opts: &RolloutOptions,
) -> Result<f64> {
    let parts: Vec<(f64, usize)> = windows
        .par_iter()
        .map(|w| match predict_window(model, w, partial_input, opts)? {
            Some(r) => squared_error(&r, w),
            None => Ok((0.0, 0)),
        })
        .collect::<Result<_>>()?;
    let (sum, count) = parts.iter().fold((0.0, 0), |(s, c), (a, b)| (s + a, c + b));
    if count == 0 {
        return Err(GstError::DegenerateWindow);
    }
    Ok(sum / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub tau: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,tau,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{},{:.3}", e.epoch, e.loss, e.tau, e.seconds);
        }
        s
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: TrainLog,
}

/// Where and how often to write checkpoints.
#[derive(Clone, Debug, Default)]
pub struct CheckpointSink {
    pub dir: Option<PathBuf>,
}

impl CheckpointSink {
    fn write(&self, name: &str, model: &Model, partial: bool) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.dir else {
            return Ok(None);
        };
        fs::create_dir_all(dir).map_err(|e| GstError::io(dir, e))?;
        let path = dir.join(name);
        ModelCheckpoint::new(model, partial).save(&path)?;
        Ok(Some(path))
    }
}

/// Trains on `split.train`. `on_epoch` sees each epoch's log line.
pub fn train(
    split: &DatasetSplit,
    config: &TrainConfig,
    checkpoints: &CheckpointSink,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(GstError::EmptyInput("training set"));
    }
    let mut model = Model::init(config.model_config(), config.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut log = TrainLog::default();
    let mut best = f64::INFINITY;
    let mut order: Vec<usize> = (0..split.train.len()).collect();
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let tau = anneal_tau(epoch, config);
        let mut rng = ChaCha8Rng::seed_from_u64(
            config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let (mut epoch_sum, mut epoch_count) = (0.0, 0usize);
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let jobs: Vec<(TrajectoryWindow, RolloutOptions)> = batch
                .iter()
                .map(|&i| {
                    let w = &split.train[i];
                    let w = if config.augment {
                        rotate_augment(w, rng.gen_range(0.0..TAU), w.observed_centroid())
                    } else {
                        w.clone()
                    };
                    let opts = RolloutOptions {
                        tau,
                        mode: config.mode,
                        seed: rng.gen(),
                        pred_len: PRED_LEN,
                    };
                    (w, opts)
                })
                .collect();
            let results: Vec<_> = jobs
                .par_iter()
                .map(|(w, opts)| window_gradient(&model, w, config.partial_input, opts))
                .collect::<Result<_>>()?;
            let mut grads = NamedGrads::new();
            let (mut sum, mut count) = (0.0, 0usize);
            for (s, c, g) in results.into_iter().flatten() {
                sum += s;
                count += c;
                accumulate_grads(&mut grads, &g);
            }
            if count == 0 {
                continue;
            }
            if !sum.is_finite() {
                return Err(GstError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                });
            }
            let scale = 1.0 / count as f64;
            for g in grads.values_mut() {
                *g = g.scaled(scale);
            }
            clip_global_norm(&mut grads, config.clip_norm);
            adam.step(&mut model.params, &grads)
                .map_err(|_| GstError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                })?;
            epoch_sum += sum;
            epoch_count += count;
        }
        if epoch_count == 0 {
            return Err(GstError::DegenerateWindow);
        }
        let entry = EpochLog {
            epoch,
            loss: epoch_sum / epoch_count as f64,
            tau,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        if entry.loss < best {
            best = entry.loss;
            if let Some(p) = checkpoints.write("best.json", &model, config.partial_input)? {
                if !log.checkpoints.contains(&p) {
                    log.checkpoints.push(p);
                }
            }
        }
        if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
            if let Some(p) = checkpoints.write(
                &format!("epoch{epoch:04}.json"),
                &model,
                config.partial_input,
            )? {
                log.checkpoints.push(p);
            }
        }
        log.epochs.push(entry);
    }
    if let Some(p) = checkpoints.write("final.json", &model, config.partial_input)? {
        log.checkpoints.push(p);
    }
    Ok(TrainOutcome { model, log })
}

/// Writes the log as CSV.
pub fn write_log(log: &TrainLog, path: &Path) -> Result<()> {
    fs::write(path, log.to_csv()).map_err(|e| GstError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::WINDOW_LEN;

    fn window(n: usize, present: impl Fn(usize, usize) -> bool) -> TrajectoryWindow {
        let positions = (0..WINDOW_LEN)
            .map(|t| (0..n).map(|i| [0.4 * t as f64, i as f64]).collect())
            .collect();
        let presence = (0..WINDOW_LEN)
            .map(|t| (0..n).map(|i| present(t, i)).collect())
            .collect();
        TrajectoryWindow::from_steps("s", 0, (0..n as i64).collect(), positions, presence).unwrap()
    }

    fn rollout_from_truth(w: &TrajectoryWindow) -> PredictionRollout {
        PredictionRollout {
            agents: (0..w.num_pedestrians()).collect(),
            positions: w.positions[OBS_LEN..].to_vec(),
            masks: vec![w.presence[OBS_LEN - 1].clone(); PRED_LEN],
            adjacency: vec![],
            hidden: vec![],
        }
    }

    #[test]
    fn tau_schedule() {
        let c = TrainConfig::default();
        assert_eq!(anneal_tau(1, &c), 0.5);
        assert!((anneal_tau(200, &c) - 0.03).abs() < 1e-15);
        assert!((anneal_tau(101, &c) - (0.5 - 100.0 / 199.0 * 0.47)).abs() < 1e-12);
        assert!((anneal_tau(101, &c) - 0.2638).abs() < 1e-4);
        let one = TrainConfig { epochs: 1, ..c };
        assert_eq!(anneal_tau(1, &one), 0.5);
    }

    #[test]
    fn mse_cases() {
        let w = window(1, |_, _| true);
        let mut r = rollout_from_truth(&w);
        assert_eq!(masked_mse(&r, &w).unwrap(), 0.0);
        r.positions.truncate(1);
        r.masks.truncate(1);
        r.positions[0][0][0] += 3.0;
        r.positions[0][0][1] += 4.0;
        assert_eq!(masked_mse(&r, &w).unwrap(), 12.5);
    }

    #[test]
    fn mse_skips_absent_truth_against_scalar_loop() {
        // pedestrian 1 leaves after step 13 (absent at 14..=19)
        let w = window(3, |t, i| i != 1 || t <= 13);
        let mut r = rollout_from_truth(&w);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for step in r.positions.iter_mut() {
            for p in step.iter_mut() {
                p[0] += rng.gen_range(-1.0..1.0);
                p[1] += rng.gen_range(-1.0..1.0);
            }
        }
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for k in 0..PRED_LEN {
            for i in 0..3 {
                if w.presence[OBS_LEN + k][i] {
                    for d in 0..2 {
                        sum += (r.positions[k][i][d] - w.positions[OBS_LEN + k][i][d]).powi(2);
                        cnt += 1.0;
                    }
                }
            }
        }
        assert!((masked_mse(&r, &w).unwrap() - sum / cnt).abs() < 1e-12);
    }

    #[test]
    fn degenerate_window_rejected() {
        let w = window(1, |_, _| true);
        let mut r = rollout_from_truth(&w);
        r.masks = vec![vec![false]; PRED_LEN];
        assert!(matches!(
            masked_mse(&r, &w),
            Err(GstError::DegenerateWindow)
        ));
    }

    #[test]
    fn zero_epochs_rejected() {
        let split = DatasetSplit {
            train: vec![window(2, |_, _| true)],
            test: vec![],
        };
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&split, &cfg, &CheckpointSink::default(), |_| {}),
            Err(GstError::Config(_))
        ));
        let empty = DatasetSplit::default();
        assert!(train(
            &empty,
            &TrainConfig::default(),
            &CheckpointSink::default(),
            |_| {}
        )
        .is_err());
    }

    #[test]
    fn tape_loss_matches_plain_loss() {
        let w = window(3, |t, i| i != 2 || t >= 4);
        let model = Model::init(ModelConfig::default(), 5).unwrap();
        let opts = RolloutOptions {
            mode: SamplingMode::Deterministic,
            ..RolloutOptions::default()
        };
        let (s, c, g) = window_gradient(&model, &w, true, &opts).unwrap().unwrap();
        let r = predict_window(&model, &w, true, &opts).unwrap().unwrap();
        let (s2, c2) = squared_error(&r, &w).unwrap();
        assert_eq!(c, c2);
        assert!((s - s2).abs() < 1e-9 * s2.max(1.0));
        assert_eq!(g.len(), model.params.len());
    }

    #[test]
    fn config_toml_roundtrip() {
        let c = TrainConfig {
            epochs: 7,
            mode: SamplingMode::Hard,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(TrainConfig::from_toml("epochz = 3").is_err());
        assert_eq!(TrainConfig::from_toml("epochs = 3").unwrap().epochs, 3);
    }

    #[test]
    fn short_runs_are_reproducible() {
        let split = DatasetSplit {
            train: (0..3)
                .map(|k| window(2, move |t, i| i == 0 || t >= k))
                .collect(),
            test: vec![],
        };
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&split, &cfg, &CheckpointSink::default(), |_| {}).unwrap();
        let b = train(&split, &cfg, &CheckpointSink::default(), |_| {}).unwrap();
        assert_eq!(a.log.losses(), b.log.losses());
        assert_eq!(a.model, b.model);
    }
}

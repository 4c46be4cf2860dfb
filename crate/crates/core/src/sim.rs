//! Scripted human-robot scenarios fed to a trained predictor.
//!
//! The robot is an ordinary agent. Every scenario scripts the observed
//! segment only; what happens afterwards is the model's prediction.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Variant, OBS_LEN, PRED_LEN, STEP_SECONDS};
use crate::error::{GstError, Result};
use crate::model::ModelCheckpoint;
use crate::rollout::{rollout, Observation, PredictionRollout, RolloutOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioId {
    /// Robot and a human approach each other; a second human appears four
    /// steps later and heads for them.
    LateEntry,
    /// Robot walks right into eight humans walking left in formation.
    RobotVsCrowd,
    /// Six humans wander near the walls while one runs at the robot.
    RandomWalkers,
}

impl ScenarioId {
    pub const ALL: [ScenarioId; 3] = [
        ScenarioId::LateEntry,
        ScenarioId::RobotVsCrowd,
        ScenarioId::RandomWalkers,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioId::LateEntry => "late-entry",
            ScenarioId::RobotVsCrowd => "robot-vs-crowd",
            ScenarioId::RandomWalkers => "random-walkers",
        }
    }
}

impl fmt::Display for ScenarioId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioId {
    type Err = GstError;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| GstError::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

/// Geometry and kinematics shared by all scenarios.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGeometry {
    pub corridor_length: f64,
    pub corridor_width: f64,
    /// m/s
    pub walking_speed: f64,
    /// m/s
    pub runner_speed: f64,
    pub step_seconds: f64,
    /// Step-to-step velocity noise of wandering agents, m/s.
    pub wander_noise: f64,
}

impl Default for ScenarioGeometry {
    fn default() -> Self {
        Self {
            corridor_length: 10.0,
            corridor_width: 6.0,
            walking_speed: 1.2,
            runner_speed: 2.0,
            step_seconds: STEP_SECONDS,
            wander_noise: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Robot,
    Human,
}

/// One agent over the observed segment. Steps are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScript {
    pub name: String,
    pub role: Role,
    pub entry_step: usize,
    /// First step at which the agent is gone, if it leaves.
    pub exit_step: Option<usize>,
    /// Position at `entry_step`.
    pub start: [f64; 2],
    /// Velocity (m/s) applied between step `s` and `s + 1`, for every
    /// observed step.
    pub velocities: Vec<[f64; 2]>,
}

impl AgentScript {
    fn constant(name: &str, role: Role, entry: usize, start: [f64; 2], velocity: [f64; 2]) -> Self {
        Self {
            name: name.into(),
            role,
            entry_step: entry,
            exit_step: None,
            start,
            velocities: vec![velocity; OBS_LEN],
        }
    }

    pub fn present(&self, step: usize) -> bool {
        step >= self.entry_step && self.exit_step.is_none_or(|e| step < e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: ScenarioId,
    pub seed: u64,
    pub geometry: ScenarioGeometry,
    pub agents: Vec<AgentScript>,
}

fn heading(from: [f64; 2], to: [f64; 2], speed: f64) -> [f64; 2] {
    let (dx, dy) = (to[0] - from[0], to[1] - from[1]);
    let d = dx.hypot(dy);
    [speed * dx / d, speed * dy / d]
}

pub fn build_scenario(id: ScenarioId, seed: u64) -> Scenario {
    build_scenario_with(id, seed, ScenarioGeometry::default())
}

pub fn build_scenario_with(id: ScenarioId, seed: u64, geometry: ScenarioGeometry) -> Scenario {
    let (len, wid) = (geometry.corridor_length, geometry.corridor_width);
    let walk = geometry.walking_speed;
    let mid = wid / 2.0;
    let robot = AgentScript::constant("robot", Role::Robot, 0, [0.1 * len, mid], [walk, 0.0]);
    let agents = match id {
        ScenarioId::LateEntry => {
            let human = AgentScript::constant(
                "human-1",
                Role::Human,
                0,
                [0.9 * len, mid + 0.2],
                [-walk, 0.0],
            );
            // meet point of the first two, seen from the late entrant's spawn
            let entry = 4;
            let meet = [0.5 * len, mid + 0.1];
            let spawn = [0.7 * len, 0.1 * wid];
            let late = AgentScript::constant(
                "human-2",
                Role::Human,
                entry,
                spawn,
                heading(spawn, meet, walk),
            );
            vec![robot, human, late]
        }
        ScenarioId::RobotVsCrowd => {
            let mut agents = vec![robot];
            for col in 0..2 {
                for row in 0..4 {
                    let start = [0.8 * len + col as f64, mid - 1.5 + row as f64];
                    agents.push(AgentScript::constant(
                        &format!("human-{}", agents.len()),
                        Role::Human,
                        0,
                        start,
                        [-walk, 0.0],
                    ));
                }
            }
            agents
        }
        ScenarioId::RandomWalkers => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let runner_start = [0.9 * len, mid];
            let runner = AgentScript::constant(
                "runner",
                Role::Human,
                0,
                runner_start,
                [-geometry.runner_speed, 0.0],
            );
            let mut agents = vec![robot, runner];
            for k in 0..6 {
                let x = len * (0.2 + 0.3 * (k % 3) as f64);
                let y = if k < 3 { 0.5 } else { wid - 0.5 };
                let angle = rng.gen_range(0.0..std::f64::consts::TAU);
                let mut v = [walk * angle.cos(), walk * angle.sin()];
                let mut velocities = Vec::with_capacity(OBS_LEN);
                let mut py = y;
                for _ in 0..OBS_LEN {
                    velocities.push(v);
                    py += v[1] * geometry.step_seconds;
                    v[0] += rng.gen_range(-geometry.wander_noise..geometry.wander_noise);
                    v[1] += rng.gen_range(-geometry.wander_noise..geometry.wander_noise);
                    // pulled back toward the wall it started at
                    v[1] += y - py;
                }
                agents.push(AgentScript {
                    name: format!("walker-{}", k + 1),
                    role: Role::Human,
                    entry_step: 0,
                    exit_step: None,
                    start: [x, y],
                    velocities,
                });
            }
            agents
        }
    };
    Scenario {
        id,
        seed,
        geometry,
        agents,
    }
}

impl Scenario {
    /// Integrates the scripts over the observed segment.
    pub fn observation(&self) -> Observation {
        let dt = self.geometry.step_seconds;
        let mut positions = vec![vec![[0.0, 0.0]; self.agents.len()]; OBS_LEN];
        let mut presence = vec![vec![false; self.agents.len()]; OBS_LEN];
        for (i, a) in self.agents.iter().enumerate() {
            let mut p = a.start;
            for s in a.entry_step..OBS_LEN {
                if !a.present(s) {
                    break;
                }
                positions[s][i] = p;
                presence[s][i] = true;
                let v = a.velocities[s];
                p = [p[0] + v[0] * dt, p[1] + v[1] * dt];
            }
        }
        Observation::new(positions, presence).expect("scripts cover the observed segment")
    }
}

/// Scenario manifest: the shared geometry and every scenario with its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub geometry: ScenarioGeometry,
    pub scenarios: Vec<ScenarioEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioEntry {
    pub id: ScenarioId,
    pub seed: u64,
}

impl ScenarioManifest {
    pub fn new(geometry: ScenarioGeometry, seed: u64) -> Self {
        Self {
            geometry,
            scenarios: ScenarioId::ALL
                .iter()
                .map(|&id| ScenarioEntry { id, seed })
                .collect(),
        }
    }

    pub fn build(&self) -> Vec<Scenario> {
        self.scenarios
            .iter()
            .map(|e| build_scenario_with(e.id, e.seed, self.geometry.clone()))
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain fields serialize")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GstError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GstError::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub scenario: ScenarioId,
    pub config_id: Option<u8>,
    pub agent_names: Vec<String>,
    pub observation: Observation,
    pub seeds: Vec<u64>,
    /// One per seed; `agents` index into `agent_names`.
    pub rollouts: Vec<PredictionRollout>,
}

impl SimResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `seed,step,agent,x,y,mask`; steps count from 0 over the whole
    /// observed plus predicted horizon.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,step,agent,x,y,mask\n");
        for (seed, r) in self.seeds.iter().zip(&self.rollouts) {
            for (t, (xy, m)) in self
                .observation
                .positions
                .iter()
                .zip(&self.observation.presence)
                .enumerate()
            {
                for &a in &r.agents {
                    let _ = writeln!(
                        s,
                        "{seed},{t},{},{},{},{}",
                        self.agent_names[a],
                        xy[a][0],
                        xy[a][1],
                        u8::from(m[a])
                    );
                }
            }
            let base = self.observation.len();
            for (k, (xy, m)) in r.positions.iter().zip(&r.masks).enumerate() {
                for (col, &a) in r.agents.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{seed},{},{},{},{},{}",
                        base + k,
                        self.agent_names[a],
                        xy[col][0],
                        xy[col][1],
                        u8::from(m[col])
                    );
                }
            }
        }
        s
    }
}

/// Agents a variant takes as input: everyone observed at some point, or only
/// those present at every observed step without partial input.
pub fn input_agents(obs: &Observation, partial_input: bool) -> Vec<usize> {
    (0..obs.num_agents())
        .filter(|&i| {
            let mut col = obs.presence.iter().map(|r| r[i]);
            if partial_input {
                col.any(|p| p)
            } else {
                col.all(|p| p)
            }
        })
        .collect()
}

/// Predicts the scenario once per seed with the checkpoint, which must
/// implement `requested`.
pub fn run_scenario(
    scenario: &Scenario,
    checkpoint: &ModelCheckpoint,
    requested: Variant,
    seeds: &[u64],
    base: &RolloutOptions,
) -> Result<SimResult> {
    let have = checkpoint.variant();
    if !requested.matches(&have) {
        return Err(GstError::ConfigMismatch(format!(
            "requested {:?} but checkpoint holds {:?}",
            requested, have
        )));
    }
    let model = checkpoint.clone().into_model();
    let obs = scenario.observation();
    let agents = input_agents(&obs, have.partial_input);
    if agents.is_empty() {
        return Err(GstError::EmptyInput("scenario agents"));
    }
    let sub = obs.select(&agents);
    let rollouts = seeds
        .par_iter()
        .map(|&seed| {
            let opts = RolloutOptions {
                seed,
                pred_len: PRED_LEN,
                ..*base
            };
            let mut r = rollout(&model, &sub, &opts)?;
            r.agents = agents.clone();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimResult {
        scenario: scenario.id,
        config_id: have.id(),
        agent_names: scenario.agents.iter().map(|a| a.name.clone()).collect(),
        observation: obs,
        seeds: seeds.to_vec(),
        rollouts,
    })
}

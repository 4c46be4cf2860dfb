mod common;

use common::*;
use gst_core::gradcheck::{check_block, Block};
use gst_core::{rollout, Model, ModelConfig, Observation, RolloutOptions, SamplingMode, OBS_LEN};
use proptest::prelude::*;
use rand::Rng;

fn det() -> RolloutOptions {
    RolloutOptions {
        mode: SamplingMode::Deterministic,
        ..RolloutOptions::default()
    }
}

/// Random walkers; `ghost` is absent for the whole window, with junk
/// coordinates.
fn observation(r: &mut impl Rng, n: usize, ghost: usize) -> Observation {
    let mut positions = vec![vec![[0.0; 2]; n]; OBS_LEN];
    let mut presence = vec![vec![true; n]; OBS_LEN];
    for i in 0..n {
        let mut p = [r.gen_range(-5.0..5.0), r.gen_range(-5.0..5.0)];
        let v = [r.gen_range(-0.6..0.6), r.gen_range(-0.6..0.6)];
        let enter = if r.gen_bool(0.3) {
            r.gen_range(0..OBS_LEN - 1)
        } else {
            0
        };
        for t in 0..OBS_LEN {
            p = [p[0] + v[0], p[1] + v[1]];
            positions[t][i] = p;
            presence[t][i] = t >= enter;
        }
    }
    for t in 0..OBS_LEN {
        presence[t][ghost] = false;
        positions[t][ghost] = [r.gen_range(-1e3..1e3), r.gen_range(-1e3..1e3)];
    }
    Observation::new(positions, presence).unwrap()
}

fn model(seed: u64, sparsity: bool) -> Model {
    jittered(small_config(sparsity, 2), seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn removing_an_absent_pedestrian_changes_nothing(seed in any::<u64>(), n in 2usize..6, sparsity in any::<bool>()) {
        let mut r = rng(seed);
        let ghost = r.gen_range(0..n);
        let obs = observation(&mut r, n, ghost);
        let m = model(seed, sparsity);
        let full = rollout(&m, &obs, &det()).unwrap();
        let keep: Vec<usize> = (0..n).filter(|&i| i != ghost).collect();
        let reduced = rollout(&m, &obs.select(&keep), &det()).unwrap();
        for (t, row) in reduced.positions.iter().enumerate() {
            for (k, &i) in keep.iter().enumerate() {
                prop_assert_eq!(row[k], full.positions[t][i]);
            }
            prop_assert!(!full.masks[t][ghost]);
        }
    }

    #[test]
    fn absent_inputs_are_ignored(seed in any::<u64>(), n in 2usize..6, sparsity in any::<bool>()) {
        let mut r = rng(seed);
        let ghost = r.gen_range(0..n);
        let obs = observation(&mut r, n, ghost);
        let mut noisy = obs.clone();
        for t in 0..OBS_LEN {
            for i in 0..n {
                if !noisy.presence[t][i] {
                    noisy.positions[t][i] = [r.gen_range(-1e4..1e4), r.gen_range(-1e4..1e4)];
                }
            }
        }
        let m = model(seed, sparsity);
        let a = rollout(&m, &obs, &det()).unwrap();
        let b = rollout(&m, &noisy, &det()).unwrap();
        prop_assert_eq!(a.positions, b.positions);
        prop_assert_eq!(a.hidden, b.hidden);
    }

    #[test]
    fn soft_rollouts_are_seed_deterministic(seed in any::<u64>(), n in 1usize..5) {
        let mut r = rng(seed);
        let obs = observation(&mut r, n + 1, n);
        let m = model(seed, true);
        let opts = RolloutOptions { seed, ..RolloutOptions::default() };
        prop_assert_eq!(rollout(&m, &obs, &opts).unwrap(), rollout(&m, &obs, &opts).unwrap());
    }
}

#[test]
fn dense_crowd_with_identical_displacements_stays_identical() {
    for seed in 0..10u64 {
        let m = Model::init(
            ModelConfig {
                sparsity: false,
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap();
        let n = 6;
        let positions: Vec<Vec<[f64; 2]>> = (0..OBS_LEN)
            .map(|t| {
                (0..n)
                    .map(|i| [8.0 - 0.48 * t as f64, 1.0 + 0.7 * i as f64])
                    .collect()
            })
            .collect();
        let obs = Observation::new(positions, vec![vec![true; n]; OBS_LEN]).unwrap();
        let out = rollout(&m, &obs, &det()).unwrap();
        for t in 0..out.positions.len() {
            let row = &out.positions[t];
            let d0 = [
                row[0][0] - obs.positions[OBS_LEN - 1][0][0],
                row[0][1] - obs.positions[OBS_LEN - 1][0][1],
            ];
            for i in 1..n {
                let di = [
                    row[i][0] - obs.positions[OBS_LEN - 1][i][0],
                    row[i][1] - obs.positions[OBS_LEN - 1][i][1],
                ];
                assert!(
                    (d0[0] - di[0]).abs() < 1e-9 && (d0[1] - di[1]).abs() < 1e-9,
                    "seed {seed} step {t}"
                );
            }
        }
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for seed in 0..6 {
        for n in 1..=3 {
            let r = check_block(Block::Rollout, n, 200 + seed).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}

#[test]
fn lstm_and_embedding_gradients_match_finite_differences() {
    for seed in 0..10 {
        for n in 1..=5 {
            for block in [
                Block::NodeEmbedding,
                Block::EdgeEmbedding,
                Block::Lstm,
                Block::Head,
            ] {
                let r = check_block(block, n, 300 + seed).unwrap();
                assert!(r.passed(), "{r:?}");
            }
        }
    }
}

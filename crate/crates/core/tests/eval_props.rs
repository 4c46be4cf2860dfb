use gst_core::dataset::{rotate_augment, synthetic_constant_velocity};
use gst_core::eval::{aoe_foe, rollout_aoe_foe, window_errors};
use gst_core::{PredictionRollout, TrajectoryWindow, OBS_LEN, PRED_LEN};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Ground truth plus Gaussian-ish jitter, as if predicted.
fn fake_rollout(w: &TrajectoryWindow, rng: &mut ChaCha8Rng, noise: f64) -> PredictionRollout {
    let agents: Vec<usize> = (0..w.num_pedestrians()).collect();
    PredictionRollout {
        positions: (0..PRED_LEN)
            .map(|k| {
                agents
                    .iter()
                    .map(|&i| {
                        let p = w.positions[OBS_LEN + k][i];
                        [
                            p[0] + rng.gen_range(-noise..noise),
                            p[1] + rng.gen_range(-noise..noise),
                        ]
                    })
                    .collect()
            })
            .collect(),
        masks: vec![vec![true; agents.len()]; PRED_LEN],
        agents,
        adjacency: Vec::new(),
        hidden: Vec::new(),
    }
}

fn rotate_rollout(r: &PredictionRollout, angle: f64, origin: [f64; 2]) -> PredictionRollout {
    let (s, c) = angle.sin_cos();
    let mut out = r.clone();
    for row in &mut out.positions {
        for p in row.iter_mut() {
            let (dx, dy) = (p[0] - origin[0], p[1] - origin[1]);
            *p = [origin[0] + c * dx - s * dy, origin[1] + s * dx + c * dy];
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn aoe_lies_between_extreme_step_errors(errors in prop::collection::vec(prop::collection::vec(0.0..10.0f64, PRED_LEN), 1..6)) {
        let (aoe, foe) = rollout_aoe_foe(&errors).unwrap();
        let lo = errors.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = errors.iter().flatten().cloned().fold(0.0, f64::max);
        prop_assert!(lo - 1e-12 <= aoe && aoe <= hi + 1e-12);
        prop_assert!(lo - 1e-12 <= foe && foe <= hi + 1e-12);
    }

    #[test]
    fn metrics_invariant_under_joint_rotation(seed in any::<u64>(), angle in -3.2..3.2f64) {
        let windows = synthetic_constant_velocity(3, 4, (0.8, 1.6), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let preds: Vec<Vec<PredictionRollout>> = (0..4)
            .map(|_| windows.iter().map(|w| fake_rollout(w, &mut rng, 0.5)).collect())
            .collect();
        let origin = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let rotated: Vec<TrajectoryWindow> = windows.iter().map(|w| rotate_augment(w, angle, origin)).collect();
        let a: Vec<Vec<(PredictionRollout, &TrajectoryWindow)>> =
            preds.iter().map(|r| r.iter().cloned().zip(windows.iter()).collect()).collect();
        let b: Vec<Vec<(PredictionRollout, &TrajectoryWindow)>> = preds
            .iter()
            .map(|r| r.iter().map(|p| rotate_rollout(p, angle, origin)).zip(rotated.iter()).collect())
            .collect();
        let ra = aoe_foe("s", None, &a).unwrap();
        let rb = aoe_foe("s", None, &b).unwrap();
        prop_assert!((ra.aoe_mean - rb.aoe_mean).abs() < 1e-12);
        prop_assert!((ra.foe_mean - rb.foe_mean).abs() < 1e-12);
        prop_assert!((ra.aoe_std - rb.aoe_std).abs() < 1e-12);
        prop_assert!((ra.foe_std - rb.foe_std).abs() < 1e-12);
    }
}

#[test]
fn aggregation_matches_scalar_loops() {
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let windows =
            synthetic_constant_velocity(rng.gen_range(1..4), rng.gen_range(1..5), (0.5, 2.0), seed);
        let rollouts = rng.gen_range(1..6);
        let preds: Vec<Vec<PredictionRollout>> = (0..rollouts)
            .map(|_| {
                windows
                    .iter()
                    .map(|w| fake_rollout(w, &mut rng, 1.0))
                    .collect()
            })
            .collect();
        let per: Vec<Vec<(PredictionRollout, &TrajectoryWindow)>> = preds
            .iter()
            .map(|r| r.iter().cloned().zip(windows.iter()).collect())
            .collect();
        let report = aoe_foe("s", Some(8), &per).unwrap();

        let mut aoes = Vec::new();
        let mut foes = Vec::new();
        for r in &preds {
            let (mut sum, mut terms, mut last, mut peds) = (0.0, 0usize, 0.0, 0usize);
            for (p, w) in r.iter().zip(&windows) {
                for i in 0..w.num_pedestrians() {
                    for k in 0..PRED_LEN {
                        let (a, b) = (p.positions[k][i], w.positions[OBS_LEN + k][i]);
                        let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                        sum += e;
                        terms += 1;
                        if k == PRED_LEN - 1 {
                            last += e;
                            peds += 1;
                        }
                    }
                }
            }
            aoes.push(sum / terms as f64);
            foes.push(last / peds as f64);
        }
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (
                m,
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt(),
            )
        };
        let (am, asd) = stats(&aoes);
        let (fm, fsd) = stats(&foes);
        assert!((report.aoe_mean - am).abs() < 1e-12, "seed {seed}");
        assert!((report.aoe_std - asd).abs() < 1e-12, "seed {seed}");
        assert!((report.foe_mean - fm).abs() < 1e-12, "seed {seed}");
        assert!((report.foe_std - fsd).abs() < 1e-12, "seed {seed}");
        assert_eq!(report.rollouts, rollouts);
    }
}

#[test]
fn errors_cover_only_fully_observed() {
    let mut w = synthetic_constant_velocity(1, 3, (1.0, 1.0), 0).remove(0);
    for t in 15..20 {
        w.presence[t][1] = false;
        w.positions[t][1] = [0.0, 0.0];
    }
    w.fully_observed[1] = false;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = fake_rollout(&w, &mut rng, 0.1);
    assert_eq!(window_errors(&p, &w).unwrap().len(), 2);
}

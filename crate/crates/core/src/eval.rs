//! Average and final offset errors over repeated stochastic rollouts.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Variant, OBS_LEN};
use crate::dataset::TrajectoryWindow;
use crate::error::{GstError, Result};
use crate::model::Model;
use crate::rollout::{PredictionRollout, RolloutOptions};
use crate::train::predict_window;

pub const DEFAULT_ROLLOUTS: usize = 20;

/// One pedestrian's positions over the prediction horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub positions: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
}

/// Euclidean distance at step `t`; both tracks must be valid there.
pub fn offset_error(pred: &Track, truth: &Track, t: usize) -> Result<f64> {
    let ok = |tr: &Track| tr.valid.get(t).copied().unwrap_or(false) && t < tr.positions.len();
    if !ok(pred) || !ok(truth) {
        return Err(GstError::InvalidArgument(format!(
            "step {t} is not valid in both tracks"
        )));
    }
    let (p, q) = (pred.positions[t], truth.positions[t]);
    Ok((p[0] - q[0]).hypot(p[1] - q[1]))
}

/// Per-step offset errors of every fully observed pedestrian in one
/// rollout of one window.
pub fn window_errors(pred: &PredictionRollout, truth: &TrajectoryWindow) -> Result<Vec<Vec<f64>>> {
    let horizon = pred.positions.len();
    let mut out = Vec::new();
    for (col, &slot) in pred.agents.iter().enumerate() {
        if slot >= truth.num_pedestrians() || !truth.fully_observed[slot] {
            continue;
        }
        let p = Track {
            positions: pred.positions.iter().map(|s| s[col]).collect(),
            valid: pred.masks.iter().map(|m| m[col]).collect(),
        };
        let t = Track {
            positions: (0..horizon)
                .map(|k| truth.positions[OBS_LEN + k][slot])
                .collect(),
            valid: (0..horizon)
                .map(|k| truth.presence[OBS_LEN + k][slot])
                .collect(),
        };
        out.push(
            (0..horizon)
                .map(|k| offset_error(&p, &t, k))
                .collect::<Result<_>>()?,
        );
    }
    Ok(out)
}

/// `(AOE, FOE)` of one rollout: AOE pools every (pedestrian, step) pair,
/// FOE averages the last-step errors. `None` without pedestrians.
pub fn rollout_aoe_foe(errors: &[Vec<f64>]) -> Option<(f64, f64)> {
    if errors.is_empty() {
        return None;
    }
    let pooled: f64 = errors.iter().flatten().sum();
    let terms: usize = errors.iter().map(Vec::len).sum();
    let last: f64 = errors
        .iter()
        .map(|e| *e.last().expect("non-empty horizon"))
        .sum();
    Some((pooled / terms as f64, last / errors.len() as f64))
}

/// Mean and population standard deviation. Identical inputs give a
/// standard deviation of exactly 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let shift = values[0];
    let d: f64 = values.iter().map(|v| v - shift).sum::<f64>() / n;
    let d2: f64 = values.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / n;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (d2 - d * d).max(0.0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportStatus {
    Ok,
    /// No fully observed pedestrian in the evaluated windows.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene: String,
    pub config_id: Option<u8>,
    pub status: ReportStatus,
    pub rollouts: usize,
    pub windows: usize,
    /// Fully observed pedestrians scored per rollout.
    pub pedestrians: usize,
    pub aoe_mean: f64,
    pub aoe_std: f64,
    pub foe_mean: f64,
    pub foe_std: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "scene,config_id,status,rollouts,windows,pedestrians,aoe_mean,aoe_std,foe_mean,foe_std";

    pub fn csv_row(&self) -> String {
        let id = self.config_id.map(|i| i.to_string()).unwrap_or_default();
        let status = match self.status {
            ReportStatus::Ok => "ok",
            ReportStatus::Empty => "empty",
        };
        format!(
            "{},{id},{status},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.scene,
            self.rollouts,
            self.windows,
            self.pedestrians,
            self.aoe_mean,
            self.aoe_std,
            self.foe_mean,
            self.foe_std
        )
    }
}

pub fn reports_to_csv(reports: &[MetricReport]) -> String {
    let mut s = format!("{}\n", MetricReport::CSV_HEADER);
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Aggregates `per_rollout[r]`, the `(prediction, truth)` pairs of rollout
/// `r`, into a report.
pub fn aoe_foe(
    scene: &str,
    config_id: Option<u8>,
    per_rollout: &[Vec<(PredictionRollout, &TrajectoryWindow)>],
) -> Result<MetricReport> {
    if per_rollout.is_empty() {
        return Err(GstError::EmptyInput("aoe_foe"));
    }
    let mut aoe = Vec::with_capacity(per_rollout.len());
    let mut foe = Vec::with_capacity(per_rollout.len());
    let mut pedestrians = 0;
    for samples in per_rollout {
        let mut errors = Vec::new();
        for (pred, truth) in samples {
            errors.extend(window_errors(pred, truth)?);
        }
        pedestrians = errors.len();
        if let Some((a, f)) = rollout_aoe_foe(&errors) {
            aoe.push(a);
            foe.push(f);
        }
    }
    let windows = per_rollout[0].len();
    if aoe.len() != per_rollout.len() {
        return Ok(MetricReport {
            scene: scene.to_string(),
            config_id,
            status: ReportStatus::Empty,
            rollouts: per_rollout.len(),
            windows,
            pedestrians: 0,
            aoe_mean: f64::NAN,
            aoe_std: f64::NAN,
            foe_mean: f64::NAN,
            foe_std: f64::NAN,
        });
    }
    let (aoe_mean, aoe_std) = mean_std(&aoe);
    let (foe_mean, foe_std) = mean_std(&foe);
    Ok(MetricReport {
        scene: scene.to_string(),
        config_id,
        status: ReportStatus::Ok,
        rollouts: per_rollout.len(),
        windows,
        pedestrians,
        aoe_mean,
        aoe_std,
        foe_mean,
        foe_std,
    })
}

/// SplitMix64 finalizer over two words; used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `rollouts` stochastic passes over `windows` and scores them. Rollout
/// `r` on window `w` uses seed `mix_seed(mix_seed(seed, r), w)`.
pub fn evaluate(
    model: &Model,
    variant: Variant,
    scene: &str,
    windows: &[TrajectoryWindow],
    rollouts: usize,
    base: &RolloutOptions,
) -> Result<MetricReport> {
    if rollouts == 0 {
        return Err(GstError::InvalidArgument(
            "at least one rollout is required".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..rollouts)
        .flat_map(|r| (0..windows.len()).map(move |w| (r, w)))
        .collect();
    let preds: Vec<Option<PredictionRollout>> = jobs
        .par_iter()
        .map(|&(r, w)| {
            let opts = RolloutOptions {
                seed: mix_seed(mix_seed(base.seed, r as u64), w as u64),
                ..*base
            };
            predict_window(model, &windows[w], variant.partial_input, &opts)
        })
        .collect::<Result<_>>()?;
    let mut per_rollout: Vec<Vec<(PredictionRollout, &TrajectoryWindow)>> =
        vec![Vec::new(); rollouts];
    for ((r, w), p) in jobs.into_iter().zip(preds) {
        if let Some(p) = p {
            per_rollout[r].push((p, &windows[w]));
        }
    }
    let mut report = aoe_foe(scene, variant.id(), &per_rollout)?;
    report.windows = windows.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{PRED_LEN, WINDOW_LEN};

    fn track(points: Vec<[f64; 2]>) -> Track {
        let valid = vec![true; points.len()];
        Track {
            positions: points,
            valid,
        }
    }

    #[test]
    fn offset_error_cases() {
        let a = track(vec![[0.0, 0.0]]);
        let b = track(vec![[3.0, 4.0]]);
        assert_eq!(offset_error(&a, &a, 0).unwrap(), 0.0);
        assert_eq!(offset_error(&a, &b, 0).unwrap(), 5.0);
        assert!(offset_error(&a, &b, 1).is_err());
        let mut c = a.clone();
        c.valid[0] = false;
        assert!(offset_error(&c, &b, 0).is_err());
    }

    fn straight_window(n: usize) -> TrajectoryWindow {
        let positions = (0..WINDOW_LEN)
            .map(|t| (0..n).map(|i| [t as f64, i as f64]).collect())
            .collect();
        TrajectoryWindow::from_steps(
            "s",
            0,
            (0..n as i64).collect(),
            positions,
            vec![vec![true; n]; WINDOW_LEN],
        )
        .unwrap()
    }

    fn shifted(w: &TrajectoryWindow, offsets: &[f64]) -> PredictionRollout {
        PredictionRollout {
            agents: (0..offsets.len()).collect(),
            positions: (0..PRED_LEN)
                .map(|k| {
                    offsets
                        .iter()
                        .enumerate()
                        .map(|(i, d)| {
                            let p = w.positions[OBS_LEN + k][i];
                            [p[0] + d, p[1]]
                        })
                        .collect()
                })
                .collect(),
            masks: vec![vec![true; offsets.len()]; PRED_LEN],
            adjacency: vec![],
            hidden: vec![],
        }
    }

    #[test]
    fn constant_offsets() {
        let w = straight_window(2);
        let e = window_errors(&shifted(&w, &[0.5, 0.5]), &w).unwrap();
        let (a, f) = rollout_aoe_foe(&e).unwrap();
        assert!((a - 0.5).abs() < 1e-15 && (f - 0.5).abs() < 1e-15);
        let e = window_errors(&shifted(&w, &[1.0, 2.0]), &w).unwrap();
        assert_eq!(rollout_aoe_foe(&e).unwrap(), (1.5, 1.5));
    }

    #[test]
    fn identical_rollouts_have_zero_std() {
        let w = straight_window(3);
        let p = shifted(&w, &[0.1, 0.7, 0.3]);
        let per: Vec<_> = (0..20).map(|_| vec![(p.clone(), &w)]).collect();
        let r = aoe_foe("s", Some(8), &per).unwrap();
        assert_eq!(r.status, ReportStatus::Ok);
        assert_eq!(r.aoe_std, 0.0);
        assert_eq!(r.foe_std, 0.0);
        assert_eq!(r.pedestrians, 3);
    }

    #[test]
    fn partial_pedestrians_are_not_scored() {
        let mut w = straight_window(2);
        for row in w.presence.iter_mut().take(3) {
            row[1] = false;
        }
        let w = TrajectoryWindow::from_steps(
            "s",
            0,
            w.pedestrian_ids.clone(),
            w.positions.clone(),
            w.presence.clone(),
        )
        .unwrap();
        assert_eq!(w.fully_observed, vec![true, false]);
        let e = window_errors(&shifted(&w, &[1.0, 9.0]), &w).unwrap();
        assert_eq!(e.len(), 1);

        let mut only_partial = w.clone();
        only_partial.fully_observed = vec![false, false];
        let per = vec![vec![(shifted(&w, &[1.0, 9.0]), &only_partial)]];
        let r = aoe_foe("s", None, &per).unwrap();
        assert_eq!(r.status, ReportStatus::Empty);
        assert!(reports_to_csv(&[r])
            .lines()
            .nth(1)
            .unwrap()
            .contains(",empty,"));
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seeds_are_distinct() {
        let seeds: std::collections::BTreeSet<u64> = (0..20)
            .flat_map(|r| (0..50).map(move |w| mix_seed(mix_seed(7, r), w)))
            .collect();
        assert_eq!(seeds.len(), 1000);
    }
}

use std::fs;
use std::path::Path;

use gst_core::dataset::{
    partial_fraction, split_chronological, synthetic_constant_velocity, WindowCache,
};
use gst_core::eval::{mix_seed, reports_to_csv};
use gst_core::sim::{ScenarioGeometry, ScenarioManifest};
use gst_core::train::{predict_window, write_log, CheckpointSink};
use gst_core::{
    evaluate as score, run_scenario, train as fit, DataManifest, DatasetSplit, ModelCheckpoint,
    PredictionRollout, RolloutOptions, ScenarioId, TrajectoryWindow, Variant, PRED_LEN,
};
use serde::Serialize;

use crate::failure::Failure;
use crate::settings::{set_train_variant, train_variant, Settings, VariantFlags};

/// Pseudo-scene of constant-velocity walkers, usable without a data root.
pub const SYNTHETIC: &str = "synthetic";
pub const ALL: &str = "all";

/// Checkpoint read when none is given: the final one in `out_dir`.
const DEFAULT_CHECKPOINT: &str = "final.json";

fn synthetic_windows() -> Vec<TrajectoryWindow> {
    synthetic_constant_velocity(200, 5, (1.0, 1.4), 1)
}

fn manifest(s: &Settings) -> Result<DataManifest, Failure> {
    let path = match &s.data_manifest {
        Some(p) => p.clone(),
        None => DataManifest::default_path().ok_or_else(|| {
            Failure::usage("no data manifest: pass --manifest or set GST_DATA_ROOT")
        })?,
    };
    if !path.exists() {
        return Err(Failure::missing("data manifest", &path));
    }
    Ok(DataManifest::load(&path)?)
}

/// Scene names the run covers; a window cache counts as one scene.
fn scenes(s: &Settings) -> Result<Vec<String>, Failure> {
    if s.windows.is_some() || s.scene != ALL {
        return Ok(vec![s.scene.clone()]);
    }
    Ok(manifest(s)?.scenes.keys().cloned().collect())
}

fn split_for(s: &Settings, scene: &str) -> Result<DatasetSplit, Failure> {
    if let Some(path) = &s.windows {
        if !path.exists() {
            return Err(Failure::missing("window cache", path));
        }
        return Ok(WindowCache::load(path)?.split);
    }
    let windows = if scene == SYNTHETIC {
        synthetic_windows()
    } else {
        manifest(s)?.windows(scene, s.stride)?
    };
    Ok(split_chronological(windows))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| Failure::from(gst_core::GstError::from(e)))
}

fn rollout_options(s: &Settings) -> RolloutOptions {
    RolloutOptions {
        tau: s.tau,
        mode: s.mode,
        seed: s.seed,
        pred_len: PRED_LEN,
    }
}

/// Loads the checkpoint and settles the variant to run it as. Explicit
/// flags are applied over `settings.variant`, or over the checkpoint's own
/// variant when none was stored. Nothing is written before this succeeds.
fn checkpoint(s: &mut Settings, flags: &VariantFlags) -> Result<ModelCheckpoint, Failure> {
    let path = s
        .checkpoint
        .clone()
        .unwrap_or_else(|| s.out_dir.join(DEFAULT_CHECKPOINT));
    if !path.is_file() {
        return Err(Failure::missing("checkpoint", &path));
    }
    let ck = ModelCheckpoint::load(&path)?;
    let have = ck.variant();
    let requested = flags.apply(s.variant.unwrap_or(have))?;
    if !requested.matches(&have) {
        return Err(Failure {
            code: crate::failure::MISMATCH,
            message: format!(
                "{}: checkpoint is {} but {} was requested",
                path.display(),
                describe(have),
                describe(requested)
            ),
        });
    }
    s.checkpoint = Some(path);
    s.variant = Some(requested);
    Ok(ck)
}

fn describe(v: Variant) -> String {
    let id = v.id().map(|i| format!("ID {i} ")).unwrap_or_default();
    format!(
        "{id}(partial {}, sparsity {}, neighbors {})",
        v.partial_input, v.sparsity, v.neighbors
    )
}

pub fn prepare(s: Settings) -> Result<(), Failure> {
    let names = scenes(&s)?;
    let splits = names
        .iter()
        .map(|n| split_for(&s, n))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&s.out_dir)?;
    for (name, split) in names.iter().zip(splits) {
        let path = s.out_dir.join(format!("{name}.windows.json"));
        println!(
            "{name}: {} train, {} test -> {}",
            split.train.len(),
            split.test.len(),
            path.display()
        );
        WindowCache::new(s.stride, split).save(&path)?;
    }
    s.save_into(&s.out_dir)
}

pub fn train(mut s: Settings, flags: VariantFlags) -> Result<(), Failure> {
    let variant = flags.apply(train_variant(&s.train))?;
    set_train_variant(&mut s.train, variant);
    s.train.validate()?;
    let names = scenes(&s)?;
    let splits = names
        .iter()
        .map(|n| split_for(&s, n))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&s.out_dir)?;
    s.save_into(&s.out_dir)?;
    let nested = names.len() > 1;
    for (name, split) in names.iter().zip(splits) {
        let dir = if nested {
            s.out_dir.join(name)
        } else {
            s.out_dir.clone()
        };
        let sink = CheckpointSink {
            dir: Some(dir.clone()),
        };
        let outcome = fit(&split, &s.train, &sink, |e| {
            println!(
                "{name} epoch {} loss {:e} tau {:.4} ({:.1}s)",
                e.epoch, e.loss, e.tau, e.seconds
            );
        })?;
        create_dir(&dir)?;
        write_log(&outcome.log, &dir.join("train_log.csv"))?;
    }
    Ok(())
}

pub fn evaluate(mut s: Settings, flags: VariantFlags) -> Result<(), Failure> {
    let ck = checkpoint(&mut s, &flags)?;
    let variant = ck.variant();
    let model = ck.into_model();
    let opts = rollout_options(&s);
    let mut reports = Vec::new();
    for name in scenes(&s)? {
        let split = split_for(&s, &name)?;
        let mut r = score(&model, variant, &name, &split.test, s.rollouts, &opts)?;
        r.config_id = s.variant.and_then(|v| v.id());
        reports.push(r);
    }
    let csv = reports_to_csv(&reports);
    let json = to_json(&reports)?;
    create_dir(&s.out_dir)?;
    write(&s.out_dir.join("metrics.csv"), &csv)?;
    write(&s.out_dir.join("metrics.json"), &json)?;
    s.save_into(&s.out_dir)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct WindowPrediction<'a> {
    scene: &'a str,
    start_frame: i64,
    window: usize,
    /// Dataset ID of every rollout column.
    pedestrian_ids: Vec<i64>,
    rollout: &'a PredictionRollout,
}

pub fn predict(mut s: Settings, flags: VariantFlags) -> Result<(), Failure> {
    let ck = checkpoint(&mut s, &flags)?;
    let variant = ck.variant();
    let model = ck.into_model();
    let names = scenes(&s)?;
    let [name] = names.as_slice() else {
        return Err(Failure::usage("predict needs a single --scene"));
    };
    let split = split_for(&s, name)?;
    let w = split.test.get(s.window).ok_or_else(|| {
        Failure::usage(format!(
            "window {} out of range: {} test windows",
            s.window,
            split.test.len()
        ))
    })?;
    let r = predict_window(&model, w, variant.partial_input, &rollout_options(&s))?
        .ok_or_else(|| Failure::usage(format!("window {} has no input pedestrians", s.window)))?;
    let out = WindowPrediction {
        scene: &w.scene,
        start_frame: w.start_frame,
        window: s.window,
        pedestrian_ids: r.agents.iter().map(|&a| w.pedestrian_ids[a]).collect(),
        rollout: &r,
    };
    let json = to_json(&out)?;
    create_dir(&s.out_dir)?;
    let path = s.out_dir.join("prediction.json");
    write(&path, &json)?;
    s.save_into(&s.out_dir)?;
    println!("{}", path.display());
    Ok(())
}

fn scenario_ids(names: &[String]) -> Result<Vec<ScenarioId>, Failure> {
    if names.iter().any(|n| n == ALL) {
        return Ok(ScenarioId::ALL.to_vec());
    }
    let mut ids = Vec::new();
    for n in names {
        let id: ScenarioId = n
            .parse()
            .map_err(|_| Failure::usage(format!("unknown scenario `{n}`")))?;
        if !ids.contains(&id) {
            ids.push(id);
        }
    }
    Ok(ids)
}

pub fn simulate(mut s: Settings, flags: VariantFlags) -> Result<(), Failure> {
    let ids = scenario_ids(&s.scenarios)?;
    if s.rollouts == 0 {
        return Err(Failure::usage("--rollouts must be at least 1"));
    }
    let ck = checkpoint(&mut s, &flags)?;
    let requested = s.variant.unwrap_or(ck.variant());
    let mut manifest = ScenarioManifest::new(ScenarioGeometry::default(), s.seed);
    manifest.scenarios.retain(|e| ids.contains(&e.id));
    let seeds: Vec<u64> = (0..s.rollouts as u64)
        .map(|r| mix_seed(s.seed, r))
        .collect();
    let opts = rollout_options(&s);
    let results = manifest
        .build()
        .iter()
        .map(|sc| run_scenario(sc, &ck, requested, &seeds, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    create_dir(&s.out_dir)?;
    for r in &results {
        let name = r.scenario.name();
        write(&s.out_dir.join(format!("{name}.json")), &r.to_json()?)?;
        write(&s.out_dir.join(format!("{name}.csv")), &r.to_csv())?;
        println!(
            "{name}: {} agents, {} rollouts",
            r.agent_names.len(),
            r.rollouts.len()
        );
    }
    write(&s.out_dir.join("scenarios.toml"), &manifest.to_toml())?;
    s.save_into(&s.out_dir)
}

#[derive(Serialize)]
struct SceneStats {
    scene: String,
    windows: usize,
    /// Pedestrian instances summed over windows.
    pedestrians: usize,
    partial: usize,
    partial_fraction: f64,
}

impl SceneStats {
    fn of(scene: String, windows: &[TrajectoryWindow]) -> Result<Self, Failure> {
        Ok(Self {
            scene,
            windows: windows.len(),
            pedestrians: windows.iter().map(TrajectoryWindow::num_pedestrians).sum(),
            partial: windows
                .iter()
                .map(|w| w.fully_observed.iter().filter(|f| !**f).count())
                .sum(),
            partial_fraction: partial_fraction(windows)?,
        })
    }
}

#[derive(Serialize)]
struct Stats {
    stride: usize,
    scenes: Vec<SceneStats>,
    overall: SceneStats,
}

pub fn stats(s: Settings) -> Result<(), Failure> {
    let mut all = Vec::new();
    let mut per_scene = Vec::new();
    for name in scenes(&s)? {
        let split = split_for(&s, &name)?;
        let windows: Vec<TrajectoryWindow> = split.train.into_iter().chain(split.test).collect();
        per_scene.push(SceneStats::of(name, &windows)?);
        all.extend(windows);
    }
    let stats = Stats {
        stride: s.stride,
        overall: SceneStats::of(ALL.into(), &all)?,
        scenes: per_scene,
    };
    let json = to_json(&stats)?;
    create_dir(&s.out_dir)?;
    write(&s.out_dir.join("stats.json"), &json)?;
    s.save_into(&s.out_dir)?;
    println!("scene,windows,pedestrians,partial,partial_fraction");
    for r in stats.scenes.iter().chain(std::iter::once(&stats.overall)) {
        println!(
            "{},{},{},{},{:.4}",
            r.scene, r.windows, r.pedestrians, r.partial, r.partial_fraction
        );
    }
    Ok(())
}

//! Benchmark trajectory files, 20-step windows, splits, augmentation and the
//! window cache.
//!
//! Scene files are whitespace separated `frame pedestrian x y` rows in
//! meters. Frame ids may be written as floats but must be integral.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{OBS_LEN, WINDOW_LEN};
use crate::error::{GstError, Result};
use crate::rollout::Observation;

pub const CACHE_VERSION: u32 = 1;
/// Fraction of windows (earliest first) that go to training.
pub const TRAIN_FRACTION: f64 = 0.8;
/// Environment variable naming the default data directory.
pub const DATA_ROOT_ENV: &str = "GST_DATA_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub frame: i64,
    pub pedestrian: i64,
    pub x: f64,
    pub y: f64,
}

/// One scene file, sorted by `(frame, pedestrian)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneRecording {
    pub name: String,
    pub records: Vec<Record>,
}

impl SceneRecording {
    /// Sorts and rejects duplicate `(frame, pedestrian)` pairs.
    pub fn new(name: impl Into<String>, mut records: Vec<Record>) -> Result<Self> {
        let name = name.into();
        records.sort_by_key(|r| (r.frame, r.pedestrian));
        if let Some(w) = records
            .windows(2)
            .find(|w| (w[0].frame, w[0].pedestrian) == (w[1].frame, w[1].pedestrian))
        {
            return Err(GstError::DuplicateRecord {
                path: name,
                line: 0,
                frame: w[1].frame,
                ped: w[1].pedestrian,
            });
        }
        Ok(Self { name, records })
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frames(&self) -> Vec<i64> {
        let mut f: Vec<i64> = self.records.iter().map(|r| r.frame).collect();
        f.dedup();
        f
    }

    pub fn pedestrians(&self) -> BTreeSet<i64> {
        self.records.iter().map(|r| r.pedestrian).collect()
    }

    /// Frame-id spacing of one time step: the gcd of the gaps between
    /// consecutive distinct frames. `None` with fewer than two frames.
    pub fn frame_stride(&self) -> Option<i64> {
        let f = self.frames();
        f.windows(2).map(|w| w[1] - w[0]).reduce(gcd)
    }

    /// Positions of one pedestrian in frame order.
    pub fn trajectory(&self, pedestrian: i64) -> Vec<(i64, [f64; 2])> {
        self.records
            .iter()
            .filter(|r| r.pedestrian == pedestrian)
            .map(|r| (r.frame, [r.x, r.y]))
            .collect()
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn parse_integral(tok: &str) -> Option<i64> {
    if let Ok(v) = tok.parse::<i64>() {
        return Some(v);
    }
    let v: f64 = tok.parse().ok()?;
    (v.is_finite() && v.fract() == 0.0 && v.abs() < 9.0e15).then_some(v as i64)
}

/// Parses scene text; `origin` labels error messages.
pub fn parse_scene(text: &str, origin: &str, name: &str) -> Result<SceneRecording> {
    let mut records = Vec::new();
    let mut seen: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let err = |msg: String| GstError::Parse {
            path: origin.to_string(),
            line: lineno,
            msg,
        };
        if toks.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", toks.len())));
        }
        let frame =
            parse_integral(toks[0]).ok_or_else(|| err(format!("bad frame id `{}`", toks[0])))?;
        let pedestrian = parse_integral(toks[1])
            .ok_or_else(|| err(format!("bad pedestrian id `{}`", toks[1])))?;
        let coord = |t: &str| t.parse::<f64>().ok().filter(|v| v.is_finite());
        let x = coord(toks[2]).ok_or_else(|| err(format!("bad x `{}`", toks[2])))?;
        let y = coord(toks[3]).ok_or_else(|| err(format!("bad y `{}`", toks[3])))?;
        if seen.insert((frame, pedestrian), lineno).is_some() {
            return Err(GstError::DuplicateRecord {
                path: origin.to_string(),
                line: lineno,
                frame,
                ped: pedestrian,
            });
        }
        records.push(Record {
            frame,
            pedestrian,
            x,
            y,
        });
    }
    SceneRecording::new(name, records)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<SceneRecording> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| GstError::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_scene(&text, &path.display().to_string(), &name)
}

/// Tab-separated, 4 decimals for coordinates.
pub fn format_scene(rec: &SceneRecording) -> String {
    let mut out = String::new();
    for r in &rec.records {
        let _ = writeln!(out, "{}\t{}\t{:.4}\t{:.4}", r.frame, r.pedestrian, r.x, r.y);
    }
    out
}

pub fn write_scene(rec: &SceneRecording, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_scene(rec)).map_err(|e| GstError::io(path, e))
}

/// A 20-step slice of a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub scene: String,
    pub start_frame: i64,
    pub pedestrian_ids: Vec<i64>,
    /// `20 x N`, meters; `[0, 0]` where absent.
    pub positions: Vec<Vec<[f64; 2]>>,
    pub presence: Vec<Vec<bool>>,
    pub fully_observed: Vec<bool>,
}

impl TrajectoryWindow {
    /// Builds a window from per-step slots, dropping pedestrians whose
    /// presence has a gap or covers fewer than two steps.
    pub fn from_steps(
        scene: impl Into<String>,
        start_frame: i64,
        pedestrian_ids: Vec<i64>,
        positions: Vec<Vec<[f64; 2]>>,
        presence: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n = pedestrian_ids.len();
        if positions.len() != WINDOW_LEN
            || presence.len() != WINDOW_LEN
            || positions.iter().any(|r| r.len() != n)
            || presence.iter().any(|r| r.len() != n)
        {
            return Err(GstError::InvalidArgument(format!(
                "window must be {WINDOW_LEN} steps of {n} slots"
            )));
        }
        let keep: Vec<usize> = (0..n)
            .filter(|&i| {
                let col: Vec<bool> = presence.iter().map(|r| r[i]).collect();
                contiguous(&col) && col.iter().filter(|&&p| p).count() >= 2
            })
            .collect();
        let positions = positions
            .iter()
            .zip(&presence)
            .map(|(xy, pr)| {
                keep.iter()
                    .map(|&i| if pr[i] { xy[i] } else { [0.0, 0.0] })
                    .collect()
            })
            .collect();
        let presence: Vec<Vec<bool>> = presence
            .iter()
            .map(|r| keep.iter().map(|&i| r[i]).collect())
            .collect();
        let fully_observed = (0..keep.len())
            .map(|i| presence.iter().all(|r| r[i]))
            .collect();
        Ok(Self {
            scene: scene.into(),
            start_frame,
            pedestrian_ids: keep.iter().map(|&i| pedestrian_ids[i]).collect(),
            positions,
            presence,
            fully_observed,
        })
    }

    pub fn num_pedestrians(&self) -> usize {
        self.pedestrian_ids.len()
    }

    pub fn is_partial(&self, i: usize) -> bool {
        !self.fully_observed[i]
    }

    /// Slots fed to the model: pedestrians present at some observed step,
    /// restricted to fully observed ones unless `partial_input`.
    pub fn input_agents(&self, partial_input: bool) -> Vec<usize> {
        (0..self.num_pedestrians())
            .filter(|&i| self.presence[..OBS_LEN].iter().any(|r| r[i]))
            .filter(|&i| partial_input || self.fully_observed[i])
            .collect()
    }

    /// First `T_obs` steps of the listed slots.
    pub fn observation(&self, agents: &[usize]) -> Result<Observation> {
        Observation::new(
            self.positions[..OBS_LEN]
                .iter()
                .map(|r| agents.iter().map(|&i| r[i]).collect())
                .collect(),
            self.presence[..OBS_LEN]
                .iter()
                .map(|r| agents.iter().map(|&i| r[i]).collect())
                .collect(),
        )
    }

    /// Centroid of all present observed positions.
    pub fn observed_centroid(&self) -> [f64; 2] {
        let mut acc = [0.0, 0.0];
        let mut count = 0usize;
        for (xy, pr) in self.positions[..OBS_LEN]
            .iter()
            .zip(&self.presence[..OBS_LEN])
        {
            for (p, &ok) in xy.iter().zip(pr) {
                if ok {
                    acc[0] += p[0];
                    acc[1] += p[1];
                    count += 1;
                }
            }
        }
        if count == 0 {
            return acc;
        }
        [acc[0] / count as f64, acc[1] / count as f64]
    }
}

fn contiguous(col: &[bool]) -> bool {
    let first = col.iter().position(|&p| p);
    let last = col.iter().rposition(|&p| p);
    match (first, last) {
        (Some(a), Some(b)) => col[a..=b].iter().all(|&p| p),
        _ => false,
    }
}

/// Sliding windows over the distinct frames, `stride` steps apart. Windows
/// whose frames are not evenly spaced, or where nobody is present during the
/// observation, are skipped.
pub fn make_windows(rec: &SceneRecording, stride: usize) -> Result<Vec<TrajectoryWindow>> {
    if stride == 0 {
        return Err(GstError::InvalidArgument(
            "window stride must be at least 1".into(),
        ));
    }
    let frames = rec.frames();
    let Some(step) = rec.frame_stride() else {
        return Ok(Vec::new());
    };
    let mut by_frame: BTreeMap<i64, Vec<&Record>> = BTreeMap::new();
    for r in &rec.records {
        by_frame.entry(r.frame).or_default().push(r);
    }
    let mut out = Vec::new();
    let mut k = 0;
    while k + WINDOW_LEN <= frames.len() {
        let span = &frames[k..k + WINDOW_LEN];
        let start = span[0];
        k += stride;
        if span
            .iter()
            .enumerate()
            .any(|(s, &f)| f != start + s as i64 * step)
        {
            continue;
        }
        let ids: Vec<i64> = span
            .iter()
            .flat_map(|f| by_frame[f].iter().map(|r| r.pedestrian))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let slot: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut positions = vec![vec![[0.0, 0.0]; ids.len()]; WINDOW_LEN];
        let mut presence = vec![vec![false; ids.len()]; WINDOW_LEN];
        for (s, f) in span.iter().enumerate() {
            for r in &by_frame[f] {
                let i = slot[&r.pedestrian];
                positions[s][i] = [r.x, r.y];
                presence[s][i] = true;
            }
        }
        let w = TrajectoryWindow::from_steps(rec.name.clone(), start, ids, positions, presence)?;
        if w.num_pedestrians() > 0 && !w.input_agents(true).is_empty() {
            out.push(w);
        }
    }
    Ok(out)
}

/// Share of (window, pedestrian) instances that are partially observed.
pub fn partial_fraction(windows: &[TrajectoryWindow]) -> Result<f64> {
    let total: usize = windows.iter().map(TrajectoryWindow::num_pedestrians).sum();
    if total == 0 {
        return Err(GstError::EmptyInput("partial_fraction"));
    }
    let partial: usize = windows
        .iter()
        .map(|w| w.fully_observed.iter().filter(|f| !**f).count())
        .sum();
    Ok(partial as f64 / total as f64)
}

/// Rigid rotation by `angle` radians about `origin`; masks and filler slots
/// are untouched.
pub fn rotate_augment(window: &TrajectoryWindow, angle: f64, origin: [f64; 2]) -> TrajectoryWindow {
    let (s, c) = angle.sin_cos();
    let mut out = window.clone();
    for (xy, pr) in out.positions.iter_mut().zip(&window.presence) {
        for (p, &ok) in xy.iter_mut().zip(pr) {
            if ok {
                let (dx, dy) = (p[0] - origin[0], p[1] - origin[1]);
                *p = [origin[0] + c * dx - s * dy, origin[1] + s * dx + c * dy];
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<TrajectoryWindow>,
    pub test: Vec<TrajectoryWindow>,
}

/// Per scene, the earliest 80% of windows by start frame train, the rest
/// test.
pub fn split_chronological(windows: Vec<TrajectoryWindow>) -> DatasetSplit {
    let mut by_scene: BTreeMap<String, Vec<TrajectoryWindow>> = BTreeMap::new();
    for w in windows {
        by_scene.entry(w.scene.clone()).or_default().push(w);
    }
    let mut split = DatasetSplit::default();
    for (_, mut ws) in by_scene {
        ws.sort_by_key(|w| w.start_frame);
        let cut = (ws.len() as f64 * TRAIN_FRACTION).round() as usize;
        let test = ws.split_off(cut.min(ws.len()));
        split.train.extend(ws);
        split.test.extend(test);
    }
    split
}

/// Scene name to one or more files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenePaths {
    One(PathBuf),
    Many(Vec<PathBuf>),
}

impl ScenePaths {
    pub fn paths(&self) -> Vec<&Path> {
        match self {
            ScenePaths::One(p) => vec![p.as_path()],
            ScenePaths::Many(ps) => ps.iter().map(PathBuf::as_path).collect(),
        }
    }
}

/// Scene manifest:
///
/// ```toml
/// [scenes]
/// eth = "eth/biwi_eth.txt"
/// univ = ["univ/students001.txt", "univ/students003.txt"]
/// ```
///
/// Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub scenes: BTreeMap<String, ScenePaths>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DataManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GstError::io(path, e))?;
        let mut m: Self = toml::from_str(&text)
            .map_err(|e| GstError::Config(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// `$GST_DATA_ROOT/manifest.toml`, if the variable is set.
    pub fn default_path() -> Option<PathBuf> {
        std::env::var_os(DATA_ROOT_ENV).map(|root| PathBuf::from(root).join("manifest.toml"))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads every file of `scene`, naming each recording after the scene.
    pub fn load_scene(&self, scene: &str) -> Result<Vec<SceneRecording>> {
        let entry = self
            .scenes
            .get(scene)
            .ok_or_else(|| GstError::Config(format!("scene `{scene}` not in manifest")))?;
        entry
            .paths()
            .into_iter()
            .map(|p| {
                let mut rec = load_scene(self.resolve(p))?;
                rec.name = scene.to_string();
                Ok(rec)
            })
            .collect()
    }

    pub fn windows(&self, scene: &str, stride: usize) -> Result<Vec<TrajectoryWindow>> {
        let mut out = Vec::new();
        for rec in self.load_scene(scene)? {
            out.extend(make_windows(&rec, stride)?);
        }
        Ok(out)
    }
}

/// Versioned on-disk window set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowCache {
    pub format_version: u32,
    pub stride: usize,
    pub split: DatasetSplit,
}

impl WindowCache {
    pub fn new(stride: usize, split: DatasetSplit) -> Self {
        Self {
            format_version: CACHE_VERSION,
            stride,
            split,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| GstError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| GstError::io(path, e))?;
        let c: Self = serde_json::from_str(&text)?;
        if c.format_version != CACHE_VERSION {
            return Err(GstError::ConfigMismatch(format!(
                "{}: window cache format {} (expected {CACHE_VERSION})",
                path.display(),
                c.format_version
            )));
        }
        Ok(c)
    }
}

/// Straight-line walkers at constant velocity, every pedestrian fully
/// observed. Windows are non-overlapping in frame time, 10 frames per step.
pub fn synthetic_constant_velocity(
    windows: usize,
    pedestrians: usize,
    speed: (f64, f64),
    seed: u64,
) -> Vec<TrajectoryWindow> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..windows)
        .map(|k| {
            let starts: Vec<([f64; 2], [f64; 2])> = (0..pedestrians)
                .map(|_| {
                    let origin = [rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)];
                    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
                    let step = rng.gen_range(speed.0..=speed.1) * crate::config::STEP_SECONDS;
                    (origin, [step * heading.cos(), step * heading.sin()])
                })
                .collect();
            let positions = (0..WINDOW_LEN)
                .map(|t| {
                    starts
                        .iter()
                        .map(|(o, v)| [o[0] + t as f64 * v[0], o[1] + t as f64 * v[1]])
                        .collect()
                })
                .collect();
            TrajectoryWindow::from_steps(
                "synthetic",
                (k * WINDOW_LEN * 10) as i64,
                (0..pedestrians as i64).collect(),
                positions,
                vec![vec![true; pedestrians]; WINDOW_LEN],
            )
            .expect("well-formed")
        })
        .collect()
}

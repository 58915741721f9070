//! Scene data model, query-centric feature packing, JSONL I/O and the
//! post-processing applied to generated futures.
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{PolyCurve, Vec2};

pub const HISTORY_DURATION: f64 = 5.0;
pub const HISTORY_DEGREE: usize = 5;
pub const FUTURE_DEGREE: usize = 6;
pub const MAP_DEGREE: usize = 3;
pub const DEFAULT_HORIZON: f64 = 6.0;
/// Agents whose generated motion stays within this radius are frozen.
pub const STATIONARY_THRESHOLD: f64 = 1.0;
/// Below this speed (m/s) a heading is not read off the velocity.
pub const HEADING_SPEED_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentCategory {
    Vehicle,
    Pedestrian,
    Cyclist,
    Ego,
}

impl AgentCategory {
    pub const ALL: [AgentCategory; 4] = [Self::Vehicle, Self::Pedestrian, Self::Cyclist, Self::Ego];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn default_footprint(self) -> Footprint {
        match self {
            Self::Vehicle | Self::Ego => Footprint::new(4.7, 2.0),
            Self::Pedestrian => Footprint::new(0.8, 0.8),
            Self::Cyclist => Footprint::new(1.8, 0.6),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapCategory {
    LaneCenter,
    Crosswalk,
}

impl MapCategory {
    pub const ALL: [MapCategory; 2] = [Self::LaneCenter, Self::Crosswalk];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub length: f64,
    pub width: f64,
}

impl Footprint {
    pub const fn new(length: f64, width: f64) -> Self {
        Self { length, width }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub id: String,
    pub category: AgentCategory,
    /// Degree-5 curve over the 5 s history window.
    pub history: PolyCurve,
    /// First and last observed time within the history window, seconds.
    pub time_window: (f64, f64),
    pub footprint: Footprint,
    /// Ground-truth degree-6 future, starting at the end of the history.
    pub future: Option<PolyCurve>,
}

impl Agent {
    pub fn validate(&self) -> Result<()> {
        if self.history.degree() != HISTORY_DEGREE {
            return Err(Error::Shape(format!(
                "agent {}: history must have degree {HISTORY_DEGREE}, got {}",
                self.id,
                self.history.degree()
            )));
        }
        if let Some(f) = &self.future {
            if f.degree() != FUTURE_DEGREE {
                return Err(Error::Shape(format!(
                    "agent {}: future must have degree {FUTURE_DEGREE}, got {}",
                    self.id,
                    f.degree()
                )));
            }
        }
        let (t0, t1) = self.time_window;
        if !(t0 < t1 && t0 >= 0.0 && t1 <= self.history.duration()) {
            return Err(Error::Domain(format!(
                "agent {}: invalid time window ({t0}, {t1})",
                self.id
            )));
        }
        if !(self.footprint.length > 0.0 && self.footprint.width > 0.0) {
            return Err(Error::Domain(format!("agent {}: footprint must be positive", self.id)));
        }
        Ok(())
    }

    /// Last observed position, i.e. where generated futures are anchored.
    pub fn last_position(&self) -> Vec2 {
        self.history.end()
    }

    /// Pose at the end of the history; the flag marks a degenerate history
    /// whose heading fell back to zero.
    pub fn last_pose(&self) -> (Pose, bool) {
        let h = &self.history;
        let position = h.end();
        let velocity = h.eval_derivative_unit(1.0, 1);
        if velocity.norm() >= HEADING_SPEED_FLOOR {
            return (Pose::new(position, velocity.y.atan2(velocity.x)), false);
        }
        // Slow at the end of the window: keep the direction of travel over
        // the whole window.
        let chord = h.end() - h.start();
        if chord.norm() > 1e-6 {
            return (Pose::new(position, chord.y.atan2(chord.x)), false);
        }
        (Pose::new(position, 0.0), true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapElement {
    pub id: String,
    pub category: MapCategory,
    /// Cubic curve over the dimensionless arc parameter `[0, 1]`.
    pub geometry: PolyCurve,
}

impl MapElement {
    /// Start point and start tangent direction.
    pub fn pose(&self) -> Pose {
        let cp = self.geometry.control_points();
        let start = cp[0];
        let heading = cp[1..]
            .iter()
            .map(|p| p - start)
            .find(|d| d.norm() > 1e-9)
            .map(|d| d.y.atan2(d.x))
            .unwrap_or(0.0);
        Pose::new(start, heading)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub agents: Vec<Agent>,
    pub map: Vec<MapElement>,
    pub horizon_s: f64,
    pub eval_horizon_s: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        if self.agents.is_empty() {
            return Err(Error::Domain(format!("scene {}: no agents", self.scene_id)));
        }
        let mut ids = HashSet::new();
        for a in &self.agents {
            a.validate()?;
            if !ids.insert(a.id.as_str()) {
                return Err(Error::Domain(format!(
                    "scene {}: duplicate agent id {}",
                    self.scene_id, a.id
                )));
            }
        }
        for m in &self.map {
            if m.geometry.degree() != MAP_DEGREE {
                return Err(Error::Shape(format!(
                    "map element {}: expected degree {MAP_DEGREE}, got {}",
                    m.id,
                    m.geometry.degree()
                )));
            }
        }
        if !(self.horizon_s > 0.0 && self.eval_horizon_s > 0.0 && self.eval_horizon_s <= self.horizon_s) {
            return Err(Error::Domain(format!(
                "scene {}: invalid horizons {} / {}",
                self.scene_id, self.horizon_s, self.eval_horizon_s
            )));
        }
        Ok(())
    }

    pub fn has_futures(&self) -> bool {
        self.agents.iter().all(|a| a.future.is_some())
    }

    pub fn lane_centers(&self) -> impl Iterator<Item = &MapElement> {
        self.map.iter().filter(|m| m.category == MapCategory::LaneCenter)
    }

    /// Applies the same rigid motion to every curve of the scene.
    pub fn rigid_transform(&self, rotation: f64, translation: Vec2) -> Scene {
        let mut out = self.clone();
        for a in &mut out.agents {
            a.history = a.history.rigid_transform(rotation, translation);
            a.future = a.future.as_ref().map(|f| f.rigid_transform(rotation, translation));
        }
        for m in &mut out.map {
            m.geometry = m.geometry.rigid_transform(rotation, translation);
        }
        out
    }

    pub fn ground_truth(&self) -> Option<Vec<Trajectory>> {
        self.agents
            .iter()
            .map(|a| a.future.clone().map(Trajectory::Poly))
            .collect()
    }
}

/// Position plus heading (radians, counter-clockwise from +x).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vec2,
    pub heading: f64,
}

impl Pose {
    pub fn new(position: Vec2, heading: f64) -> Self {
        Self { position, heading }
    }

    /// Expresses a global direction in this pose's frame.
    pub fn rotate_to_local(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(c * v.x + s * v.y, -s * v.x + c * v.y)
    }

    pub fn rotate_to_global(&self, v: Vec2) -> Vec2 {
        let (s, c) = self.heading.sin_cos();
        Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        self.rotate_to_local(p - self.position)
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    }
    r
}

/// Network-facing view of a scene: every curve is re-expressed in its own
/// token frame, the global poses are kept separately.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFeatures {
    pub hist_disp: Vec<[f64; 2 * HISTORY_DEGREE]>,
    pub tw: Vec<[f64; 2]>,
    pub agent_cat: Vec<[f64; 4]>,
    pub agent_frame: Vec<Pose>,
    pub map_disp: Vec<[f64; 2 * MAP_DEGREE]>,
    pub map_cat: Vec<[f64; 2]>,
    pub map_frame: Vec<Pose>,
    /// Agents whose heading could not be determined.
    pub degenerate_agents: Vec<usize>,
}

fn local_displacements<const N: usize>(curve: &PolyCurve, frame: &Pose) -> [f64; N] {
    let mut out = [0.0; N];
    for (i, w) in curve.control_points().windows(2).enumerate() {
        let d = frame.rotate_to_local(w[1] - w[0]);
        out[2 * i] = d.x;
        out[2 * i + 1] = d.y;
    }
    out
}

pub fn pack_features(scene: &Scene) -> Result<SceneFeatures> {
    scene.validate()?;
    let mut f = SceneFeatures {
        hist_disp: Vec::with_capacity(scene.agents.len()),
        tw: Vec::with_capacity(scene.agents.len()),
        agent_cat: Vec::with_capacity(scene.agents.len()),
        agent_frame: Vec::with_capacity(scene.agents.len()),
        map_disp: Vec::with_capacity(scene.map.len()),
        map_cat: Vec::with_capacity(scene.map.len()),
        map_frame: Vec::with_capacity(scene.map.len()),
        degenerate_agents: Vec::new(),
    };
    for (i, a) in scene.agents.iter().enumerate() {
        let (pose, degenerate) = a.last_pose();
        if degenerate {
            f.degenerate_agents.push(i);
        }
        f.hist_disp.push(local_displacements(&a.history, &pose));
        f.tw.push([a.time_window.0, a.time_window.1]);
        let mut cat = [0.0; 4];
        cat[a.category.index()] = 1.0;
        f.agent_cat.push(cat);
        f.agent_frame.push(pose);
    }
    for m in &scene.map {
        let pose = m.pose();
        f.map_disp.push(local_displacements(&m.geometry, &pose));
        let mut cat = [0.0; 2];
        cat[m.category.index()] = 1.0;
        f.map_cat.push(cat);
        f.map_frame.push(pose);
    }
    Ok(f)
}

/// Positions sampled every `dt` seconds, `points[k]` at `t = k * dt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub dt: f64,
    pub points: Vec<Vec2>,
}

impl SampledTrajectory {
    pub fn duration(&self) -> f64 {
        self.dt * (self.points.len().saturating_sub(1)) as f64
    }

    pub fn position(&self, t: f64) -> Vec2 {
        let last = self.points.len() - 1;
        let x = (t / self.dt).clamp(0.0, last as f64);
        let i = (x.floor() as usize).min(last);
        if i == last {
            return self.points[last];
        }
        let frac = x - i as f64;
        self.points[i] * (1.0 - frac) + self.points[i + 1] * frac
    }
}

/// A future trajectory in either representation.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    Poly(PolyCurve),
    Sampled(SampledTrajectory),
}

impl Trajectory {
    pub fn duration(&self) -> f64 {
        match self {
            Self::Poly(c) => c.duration(),
            Self::Sampled(s) => s.duration(),
        }
    }

    pub fn start(&self) -> Vec2 {
        match self {
            Self::Poly(c) => c.start(),
            Self::Sampled(s) => s.points[0],
        }
    }

    /// Position at time `t`, clamped to the trajectory span.
    pub fn position(&self, t: f64) -> Vec2 {
        match self {
            Self::Poly(c) => c.eval_unit((t / c.duration()).clamp(0.0, 1.0)),
            Self::Sampled(s) => s.position(t),
        }
    }

    /// Farthest distance reached from the start position.
    pub fn max_excursion(&self) -> f64 {
        match self {
            Self::Poly(c) => c.max_distance_from(c.start()),
            Self::Sampled(s) => s
                .points
                .iter()
                .map(|p| (p - s.points[0]).norm())
                .fold(0.0, f64::max),
        }
    }

    /// Same representation and span, parked at `at`.
    pub fn frozen_at(&self, at: Vec2) -> Trajectory {
        match self {
            Self::Poly(c) => Self::Poly(
                PolyCurve::constant(at, c.degree(), c.duration()).expect("valid source curve"),
            ),
            Self::Sampled(s) => Self::Sampled(SampledTrajectory {
                dt: s.dt,
                points: vec![at; s.points.len()],
            }),
        }
    }

    pub fn rigid_transform(&self, rotation: f64, translation: Vec2) -> Trajectory {
        match self {
            Self::Poly(c) => Self::Poly(c.rigid_transform(rotation, translation)),
            Self::Sampled(s) => {
                let rot = nalgebra::Rotation2::new(rotation);
                Self::Sampled(SampledTrajectory {
                    dt: s.dt,
                    points: s.points.iter().map(|p| rot * p + translation).collect(),
                })
            }
        }
    }
}

/// Freezes agents whose generated motion stays within
/// [`STATIONARY_THRESHOLD`] of its start: they keep their last measured
/// position (and therefore their last heading).
pub fn stationary_correction(scene: &Scene, generated: &[Trajectory]) -> Result<Vec<Trajectory>> {
    if generated.len() != scene.agents.len() {
        return Err(Error::Shape(format!(
            "{} generated trajectories for {} agents",
            generated.len(),
            scene.agents.len()
        )));
    }
    Ok(scene
        .agents
        .iter()
        .zip(generated)
        .map(|(agent, traj)| {
            if traj.max_excursion() < STATIONARY_THRESHOLD {
                traj.frozen_at(agent.last_position())
            } else {
                traj.clone()
            }
        })
        .collect())
}

/// Straight-line extrapolation at the final history velocity, as degree-6
/// curves over the scene horizon.
pub fn constant_velocity_rollout(scene: &Scene) -> Result<Vec<PolyCurve>> {
    scene
        .agents
        .iter()
        .map(|a| {
            let start = a.last_position();
            let velocity = a.history.eval_derivative_unit(1.0, 1);
            PolyCurve::new(vec![start, start + velocity * scene.horizon_s], scene.horizon_s)?
                .elevate_to(FUTURE_DEGREE)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// JSONL serialization

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    scene_id: String,
    horizon_s: f64,
    eval_horizon_s: f64,
    agents: Vec<AgentRecord>,
    map: Vec<MapRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentRecord {
    id: String,
    category: AgentCategory,
    tw: [f64; 2],
    footprint: [f64; 2],
    history_cp: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    future_cp: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapRecord {
    id: String,
    category: MapCategory,
    cp: Vec<[f64; 2]>,
}

pub(crate) fn points_to_wire(points: &[Vec2]) -> Vec<[f64; 2]> {
    points.iter().map(|p| [p.x, p.y]).collect()
}

pub(crate) fn curve_from_wire(
    field: &str,
    cp: &[[f64; 2]],
    degree: usize,
    duration: f64,
) -> std::result::Result<PolyCurve, String> {
    if cp.len() != degree + 1 {
        return Err(format!(
            "{field}: expected {} control points, got {}",
            degree + 1,
            cp.len()
        ));
    }
    PolyCurve::new(cp.iter().map(|&[x, y]| Vec2::new(x, y)).collect(), duration)
        .map_err(|e| format!("{field}: {e}"))
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        SceneRecord {
            scene_id: s.scene_id.clone(),
            horizon_s: s.horizon_s,
            eval_horizon_s: s.eval_horizon_s,
            agents: s
                .agents
                .iter()
                .map(|a| AgentRecord {
                    id: a.id.clone(),
                    category: a.category,
                    tw: [a.time_window.0, a.time_window.1],
                    footprint: [a.footprint.length, a.footprint.width],
                    history_cp: points_to_wire(a.history.control_points()),
                    future_cp: a.future.as_ref().map(|f| points_to_wire(f.control_points())),
                })
                .collect(),
            map: s
                .map
                .iter()
                .map(|m| MapRecord {
                    id: m.id.clone(),
                    category: m.category,
                    cp: points_to_wire(m.geometry.control_points()),
                })
                .collect(),
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = String;

    fn try_from(r: SceneRecord) -> std::result::Result<Self, String> {
        let mut agents = Vec::with_capacity(r.agents.len());
        for (i, a) in r.agents.into_iter().enumerate() {
            let history = curve_from_wire(
                &format!("agents[{i}].history_cp"),
                &a.history_cp,
                HISTORY_DEGREE,
                HISTORY_DURATION,
            )?;
            let future = a
                .future_cp
                .map(|cp| curve_from_wire(&format!("agents[{i}].future_cp"), &cp, FUTURE_DEGREE, r.horizon_s))
                .transpose()?;
            agents.push(Agent {
                id: a.id,
                category: a.category,
                history,
                time_window: (a.tw[0], a.tw[1]),
                footprint: Footprint::new(a.footprint[0], a.footprint[1]),
                future,
            });
        }
        let map = r
            .map
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                Ok(MapElement {
                    id: m.id,
                    category: m.category,
                    geometry: curve_from_wire(&format!("map[{i}].cp"), &m.cp, MAP_DEGREE, 1.0)?,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        let scene = Scene {
            scene_id: r.scene_id,
            agents,
            map,
            horizon_s: r.horizon_s,
            eval_horizon_s: r.eval_horizon_s,
        };
        scene.validate().map_err(|e| e.to_string())?;
        Ok(scene)
    }
}

pub fn scene_to_json(scene: &Scene) -> String {
    serde_json::to_string(&SceneRecord::from(scene)).expect("scene records always serialize")
}

pub fn scene_from_json(line: &str, line_no: usize) -> Result<Scene> {
    let record: SceneRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    Scene::try_from(record).map_err(|message| Error::Parse {
        line: line_no,
        message,
    })
}

/// Reads every non-blank line of a JSONL file through `parse`.
pub(crate) fn read_jsonl<T>(path: &Path, mut parse: impl FnMut(&str, usize) -> Result<T>) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse(&line, i + 1)?);
    }
    Ok(out)
}

pub(crate) fn write_lines(path: &Path, lines: impl IntoIterator<Item = String>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn scene_io_read(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    read_jsonl(path.as_ref(), scene_from_json)
}

pub fn scene_io_write(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), scenes.iter().map(scene_to_json))
}

/// Generated futures for one scene: `samples[k][i]` is agent `i` in sample `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub scene_id: String,
    pub agent_ids: Vec<String>,
    pub samples: Vec<Vec<Trajectory>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum TrajectoryRecord {
    Poly { duration: f64, cp: Vec<[f64; 2]> },
    Sampled { dt: f64, points: Vec<[f64; 2]> },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleSetRecord {
    scene_id: String,
    agent_ids: Vec<String>,
    samples: Vec<Vec<TrajectoryRecord>>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        match t {
            Trajectory::Poly(c) => Self::Poly { duration: c.duration(), cp: points_to_wire(c.control_points()) },
            Trajectory::Sampled(s) => Self::Sampled { dt: s.dt, points: points_to_wire(&s.points) },
        }
    }
}

impl TrajectoryRecord {
    fn into_trajectory(self) -> std::result::Result<Trajectory, String> {
        let pts = |v: Vec<[f64; 2]>| v.into_iter().map(|[x, y]| Vec2::new(x, y)).collect::<Vec<_>>();
        match self {
            Self::Poly { duration, cp } => {
                PolyCurve::new(pts(cp), duration).map(Trajectory::Poly).map_err(|e| e.to_string())
            }
            Self::Sampled { dt, points } => {
                if !(dt > 0.0) || points.is_empty() || points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err("sampled trajectory needs dt > 0 and finite points".into());
                }
                Ok(Trajectory::Sampled(SampledTrajectory { dt, points: pts(points) }))
            }
        }
    }
}

pub fn sample_set_to_json(set: &SampleSet) -> String {
    let record = SampleSetRecord {
        scene_id: set.scene_id.clone(),
        agent_ids: set.agent_ids.clone(),
        samples: set.samples.iter().map(|s| s.iter().map(TrajectoryRecord::from).collect()).collect(),
    };
    serde_json::to_string(&record).expect("sample records always serialize")
}

pub fn sample_set_from_json(line: &str, line_no: usize) -> Result<SampleSet> {
    let parse_err = |message: String| Error::Parse { line: line_no, message };
    let record: SampleSetRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let mut samples = Vec::with_capacity(record.samples.len());
    for (k, s) in record.samples.into_iter().enumerate() {
        if s.len() != record.agent_ids.len() {
            return Err(parse_err(format!(
                "sample {k} has {} trajectories for {} agents",
                s.len(),
                record.agent_ids.len()
            )));
        }
        samples.push(
            s.into_iter()
                .map(TrajectoryRecord::into_trajectory)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(parse_err)?,
        );
    }
    Ok(SampleSet { scene_id: record.scene_id, agent_ids: record.agent_ids, samples })
}

pub fn samples_io_read(path: impl AsRef<Path>) -> Result<Vec<SampleSet>> {
    read_jsonl(path.as_ref(), sample_set_from_json)
}

pub fn samples_io_write(sets: &[SampleSet], path: impl AsRef<Path>) -> Result<()> {
    write_lines(path.as_ref(), sets.iter().map(sample_set_to_json))
}

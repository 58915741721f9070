//! Distribution-based realism scores, regression metrics and diversity.
//!
//! Realism follows a histogram approximation: for every evaluated timestep
//! the sampled continuations define a smoothed histogram of a feature, and
//! the ground truth is scored by the mass of the bin it falls into. Scores
//! are geometric means over timesteps, so they lie in `(0, 1]`.
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Vec2;
use crate::scene::{constant_velocity_rollout, wrap_angle, MapCategory, MapElement, Scene, Trajectory, HEADING_SPEED_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinSpec {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl BinSpec {
    pub const fn new(lo: f64, hi: f64, count: usize) -> Self {
        Self { lo, hi, count }
    }

    /// Bin index; values outside the range land in the edge bins.
    pub fn index(&self, v: f64) -> usize {
        if !v.is_finite() {
            return if v < 0.0 { 0 } else { self.count - 1 };
        }
        let x = (v - self.lo) / (self.hi - self.lo) * self.count as f64;
        (x.floor().max(0.0) as usize).min(self.count - 1)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo < self.hi && self.count >= 1) {
            return Err(Error::Config(format!("bins for {name} must have lo < hi and count >= 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureBins {
    pub speed: BinSpec,
    pub accel: BinSpec,
    pub jerk: BinSpec,
    pub heading_rate: BinSpec,
    pub nearest_agent: BinSpec,
    pub lane_distance: BinSpec,
}

impl Default for FeatureBins {
    fn default() -> Self {
        Self {
            speed: BinSpec::new(0.0, 25.0, 20),
            accel: BinSpec::new(0.0, 5.0, 20),
            jerk: BinSpec::new(0.0, 10.0, 20),
            // odd count so straight driving sits mid-bin
            heading_rate: BinSpec::new(-1.05, 1.05, 21),
            nearest_agent: BinSpec::new(0.0, 50.0, 20),
            lane_distance: BinSpec::new(0.0, 5.0, 20),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub n_samples: usize,
    pub dt: f64,
    pub bins: FeatureBins,
    /// Total pseudo-count spread evenly over the bins of every histogram.
    pub smoothing: f64,
    /// Kinematic, interactive and map weights of the meta score.
    pub weights: [f64; 3],
    pub accel_band: f64,
    pub jerk_band: f64,
    pub off_lane_threshold: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            n_samples: 32,
            dt: 0.1,
            bins: FeatureBins::default(),
            smoothing: 0.5,
            weights: [1.0 / 3.0; 3],
            accel_band: 4.0,
            jerk_band: 8.0,
            off_lane_threshold: 5.0,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::Config("metrics need at least 2 samples".into()));
        }
        if !(self.dt > 0.0 && self.smoothing > 0.0) {
            return Err(Error::Config("dt and smoothing must be positive".into()));
        }
        if self.weights.iter().any(|w| *w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("metric weights must be non-negative and sum to 1".into()));
        }
        let b = &self.bins;
        for (n, s) in [
            ("speed", b.speed),
            ("accel", b.accel),
            ("jerk", b.jerk),
            ("heading_rate", b.heading_rate),
            ("nearest_agent", b.nearest_agent),
            ("lane_distance", b.lane_distance),
        ] {
            s.validate(n)?;
        }
        Ok(())
    }

    fn times(&self, horizon: f64) -> Vec<f64> {
        let n = (horizon / self.dt + 1e-9).floor() as usize;
        (1..=n).map(|k| k as f64 * self.dt).collect()
    }
}

// ---------------------------------------------------------------------------
// Geometry

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Vec2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    fn axes(&self) -> [Vec2; 2] {
        let (s, c) = self.heading.sin_cos();
        [Vec2::new(c, s), Vec2::new(-s, c)]
    }

    fn radius_along(&self, axis: &Vec2) -> f64 {
        let [u, v] = self.axes();
        0.5 * self.length * u.dot(axis).abs() + 0.5 * self.width * v.dot(axis).abs()
    }
}

/// Separating-axis test; boxes that merely touch do not overlap.
pub fn obb_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    let d = b.center - a.center;
    let reach = 0.5 * (a.length.hypot(a.width) + b.length.hypot(b.width));
    if d.norm() >= reach {
        return false;
    }
    a.axes()
        .into_iter()
        .chain(b.axes())
        .all(|axis| d.dot(&axis).abs() < a.radius_along(&axis) + b.radius_along(&axis))
}

// ---------------------------------------------------------------------------
// Kinematics

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KinematicSample {
    pub speed: f64,
    pub accel: f64,
    pub jerk: f64,
    pub heading_rate: f64,
}

/// Velocity, acceleration and jerk vectors at `times`: analytic for
/// polynomials, finite differences of the sample grid otherwise.
fn derivatives(traj: &Trajectory, times: &[f64]) -> Vec<[Vec2; 3]> {
    match traj {
        Trajectory::Poly(c) => {
            times
                .iter()
                .map(|t| {
                    let u = (t / c.duration()).clamp(0.0, 1.0);
                    [c.eval_derivative_unit(u, 1), c.eval_derivative_unit(u, 2), c.eval_derivative_unit(u, 3)]
                })
                .collect()
        }
        Trajectory::Sampled(s) => {
            let p = &s.points;
            let n = p.len() - 1;
            let h = s.dt;
            let at = |t: f64| ((t / h).round() as usize).min(n);
            times
                .iter()
                .map(|t| {
                    let k = at(*t);
                    let v = if n == 0 {
                        Vec2::zeros()
                    } else if k == 0 {
                        (p[1] - p[0]) / h
                    } else if k == n {
                        (p[n] - p[n - 1]) / h
                    } else {
                        (p[k + 1] - p[k - 1]) / (2.0 * h)
                    };
                    let a = if n < 2 {
                        Vec2::zeros()
                    } else {
                        let c = k.clamp(1, n - 1);
                        (p[c + 1] - 2.0 * p[c] + p[c - 1]) / (h * h)
                    };
                    let j = if n < 4 {
                        Vec2::zeros()
                    } else {
                        let c = k.clamp(2, n - 2);
                        (p[c + 2] - 2.0 * p[c + 1] + 2.0 * p[c - 1] - p[c - 2]) / (2.0 * h * h * h)
                    };
                    [v, a, j]
                })
                .collect()
        }
    }
}

pub fn kinematic_features(traj: &Trajectory, times: &[f64]) -> Vec<KinematicSample> {
    let der = derivatives(traj, times);
    match traj {
        Trajectory::Poly(_) => der
            .iter()
            .map(|[v, a, j]| {
                let speed = v.norm();
                let heading_rate = if speed >= HEADING_SPEED_FLOOR {
                    (v.x * a.y - v.y * a.x) / (speed * speed)
                } else {
                    0.0
                };
                KinematicSample { speed, accel: a.norm(), jerk: j.norm(), heading_rate }
            })
            .collect(),
        Trajectory::Sampled(_) => {
            // heading rate from differenced headings, holding the heading
            // while the agent is slower than the floor
            let mut prev: Option<f64> = None;
            let dt = if times.len() > 1 { times[1] - times[0] } else { 0.1 };
            der.iter()
                .map(|[v, a, j]| {
                    let speed = v.norm();
                    let heading = if speed >= HEADING_SPEED_FLOOR { Some(v.y.atan2(v.x)) } else { prev };
                    let heading_rate = match (prev, heading) {
                        (Some(p), Some(h)) => wrap_angle(h - p) / dt,
                        _ => 0.0,
                    };
                    if heading.is_some() {
                        prev = heading;
                    }
                    KinematicSample { speed, accel: a.norm(), jerk: j.norm(), heading_rate }
                })
                .collect()
        }
    }
}

/// Headings at `times`, derived from the velocity and held while slow.
pub fn headings(traj: &Trajectory, times: &[f64], initial: f64) -> Vec<f64> {
    let mut h = initial;
    derivatives(traj, times)
        .into_iter()
        .map(|[v, _, _]| {
            if v.norm() >= HEADING_SPEED_FLOOR {
                h = v.y.atan2(v.x);
            }
            h
        })
        .collect()
}

/// Heading, speed and the signed longitudinal acceleration and jerk (the
/// components along the direction of travel) at one instant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LongitudinalSample {
    pub heading: f64,
    pub speed: f64,
    pub accel: f64,
    pub jerk: f64,
}

pub fn longitudinal_profile(traj: &Trajectory, times: &[f64], initial_heading: f64) -> Vec<LongitudinalSample> {
    let mut h = initial_heading;
    derivatives(traj, times)
        .into_iter()
        .map(|[v, a, j]| {
            let speed = v.norm();
            if speed >= HEADING_SPEED_FLOOR {
                h = v.y.atan2(v.x);
            }
            let dir = Vec2::new(h.cos(), h.sin());
            LongitudinalSample { heading: h, speed, accel: a.dot(&dir), jerk: j.dot(&dir) }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Likelihoods

/// Geometric mean over timesteps of the smoothed histogram mass at the
/// ground-truth bin. `samples[i][t]` is sample `i` at timestep `t`.
pub fn likelihood_score(gt: &[f64], samples: &[Vec<f64>], bins: &BinSpec, smoothing: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metric(format!("need at least 2 samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| s.len() != gt.len()) {
        return Err(Error::Shape("sample series length differs from ground truth".into()));
    }
    if gt.is_empty() {
        return Ok(1.0);
    }
    let n = samples.len() as f64;
    let prior = smoothing / bins.count as f64;
    let mut log_sum = 0.0;
    for (t, g) in gt.iter().enumerate() {
        let target = bins.index(*g);
        let hits = samples.iter().filter(|s| bins.index(s[t]) == target).count() as f64;
        log_sum += ((hits + prior) / (n + smoothing)).ln();
    }
    Ok((log_sum / gt.len() as f64).exp())
}

/// Smoothed probability of the observed indicator under the sample frequency.
pub fn bernoulli_likelihood(gt: bool, samples: &[bool], smoothing: f64) -> f64 {
    let hits = samples.iter().filter(|s| **s == gt).count() as f64;
    (hits + 0.5 * smoothing) / (samples.len() as f64 + smoothing)
}

// ---------------------------------------------------------------------------
// Interaction and map

/// Per-timestep overlap flags for every unordered agent pair `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionTable {
    pub pairs: Vec<(usize, usize)>,
    /// `hits[t][p]` is true when pair `p` overlaps at timestep `t`.
    pub hits: Vec<Vec<bool>>,
}

impl CollisionTable {
    pub fn agent_collided(&self, agent: usize) -> bool {
        self.pairs
            .iter()
            .enumerate()
            .any(|(p, (i, j))| (*i == agent || *j == agent) && self.hits.iter().any(|row| row[p]))
    }

    pub fn first_hit(&self, pair: usize) -> Option<usize> {
        self.hits.iter().position(|row| row[pair])
    }
}

pub fn collision_check(
    trajs: &[Trajectory],
    footprints: &[crate::scene::Footprint],
    initial_headings: &[f64],
    times: &[f64],
) -> CollisionTable {
    let boxes: Vec<Vec<OrientedBox>> = trajs
        .iter()
        .zip(footprints)
        .zip(initial_headings)
        .map(|((traj, fp), h0)| {
            times
                .iter()
                .zip(headings(traj, times, *h0))
                .map(|(t, heading)| OrientedBox {
                    center: traj.position(*t),
                    heading,
                    length: fp.length,
                    width: fp.width,
                })
                .collect()
        })
        .collect();
    let mut pairs = Vec::new();
    for i in 0..trajs.len() {
        for j in i + 1..trajs.len() {
            pairs.push((i, j));
        }
    }
    let hits = (0..times.len())
        .map(|t| pairs.iter().map(|(i, j)| obb_overlap(&boxes[*i][t], &boxes[*j][t])).collect())
        .collect();
    CollisionTable { pairs, hits }
}

fn aabb_distance(p: Vec2, (lo, hi): (Vec2, Vec2)) -> f64 {
    let dx = (lo.x - p.x).max(0.0).max(p.x - hi.x);
    let dy = (lo.y - p.y).max(0.0).max(p.y - hi.y);
    dx.hypot(dy)
}

/// Lane-center geometry with precomputed control-point bounds.
pub struct LaneIndex<'a> {
    lanes: Vec<(&'a MapElement, (Vec2, Vec2))>,
}

impl<'a> LaneIndex<'a> {
    pub fn new(map: &'a [MapElement]) -> Self {
        Self {
            lanes: map
                .iter()
                .filter(|m| m.category == MapCategory::LaneCenter)
                .map(|m| (m, m.geometry.hull_bounds()))
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.lanes.is_empty()
    }

    /// Distance to the nearest lane center; curves whose control-point box
    /// is already farther than the best candidate are skipped.
    pub fn distance(&self, p: Vec2) -> f64 {
        let mut order: Vec<(f64, usize)> =
            self.lanes.iter().enumerate().map(|(i, (_, b))| (aabb_distance(p, *b), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut best = f64::INFINITY;
        for (bound, i) in order {
            if bound >= best {
                break;
            }
            best = best.min(self.lanes[i].0.geometry.project_point(p).distance);
        }
        best
    }
}

pub fn map_distance(traj: &Trajectory, map: &[MapElement], times: &[f64]) -> Vec<f64> {
    let index = LaneIndex::new(map);
    times.iter().map(|t| index.distance(traj.position(*t))).collect()
}

// ---------------------------------------------------------------------------
// Regression and diversity

/// Joint minimum over samples of the mean (over agents and timesteps)
/// displacement error.
pub fn minade(samples: &[Vec<Trajectory>], gt: &[Trajectory], times: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Metric("minADE needs at least one sample".into()));
    }
    let mut best = f64::INFINITY;
    for s in samples {
        if s.len() != gt.len() {
            return Err(Error::Shape("sample agent count differs from ground truth".into()));
        }
        best = best.min(ade(s, gt, times));
    }
    Ok(best)
}

pub fn ade(sample: &[Trajectory], gt: &[Trajectory], times: &[f64]) -> f64 {
    let mut acc = Neumaier::default();
    for (s, g) in sample.iter().zip(gt) {
        let mut per = Neumaier::default();
        for t in times {
            per.add((s.position(*t) - g.position(*t)).norm());
        }
        acc.add(per.sum() / times.len() as f64);
    }
    acc.sum() / gt.len() as f64
}

/// Mean over unordered sample pairs of the mean per-agent distance between
/// positions at time `t_end`.
pub fn coverage(samples: &[Vec<Trajectory>], t_end: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Metric(format!("coverage needs at least 2 samples, got {}", samples.len())));
    }
    let finals: Vec<Vec<Vec2>> = samples.iter().map(|s| s.iter().map(|t| t.position(t_end)).collect()).collect();
    let mut acc = Neumaier::default();
    let mut pairs = 0usize;
    for i in 0..finals.len() {
        for j in i + 1..finals.len() {
            let a = finals[i].len().max(1) as f64;
            acc.add(finals[i].iter().zip(&finals[j]).map(|(p, q)| (p - q).norm()).sum::<f64>() / a);
            pairs += 1;
        }
    }
    Ok(acc.sum() / pairs as f64)
}

/// Compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.c += (self.sum - t) + v;
        } else {
            self.c += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn sum(&self) -> f64 {
        self.sum + self.c
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub scene_id: String,
    pub realism_meta: f64,
    pub kinematic: f64,
    pub interactive: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub map_adherence: Option<f64>,
    pub minade: f64,
    pub coverage: f64,
    pub sub_scores: BTreeMap<String, f64>,
}

struct AgentSeries {
    kin: Vec<KinematicSample>,
    nearest: Vec<f64>,
    lane: Vec<f64>,
    collided: bool,
    off_lane: bool,
}

fn scene_series(
    scene: &Scene,
    trajs: &[Trajectory],
    lanes: &LaneIndex,
    times: &[f64],
    cfg: &MetricConfig,
) -> Vec<AgentSeries> {
    let footprints: Vec<_> = scene.agents.iter().map(|a| a.footprint).collect();
    let initial: Vec<f64> = scene.agents.iter().map(|a| a.last_pose().0.heading).collect();
    let table = collision_check(trajs, &footprints, &initial, times);
    let positions: Vec<Vec<Vec2>> = trajs.iter().map(|t| times.iter().map(|s| t.position(*s)).collect()).collect();
    (0..trajs.len())
        .map(|i| {
            let nearest = (0..times.len())
                .map(|k| {
                    (0..trajs.len())
                        .filter(|j| *j != i)
                        .map(|j| (positions[i][k] - positions[j][k]).norm())
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let lane: Vec<f64> = if lanes.is_empty() {
                Vec::new()
            } else {
                positions[i].iter().map(|p| lanes.distance(*p)).collect()
            };
            let off_lane = lane.iter().any(|d| *d > cfg.off_lane_threshold);
            AgentSeries {
                kin: kinematic_features(&trajs[i], times),
                nearest,
                lane,
                collided: table.agent_collided(i),
                off_lane,
            }
        })
        .collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = Neumaier::default();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        acc.sum() / n as f64
    }
}

/// Scores `samples` (each a full set of agent futures) against the scene's
/// ground truth over its evaluation horizon.
pub fn compute_report(scene: &Scene, samples: &[Vec<Trajectory>], cfg: &MetricConfig) -> Result<MetricReport> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::Metric(format!("need at least 2 samples, got {}", samples.len())));
    }
    let gt = scene
        .ground_truth()
        .ok_or_else(|| Error::Metric(format!("scene {} lacks ground-truth futures", scene.scene_id)))?;
    if samples.iter().any(|s| s.len() != gt.len()) {
        return Err(Error::Shape("sample agent count differs from scene".into()));
    }
    let times = cfg.times(scene.eval_horizon_s);
    let lanes = LaneIndex::new(&scene.map);
    let gt_series = scene_series(scene, &gt, &lanes, &times, cfg);
    let sample_series: Vec<Vec<AgentSeries>> =
        samples.iter().map(|s| scene_series(scene, s, &lanes, &times, cfg)).collect();

    let b = &cfg.bins;
    let a = scene.agents.len();
    let mut sub: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut kin_scores = Vec::with_capacity(a);
    let mut int_scores = Vec::with_capacity(a);
    let mut map_scores = Vec::with_capacity(a);
    for i in 0..a {
        let g = &gt_series[i];
        let col = |f: &dyn Fn(&AgentSeries) -> Vec<f64>| -> Vec<Vec<f64>> {
            sample_series.iter().map(|s| f(&s[i])).collect()
        };
        let kin_feature = |name: &str, get: fn(&KinematicSample) -> f64, bins: &BinSpec| -> Result<(String, f64)> {
            let gtv: Vec<f64> = g.kin.iter().map(get).collect();
            let sv = col(&|s: &AgentSeries| s.kin.iter().map(get).collect());
            Ok((name.to_string(), likelihood_score(&gtv, &sv, bins, cfg.smoothing)?))
        };
        let feats = [
            kin_feature("speed", |k| k.speed, &b.speed)?,
            kin_feature("accel", |k| k.accel, &b.accel)?,
            kin_feature("jerk", |k| k.jerk, &b.jerk)?,
            kin_feature("heading_rate", |k| k.heading_rate, &b.heading_rate)?,
        ];
        kin_scores.push(mean(feats.iter().map(|f| f.1)));
        for (n, v) in feats {
            sub.entry(n).or_default().push(v);
        }

        let collision = bernoulli_likelihood(
            g.collided,
            &sample_series.iter().map(|s| s[i].collided).collect::<Vec<_>>(),
            cfg.smoothing,
        );
        sub.entry("collision".into()).or_default().push(collision);
        let interactive = if a > 1 {
            let near = likelihood_score(&g.nearest, &col(&|s: &AgentSeries| s.nearest.clone()), &b.nearest_agent, cfg.smoothing)?;
            sub.entry("nearest_agent".into()).or_default().push(near);
            0.5 * (near + collision)
        } else {
            collision
        };
        int_scores.push(interactive);

        if !lanes.is_empty() {
            let lane = likelihood_score(&g.lane, &col(&|s: &AgentSeries| s.lane.clone()), &b.lane_distance, cfg.smoothing)?;
            let off = bernoulli_likelihood(
                g.off_lane,
                &sample_series.iter().map(|s| s[i].off_lane).collect::<Vec<_>>(),
                cfg.smoothing,
            );
            sub.entry("lane_distance".into()).or_default().push(lane);
            sub.entry("off_lane".into()).or_default().push(off);
            map_scores.push(0.5 * (lane + off));
        }
    }
    // Fraction of sampled timesteps inside the comfort bands.
    let mut in_accel = Vec::new();
    let mut in_jerk = Vec::new();
    for s in &sample_series {
        for agent in s {
            for k in &agent.kin {
                in_accel.push(f64::from(u8::from(k.accel <= cfg.accel_band)));
                in_jerk.push(f64::from(u8::from(k.jerk <= cfg.jerk_band)));
            }
        }
    }

    let kinematic = mean(kin_scores);
    let interactive = mean(int_scores);
    let map_adherence = (!map_scores.is_empty()).then(|| mean(map_scores));
    let [wk, wi, wm] = cfg.weights;
    let realism_meta = match map_adherence {
        Some(m) => wk * kinematic + wi * interactive + wm * m,
        None if wk + wi > 0.0 => (wk * kinematic + wi * interactive) / (wk + wi),
        None => 0.5 * (kinematic + interactive),
    };
    let mut sub_scores: BTreeMap<String, f64> = sub.into_iter().map(|(k, v)| (k, mean(v))).collect();
    sub_scores.insert("accel_in_band".into(), mean(in_accel));
    sub_scores.insert("jerk_in_band".into(), mean(in_jerk));

    Ok(MetricReport {
        scene_id: scene.scene_id.clone(),
        realism_meta,
        kinematic,
        interactive,
        map_adherence,
        minade: minade(samples, &gt, &times)?,
        coverage: coverage(samples, *times.last().unwrap_or(&scene.eval_horizon_s))?,
        sub_scores,
    })
}

/// Realism of a constant-velocity continuation replicated as every sample.
pub fn constant_velocity_meta(scene: &Scene, cfg: &MetricConfig) -> Result<f64> {
    let cv: Vec<Trajectory> = constant_velocity_rollout(scene)?.into_iter().map(Trajectory::Poly).collect();
    let samples = vec![cv; cfg.n_samples];
    Ok(compute_report(scene, &samples, cfg)?.realism_meta)
}

/// Ids of the `n` scenes where a constant-velocity model is least realistic;
/// ties break on the id. The flag is set when fewer than `n` scenes exist.
pub fn select_challenging(scenes: &[Scene], n: usize, cfg: &MetricConfig) -> Result<(Vec<String>, bool)> {
    let mut scored: Vec<(f64, &str)> = scenes
        .iter()
        .map(|s| Ok((constant_velocity_meta(s, cfg)?, s.scene_id.as_str())))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let flagged = n > scenes.len();
    Ok((scored.into_iter().take(n).map(|(_, id)| id.to_string()).collect(), flagged))
}

/// Corpus summary: one row per metric with mean and standard deviation.
pub fn summary_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("metric,mean,std,count\n");
    let columns: [(&str, fn(&MetricReport) -> Option<f64>); 6] = [
        ("realism_meta", |r| Some(r.realism_meta)),
        ("kinematic", |r| Some(r.kinematic)),
        ("interactive", |r| Some(r.interactive)),
        ("map_adherence", |r| r.map_adherence),
        ("minade", |r| Some(r.minade)),
        ("coverage", |r| Some(r.coverage)),
    ];
    for (name, get) in columns {
        let v: Vec<f64> = reports.iter().filter_map(get).collect();
        let (m, s) = mean_std(&v);
        out.push_str(&format!("{name},{m:.6},{s:.6},{}\n", v.len()));
    }
    out
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = mean(v.iter().copied());
    let var = mean(v.iter().map(|x| (x - m) * (x - m)));
    (m, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::PolyCurve;
    use crate::scene::tests::{lane, two_agent_scene};
    use crate::scene::{Footprint, SampledTrajectory};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn braking_has_negative_longitudinal_accel() {
        // x(t) = 10 t - t^2 heading along -y after a quarter turn of the frame
        let cp = [0.0, 15.0, 21.0].map(|x| Vec2::new(0.0, -x)).to_vec();
        let c = PolyCurve::new(cp, 3.0).unwrap().elevate_to(6).unwrap();
        let times = [0.5, 1.5, 2.5];
        for (t, p) in times.iter().zip(longitudinal_profile(&Trajectory::Poly(c), &times, 0.0)) {
            assert!((p.speed - (10.0 - 2.0 * t)).abs() < 1e-9);
            assert!((p.accel + 2.0).abs() < 1e-9, "{p:?}");
            assert!(p.jerk.abs() < 1e-9);
            assert!((p.heading + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
    }

    fn line(start: Vec2, velocity: Vec2, horizon: f64) -> Trajectory {
        Trajectory::Poly(
            PolyCurve::new(vec![start, start + velocity * horizon], horizon)
                .unwrap()
                .elevate_to(6)
                .unwrap(),
        )
    }

    fn times(h: f64) -> Vec<f64> {
        MetricConfig::default().times(h)
    }

    #[test]
    fn bins_clamp_to_edges() {
        let b = BinSpec::new(0.0, 25.0, 20);
        assert_eq!(b.index(-3.0), 0);
        assert_eq!(b.index(0.0), 0);
        assert_eq!(b.index(1.25), 1);
        assert_eq!(b.index(24.99), 19);
        assert_eq!(b.index(1e9), 19);
        assert_eq!(b.index(f64::NAN), 19);
    }

    #[test]
    fn uniform_motion_features() {
        let f = kinematic_features(&line(Vec2::zeros(), Vec2::new(2.0, 0.0), 6.0), &times(6.0));
        for k in f {
            assert!((k.speed - 2.0).abs() < 1e-12);
            assert!(k.accel < 1e-12 && k.jerk < 1e-9 && k.heading_rate.abs() < 1e-12);
        }
    }

    #[test]
    fn circular_motion_has_centripetal_acceleration() {
        // degree-6 fit of a quarter turn of radius 20 driven at 10 m/s
        let r = 20.0;
        let duration = std::f64::consts::FRAC_PI_2 * r / 10.0;
        let samples: Vec<(f64, Vec2)> = (0..=60)
            .map(|i| {
                let t = duration * i as f64 / 60.0;
                let a = 10.0 * t / r;
                (t, Vec2::new(r * a.sin(), r * (1.0 - a.cos())))
            })
            .collect();
        let c = crate::poly::fit_lsq(&samples, 6, duration).unwrap();
        let ts: Vec<f64> = (1..=20).map(|i| duration * i as f64 / 21.0).collect();
        for k in kinematic_features(&Trajectory::Poly(c), &ts) {
            assert!((k.speed - 10.0).abs() <= 0.01, "{}", k.speed);
            assert!((k.accel - 5.0).abs() <= 0.05, "{}", k.accel);
            assert!((k.heading_rate - 0.5).abs() <= 0.005, "{}", k.heading_rate);
        }
    }

    #[test]
    fn jerk_of_degree_six_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec2> = (0..7).map(|_| Vec2::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0))).collect();
        let c = PolyCurve::new(pts, 6.0).unwrap();
        let f = kinematic_features(&Trajectory::Poly(c.clone()), &times(6.0));
        for (k, t) in f.iter().zip(times(6.0)) {
            assert!(k.jerk.is_finite());
            assert!((k.jerk - c.eval_derivative(t, 3).unwrap().norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_features_match_polynomial_on_smooth_data() {
        let c = PolyCurve::new(vec![Vec2::zeros(), Vec2::new(10.0, 0.0), Vec2::new(20.0, 8.0), Vec2::new(40.0, 8.0)], 6.0).unwrap();
        let points = (0..=60).map(|k| c.eval(k as f64 * 0.1).unwrap()).collect();
        let s = Trajectory::Sampled(SampledTrajectory { dt: 0.1, points });
        let ts = times(6.0);
        let fp = kinematic_features(&Trajectory::Poly(c), &ts);
        let fs = kinematic_features(&s, &ts);
        for (a, b) in fp.iter().zip(&fs).skip(2).take(50) {
            assert!((a.speed - b.speed).abs() < 0.05);
            assert!((a.accel - b.accel).abs() < 0.1);
        }
    }

    #[test]
    fn likelihood_examples() {
        let bins = BinSpec::new(0.0, 20.0, 20);
        let gt = vec![3.5; 10];
        let same: Vec<Vec<f64>> = (0..32).map(|_| vec![3.2; 10]).collect();
        let s = likelihood_score(&gt, &same, &bins, 0.5).unwrap();
        assert!((s - 32.025 / 32.5).abs() < 1e-12);
        assert!(s >= 0.9);

        let spread: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 20) as f64 + 0.5; 10]).collect();
        let s = likelihood_score(&gt, &spread, &bins, 0.5).unwrap();
        assert!((s - 1.0 / 20.0).abs() < 1e-12);

        let far = vec![19.5; 10];
        let s = likelihood_score(&far, &same, &bins, 0.5).unwrap();
        assert!((s - 0.025 / 32.5).abs() < 1e-15);
        assert!(likelihood_score(&gt, &same[..1], &bins, 0.5).is_err());
    }

    #[test]
    fn likelihood_is_monotone_away_from_the_mode() {
        let bins = BinSpec::new(0.0, 20.0, 20);
        // unimodal: most samples at 10, fewer further out
        let mut vals = Vec::new();
        for (v, n) in [(10.5, 12), (9.5, 6), (11.5, 6), (8.5, 3), (12.5, 3), (7.5, 1), (13.5, 1)] {
            vals.extend(std::iter::repeat(v).take(n));
        }
        let samples: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
        let mut prev = f64::INFINITY;
        for g in [10.5, 11.5, 12.5, 13.5, 14.5, 17.5] {
            let s = likelihood_score(&[g], &samples, &bins, 0.5).unwrap();
            assert!(s <= prev);
            prev = s;
        }
    }

    proptest! {
        #[test]
        fn likelihood_ignores_sample_order(vals in proptest::collection::vec(0.0f64..30.0, 2..40), g in -5.0f64..35.0, seed in 0u64..1000) {
            let bins = BinSpec::new(0.0, 25.0, 20);
            let samples: Vec<Vec<f64>> = vals.iter().map(|v| vec![*v]).collect();
            let mut shuffled = samples.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let a = likelihood_score(&[g], &samples, &bins, 0.5).unwrap();
            let b = likelihood_score(&[g], &shuffled, &bins, 0.5).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a > 0.0 && a <= 1.0);
        }
    }

    fn fp() -> Footprint {
        Footprint::new(4.0, 2.0)
    }

    #[test]
    fn overlap_basics() {
        let a = OrientedBox { center: Vec2::zeros(), heading: 0.0, length: 4.0, width: 2.0 };
        let mut b = a;
        b.center = Vec2::new(3.9, 0.0);
        assert!(obb_overlap(&a, &b));
        b.center = Vec2::new(4.0, 0.0);
        assert!(!obb_overlap(&a, &b));
        // rotated by 45 degrees, corner pokes in
        b.heading = std::f64::consts::FRAC_PI_4;
        b.center = Vec2::new(2.0 + 2.12, 0.0);
        assert!(obb_overlap(&a, &b));
        b.center = Vec2::new(2.0 + 2.13, 0.0);
        assert!(!obb_overlap(&a, &b));
    }

    #[test]
    fn distant_parallel_agents_never_collide() {
        let trajs = vec![line(Vec2::zeros(), Vec2::new(5.0, 0.0), 6.0), line(Vec2::new(0.0, 100.0), Vec2::new(5.0, 0.0), 6.0)];
        let t = collision_check(&trajs, &[fp(), fp()], &[0.0, 0.0], &times(6.0));
        assert_eq!(t.pairs, vec![(0, 1)]);
        assert!(t.hits.iter().all(|r| !r[0]));
    }

    #[test]
    fn head_on_overlap_time() {
        // fronts touch when the centers are 4 m apart: 60 - 20 t = 4 -> t = 2.8
        let trajs = vec![line(Vec2::zeros(), Vec2::new(10.0, 0.0), 6.0), line(Vec2::new(60.0, 0.0), Vec2::new(-10.0, 0.0), 6.0)];
        let ts = times(6.0);
        let t = collision_check(&trajs, &[fp(), fp()], &[0.0, std::f64::consts::PI], &ts);
        let first = ts[t.first_hit(0).unwrap()];
        assert!((first - 2.8).abs() <= 0.1 + 1e-9, "{first}");
        assert!(!t.pairs.iter().any(|(i, j)| i == j));
    }

    #[test]
    fn collision_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarse = times(6.0);
        let dense: Vec<f64> = (1..=600).map(|k| k as f64 * 0.01).collect();
        let mut checked = 0;
        while checked < 100 {
            let meet = Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
            let t_meet = rng.random_range(1.0..5.0);
            let mut trajs = Vec::new();
            let mut heads = Vec::new();
            for _ in 0..2 {
                let h: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(3.0..12.0) * Vec2::new(h.cos(), h.sin());
                let miss = Vec2::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
                trajs.push(line(meet + miss - v * t_meet, v, 6.0));
                heads.push(h);
            }
            let fps = [fp(), Footprint::new(rng.random_range(1.0..5.0), rng.random_range(0.8..2.5))];
            let d = collision_check(&trajs, &fps, &heads, &dense);
            let Some(first_dense) = d.first_hit(0).map(|k| dense[k]) else { continue };
            let c = collision_check(&trajs, &fps, &heads, &coarse);
            let first = c.first_hit(0).map(|k| coarse[k]);
            match first {
                Some(f) => assert!((f - first_dense).abs() <= 0.1 + 1e-9, "{f} vs {first_dense}"),
                // a grazing contact shorter than one coarse step
                None => {
                    let span = d.hits.iter().filter(|r| r[0]).count() as f64 * 0.01;
                    assert!(span < 0.1 + 1e-9);
                }
            }
            checked += 1;
        }
    }

    #[test]
    fn map_distance_examples() {
        let map = vec![lane("l", Vec2::new(-10.0, 0.0), Vec2::new(90.0, 0.0))];
        let on = line(Vec2::zeros(), Vec2::new(5.0, 0.0), 6.0);
        assert!(map_distance(&on, &map, &times(6.0)).iter().all(|d| *d <= 1e-6));
        let off = line(Vec2::new(0.0, 2.0), Vec2::new(5.0, 0.0), 6.0);
        assert!(map_distance(&off, &map, &times(6.0)).iter().all(|d| (d - 2.0).abs() < 1e-9));
    }

    #[test]
    fn map_distance_matches_grid_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut map: Vec<MapElement> = (0..6)
            .map(|i| MapElement {
                id: format!("m{i}"),
                category: MapCategory::LaneCenter,
                geometry: PolyCurve::new(
                    (0..4).map(|_| Vec2::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0))).collect(),
                    1.0,
                )
                .unwrap(),
            })
            .collect();
        map.push(MapElement { category: MapCategory::Crosswalk, ..map[0].clone() });
        map[6].geometry = map[6].geometry.translated(Vec2::new(0.5, 0.5));
        let traj = line(Vec2::new(-30.0, -10.0), Vec2::new(9.0, 4.0), 6.0);
        let ts = times(6.0);
        for (t, d) in ts.iter().zip(map_distance(&traj, &map, &ts)) {
            let p = traj.position(*t);
            let brute = map[..6]
                .iter()
                .flat_map(|m| (0..=2000).map(move |k| (m.geometry.eval_unit(k as f64 / 2000.0) - p).norm()))
                .fold(f64::INFINITY, f64::min);
            assert!(d <= brute + 1e-9 && brute - d < 0.05, "{d} vs {brute}");
        }
    }

    fn offset(traj: &Trajectory, by: Vec2) -> Trajectory {
        traj.rigid_transform(0.0, by)
    }

    #[test]
    fn minade_examples() {
        let gt = vec![line(Vec2::zeros(), Vec2::new(3.0, 0.0), 6.0), line(Vec2::new(0.0, 5.0), Vec2::new(2.0, 1.0), 6.0)];
        let ts = times(6.0);
        assert_eq!(minade(&[gt.clone()], &gt, &ts).unwrap(), 0.0);
        let s1: Vec<_> = gt.iter().map(|t| offset(t, Vec2::new(1.0, 0.0))).collect();
        let s2: Vec<_> = gt.iter().map(|t| offset(t, Vec2::new(0.0, 2.0))).collect();
        assert!((minade(&[s2.clone(), s1.clone()], &gt, &ts).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<Trajectory>> = (0..3)
            .map(|_| {
                gt.iter()
                    .map(|_| line(Vec2::new(rng.random(), rng.random()), Vec2::new(rng.random_range(0.0..4.0), rng.random()), 6.0))
                    .collect()
            })
            .collect();
        let mut best = f64::INFINITY;
        for s in &samples {
            let mut total = 0.0;
            for (a, g) in s.iter().zip(&gt) {
                let mut per = 0.0;
                for t in &ts {
                    per += (a.position(*t) - g.position(*t)).norm();
                }
                total += per / ts.len() as f64;
            }
            best = f64::min(best, total / gt.len() as f64);
        }
        assert!((minade(&samples, &gt, &ts).unwrap() - best).abs() <= 1e-12);
        for s in &samples {
            assert!(minade(&samples, &gt, &ts).unwrap() <= ade(s, &gt, &ts));
        }
    }

    fn parked(p: Vec2) -> Trajectory {
        Trajectory::Poly(PolyCurve::constant(p, 6, 6.0).unwrap())
    }

    #[test]
    fn coverage_examples() {
        let a = vec![parked(Vec2::zeros())];
        let b = vec![parked(Vec2::new(3.0, 4.0))];
        assert_eq!(coverage(&[a.clone(), a.clone()], 6.0).unwrap(), 0.0);
        assert_eq!(coverage(&[a.clone(), b.clone()], 6.0).unwrap(), 5.0);
        let c = coverage(&[a.clone(), b.clone(), a.clone()], 6.0).unwrap();
        assert!((c - 10.0 / 3.0).abs() <= 1e-12);
        assert_eq!(coverage(&[b.clone(), a.clone(), a.clone()], 6.0).unwrap(), c);
        assert!(coverage(&[a], 6.0).is_err());
    }

    fn scene_with_gt() -> Scene {
        let mut scene = two_agent_scene();
        for a in &mut scene.agents {
            let v = a.history.eval_derivative_unit(1.0, 1);
            if let Trajectory::Poly(c) = line(a.last_position(), v, 6.0) {
                a.future = Some(c);
            }
        }
        scene
    }

    #[test]
    fn perfect_samples_score_high() {
        let scene = scene_with_gt();
        let gt = scene.ground_truth().unwrap();
        let cfg = MetricConfig::default();
        let r = compute_report(&scene, &vec![gt; 32], &cfg).unwrap();
        assert!(r.kinematic >= 0.9 && r.interactive >= 0.9 && r.map_adherence.unwrap() >= 0.9, "{r:?}");
        assert_eq!(r.minade, 0.0);
        assert_eq!(r.coverage, 0.0);
        for v in [r.realism_meta, r.kinematic, r.interactive] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(compute_report(&scene, &[scene.ground_truth().unwrap()], &cfg).is_err());
    }

    #[test]
    fn map_free_scene_skips_the_map_family() {
        let mut scene = scene_with_gt();
        scene.map.clear();
        let gt = scene.ground_truth().unwrap();
        let r = compute_report(&scene, &vec![gt; 4], &MetricConfig::default()).unwrap();
        assert!(r.map_adherence.is_none());
        assert!((r.realism_meta - 0.5 * (r.kinematic + r.interactive)).abs() < 1e-12);
    }

    #[test]
    fn report_is_invariant_to_rigid_motion() {
        let scene = scene_with_gt();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vec<Trajectory>> = (0..6)
            .map(|_| {
                scene
                    .agents
                    .iter()
                    .map(|a| line(a.last_position(), Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)), 6.0))
                    .collect()
            })
            .collect();
        let cfg = MetricConfig { n_samples: 6, ..MetricConfig::default() };
        let base = compute_report(&scene, &samples, &cfg).unwrap();
        let (rot, shift) = (1.1, Vec2::new(-30.0, 12.0));
        let moved_samples: Vec<Vec<Trajectory>> =
            samples.iter().map(|s| s.iter().map(|t| t.rigid_transform(rot, shift)).collect()).collect();
        let moved = compute_report(&scene.rigid_transform(rot, shift), &moved_samples, &cfg).unwrap();
        for (a, b) in [
            (base.realism_meta, moved.realism_meta),
            (base.kinematic, moved.kinematic),
            (base.interactive, moved.interactive),
            (base.minade, moved.minade),
            (base.coverage, moved.coverage),
        ] {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b} {:?} {:?}", base.sub_scores, moved.sub_scores);
        }
    }

    #[test]
    fn hard_stop_scene_is_selected() {
        let mut scenes = Vec::new();
        for k in 0..4 {
            let mut s = scene_with_gt();
            s.scene_id = format!("s{k}");
            scenes.push(s);
        }
        // scene s2: agent a brakes to a stop instead of cruising
        let a = &mut scenes[2].agents[0];
        let p = a.last_position();
        a.future = Some(PolyCurve::new(vec![p, p + Vec2::new(6.0, 0.0), p + Vec2::new(6.0, 0.0)], 6.0).unwrap().elevate_to(6).unwrap());
        let cfg = MetricConfig::default();
        let (ids, flagged) = select_challenging(&scenes, 1, &cfg).unwrap();
        assert_eq!(ids, vec!["s2".to_string()]);
        assert!(!flagged);
        let (all, _) = select_challenging(&scenes, 4, &cfg).unwrap();
        assert_eq!(all.len(), 4);
        assert_eq!(select_challenging(&scenes, 4, &cfg).unwrap().0, all);
        let (more, flagged) = select_challenging(&scenes, 9, &cfg).unwrap();
        assert_eq!(more.len(), 4);
        assert!(flagged);
    }

    #[test]
    fn csv_summary_layout() {
        let r = MetricReport {
            scene_id: "a".into(),
            realism_meta: 0.5,
            kinematic: 0.4,
            interactive: 0.6,
            map_adherence: None,
            minade: 1.0,
            coverage: 2.0,
            sub_scores: BTreeMap::new(),
        };
        let mut r2 = r.clone();
        r2.realism_meta = 0.7;
        let csv = summary_csv(&[r, r2]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,mean,std,count");
        assert_eq!(lines[1], "realism_meta,0.600000,0.100000,2");
        assert_eq!(lines[4], "map_adherence,NaN,NaN,0");
    }
}

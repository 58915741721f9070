//! Forward noising of future displacement vectors and deterministic DDIM
//! reverse sampling.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::{PolyCurve, Vec2};
use crate::scene::{
    pack_features, stationary_correction, Pose, SampledTrajectory, Scene, SceneFeatures, Trajectory,
    FUTURE_DEGREE,
};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-5;
pub const DEFAULT_BETA_END: f64 = 0.2;
pub const DEFAULT_DDIM_STEPS: usize = 10;
/// Bound on the standardized clean-target estimate during sampling.
pub const DEFAULT_X0_CLIP: f64 = 5.0;

/// Step interval of the sequence representation, seconds.
pub const SEQUENCE_DT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    /// Index 0 is unused padding so that `beta[s]` is the value at step `s`.
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    x0_clip: Option<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn x0_clip(&self) -> Option<f64> {
        self.x0_clip
    }

    /// Replaces the sampling-time bound on the clean estimate; `None` disables it.
    pub fn with_x0_clip(mut self, clip: Option<f64>) -> Self {
        self.x0_clip = clip;
        self
    }

    /// `beta(s)` for `1 <= s <= S`.
    pub fn beta(&self, s: usize) -> f64 {
        assert!((1..=self.steps).contains(&s), "step {s} out of range");
        self.beta[s]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        assert!((1..=self.steps).contains(&s), "step {s} out of range");
        self.alpha[s]
    }

    /// Cumulative product with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        build_linear_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub x0_clip: Option<f64>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            x0_clip: Some(DEFAULT_X0_CLIP),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        if let Some(c) = self.x0_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("x0_clip must be positive and finite, got {c}")));
            }
        }
        Ok(build_linear_schedule(self.steps, self.beta_start, self.beta_end)?.with_x0_clip(self.x0_clip))
    }
}

/// `beta_s = s * (beta_end - beta_start) / S + beta_start` for `s = 1..=S`.
pub fn build_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need S >= 1 and 0 < beta_start < beta_end < 1, got S={steps}, [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = vec![0.0; steps + 1];
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    for s in 1..=steps {
        beta[s] = s as f64 * (beta_end - beta_start) / steps as f64 + beta_start;
        alpha[s] = 1.0 - beta[s];
        alpha_bar[s] = alpha_bar[s - 1] * alpha[s];
    }
    Ok(NoiseSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        x0_clip: Some(DEFAULT_X0_CLIP),
    })
}

pub fn forward_diffuse(delta0: &[f64], s: usize, sched: &NoiseSchedule, eps: &[f64]) -> Vec<f64> {
    assert_eq!(delta0.len(), eps.len());
    let ab = sched.alpha_bar(s);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    delta0.iter().zip(eps).map(|(d, e)| a * d + b * e).collect()
}

/// `K + 1` evenly spaced, strictly decreasing step indices from `S` to 0.
pub fn ddim_substeps(total: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > total {
        return Err(Error::Config(format!("DDIM step count {k} must lie in [1, {total}]")));
    }
    Ok((0..=k)
        .map(|i| ((total * (k - i)) as f64 / k as f64).round() as usize)
        .collect())
}

/// One deterministic DDIM update from step `s` to `s_prev`.
pub fn ddim_step(x_s: &[f64], eps_hat: &[f64], s: usize, s_prev: usize, sched: &NoiseSchedule) -> Vec<f64> {
    ddim_step_clipped(x_s, eps_hat, s, s_prev, sched, None)
}

/// [`ddim_step`] with the clean estimate clamped to `[-clip, clip]`.
pub fn ddim_step_clipped(
    x_s: &[f64],
    eps_hat: &[f64],
    s: usize,
    s_prev: usize,
    sched: &NoiseSchedule,
    clip: Option<f64>,
) -> Vec<f64> {
    assert!(s > s_prev, "DDIM steps must decrease ({s} -> {s_prev})");
    let bound = clip.unwrap_or(f64::INFINITY);
    let (ab, ab_prev) = (sched.alpha_bar(s), sched.alpha_bar(s_prev));
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    x_s.iter()
        .zip(eps_hat)
        .map(|(x, e)| {
            let x0 = ((x - sb * e) / sa).clamp(-bound, bound);
            pa * x0 + pb * e
        })
        .collect()
}

/// Per-dimension affine map between raw and unit-scale diffusion targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const MIN_STD: f64 = 1e-6;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for row in rows {
            if mean.is_empty() {
                mean = vec![0.0; row.len()];
                m2 = vec![0.0; row.len()];
            }
            if row.len() != mean.len() {
                return Err(Error::Shape(format!("row of length {} in a {}-dim fit", row.len(), mean.len())));
            }
            n += 1;
            for (k, v) in row.iter().enumerate() {
                let d = v - mean[k];
                mean[k] += d / n as f64;
                m2[k] += d * (v - mean[k]);
            }
        }
        if n == 0 {
            return Err(Error::Shape("cannot fit a standardizer to zero rows".into()));
        }
        let std = m2.iter().map(|v| (v / n as f64).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.std.iter().any(|s| !(*s > MIN_STD * 0.999)) {
            return Err(Error::Shape("standardizer needs matching lengths and std > 1e-6".into()));
        }
        Ok(())
    }

    pub fn standardize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn destandardize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    #[default]
    Polynomial,
    Sequence,
}

impl Representation {
    /// Width of the per-agent diffusion target.
    pub fn future_dim(self, horizon: f64) -> usize {
        match self {
            Self::Polynomial => 2 * FUTURE_DEGREE,
            Self::Sequence => 2 * (horizon / SEQUENCE_DT).round() as usize,
        }
    }

    /// Width of the per-agent history input.
    pub fn history_dim(self) -> usize {
        match self {
            Self::Polynomial => 2 * crate::scene::HISTORY_DEGREE,
            Self::Sequence => 2 * (crate::scene::HISTORY_DURATION / SEQUENCE_DT).round() as usize,
        }
    }
}

fn push_local(out: &mut Vec<f64>, frame: &Pose, d: Vec2) {
    let l = frame.rotate_to_local(d);
    out.push(l.x);
    out.push(l.y);
}

/// Future in the agent frame: control-point displacements of the degree-6
/// curve, or 10 Hz step displacements in sequence mode.
pub fn future_target(future: &PolyCurve, frame: &Pose, repr: Representation) -> Vec<f64> {
    let mut out = Vec::new();
    match repr {
        Representation::Polynomial => {
            for w in future.control_points().windows(2) {
                push_local(&mut out, frame, w[1] - w[0]);
            }
        }
        Representation::Sequence => {
            let n = (future.duration() / SEQUENCE_DT).round() as usize;
            let pts: Vec<Vec2> = (0..=n).map(|k| future.eval_unit(k as f64 / n as f64)).collect();
            for w in pts.windows(2) {
                push_local(&mut out, frame, w[1] - w[0]);
            }
        }
    }
    out
}

/// History in the agent frame for sequence mode: 10 Hz step displacements.
pub fn sequence_history(history: &PolyCurve, frame: &Pose) -> Vec<f64> {
    let n = (history.duration() / SEQUENCE_DT).round() as usize;
    let pts: Vec<Vec2> = (0..=n).map(|k| history.eval_unit(k as f64 / n as f64)).collect();
    let mut out = Vec::with_capacity(2 * n);
    for w in pts.windows(2) {
        push_local(&mut out, frame, w[1] - w[0]);
    }
    out
}

/// Inverse of [`future_target`]: rebuilds a global trajectory anchored at `start`.
pub fn trajectory_from_target(
    target: &[f64],
    frame: &Pose,
    start: Vec2,
    repr: Representation,
    horizon: f64,
) -> Result<Trajectory> {
    let steps: Vec<Vec2> = target
        .chunks_exact(2)
        .map(|c| frame.rotate_to_global(Vec2::new(c[0], c[1])))
        .collect();
    match repr {
        Representation::Polynomial => {
            let flat: Vec<f64> = steps.iter().flat_map(|v| [v.x, v.y]).collect();
            Ok(Trajectory::Poly(PolyCurve::from_displacements(
                FUTURE_DEGREE,
                start,
                &crate::poly::DisplacementVector(flat),
                horizon,
            )?))
        }
        Representation::Sequence => {
            let mut points = Vec::with_capacity(steps.len() + 1);
            let mut p = start;
            points.push(p);
            for d in steps {
                p += d;
                points.push(p);
            }
            Ok(Trajectory::Sampled(SampledTrajectory {
                dt: SEQUENCE_DT,
                points,
            }))
        }
    }
}

/// Noise predictor conditioned on a scene.
pub trait Denoiser {
    type Context;

    fn representation(&self) -> Representation;
    fn standardizer(&self) -> &Standardizer;
    fn condition(&self, scene: &Scene, features: &SceneFeatures) -> Result<Self::Context>;

    /// `x` holds `n` stacked samples of `A x dim` standardized states (row
    /// major); every agent is at step `s`. Returns the predicted noise in the
    /// same layout.
    fn predict(&self, ctx: &Self::Context, x: &[f64], n: usize, s: usize) -> Result<Vec<f64>>;
}

/// Draws `n_samples` joint futures with `k` DDIM steps. Sample `i` uses the
/// RNG stream `(seed, i)` so results do not depend on `n_samples`.
pub fn generate<D: Denoiser>(
    scene: &Scene,
    denoiser: &D,
    sched: &NoiseSchedule,
    k: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<Vec<Trajectory>>> {
    let repr = denoiser.representation();
    let dim = repr.future_dim(scene.horizon_s);
    if denoiser.standardizer().dim() != dim {
        return Err(Error::Model(format!(
            "standardizer width {} does not match target width {dim}",
            denoiser.standardizer().dim()
        )));
    }
    let features = pack_features(scene)?;
    let ctx = denoiser.condition(scene, &features)?;
    let a = scene.agents.len();
    let per = a * dim;
    let mut x = Vec::with_capacity(n_samples * per);
    for i in 0..n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        x.extend((0..per).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v));
    }
    let steps = ddim_substeps(sched.steps(), k)?;
    for w in steps.windows(2) {
        let eps = denoiser.predict(&ctx, &x, n_samples, w[0])?;
        if eps.len() != x.len() {
            return Err(Error::Model(format!("denoiser returned {} values, expected {}", eps.len(), x.len())));
        }
        x = ddim_step_clipped(&x, &eps, w[0], w[1], sched, sched.x0_clip());
    }
    let std = denoiser.standardizer();
    (0..n_samples)
        .map(|i| {
            let raw: Vec<Trajectory> = scene
                .agents
                .iter()
                .enumerate()
                .map(|(j, agent)| {
                    let z = &x[i * per + j * dim..i * per + (j + 1) * dim];
                    trajectory_from_target(
                        &std.destandardize(z),
                        &features.agent_frame[j],
                        agent.last_position(),
                        repr,
                        scene.horizon_s,
                    )
                })
                .collect::<Result<_>>()?;
            stationary_correction(scene, &raw)
        })
        .collect()
}

//! Scene encoder and noise-prediction network.
//!
//! Every token carries features in its own local frame; pairwise relative
//! poses enter the attention blocks as logit offsets and value offsets, so
//! the network output is invariant to global rigid motion of the scene.
mod checkpoint;
mod layers;
mod model;
mod train;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Representation, ScheduleConfig, Standardizer};
use crate::error::{Error, Result};
use crate::scene::{pack_features, Pose, Scene, SceneFeatures, DEFAULT_HORIZON};

pub use checkpoint::{checkpoint_load, checkpoint_load_as, checkpoint_save, CHECKPOINT_MAGIC};
pub use train::{fit_standardizer, learning_rate, train, train_with_callback, EpochLog, LrSchedule, TrainConfig};

use layers::{Dropout, ParamBuilder};
use model::{prepare, step_embedding, Batch, DenoiserContext, DenoiserNet, Encoder, PreparedScene};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub n_enc_blocks: usize,
    pub n_denoise_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub representation: Representation,
    pub horizon_s: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            n_enc_blocks: 2,
            n_denoise_blocks: 2,
            n_heads: 4,
            dropout: 0.1,
            representation: Representation::Polynomial,
            horizon_s: DEFAULT_HORIZON,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.hidden_dim % 2 != 0 {
            return Err(Error::Config("hidden_dim must be even".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.horizon_s > 0.0) {
            return Err(Error::Config("horizon_s must be positive".into()));
        }
        Ok(())
    }

    pub fn target_dim(&self) -> usize {
        self.representation.future_dim(self.horizon_s)
    }
}

/// Learned weights plus everything needed to use them.
pub struct ModelParams {
    pub config: ModelConfig,
    pub standardizer: Standardizer,
    pub schedule: ScheduleConfig,
    dtype: DType,
    vars: Vec<(String, Var)>,
    encoder: Encoder,
    denoiser: DenoiserNet,
}

impl std::fmt::Debug for ModelParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelParams")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("parameters", &self.param_count())
            .finish()
    }
}

pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    init_params_dtype(cfg, seed, DType::F32)
}

pub fn init_params_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<ModelParams> {
    cfg.validate()?;
    if !matches!(dtype, DType::F32 | DType::F64) {
        return Err(Error::Config(format!("unsupported dtype {dtype:?}")));
    }
    let mut b = ParamBuilder::new(seed, dtype);
    let encoder = Encoder::new(&mut b, cfg)?;
    let denoiser = DenoiserNet::new(&mut b, cfg, cfg.horizon_s)?;
    Ok(ModelParams {
        config: *cfg,
        standardizer: Standardizer::identity(cfg.target_dim()),
        schedule: ScheduleConfig::default(),
        dtype,
        vars: b.vars,
        encoder,
        denoiser,
    })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    pub(crate) fn vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Model(format!("no tensor named {name}")))
    }

    pub fn tensor_values(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.var(name)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    pub fn set_tensor_values(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self.var(name)?;
        if values.len() != var.elem_count() {
            return Err(Error::Shape(format!("tensor {name} holds {} values, got {}", var.elem_count(), values.len())));
        }
        let t = Tensor::from_slice(values, var.shape(), &Device::Cpu)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copy of the model in another float precision.
    pub fn to_dtype(&self, dtype: DType) -> Result<ModelParams> {
        let out = init_params_dtype(&self.config, 0, dtype)?;
        for ((_, src), (_, dst)) in self.vars.iter().zip(&out.vars) {
            dst.set(&src.as_tensor().to_dtype(dtype)?)?;
        }
        Ok(ModelParams { standardizer: self.standardizer.clone(), schedule: self.schedule, ..out })
    }

    /// Bitwise copy of the weights.
    pub fn try_clone(&self) -> Result<ModelParams> {
        let out = init_params_dtype(&self.config, 0, self.dtype)?;
        for ((_, src), (_, dst)) in self.vars.iter().zip(&out.vars) {
            dst.set(&src.as_tensor().copy()?)?;
        }
        Ok(ModelParams { standardizer: self.standardizer.clone(), schedule: self.schedule, ..out })
    }

    fn check_scene(&self, scene: &Scene) -> Result<()> {
        if (scene.horizon_s - self.config.horizon_s).abs() > 1e-9 {
            return Err(Error::Model(format!(
                "scene horizon {} differs from model horizon {}",
                scene.horizon_s, self.config.horizon_s
            )));
        }
        Ok(())
    }

    pub(crate) fn prepare(&self, scene: &Scene, features: &SceneFeatures) -> PreparedScene {
        prepare(scene, features, self.config.representation)
    }

    fn step_tensor(&self, steps: &[usize], shape: &[usize]) -> Result<Tensor> {
        let d = self.config.hidden_dim;
        let v: Vec<f64> = steps.iter().flat_map(|s| step_embedding(*s, d)).collect();
        let mut dims = shape.to_vec();
        dims.push(d);
        Ok(Tensor::from_vec(v, dims, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    fn host_tensor(&self, v: &[f64], shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_slice(v, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// `(sqrt(1 - alpha_bar_s), sqrt(alpha_bar_s))` per step. The noise
    /// estimate is `x * first + net * second`.
    fn mix_gains(&self, steps: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        let sched = self.schedule.build()?;
        let mut skip = Vec::with_capacity(steps.len());
        let mut scale = Vec::with_capacity(steps.len());
        for &s in steps {
            if s > sched.steps() {
                return Err(Error::Domain(format!("step {s} outside [0, {}]", sched.steps())));
            }
            let ab = sched.alpha_bar(s);
            skip.push((1.0 - ab).sqrt());
            scale.push(ab.sqrt());
        }
        Ok((skip, scale))
    }

    /// Noise prediction for a padded batch; `x` is `[B, A, dim]` standardized
    /// states and `steps` holds one index per agent slot.
    pub(crate) fn forward_batch(
        &self,
        batch: &Batch,
        x: &[f64],
        steps: &[usize],
        dr: &mut Option<Dropout>,
    ) -> Result<Tensor> {
        let dim = self.config.target_dim();
        let (tokens, map_tokens) = self.encoder.forward(batch, dr)?;
        let ctx = self.denoiser.context(batch, &tokens, map_tokens.as_ref())?;
        let xt = self.host_tensor(x, &[batch.b, batch.a, dim])?;
        let st = self.step_tensor(steps, &[batch.b, batch.a])?;
        let (skip, scale) = self.mix_gains(steps)?;
        let skip = self.host_tensor(&skip, &[batch.b, batch.a, 1])?;
        let scale = self.host_tensor(&scale, &[batch.b, batch.a, 1])?;
        let net = self.denoiser.forward(&ctx, &xt, &st, dr)?;
        Ok((xt.broadcast_mul(&skip)? + net.broadcast_mul(&scale)?)?)
    }
}

/// Encoder outputs for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionTokens {
    pub dim: usize,
    /// `A x D`, row major.
    pub agent_tokens: Vec<f64>,
    /// `M x D`, row major.
    pub map_tokens: Vec<f64>,
    pub agent_frame: Vec<Pose>,
    pub map_frame: Vec<Pose>,
}

pub fn encode_scene(scene: &Scene, features: &SceneFeatures, params: &ModelParams) -> Result<ConditionTokens> {
    if features.hist_disp.len() != scene.agents.len() || features.map_disp.len() != scene.map.len() {
        return Err(Error::Model("features do not match the scene".into()));
    }
    let prep = params.prepare(scene, features);
    let batch = Batch::new(&[&prep], params.config.representation, params.dtype)?;
    let (a, m) = params.encoder.forward(&batch, &mut None)?;
    let flat = |t: &Tensor| -> Result<Vec<f64>> { Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?) };
    Ok(ConditionTokens {
        dim: params.config.hidden_dim,
        agent_tokens: flat(&a)?,
        map_tokens: match m {
            Some(m) => flat(&m)?,
            None => Vec::new(),
        },
        agent_frame: features.agent_frame.clone(),
        map_frame: features.map_frame.clone(),
    })
}

/// Per-scene state reused across denoising steps.
pub struct NetContext {
    ctx: DenoiserContext,
}

impl Denoiser for ModelParams {
    type Context = NetContext;

    fn representation(&self) -> Representation {
        self.config.representation
    }

    fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    fn condition(&self, scene: &Scene, features: &SceneFeatures) -> Result<NetContext> {
        self.check_scene(scene)?;
        let prep = self.prepare(scene, features);
        let batch = Batch::new(&[&prep], self.config.representation, self.dtype)?;
        let (tokens, map_tokens) = self.encoder.forward(&batch, &mut None)?;
        Ok(NetContext { ctx: self.denoiser.context(&batch, &tokens, map_tokens.as_ref())? })
    }

    fn predict(&self, ctx: &NetContext, x: &[f64], n: usize, s: usize) -> Result<Vec<f64>> {
        if s > self.schedule.steps {
            return Err(Error::Domain(format!("step {s} outside [0, {}]", self.schedule.steps)));
        }
        let a = ctx.ctx.a;
        let dim = self.denoiser.dim();
        if x.len() != n * a * dim {
            return Err(Error::Shape(format!("state holds {} values, expected {}", x.len(), n * a * dim)));
        }
        let xt = self.host_tensor(x, &[n, a, dim])?;
        let st = self.step_tensor(&[s], &[1, 1])?;
        let (skip, scale) = self.mix_gains(&[s])?;
        let net = self.denoiser.forward(&ctx.ctx, &xt, &st, &mut None)?;
        let out = (xt.affine(skip[0], 0.0)? + net.affine(scale[0], 0.0)?)?;
        Ok(out.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

/// `(1/A) sum_i |eps_i - eps_hat_i|^2` over `A` rows of width `dim`.
pub fn loss_mse(eps: &[f64], eps_hat: &[f64], dim: usize) -> Result<f64> {
    if eps.len() != eps_hat.len() || dim == 0 || eps.len() % dim != 0 || eps.is_empty() {
        return Err(Error::Shape(format!(
            "loss inputs of length {} and {} with width {dim}",
            eps.len(),
            eps_hat.len()
        )));
    }
    let rows = eps.len() / dim;
    let total: f64 = eps.iter().zip(eps_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(total / rows as f64)
}

/// One fixed noised example for loss evaluation.
#[derive(Debug, Clone)]
pub struct LossProbe {
    pub x: Vec<f64>,
    pub eps: Vec<f64>,
    pub steps: Vec<usize>,
}

/// Inference-mode loss of `params` on a single scene.
pub fn probe_loss(params: &ModelParams, scene: &Scene, probe: &LossProbe) -> Result<f64> {
    let (loss, _) = probe_forward(params, scene, probe, false)?;
    Ok(loss)
}

fn probe_forward(
    params: &ModelParams,
    scene: &Scene,
    probe: &LossProbe,
    with_grads: bool,
) -> Result<(f64, Option<candle_core::backprop::GradStore>)> {
    let features = pack_features(scene)?;
    let prep = params.prepare(scene, &features);
    let batch = Batch::new(&[&prep], params.config.representation, params.dtype)?;
    let out = params.forward_batch(&batch, &probe.x, &probe.steps, &mut None)?;
    let eps = params.host_tensor(&probe.eps, out.dims())?;
    let loss = (out - eps)?.sqr()?.sum_all()?.affine(1.0 / batch.a as f64, 0.0)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let grads = if with_grads { Some(loss.backward()?) } else { None };
    Ok((value, grads))
}

/// Analytic gradient of [`probe_loss`] for every tensor.
pub fn probe_gradients(params: &ModelParams, scene: &Scene, probe: &LossProbe) -> Result<HashMap<String, Vec<f64>>> {
    let (_, grads) = probe_forward(params, scene, probe, true)?;
    let grads = grads.expect("requested");
    params
        .vars
        .iter()
        .map(|(name, var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?,
                None => vec![0.0; var.elem_count()],
            };
            Ok((name.clone(), g))
        })
        .collect()
}

/// Relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub tensor: String,
    pub analytic_norm: f64,
    pub relative_error: f64,
}

/// Compares every gradient entry against central differences with step `h`.
/// Needs a 64-bit model.
pub fn gradient_check(params: &ModelParams, scene: &Scene, probe: &LossProbe, h: f64) -> Result<Vec<GradCheck>> {
    if params.dtype != DType::F64 {
        return Err(Error::Model("gradient checks need a 64-bit model".into()));
    }
    let analytic = probe_gradients(params, scene, probe)?;
    let mut out = Vec::with_capacity(params.vars.len());
    for (name, _) in &params.vars {
        let base = params.tensor_values(name)?;
        let mut numeric = vec![0.0; base.len()];
        let mut work = base.clone();
        for i in 0..base.len() {
            work[i] = base[i] + h;
            params.set_tensor_values(name, &work)?;
            let up = probe_loss(params, scene, probe)?;
            work[i] = base[i] - h;
            params.set_tensor_values(name, &work)?;
            let down = probe_loss(params, scene, probe)?;
            work[i] = base[i];
            numeric[i] = (up - down) / (2.0 * h);
        }
        params.set_tensor_values(name, &base)?;
        let g = &analytic[name];
        let diff = g.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = na.max(nn);
        out.push(GradCheck {
            tensor: name.clone(),
            analytic_norm: na,
            relative_error: if scale < 1e-10 { diff } else { diff / scale },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{generate, NoiseSchedule};
    use crate::poly::Vec2;
    use crate::scene::tests::{agent, lane, two_agent_scene};
    use crate::scene::MapCategory;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { hidden_dim: 8, n_enc_blocks: 1, n_denoise_blocks: 1, n_heads: 2, dropout: 0.0, ..ModelConfig::default() }
    }

    fn toy_scene() -> Scene {
        let mut s = two_agent_scene();
        s.map.push(lane("l1", Vec2::new(20.0, -30.0), Vec2::new(20.0, 40.0)));
        let mut cw = lane("c0", Vec2::new(5.0, -6.0), Vec2::new(5.0, 6.0));
        cw.category = MapCategory::Crosswalk;
        s.map.push(cw);
        s
    }

    fn probe(params: &ModelParams, a: usize, seed: u64) -> LossProbe {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a * params.config.target_dim();
        LossProbe {
            x: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
            eps: (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
            // the network's share of the prediction shrinks like sqrt(alpha_bar),
            // so very noisy steps leave gradients below the difference noise floor
            steps: (0..a).map(|_| rng.random_range(1..=200)).collect(),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { dropout: 1.0, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn init_is_deterministic_and_counts_grow() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 5).unwrap();
        let b = init_params(&cfg, 5).unwrap();
        for name in a.tensor_names() {
            let (x, y) = (a.tensor_values(name).unwrap(), b.tensor_values(name).unwrap());
            assert!(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let big = init_params(&ModelConfig { hidden_dim: 128, ..cfg }, 5).unwrap();
        assert!(big.param_count() > a.param_count());
        let seq = init_params(&ModelConfig { representation: Representation::Sequence, ..cfg }, 5).unwrap();
        assert!(seq.param_count() > a.param_count());
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_mse(&[1.0, 2.0], &[1.0, 2.0], 2).unwrap(), 0.0);
        let mut e = vec![0.0; 12];
        e[3] = 1.0;
        assert_eq!(loss_mse(&e, &[0.0; 12], 12).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..24).map(|_| rng.random()).collect();
        let b: Vec<f64> = (0..24).map(|_| rng.random()).collect();
        let mut reference = 0.0;
        for agent in 0..2 {
            let mut sq = 0.0;
            for k in 0..12 {
                let d = a[agent * 12 + k] - b[agent * 12 + k];
                sq += d * d;
            }
            reference += sq;
        }
        reference /= 2.0;
        assert!((loss_mse(&a, &b, 12).unwrap() - reference).abs() <= 1e-12);
        assert!(loss_mse(&a, &b[..12], 12).is_err());
    }

    #[test]
    fn tokens_are_invariant_to_rigid_motion() {
        let params = init_params_dtype(&tiny(), 2, DType::F64).unwrap();
        let scene = toy_scene();
        let base = encode_scene(&scene, &pack_features(&scene).unwrap(), &params).unwrap();
        let moved = scene.rigid_transform(2.3, Vec2::new(140.0, -75.0));
        let other = encode_scene(&moved, &pack_features(&moved).unwrap(), &params).unwrap();
        for (a, b) in base.agent_tokens.iter().chain(&base.map_tokens).zip(other.agent_tokens.iter().chain(&other.map_tokens)) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn agent_permutation_permutes_outputs() {
        let params = init_params_dtype(&tiny(), 3, DType::F64).unwrap();
        let mut scene = toy_scene();
        scene.agents.push(agent("c", Vec2::new(-5.0, -3.0), Vec2::new(1.0, 1.0)));
        let mut swapped = scene.clone();
        swapped.agents.swap(0, 2);
        swapped.map.swap(0, 1);
        let t0 = encode_scene(&scene, &pack_features(&scene).unwrap(), &params).unwrap();
        let t1 = encode_scene(&swapped, &pack_features(&swapped).unwrap(), &params).unwrap();
        let d = 8;
        let row = |v: &Vec<f64>, i: usize| v[i * d..(i + 1) * d].to_vec();
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            let (a, b) = (row(&t0.agent_tokens, i), row(&t1.agent_tokens, j));
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        }
        assert!(row(&t0.map_tokens, 0).iter().zip(row(&t1.map_tokens, 1)).all(|(x, y)| (x - y).abs() < 1e-12));

        let dim = params.config.target_dim();
        let p = probe(&params, 3, 4);
        let ctx0 = params.condition(&scene, &pack_features(&scene).unwrap()).unwrap();
        let ctx1 = params.condition(&swapped, &pack_features(&swapped).unwrap()).unwrap();
        let mut xs = p.x.clone();
        for k in 0..dim {
            xs.swap(k, 2 * dim + k);
        }
        let e0 = params.predict(&ctx0, &p.x, 1, 400).unwrap();
        let e1 = params.predict(&ctx1, &xs, 1, 400).unwrap();
        for (i, j) in [(0, 2), (1, 1), (2, 0)] {
            for k in 0..dim {
                assert!((e0[i * dim + k] - e1[j * dim + k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_scene_gives_finite_tokens() {
        let params = init_params(&tiny(), 1).unwrap();
        let mut scene = toy_scene();
        scene.agents[0] = agent("a", Vec2::new(3.0, 3.0), Vec2::zeros());
        scene.agents[1] = agent("b", Vec2::new(3.0, 3.0), Vec2::zeros());
        let t = encode_scene(&scene, &pack_features(&scene).unwrap(), &params).unwrap();
        assert!(t.agent_tokens.iter().chain(&t.map_tokens).all(|v| v.is_finite()));
        scene.map.clear();
        let t = encode_scene(&scene, &pack_features(&scene).unwrap(), &params).unwrap();
        assert!(t.map_tokens.is_empty() && t.agent_tokens.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn predict_shapes_and_inference_determinism() {
        let params = init_params(&ModelConfig { dropout: 0.3, ..tiny() }, 1).unwrap();
        for extra in 0..3 {
            let mut scene = toy_scene();
            for k in 0..extra {
                scene.agents.push(agent(&format!("x{k}"), Vec2::new(k as f64 * 9.0, -9.0), Vec2::new(1.0, 0.0)));
            }
            let a = scene.agents.len();
            let ctx = params.condition(&scene, &pack_features(&scene).unwrap()).unwrap();
            let p = probe(&params, a, 2);
            let e = params.predict(&ctx, &p.x, 1, 10).unwrap();
            assert_eq!(e.len(), a * 12);
            let again = params.predict(&ctx, &p.x, 1, 10).unwrap();
            assert!(e.iter().zip(&again).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(params.predict(&ctx, &p.x, 1, 1001).is_err());
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = init_params_dtype(&tiny(), 11, DType::F64).unwrap();
        let scene = toy_scene();
        let p = probe(&params, 2, 12);
        let checks = gradient_check(&params, &scene, &p, 1e-4).unwrap();
        assert_eq!(checks.len(), params.tensor_names().count());
        for c in &checks {
            assert!(c.relative_error < 1e-4, "{c:?}");
        }
        assert!(checks.iter().filter(|c| c.analytic_norm > 0.0).count() > checks.len() / 2);
    }

    #[test]
    fn generation_is_equivariant_in_double_precision() {
        let params = init_params_dtype(&tiny(), 6, DType::F64).unwrap();
        let scene = toy_scene();
        let sched = NoiseSchedule::default();
        let base = generate(&scene, &params, &sched, 5, 2, 9).unwrap();
        let (rot, shift) = (-0.7, Vec2::new(55.0, 180.0));
        let moved = generate(&scene.rigid_transform(rot, shift), &params, &sched, 5, 2, 9).unwrap();
        for (s0, s1) in base.iter().zip(&moved) {
            for (t0, t1) in s0.iter().zip(s1) {
                let t0 = t0.rigid_transform(rot, shift);
                for k in 0..=60 {
                    let t = k as f64 * 0.1;
                    assert!((t0.position(t) - t1.position(t)).norm() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn precision_copies_agree() {
        let params = init_params(&tiny(), 4).unwrap();
        let wide = params.to_dtype(DType::F64).unwrap();
        assert_eq!(wide.dtype(), DType::F64);
        let scene = toy_scene();
        let p = probe(&params, 2, 1);
        let a = probe_loss(&params, &scene, &p).unwrap();
        let b = probe_loss(&wide, &scene, &p).unwrap();
        assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        let copy = params.try_clone().unwrap();
        assert_eq!(probe_loss(&copy, &scene, &p).unwrap(), a);
    }
}

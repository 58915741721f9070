use candle_core::{DType, Device, Tensor};

use super::layers::{dropout, Attention, Dropout, FeedForward, KeyValues, LayerNorm, Linear, Mlp, ParamBuilder, RelTerms};
use super::ModelConfig;
use crate::diffusion::{sequence_history, Representation};
use crate::error::{Error, Result};
use crate::scene::{wrap_angle, Pose, Scene, SceneFeatures};

pub(crate) const FOURIER_BANDS: usize = 6;
pub(crate) const REL_DIM: usize = 4 * FOURIER_BANDS + 3;
pub(crate) const MAP_INPUT: usize = 6 + 2;
const DISP_SCALE: f64 = 0.1;
const SEQ_SCALE: f64 = 0.5;
const DIST_SCALE: f64 = 50.0;

pub(crate) fn agent_input_dim(repr: Representation) -> usize {
    repr.history_dim() + 2 + 4
}

/// Fourier features of the pose of `k` seen from `q`.
pub(crate) fn relative_features(q: &Pose, k: &Pose, out: &mut [f64]) {
    let d = q.rotate_to_local(k.position - q.position);
    for band in 0..FOURIER_BANDS {
        let wavelength = 2.0 * 100f64.powf(band as f64 / (FOURIER_BANDS - 1) as f64);
        let w = std::f64::consts::TAU / wavelength;
        let (sx, cx) = (w * d.x).sin_cos();
        let (sy, cy) = (w * d.y).sin_cos();
        out[4 * band..4 * band + 4].copy_from_slice(&[sx, cx, sy, cy]);
    }
    let (s, c) = wrap_angle(k.heading - q.heading).sin_cos();
    out[4 * FOURIER_BANDS] = s;
    out[4 * FOURIER_BANDS + 1] = c;
    out[4 * FOURIER_BANDS + 2] = d.norm() / DIST_SCALE;
}

/// Host-side network inputs of one scene.
#[derive(Debug, Clone)]
pub(crate) struct PreparedScene {
    pub a: usize,
    pub m: usize,
    pub agent_in: Vec<f64>,
    pub map_in: Vec<f64>,
    /// `(a + m)^2` rows of relative features, query major.
    pub rel: Vec<f64>,
}

pub(crate) fn prepare(scene: &Scene, f: &SceneFeatures, repr: Representation) -> PreparedScene {
    let a = scene.agents.len();
    let m = scene.map.len();
    let mut agent_in = Vec::with_capacity(a * agent_input_dim(repr));
    for (i, agent) in scene.agents.iter().enumerate() {
        match repr {
            Representation::Polynomial => agent_in.extend(f.hist_disp[i].iter().map(|v| v * DISP_SCALE)),
            Representation::Sequence => {
                agent_in.extend(sequence_history(&agent.history, &f.agent_frame[i]).iter().map(|v| v / SEQ_SCALE))
            }
        }
        agent_in.extend(f.tw[i].iter().map(|t| t / crate::scene::HISTORY_DURATION));
        agent_in.extend(f.agent_cat[i]);
    }
    let mut map_in = Vec::with_capacity(m * MAP_INPUT);
    for j in 0..m {
        map_in.extend(f.map_disp[j].iter().map(|v| v * DISP_SCALE));
        map_in.extend(f.map_cat[j]);
    }
    let poses: Vec<&Pose> = f.agent_frame.iter().chain(&f.map_frame).collect();
    let n = poses.len();
    let mut rel = vec![0.0; n * n * REL_DIM];
    for (qi, q) in poses.iter().enumerate() {
        for (ki, k) in poses.iter().enumerate() {
            let o = (qi * n + ki) * REL_DIM;
            relative_features(q, k, &mut rel[o..o + REL_DIM]);
        }
    }
    PreparedScene { a, m, agent_in, map_in, rel }
}

/// Padded tensors for a batch of scenes.
pub(crate) struct Batch {
    pub b: usize,
    pub a: usize,
    pub m: usize,
    agent_in: Tensor,
    map_in: Option<Tensor>,
    rel: Tensor,
    /// `[B, 1, 1, A + M]`
    token_mask: Tensor,
}

impl Batch {
    pub fn new(scenes: &[&PreparedScene], repr: Representation, dtype: DType) -> Result<Self> {
        let b = scenes.len();
        let a = scenes.iter().map(|s| s.a).max().unwrap_or(0);
        let m = scenes.iter().map(|s| s.m).max().unwrap_or(0);
        if a == 0 {
            return Err(Error::Shape("batch without agents".into()));
        }
        let n = a + m;
        let ia = agent_input_dim(repr);
        let mut agent_in = vec![0.0; b * a * ia];
        let mut map_in = vec![0.0; b * m * MAP_INPUT];
        let mut rel = vec![0.0; b * n * n * REL_DIM];
        let mut mask = vec![0.0; b * n];
        for (bi, s) in scenes.iter().enumerate() {
            agent_in[bi * a * ia..][..s.a * ia].copy_from_slice(&s.agent_in);
            map_in[bi * m * MAP_INPUT..][..s.m * MAP_INPUT].copy_from_slice(&s.map_in);
            let token = |t: usize| if t < s.a { t } else { a + t - s.a };
            let sn = s.a + s.m;
            for qi in 0..sn {
                for ki in 0..sn {
                    let src = (qi * sn + ki) * REL_DIM;
                    let dst = ((bi * n + token(qi)) * n + token(ki)) * REL_DIM;
                    rel[dst..dst + REL_DIM].copy_from_slice(&s.rel[src..src + REL_DIM]);
                }
                mask[bi * n + token(qi)] = 1.0;
            }
        }
        let dev = Device::Cpu;
        let t = |v: Vec<f64>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?) };
        Ok(Self {
            b,
            a,
            m,
            agent_in: t(agent_in, &[b, a, ia])?,
            map_in: if m > 0 { Some(t(map_in, &[b, m, MAP_INPUT])?) } else { None },
            rel: t(rel, &[b, n, n, REL_DIM])?,
            token_mask: t(mask, &[b, 1, 1, n])?,
        })
    }
}

struct EncoderLayer {
    norm: LayerNorm,
    attn: Attention,
    ffn: FeedForward,
}

pub(crate) struct Encoder {
    agent_emb: Mlp,
    map_emb: Mlp,
    rel: Mlp,
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            agent_emb: b.mlp("encoder.agent_embed", agent_input_dim(cfg.representation), d, d)?,
            map_emb: b.mlp("encoder.map_embed", MAP_INPUT, d, d)?,
            rel: b.mlp("encoder.rel_embed", REL_DIM, d, d)?,
            layers: (0..cfg.n_enc_blocks)
                .map(|i| {
                    Ok(EncoderLayer {
                        norm: b.layer_norm(&format!("encoder.block{i}.norm"), d)?,
                        attn: Attention::new(b, &format!("encoder.block{i}.attn"), d, cfg.n_heads)?,
                        ffn: FeedForward::new(b, &format!("encoder.block{i}.ffn"), d)?,
                    })
                })
                .collect::<Result<_>>()?,
            norm: b.layer_norm("encoder.norm", d)?,
        })
    }

    /// Agent tokens `[B, A, D]` and map tokens `[B, M, D]`.
    pub fn forward(&self, batch: &Batch, dr: &mut Option<Dropout>) -> Result<(Tensor, Option<Tensor>)> {
        let agents = self.agent_emb.forward(&batch.agent_in)?;
        let mut x = match &batch.map_in {
            Some(m) => Tensor::cat(&[&agents, &self.map_emb.forward(m)?], 1)?,
            None => agents,
        };
        let rel = self.rel.forward(&batch.rel)?;
        for layer in &self.layers {
            let h = layer.norm.forward(&x)?;
            let kv = layer.attn.key_values(&h)?;
            let terms = layer.attn.rel_terms(&rel)?;
            let y = dropout(dr, layer.attn.forward(&h, &kv, &terms, Some(&batch.token_mask))?)?;
            x = layer.ffn.forward(&(x + y)?, dr)?;
        }
        let x = self.norm.forward(&x)?;
        let agent_tokens = x.narrow(1, 0, batch.a)?;
        let map_tokens = if batch.m > 0 { Some(x.narrow(1, batch.a, batch.m)?) } else { None };
        Ok((agent_tokens, map_tokens))
    }
}

struct DenoiserLayer {
    cross_norm: LayerNorm,
    cross: Attention,
    self_norm: LayerNorm,
    self_attn: Attention,
    ffn: FeedForward,
}

pub(crate) struct DenoiserNet {
    input: Mlp,
    step: Mlp,
    cond: Linear,
    rel: Mlp,
    layers: Vec<DenoiserLayer>,
    norm: LayerNorm,
    head: Linear,
    dim: usize,
}

struct LayerContext {
    cross: Option<(KeyValues, RelTerms)>,
    self_rel: RelTerms,
}

/// Everything the denoiser needs that does not depend on the noised state.
pub(crate) struct DenoiserContext {
    cond: Tensor,
    layers: Vec<LayerContext>,
    map_mask: Option<Tensor>,
    agent_mask: Tensor,
    pub a: usize,
}

impl DenoiserNet {
    pub fn new(b: &mut ParamBuilder, cfg: &ModelConfig, horizon: f64) -> Result<Self> {
        let d = cfg.hidden_dim;
        let dim = cfg.representation.future_dim(horizon);
        Ok(Self {
            input: b.mlp("denoiser.input", dim, d, d)?,
            step: b.mlp("denoiser.step", d, d, d)?,
            cond: b.linear("denoiser.cond", d, d)?,
            rel: b.mlp("denoiser.rel_embed", REL_DIM, d, d)?,
            layers: (0..cfg.n_denoise_blocks)
                .map(|i| {
                    Ok(DenoiserLayer {
                        cross_norm: b.layer_norm(&format!("denoiser.block{i}.cross_norm"), d)?,
                        cross: Attention::new(b, &format!("denoiser.block{i}.cross"), d, cfg.n_heads)?,
                        self_norm: b.layer_norm(&format!("denoiser.block{i}.self_norm"), d)?,
                        self_attn: Attention::new(b, &format!("denoiser.block{i}.self"), d, cfg.n_heads)?,
                        ffn: FeedForward::new(b, &format!("denoiser.block{i}.ffn"), d)?,
                    })
                })
                .collect::<Result<_>>()?,
            norm: b.layer_norm("denoiser.norm", d)?,
            head: b.linear("denoiser.head", d, dim)?,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn context(&self, batch: &Batch, agent_tokens: &Tensor, map_tokens: Option<&Tensor>) -> Result<DenoiserContext> {
        let (a, m) = (batch.a, batch.m);
        let rel_q = batch.rel.narrow(1, 0, a)?;
        let rel_aa = self.rel.forward(&rel_q.narrow(2, 0, a)?)?;
        let rel_am = match map_tokens {
            Some(_) => Some(self.rel.forward(&rel_q.narrow(2, a, m)?)?),
            None => None,
        };
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let cross = match (map_tokens, &rel_am) {
                    (Some(mt), Some(r)) => Some((l.cross.key_values(mt)?, l.cross.rel_terms(r)?)),
                    _ => None,
                };
                Ok(LayerContext { cross, self_rel: l.self_attn.rel_terms(&rel_aa)? })
            })
            .collect::<Result<_>>()?;
        Ok(DenoiserContext {
            cond: self.cond.forward(agent_tokens)?,
            layers,
            map_mask: if m > 0 { Some(batch.token_mask.narrow(3, a, m)?) } else { None },
            agent_mask: batch.token_mask.narrow(3, 0, a)?,
            a,
        })
    }

    /// `x` is `[Bx, A, dim]` and `step_emb` is broadcastable to `[Bx, A, D]`;
    /// the context batch is either `Bx` or 1.
    pub fn forward(&self, ctx: &DenoiserContext, x: &Tensor, step_emb: &Tensor, dr: &mut Option<Dropout>) -> Result<Tensor> {
        let mut h = self.input.forward(x)?.broadcast_add(&self.step.forward(step_emb)?)?.broadcast_add(&ctx.cond)?;
        for (layer, lc) in self.layers.iter().zip(&ctx.layers) {
            if let Some((kv, terms)) = &lc.cross {
                let q = layer.cross_norm.forward(&h)?;
                let y = dropout(dr, layer.cross.forward(&q, kv, terms, ctx.map_mask.as_ref())?)?;
                h = (h + y)?;
            }
            let q = layer.self_norm.forward(&h)?;
            let kv = layer.self_attn.key_values(&q)?;
            let y = dropout(dr, layer.self_attn.forward(&q, &kv, &lc.self_rel, Some(&ctx.agent_mask))?)?;
            h = layer.ffn.forward(&(h + y)?, dr)?;
        }
        self.head.forward(&self.norm.forward(&h)?)
    }
}

/// Sinusoidal embedding of a diffusion step index.
pub(crate) fn step_embedding(s: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let (sn, cs) = (s as f64 * freq).sin_cos();
        out[k] = sn;
        out[half + k] = cs;
    }
    out
}

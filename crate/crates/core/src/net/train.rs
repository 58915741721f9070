use std::time::Instant;

use candle_core::D;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layers::Dropout;
use super::model::{Batch, PreparedScene};
use super::{init_params, ModelConfig, ModelParams};
use crate::diffusion::{forward_diffuse, future_target, Representation, ScheduleConfig, Standardizer};
use crate::error::{Error, Result};
use crate::scene::{pack_features, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub schedule: LrSchedule,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            schedule: LrSchedule::Cosine,
            warmup_epochs: 10,
            epochs: 64,
            batch_size: 32,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.weight_decay < 0.0 {
            return Err(Error::Config("lr and batch_size must be positive, weight_decay non-negative".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at a fractional epoch: linear warmup from zero, then a
/// cosine decay to zero at the last epoch.
pub fn learning_rate(cfg: &TrainConfig, epoch: f64) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.lr,
        LrSchedule::Cosine => {
            let w = cfg.warmup_epochs as f64;
            if epoch < w {
                return cfg.lr * epoch / w;
            }
            let span = cfg.epochs as f64 - w;
            let progress = if span > 0.0 { ((epoch - w) / span).clamp(0.0, 1.0) } else { 1.0 };
            0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

fn usable(corpus: &[Scene], horizon: f64) -> Vec<&Scene> {
    corpus
        .iter()
        .filter(|s| {
            let ok = s.has_futures() && (s.horizon_s - horizon).abs() < 1e-9;
            if !ok {
                log::warn!("skipping scene {}: missing futures or horizon mismatch", s.scene_id);
            }
            ok
        })
        .collect()
}

fn scene_targets(scene: &Scene, repr: Representation) -> Result<Vec<Vec<f64>>> {
    scene
        .agents
        .iter()
        .map(|a| {
            let future = a
                .future
                .as_ref()
                .ok_or_else(|| Error::Model(format!("agent {} lacks a future", a.id)))?;
            Ok(future_target(future, &a.last_pose().0, repr))
        })
        .collect()
}

/// Per-dimension statistics of the agent-frame targets of a corpus.
pub fn fit_standardizer(corpus: &[Scene], repr: Representation, horizon: f64) -> Result<Standardizer> {
    let scenes = usable(corpus, horizon);
    let rows: Vec<Vec<f64>> = scenes
        .iter()
        .map(|s| scene_targets(s, repr))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    Standardizer::fit(rows.iter().map(|r| r.as_slice()))
}

pub fn train(
    corpus: &[Scene],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    train_with_callback(corpus, mcfg, tcfg, sched, |_| {})
}

struct Example {
    prep: PreparedScene,
    /// Standardized targets, `A x dim`.
    target: Vec<f64>,
}

pub fn train_with_callback(
    corpus: &[Scene],
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    sched_cfg: &ScheduleConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(ModelParams, Vec<EpochLog>)> {
    tcfg.validate()?;
    let sched = sched_cfg.build()?;
    let mut params = init_params(mcfg, tcfg.seed)?;
    params.schedule = *sched_cfg;
    let scenes = usable(corpus, mcfg.horizon_s);
    if scenes.is_empty() {
        return Err(Error::Model("no training scenes with ground-truth futures".into()));
    }
    let repr = mcfg.representation;
    params.standardizer = fit_standardizer(corpus, repr, mcfg.horizon_s)?;
    if tcfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }

    let examples: Vec<Example> = scenes
        .par_iter()
        .map(|s| {
            let f = pack_features(s)?;
            let target = scene_targets(s, repr)?.iter().flat_map(|t| params.standardizer.standardize(t)).collect();
            Ok(Example { prep: params.prepare(s, &f), target })
        })
        .collect::<Result<_>>()?;

    let dim = mcfg.target_dim();
    let vars = params.vars().iter().map(|(_, v)| v.clone()).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW { lr: 0.0, weight_decay: tcfg.weight_decay, ..ParamsAdamW::default() },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    rng.set_stream(1);
    let mut dr = Some(Dropout::new(mcfg.dropout, tcfg.seed.wrapping_add(0x5eed)));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batches = examples.len().div_ceil(tcfg.batch_size);
    let mut logs = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (j, chunk) in order.chunks(tcfg.batch_size).enumerate() {
            lr = learning_rate(tcfg, epoch as f64 + j as f64 / batches as f64);
            opt.set_learning_rate(lr);
            let preps: Vec<&PreparedScene> = chunk.iter().map(|i| &examples[*i].prep).collect();
            let batch = Batch::new(&preps, repr, params.dtype())?;
            let (b, a) = (batch.b, batch.a);
            let mut x = vec![0.0; b * a * dim];
            let mut eps = vec![0.0; b * a * dim];
            let mut steps = vec![1usize; b * a];
            let mut weights = vec![0.0; b * a];
            for (bi, idx) in chunk.iter().enumerate() {
                let ex = &examples[*idx];
                for ai in 0..ex.prep.a {
                    let s = rng.random_range(1..=sched.steps());
                    let e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let slot = bi * a + ai;
                    let noised = forward_diffuse(&ex.target[ai * dim..(ai + 1) * dim], s, &sched, &e);
                    x[slot * dim..(slot + 1) * dim].copy_from_slice(&noised);
                    eps[slot * dim..(slot + 1) * dim].copy_from_slice(&e);
                    steps[slot] = s;
                    weights[slot] = 1.0 / (ex.prep.a * b) as f64;
                }
            }
            let out = params.forward_batch(&batch, &x, &steps, &mut dr)?;
            let eps_t = params.host_tensor(&eps, &[b, a, dim])?;
            let w_t = params.host_tensor(&weights, &[b, a])?;
            let loss = (out - eps_t)?.sqr()?.sum(D::Minus1)?.mul(&w_t)?.sum_all()?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss {value} at epoch {} batch {j} (lr {lr:.3e}, {b} scenes, max {a} agents)",
                    epoch + 1
                )));
            }
            opt.backward_step(&loss)?;
            loss_sum += value * b as f64;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: loss_sum / examples.len() as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!("epoch {} loss {:.4} lr {:.2e} ({:.1}s)", log.epoch, log.mean_loss, log.lr, log.seconds);
        on_epoch(&log);
        logs.push(log);
    }
    Ok((params, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_corpus, DatagenConfig};

    #[test]
    fn warmup_then_cosine() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate(&cfg, 0.0), 0.0);
        assert!((learning_rate(&cfg, 5.0) - 2.5e-4).abs() < 1e-15);
        assert!((learning_rate(&cfg, 10.0) - 5e-4).abs() < 1e-15);
        assert!(learning_rate(&cfg, 64.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 0..=54 {
            let lr = learning_rate(&cfg, 10.0 + k as f64);
            assert!(lr <= prev);
            prev = lr;
        }
        let mut prev = -1.0;
        for k in 0..=10 {
            let lr = learning_rate(&cfg, k as f64);
            assert!(lr > prev);
            prev = lr;
        }
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig { warmup_epochs: 70, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    }

    fn small_corpus() -> Vec<Scene> {
        let cfg = DatagenConfig { n_scenes: 6, agents_per_scene: [2, 3], map_elements: [4, 8], ..DatagenConfig::default() };
        generate_corpus(&cfg).unwrap().into_iter().map(|g| g.scene).collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig { hidden_dim: 16, n_enc_blocks: 1, n_denoise_blocks: 1, n_heads: 2, ..ModelConfig::default() }
    }

    #[test]
    fn zero_epochs_keeps_initial_weights() {
        let corpus = small_corpus();
        let tcfg = TrainConfig { epochs: 0, warmup_epochs: 0, ..TrainConfig::default() };
        let (p, logs) = train(&corpus, &tiny(), &tcfg, &ScheduleConfig::default()).unwrap();
        assert!(logs.is_empty());
        let init = init_params(&tiny(), tcfg.seed).unwrap();
        for name in init.tensor_names() {
            let (a, b) = (init.tensor_values(name).unwrap(), p.tensor_values(name).unwrap());
            assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(p.standardizer.dim(), 12);
    }

    #[test]
    fn short_run_is_deterministic_and_skips_scenes_without_futures() {
        let mut corpus = small_corpus();
        let mut bare = corpus[0].clone();
        for a in &mut bare.agents {
            a.future = None;
        }
        bare.scene_id = "bare".into();
        corpus.push(bare);
        let tcfg = TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 4, ..TrainConfig::default() };
        let (p1, l1) = train(&corpus, &tiny(), &tcfg, &ScheduleConfig::default()).unwrap();
        let (p2, l2) = train(&corpus, &tiny(), &tcfg, &ScheduleConfig::default()).unwrap();
        assert_eq!(l1.len(), 2);
        assert_eq!(l1, l2.iter().map(|l| EpochLog { seconds: l1[l.epoch - 1].seconds, ..l.clone() }).collect::<Vec<_>>());
        for name in p1.tensor_names() {
            assert_eq!(p1.tensor_values(name).unwrap(), p2.tensor_values(name).unwrap());
        }
        assert!(l1.iter().all(|l| l.mean_loss.is_finite() && l.mean_loss > 0.0));
    }

    #[test]
    fn no_usable_scenes_is_an_error() {
        let mut corpus = small_corpus();
        for s in &mut corpus {
            for a in &mut s.agents {
                a.future = None;
            }
        }
        assert!(train(&corpus, &tiny(), &TrainConfig::default(), &ScheduleConfig::default()).is_err());
    }
}

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use epd_core::datagen::write_corpus;
use epd_core::diffusion::generate;
use epd_core::metrics::{compute_report, select_challenging, summary_csv, MetricReport};
use epd_core::net::{checkpoint_load, checkpoint_save, train_with_callback, ModelParams};
use epd_core::scene::{
    constant_velocity_rollout, sample_set_to_json, samples_io_read, scene_io_read, SampleSet, Scene, Trajectory,
};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{CliError, SamplerArg};

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub(crate) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// Records the resolved configuration next to the artifacts it produced.
fn write_run_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_dir(out)?;
    write_file(&out.join("run_config.json"), cfg.to_json() + "\n")
}

pub(crate) fn load_scenes(path: &Path) -> Result<Vec<Scene>, CliError> {
    let scenes = scene_io_read(path)?;
    if scenes.is_empty() {
        return Err(CliError::Data(format!("{} holds no scenes", path.display())));
    }
    Ok(scenes)
}

/// Seed of the sample stream for scene `index`, decorrelated across scenes.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub enum Sampler {
    Model(Box<ModelParams>),
    ConstantVelocity,
}

impl Sampler {
    pub fn resolve(model: Option<&Path>, kind: Option<SamplerArg>) -> Result<Self, CliError> {
        match (kind, model) {
            (Some(SamplerArg::Cv), _) => Ok(Self::ConstantVelocity),
            (_, Some(path)) => Ok(Self::Model(Box::new(checkpoint_load(path)?))),
            (Some(SamplerArg::Model), None) => Err(CliError::Config("--sampler model needs --model".into())),
            (None, None) => Err(CliError::Config("give --model <checkpoint> or --sampler cv".into())),
        }
    }

    pub fn sample(&self, scene: &Scene, cfg: &RunConfig, seed: u64) -> Result<Vec<Vec<Trajectory>>, CliError> {
        match self {
            Self::Model(p) => {
                let sched = p.schedule.build()?;
                Ok(generate(scene, p.as_ref(), &sched, cfg.ddim_steps, cfg.samples, seed)?)
            }
            Self::ConstantVelocity => {
                let cv: Vec<Trajectory> = constant_velocity_rollout(scene)?.into_iter().map(Trajectory::Poly).collect();
                Ok(vec![cv; cfg.samples])
            }
        }
    }
}

fn sample_all(scenes: &[Scene], sampler: &Sampler, cfg: &RunConfig, seed: u64) -> Result<Vec<SampleSet>, CliError> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            Ok(SampleSet {
                scene_id: scene.scene_id.clone(),
                agent_ids: scene.agents.iter().map(|a| a.id.clone()).collect(),
                samples: sampler.sample(scene, cfg, scene_seed(seed, i))?,
            })
        })
        .collect()
}

pub fn datagen(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.require_seed("datagen")?;
    write_run_config(cfg, out)?;
    let path = out.join("scenes.jsonl");
    let t = Instant::now();
    let scenes = write_corpus(&cfg.datagen, &path)?;
    log::info!("wrote {} scenes to {} in {:.1?}", scenes.len(), path.display(), t.elapsed());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    cfg.require_seed("train")?;
    let scenes = load_scenes(data)?;
    write_run_config(cfg, out)?;
    let mut log_csv = String::from("epoch,mean_loss,lr,seconds\n");
    let (params, logs) = train_with_callback(&scenes, &cfg.model, &cfg.train, &cfg.schedule, |e| {
        log::info!("epoch {} loss {:.5} lr {:.2e} ({:.1} s)", e.epoch, e.mean_loss, e.lr, e.seconds);
    })?;
    for e in &logs {
        log_csv.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.lr, e.seconds));
    }
    write_file(&out.join("train_log.csv"), log_csv)?;
    let ckpt = out.join("model.ckpt");
    checkpoint_save(&params, &ckpt)?;
    log::info!("saved {} parameters to {}", params.param_count(), ckpt.display());
    Ok(())
}

pub fn sample(
    cfg: &RunConfig,
    data: &Path,
    model: Option<&Path>,
    kind: Option<SamplerArg>,
    out: &Path,
) -> Result<(), CliError> {
    let seed = cfg.require_seed("sample")?;
    let sampler = Sampler::resolve(model, kind)?;
    let scenes = load_scenes(data)?;
    write_run_config(cfg, out)?;
    let sets = sample_all(&scenes, &sampler, cfg, seed)?;
    let mut text = String::new();
    for s in &sets {
        text.push_str(&sample_set_to_json(s));
        text.push('\n');
    }
    let path = out.join("samples.jsonl");
    write_file(&path, text)?;
    log::info!("wrote {} x {} samples to {}", sets.len(), cfg.samples, path.display());
    Ok(())
}

/// Pairs every scene with its entry in a samples file.
fn match_predictions(scenes: &[Scene], path: &Path) -> Result<Vec<SampleSet>, CliError> {
    let mut by_id: HashMap<String, SampleSet> =
        samples_io_read(path)?.into_iter().map(|s| (s.scene_id.clone(), s)).collect();
    scenes
        .iter()
        .map(|scene| {
            let set = by_id
                .remove(&scene.scene_id)
                .ok_or_else(|| CliError::Data(format!("{} has no samples for {}", path.display(), scene.scene_id)))?;
            if !set.agent_ids.iter().eq(scene.agents.iter().map(|a| &a.id)) {
                return Err(CliError::Data(format!("agent ids of {} differ from the scene", scene.scene_id)));
            }
            Ok(set)
        })
        .collect()
}

pub fn evaluate(
    scenes: &[Scene],
    sets: &[SampleSet],
    cfg: &RunConfig,
) -> Result<Vec<MetricReport>, CliError> {
    scenes
        .par_iter()
        .zip(sets)
        .map(|(scene, set)| {
            // a predictions file may hold a different sample count than the config
            let m = epd_core::metrics::MetricConfig { n_samples: set.samples.len(), ..cfg.metrics };
            Ok(compute_report(scene, &set.samples, &m)?)
        })
        .collect()
}

pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    predictions: Option<&Path>,
    model: Option<&Path>,
    kind: Option<SamplerArg>,
    out: &Path,
) -> Result<(), CliError> {
    let scenes = load_scenes(data)?;
    if let Some(s) = scenes.iter().find(|s| !s.has_futures()) {
        return Err(CliError::Data(format!("scene {} lacks ground-truth futures", s.scene_id)));
    }
    let sets = match predictions {
        Some(p) => match_predictions(&scenes, p)?,
        None => {
            let sampler = Sampler::resolve(model, kind)?;
            sample_all(&scenes, &sampler, cfg, cfg.seed.unwrap_or(0))?
        }
    };
    write_run_config(cfg, out)?;
    let reports = evaluate(&scenes, &sets, cfg)?;
    let mut lines = String::new();
    for r in &reports {
        lines.push_str(&serde_json::to_string(r).expect("reports always serialize"));
        lines.push('\n');
    }
    write_file(&out.join("reports.jsonl"), lines)?;
    let summary = summary_csv(&reports);
    write_file(&out.join("summary.csv"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn select_hard(cfg: &RunConfig, data: &Path, n: usize, out: &Path) -> Result<(), CliError> {
    let scenes = load_scenes(data)?;
    write_run_config(cfg, out)?;
    let (ids, short) = select_challenging(&scenes, n, &cfg.metrics)?;
    if short {
        log::warn!("requested {n} scenes but the corpus holds only {}", scenes.len());
    }
    let path: PathBuf = out.join("hard_ids.txt");
    write_file(&path, ids.iter().map(|id| format!("{id}\n")).collect::<String>())?;
    log::info!("wrote {} ids to {}", ids.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_seeds_differ_and_repeat() {
        let a: Vec<u64> = (0..100).map(|i| scene_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), a.len());
        assert_eq!(a, (0..100).map(|i| scene_seed(7, i)).collect::<Vec<_>>());
        assert_ne!(scene_seed(7, 0), scene_seed(8, 0));
    }
}

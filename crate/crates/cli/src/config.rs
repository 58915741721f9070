use std::path::Path;

use epd_core::datagen::DatagenConfig;
use epd_core::diffusion::{Representation, ScheduleConfig, DEFAULT_DDIM_STEPS};
use epd_core::metrics::MetricConfig;
use epd_core::net::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Scene synthesized for latency measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub agents: usize,
    pub map_elements: usize,
    pub ddim_steps: Vec<usize>,
    pub samples: usize,
    pub repetitions: usize,
    pub warmup: usize,
    /// Worker threads for the timed runs; `EPD_THREADS` takes precedence.
    pub threads: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { agents: 50, map_elements: 150, ddim_steps: vec![1, 2, 5, 10, 100], samples: 6, repetitions: 11, warmup: 2, threads: 1 }
    }
}

/// Everything a subcommand needs besides its input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub samples: usize,
    pub ddim_steps: usize,
    pub datagen: DatagenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub metrics: MetricConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            samples: MetricConfig::default().n_samples,
            ddim_steps: DEFAULT_DDIM_STEPS,
            datagen: DatagenConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            schedule: ScheduleConfig::default(),
            metrics: MetricConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub ddim_steps: Option<usize>,
    pub horizon: Option<f64>,
    pub representation: Option<Representation>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    /// Applies overrides and copies shared values into the module configs.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = o.seed {
            self.seed = Some(seed);
        }
        if let Some(seed) = self.seed {
            self.datagen.seed = seed;
            self.train.seed = seed;
        }
        if let Some(n) = o.samples {
            self.samples = n;
        }
        if let Some(k) = o.ddim_steps {
            self.ddim_steps = k;
        }
        if let Some(h) = o.horizon {
            self.datagen.horizon_s = h;
            self.datagen.eval_horizon_s = h;
            self.model.horizon_s = h;
        }
        if let Some(r) = o.representation {
            self.model.representation = r;
        }
        self.metrics.n_samples = self.samples;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: epd_core::Error| CliError::Config(e.to_string());
        if self.samples < 2 {
            return Err(CliError::Config(format!("--samples must be at least 2, got {}", self.samples)));
        }
        if self.ddim_steps == 0 || self.ddim_steps > self.schedule.steps {
            return Err(CliError::Config(format!(
                "--ddim-steps must lie in [1, {}], got {}",
                self.schedule.steps, self.ddim_steps
            )));
        }
        if (self.datagen.horizon_s - self.model.horizon_s).abs() > 1e-12 {
            return Err(CliError::Config("datagen.horizon_s and model.horizon_s differ".into()));
        }
        self.datagen.validate().map_err(cfg)?;
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.schedule.build().map_err(cfg)?;
        self.metrics.validate().map_err(cfg)?;
        let b = &self.bench;
        if b.agents == 0 || b.samples == 0 || b.repetitions == 0 || b.threads == 0 || b.ddim_steps.is_empty() {
            return Err(CliError::Config("bench needs positive agents, samples, repetitions and threads, and some ddim_steps".into()));
        }
        Ok(())
    }

    pub fn require_seed(&self, command: &str) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::Config(format!("`{command}` needs --seed (or \"seed\" in the config)")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"model": {"hidden_dim": 32}, "samples": 8}"#).unwrap();
        let c = RunConfig::load(Some(&path)).unwrap().resolve(&Overrides::default()).unwrap();
        assert_eq!(c.model.hidden_dim, 32);
        assert_eq!(c.model.n_heads, ModelConfig::default().n_heads);
        assert_eq!(c.metrics.n_samples, 8);
        assert_eq!(c.seed, None);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"modle": {}}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&path)), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_propagate() {
        let o = Overrides {
            seed: Some(9),
            samples: Some(6),
            ddim_steps: Some(5),
            horizon: Some(4.1),
            representation: Some(Representation::Sequence),
        };
        let c = RunConfig::default().resolve(&o).unwrap();
        assert_eq!((c.datagen.seed, c.train.seed, c.seed), (9, 9, Some(9)));
        assert_eq!(c.metrics.n_samples, 6);
        assert_eq!(c.model.horizon_s, 4.1);
        assert_eq!(c.datagen.eval_horizon_s, 4.1);
        assert_eq!(c.model.representation, Representation::Sequence);
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let bad = |o: Overrides| RunConfig::default().resolve(&o).is_err();
        assert!(bad(Overrides { samples: Some(1), ..Default::default() }));
        assert!(bad(Overrides { ddim_steps: Some(0), ..Default::default() }));
        assert!(bad(Overrides { ddim_steps: Some(1001), ..Default::default() }));
        assert!(bad(Overrides { horizon: Some(-1.0), ..Default::default() }));
        assert!(RunConfig::default().require_seed("train").is_err());
    }
}

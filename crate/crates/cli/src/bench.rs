use std::path::Path;
use std::time::Instant;

use epd_core::diffusion::generate;
use epd_core::net::{checkpoint_load, init_params, ModelParams};
use epd_core::poly::{PolyCurve, Vec2};
use epd_core::scene::{
    Agent, AgentCategory, MapCategory, MapElement, Scene, HISTORY_DEGREE, HISTORY_DURATION, MAP_DEGREE,
};

use crate::commands::{ensure_dir, write_file};
use crate::config::RunConfig;
use crate::CliError;

const LANE_SPACING: f64 = 3.5;
const SEGMENT_LENGTH: f64 = 20.0;
const LANES: usize = 15;

fn straight(from: Vec2, to: Vec2, degree: usize, duration: f64) -> PolyCurve {
    let cp = (0..=degree).map(|k| from + (to - from) * (k as f64 / degree as f64)).collect();
    PolyCurve::new(cp, duration).expect("straight curves are valid")
}

/// Parallel straight lanes cut into segments, with agents spread along them
/// at moderate speeds. Futures are absent.
pub fn synthetic_scene(agents: usize, map_elements: usize, horizon: f64) -> Scene {
    let map = (0..map_elements)
        .map(|k| {
            let y = (k % LANES) as f64 * LANE_SPACING;
            let x0 = (k / LANES) as f64 * SEGMENT_LENGTH;
            MapElement {
                id: format!("lane-{k}"),
                category: MapCategory::LaneCenter,
                geometry: straight(Vec2::new(x0, y), Vec2::new(x0 + SEGMENT_LENGTH, y), MAP_DEGREE, 1.0),
            }
        })
        .collect();
    let agents = (0..agents)
        .map(|i| {
            let speed = 8.0 + (i % 5) as f64;
            let end = Vec2::new(60.0 + 45.0 * (i / LANES) as f64, (i % LANES) as f64 * LANE_SPACING);
            let start = end - Vec2::new(speed * HISTORY_DURATION, 0.0);
            Agent {
                id: format!("agent-{i}"),
                category: AgentCategory::Vehicle,
                history: straight(start, end, HISTORY_DEGREE, HISTORY_DURATION),
                time_window: (0.0, HISTORY_DURATION),
                footprint: AgentCategory::Vehicle.default_footprint(),
                future: None,
            }
        })
        .collect();
    Scene { scene_id: "bench".into(), agents, map, horizon_s: horizon, eval_horizon_s: horizon }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub k: usize,
    pub ms: f64,
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock milliseconds per scene for every DDIM step count.
pub fn measure(params: &ModelParams, cfg: &RunConfig, seed: u64) -> Result<Vec<BenchRow>, CliError> {
    let b = &cfg.bench;
    let sched = params.schedule.build()?;
    if let Some(k) = b.ddim_steps.iter().find(|k| **k == 0 || **k > sched.steps()) {
        return Err(CliError::Config(format!("bench step count {k} outside [1, {}]", sched.steps())));
    }
    let scene = synthetic_scene(b.agents, b.map_elements, params.config.horizon_s);
    let run = |k: usize| -> Result<f64, CliError> {
        let t = Instant::now();
        generate(&scene, params, &sched, k, b.samples, seed)?;
        Ok(t.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..b.warmup {
        for &k in &b.ddim_steps {
            run(k)?;
        }
    }
    // step counts take turns so that slow drifts in machine load hit all alike
    let mut times = vec![Vec::with_capacity(b.repetitions); b.ddim_steps.len()];
    for _ in 0..b.repetitions {
        for (slot, &k) in times.iter_mut().zip(&b.ddim_steps) {
            slot.push(run(k)?);
        }
    }
    Ok(b.ddim_steps
        .iter()
        .zip(&mut times)
        .map(|(&k, t)| {
            let ms = median(t);
            log::info!("K={k}: {ms:.2} ms");
            BenchRow { k, ms }
        })
        .collect())
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("k,ms\n");
    for r in rows {
        out.push_str(&format!("{},{:.4}\n", r.k, r.ms));
    }
    out
}

pub fn run_bench(cfg: &RunConfig, model: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let seed = cfg.seed.unwrap_or(0);
    let params = match model {
        Some(p) => checkpoint_load(p)?,
        None => init_params(&cfg.model, seed)?,
    };
    ensure_dir(out)?;
    write_file(&out.join("run_config.json"), cfg.to_json() + "\n")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.bench.threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot build a {}-thread pool: {e}", cfg.bench.threads)))?;
    let rows = pool.install(|| measure(&params, cfg, seed))?;
    let csv = bench_csv(&rows);
    write_file(&out.join("bench.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

use std::fmt::Write as _;
use std::path::Path;

use epd_core::metrics::{longitudinal_profile, LongitudinalSample};
use epd_core::poly::Vec2;
use epd_core::scene::{samples_io_read, MapCategory, Scene, Trajectory, HISTORY_DURATION};

use crate::commands::{ensure_dir, load_scenes, write_file};
use crate::config::RunConfig;
use crate::CliError;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];
const CURVE_POINTS: usize = 40;
const PROFILE_DT: f64 = 0.1;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Minimal SVG document writer.
struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64) -> Self {
        Self { body: String::new(), width, height }
    }

    fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str, width: f64, dash: Option<&str>, opacity: f64) {
        if pts.len() < 2 {
            return;
        }
        let mut d = String::new();
        for (x, y) in pts {
            let _ = write!(d, "{x:.2},{y:.2} ");
        }
        let dash = dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}" stroke-opacity="{opacity}"{dash}/>"#,
            d.trim_end()
        );
    }

    fn polygon(&mut self, pts: &[(f64, f64)], fill: &str, opacity: f64) {
        let mut d = String::new();
        for (x, y) in pts {
            let _ = write!(d, "{x:.2},{y:.2} ");
        }
        let _ = writeln!(self.body, r#"<polygon points="{}" fill="{fill}" fill-opacity="{opacity}"/>"#, d.trim_end());
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}" fill-opacity="{opacity}"/>"#
        );
    }

    fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            escape(s)
        );
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn trajectory_points(t: &Trajectory) -> Vec<Vec2> {
    let d = t.duration();
    (0..=CURVE_POINTS).map(|k| t.position(d * k as f64 / CURVE_POINTS as f64)).collect()
}

/// Bird's-eye view: map, observed histories with footprints at the last
/// pose, ground-truth futures and generated samples.
pub fn scene_svg(scene: &Scene, samples: Option<&[Vec<Trajectory>]>) -> String {
    let map: Vec<(MapCategory, Vec<Vec2>)> = scene
        .map
        .iter()
        .map(|m| (m.category, trajectory_points(&Trajectory::Poly(m.geometry.clone()))))
        .collect();
    let hist: Vec<Vec<Vec2>> =
        scene.agents.iter().map(|a| trajectory_points(&Trajectory::Poly(a.history.clone()))).collect();
    let gt: Vec<Vec<Vec2>> = scene
        .agents
        .iter()
        .filter_map(|a| a.future.as_ref().map(|f| trajectory_points(&Trajectory::Poly(f.clone()))))
        .collect();
    let pred: Vec<Vec<Vec<Vec2>>> = samples
        .unwrap_or_default()
        .iter()
        .map(|s| s.iter().map(trajectory_points).collect())
        .collect();

    let all = map
        .iter()
        .flat_map(|m| &m.1)
        .chain(hist.iter().flatten())
        .chain(gt.iter().flatten())
        .chain(pred.iter().flatten().flatten());
    let (mut lo, mut hi) = (Vec2::repeat(f64::INFINITY), Vec2::repeat(f64::NEG_INFINITY));
    for p in all {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let span = (hi - lo).max().max(1.0) * 1.05;
    let center = (lo + hi) / 2.0;
    let size = 800.0;
    let margin = 20.0;
    let scale = (size - 2.0 * margin) / span;
    let tf = |p: &Vec2| (size / 2.0 + (p.x - center.x) * scale, size / 2.0 - (p.y - center.y) * scale);
    let pts = |v: &[Vec2]| v.iter().map(tf).collect::<Vec<_>>();

    let mut svg = Svg::new(size, size + 30.0);
    for (cat, m) in &map {
        match cat {
            MapCategory::LaneCenter => svg.polyline(&pts(m), "#9e9e9e", 1.5, Some("6 4"), 1.0),
            MapCategory::Crosswalk => svg.polyline(&pts(m), "#bdbdbd", 6.0, None, 0.6),
        }
    }
    for (i, sample) in pred.iter().enumerate() {
        for (j, t) in sample.iter().enumerate() {
            let color = PALETTE[j % PALETTE.len()];
            svg.polyline(&pts(t), color, 1.0, None, if i == 0 { 0.6 } else { 0.3 });
        }
    }
    let mut gi = 0;
    for (j, a) in scene.agents.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        svg.polyline(&pts(&hist[j]), color, 2.5, None, 1.0);
        if a.future.is_some() {
            svg.polyline(&pts(&gt[gi]), "#000000", 1.5, Some("3 3"), 0.8);
            gi += 1;
        }
        let (pose, _) = a.last_pose();
        let (l, w) = (a.footprint.length / 2.0, a.footprint.width / 2.0);
        let corners: Vec<Vec2> = [(l, w), (-l, w), (-l, -w), (l, -w)]
            .iter()
            .map(|(x, y)| pose.position + pose.rotate_to_global(Vec2::new(*x, *y)))
            .collect();
        svg.polygon(&pts(&corners), color, 0.8);
    }
    let legend = match (samples.is_some(), scene.has_futures()) {
        (true, true) => "history (thick), samples (thin), ground truth (dotted)",
        (true, false) => "history (thick), samples (thin)",
        (false, true) => "history (thick), ground truth (dotted)",
        (false, false) => "history",
    };
    svg.text(margin, size + 20.0, 13.0, "start", &format!("{}: {legend}", scene.scene_id));
    svg.finish()
}

struct Series {
    color: &'static str,
    dash: Option<&'static str>,
    times: Vec<f64>,
    values: Vec<LongitudinalSample>,
}

fn profile_times(from: f64, to: f64) -> Vec<f64> {
    let n = ((to - from) / PROFILE_DT + 1e-9).floor() as usize;
    (0..=n).map(|k| from + k as f64 * PROFILE_DT).collect()
}

/// Heading, speed, longitudinal acceleration and jerk over time, with the
/// comfort bands shaded. History is drawn at negative times.
pub fn kinematics_svg(scene: &Scene, samples: Option<&[Vec<Trajectory>]>, accel_band: f64, jerk_band: f64) -> String {
    let mut series = Vec::new();
    for (j, a) in scene.agents.iter().enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        let (pose, _) = a.last_pose();
        let (t0, t1) = a.time_window;
        let ht = profile_times(t0, t1);
        let hist = Trajectory::Poly(a.history.clone());
        let start_heading = longitudinal_profile(&hist, &[t0], pose.heading)[0].heading;
        series.push(Series {
            color,
            dash: None,
            times: ht.iter().map(|t| t - HISTORY_DURATION).collect(),
            values: longitudinal_profile(&hist, &ht, start_heading),
        });
        if let Some(f) = &a.future {
            let ft = profile_times(0.0, f.duration());
            series.push(Series {
                color,
                dash: Some("3 3"),
                values: longitudinal_profile(&Trajectory::Poly(f.clone()), &ft, pose.heading),
                times: ft,
            });
        }
        if let Some(t) = samples.and_then(|s| s.first()).and_then(|s| s.get(j)) {
            let ft = profile_times(0.0, t.duration());
            series.push(Series { color, dash: None, values: longitudinal_profile(t, &ft, pose.heading), times: ft });
        }
    }
    let t_min = series.iter().flat_map(|s| s.times.first()).fold(0.0, |a: f64, b| a.min(*b));
    let t_max = series.iter().flat_map(|s| s.times.last()).fold(0.0, |a: f64, b| a.max(*b));

    type Get = fn(&LongitudinalSample) -> f64;
    let panels: [(&str, Get, Option<f64>); 4] = [
        ("heading [rad]", |s| s.heading, None),
        ("speed [m/s]", |s| s.speed, None),
        ("longitudinal accel [m/s^2]", |s| s.accel, Some(accel_band)),
        ("longitudinal jerk [m/s^3]", |s| s.jerk, Some(jerk_band)),
    ];
    let (width, panel_h, left, gap) = (820.0, 170.0, 70.0, 30.0);
    let plot_w = width - left - 20.0;
    let mut svg = Svg::new(width, panels.len() as f64 * (panel_h + gap) + 40.0);
    for (p, (label, get, band)) in panels.iter().enumerate() {
        let top = 20.0 + p as f64 * (panel_h + gap);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in series.iter().flat_map(|s| s.values.iter().map(get)) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if let Some(b) = band {
            lo = lo.min(-1.25 * b);
            hi = hi.max(1.25 * b);
        }
        if !(lo.is_finite() && hi.is_finite()) {
            (lo, hi) = (-1.0, 1.0);
        }
        if hi - lo < 1e-6 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let x = |t: f64| left + (t - t_min) / (t_max - t_min).max(1e-9) * plot_w;
        let y = |v: f64| top + (hi - v) / (hi - lo) * panel_h;
        svg.rect(left, top, plot_w, panel_h, "#fafafa", 1.0);
        if let Some(b) = band {
            svg.rect(left, y(*b), plot_w, y(-b) - y(*b), "#4caf50", 0.12);
            for edge in [*b, -b] {
                svg.polyline(&[(left, y(edge)), (left + plot_w, y(edge))], "#4caf50", 1.0, Some("5 3"), 1.0);
            }
        }
        if lo < 0.0 && hi > 0.0 {
            svg.polyline(&[(left, y(0.0)), (left + plot_w, y(0.0))], "#cccccc", 0.8, None, 1.0);
        }
        svg.polyline(&[(x(0.0), top), (x(0.0), top + panel_h)], "#888888", 0.8, Some("2 2"), 1.0);
        for s in &series {
            let pts: Vec<_> = s.times.iter().zip(&s.values).map(|(t, v)| (x(*t), y(get(v)))).collect();
            svg.polyline(&pts, s.color, 1.3, s.dash, 0.9);
        }
        svg.text(left, top - 5.0, 12.0, "start", label);
        svg.text(left - 5.0, top + 10.0, 10.0, "end", &format!("{hi:.2}"));
        svg.text(left - 5.0, top + panel_h, 10.0, "end", &format!("{lo:.2}"));
        let last = p == panels.len() - 1;
        let mut t = t_min.ceil();
        while t <= t_max + 1e-9 {
            if last {
                svg.text(x(t), top + panel_h + 14.0, 10.0, "middle", &format!("{t:.0}"));
            }
            t += 1.0;
        }
    }
    svg.text(left + plot_w / 2.0, svg.height - 5.0, 12.0, "middle", "time [s] (history < 0 <= future)");
    svg.finish()
}

pub fn run_plot(
    cfg: &RunConfig,
    data: &Path,
    scene_id: Option<&str>,
    predictions: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let scenes = load_scenes(data)?;
    let scene = match scene_id {
        Some(id) => scenes
            .iter()
            .find(|s| s.scene_id == id)
            .ok_or_else(|| CliError::Data(format!("scene {id} not in {}", data.display())))?,
        None => &scenes[0],
    };
    let samples = match predictions {
        Some(p) => {
            let set = samples_io_read(p)?
                .into_iter()
                .find(|s| s.scene_id == scene.scene_id)
                .ok_or_else(|| CliError::Data(format!("{} has no samples for {}", p.display(), scene.scene_id)))?;
            if set.agent_ids.len() != scene.agents.len() {
                return Err(CliError::Data(format!("agent count of {} differs from the scene", scene.scene_id)));
            }
            Some(set.samples)
        }
        None => None,
    };
    ensure_dir(out)?;
    let stem: String =
        scene.scene_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
    write_file(&out.join(format!("{stem}_scene.svg")), scene_svg(scene, samples.as_deref()))?;
    write_file(
        &out.join(format!("{stem}_kinematics.svg")),
        kinematics_svg(scene, samples.as_deref(), cfg.metrics.accel_band, cfg.metrics.jerk_band),
    )?;
    log::info!("wrote plots for {} to {}", scene.scene_id, out.display());
    Ok(())
}

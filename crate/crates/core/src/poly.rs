//! Planar Bernstein polynomial curves.
//!
//! A [`PolyCurve`] stores the control points of a degree-`d` Bernstein
//! polynomial together with the time span it covers. Trajectories use real
//! seconds; map geometry uses a dimensionless arc parameter with
//! `duration = 1`.
//!
//! Besides evaluation and exact (control-point based) differentiation this
//! module hosts the three fitting procedures used to turn raw samples into
//! curves: ordinary least squares, Bayesian regression on control-point
//! displacements, and an orthogonal-distance (total least squares) fitter for
//! samples without time stamps.
use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;

/// Relative slack accepted on time arguments before a domain error is raised.
const TIME_SLACK: f64 = 1e-9;

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Bernstein basis weights `C(d,i) t^i (1-t)^(d-i)` for `i = 0..=d`.
pub fn bernstein_basis(degree: usize, t: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "normalized time {t} outside [0, 1]"
        )));
    }
    Ok(basis_unchecked(degree, t))
}

fn basis_unchecked(degree: usize, t: f64) -> Vec<f64> {
    let s = 1.0 - t;
    (0..=degree)
        .map(|i| binomial(degree, i) * t.powi(i as i32) * s.powi((degree - i) as i32))
        .collect()
}

fn de_casteljau(points: &[Vec2], u: f64) -> Vec2 {
    let mut work = points.to_vec();
    let n = work.len();
    for level in 1..n {
        for i in 0..n - level {
            work[i] = work[i] * (1.0 - u) + work[i + 1] * u;
        }
    }
    work[0]
}

/// Flat list of consecutive control-point differences, `x` then `y` for each
/// segment.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementVector(pub Vec<f64>);

impl DisplacementVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn segments(&self) -> impl Iterator<Item = Vec2> + '_ {
        self.0.chunks_exact(2).map(|c| Vec2::new(c[0], c[1]))
    }
}

/// Result of projecting a point onto a curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Curve time of the closest point.
    pub t: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyCurve {
    control_points: Vec<Vec2>,
    duration: f64,
}

impl PolyCurve {
    pub fn new(control_points: Vec<Vec2>, duration: f64) -> Result<Self> {
        if control_points.len() < 2 {
            return Err(Error::Shape(format!(
                "a curve needs at least 2 control points, got {}",
                control_points.len()
            )));
        }
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::Domain(format!("duration must be positive, got {duration}")));
        }
        if control_points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::Domain("non-finite control point".into()));
        }
        Ok(Self {
            control_points,
            duration,
        })
    }

    /// A curve that stays at `point` for its whole duration.
    pub fn constant(point: Vec2, degree: usize, duration: f64) -> Result<Self> {
        Self::new(vec![point; degree.max(1) + 1], duration)
    }

    pub fn degree(&self) -> usize {
        self.control_points.len() - 1
    }

    pub fn control_points(&self) -> &[Vec2] {
        &self.control_points
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn start(&self) -> Vec2 {
        self.control_points[0]
    }

    pub fn end(&self) -> Vec2 {
        self.control_points[self.degree()]
    }

    fn normalize(&self, t: f64) -> Result<f64> {
        let slack = TIME_SLACK * self.duration;
        if !(t >= -slack && t <= self.duration + slack) {
            return Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.duration
            )));
        }
        Ok((t / self.duration).clamp(0.0, 1.0))
    }

    pub fn eval(&self, t: f64) -> Result<Vec2> {
        Ok(self.eval_unit(self.normalize(t)?))
    }

    /// Evaluates at normalized parameter `u` in `[0, 1]`.
    pub fn eval_unit(&self, u: f64) -> Vec2 {
        de_casteljau(&self.control_points, u)
    }

    /// Control points of the `order`-th derivative with respect to time.
    ///
    /// Returns an empty list when `order > degree`.
    pub fn derivative_points(&self, order: usize) -> Vec<Vec2> {
        let d = self.degree();
        if order > d {
            return Vec::new();
        }
        let mut pts = self.control_points.clone();
        for _ in 0..order {
            pts = pts.windows(2).map(|w| w[1] - w[0]).collect();
        }
        // d!/(d-k)! * duration^-k
        let falling: f64 = (0..order).map(|i| (d - i) as f64).product();
        let scale = falling / self.duration.powi(order as i32);
        pts.iter().map(|p| p * scale).collect()
    }

    /// Analytic `order`-th time derivative; zero when `order` exceeds the
    /// degree.
    pub fn eval_derivative(&self, t: f64, order: usize) -> Result<Vec2> {
        let u = self.normalize(t)?;
        Ok(self.eval_derivative_unit(u, order))
    }

    pub fn eval_derivative_unit(&self, u: f64, order: usize) -> Vec2 {
        let pts = self.derivative_points(order);
        if pts.is_empty() {
            Vec2::zeros()
        } else {
            de_casteljau(&pts, u)
        }
    }

    pub fn elevate_degree(&self) -> PolyCurve {
        let d = self.degree();
        let n = d + 1;
        let cp = &self.control_points;
        let mut out = Vec::with_capacity(n + 1);
        out.push(cp[0]);
        for i in 1..n {
            let a = i as f64 / n as f64;
            out.push(cp[i] + (cp[i - 1] - cp[i]) * a);
        }
        out.push(cp[d]);
        PolyCurve {
            control_points: out,
            duration: self.duration,
        }
    }

    /// Raises the degree until it equals `degree`; no-op when already there.
    pub fn elevate_to(&self, degree: usize) -> Result<PolyCurve> {
        if degree < self.degree() {
            return Err(Error::Shape(format!(
                "cannot elevate a degree-{} curve to degree {degree}",
                self.degree()
            )));
        }
        let mut c = self.clone();
        while c.degree() < degree {
            c = c.elevate_degree();
        }
        Ok(c)
    }

    pub fn to_displacements(&self) -> DisplacementVector {
        DisplacementVector(
            self.control_points
                .windows(2)
                .flat_map(|w| {
                    let d = w[1] - w[0];
                    [d.x, d.y]
                })
                .collect(),
        )
    }

    pub fn from_displacements(
        degree: usize,
        start: Vec2,
        displacements: &DisplacementVector,
        duration: f64,
    ) -> Result<PolyCurve> {
        if displacements.len() != 2 * degree {
            return Err(Error::Shape(format!(
                "degree {degree} needs {} displacement values, got {}",
                2 * degree,
                displacements.len()
            )));
        }
        let mut pts = Vec::with_capacity(degree + 1);
        let mut cur = start;
        pts.push(cur);
        for d in displacements.segments() {
            cur += d;
            pts.push(cur);
        }
        PolyCurve::new(pts, duration)
    }

    /// Applies `p -> R(rotation) p + translation` to every control point.
    pub fn rigid_transform(&self, rotation: f64, translation: Vec2) -> PolyCurve {
        let (s, c) = rotation.sin_cos();
        PolyCurve {
            control_points: self
                .control_points
                .iter()
                .map(|p| Vec2::new(c * p.x - s * p.y, s * p.x + c * p.y) + translation)
                .collect(),
            duration: self.duration,
        }
    }

    pub fn translated(&self, offset: Vec2) -> PolyCurve {
        PolyCurve {
            control_points: self.control_points.iter().map(|p| p + offset).collect(),
            duration: self.duration,
        }
    }

    /// Axis-aligned box around the control polygon; contains the curve.
    pub fn hull_bounds(&self) -> (Vec2, Vec2) {
        let mut lo = self.control_points[0];
        let mut hi = lo;
        for p in &self.control_points[1..] {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    /// Candidate normalized parameters where the distance to `p` is extremal:
    /// both endpoints plus every real root of the derivative of the squared
    /// distance polynomial.
    fn distance_critical_params(&self, p: Vec2) -> Vec<f64> {
        let sq = squared_distance_coeffs(&self.control_points, p);
        let deriv: Vec<f64> = sq.windows(2).map(|w| w[1] - w[0]).collect();
        let mut candidates = vec![0.0, 1.0];
        unit_roots(&deriv, &mut candidates);
        candidates
    }

    /// Globally closest point of the curve to `p`.
    pub fn project_point(&self, p: Vec2) -> Projection {
        let (u, distance) = self
            .distance_critical_params(p)
            .into_iter()
            .map(|u| (u, (self.eval_unit(u) - p).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
            .expect("endpoints are always candidates");
        Projection {
            t: u * self.duration,
            distance,
        }
    }

    /// Largest distance between `p` and any point of the curve.
    pub fn max_distance_from(&self, p: Vec2) -> f64 {
        self.distance_critical_params(p)
            .into_iter()
            .map(|u| (self.eval_unit(u) - p).norm())
            .fold(0.0, f64::max)
    }
}

/// Bernstein coefficients (degree `2d`) of `|B(u) - p|^2`.
fn squared_distance_coeffs(points: &[Vec2], p: Vec2) -> Vec<f64> {
    let d = points.len() - 1;
    let q: Vec<Vec2> = points.iter().map(|c| c - p).collect();
    let mut out = vec![0.0; 2 * d + 1];
    for i in 0..=d {
        for j in 0..=d {
            out[i + j] += binomial(d, i) * binomial(d, j) * q[i].dot(&q[j]);
        }
    }
    for (k, c) in out.iter_mut().enumerate() {
        *c /= binomial(2 * d, k);
    }
    out
}

fn scalar_de_casteljau(coeffs: &[f64], u: f64) -> f64 {
    let mut work = coeffs.to_vec();
    let n = work.len();
    for level in 1..n {
        for i in 0..n - level {
            work[i] = work[i] * (1.0 - u) + work[i + 1] * u;
        }
    }
    work[0]
}

fn split_half(coeffs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = coeffs.len();
    let mut work = coeffs.to_vec();
    let mut left = Vec::with_capacity(n);
    let mut right = vec![0.0; n];
    left.push(work[0]);
    right[n - 1] = work[n - 1];
    for level in 1..n {
        for i in 0..n - level {
            work[i] = 0.5 * (work[i] + work[i + 1]);
        }
        left.push(work[0]);
        right[n - 1 - level] = work[n - 1 - level];
    }
    (left, right)
}

fn sign_changes(coeffs: &[f64]) -> usize {
    let mut changes = 0;
    let mut prev = 0.0f64;
    for &c in coeffs {
        if c == 0.0 {
            continue;
        }
        if prev != 0.0 && (c > 0.0) != (prev > 0.0) {
            changes += 1;
        }
        prev = c;
    }
    changes
}

/// Appends the real roots in `[0, 1]` of a scalar Bernstein polynomial.
///
/// Roots are isolated by de Casteljau subdivision (the number of coefficient
/// sign changes bounds the root count on an interval) and refined by
/// bisection once a single crossing is certain.
fn unit_roots(coeffs: &[f64], out: &mut Vec<f64>) {
    if coeffs.is_empty() {
        return;
    }
    if coeffs[0] == 0.0 {
        out.push(0.0);
    }
    isolate(coeffs, 0.0, 1.0, 0, out);
}

fn isolate(coeffs: &[f64], lo: f64, hi: f64, depth: usize, out: &mut Vec<f64>) {
    let max_abs = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if max_abs == 0.0 {
        out.push(0.5 * (lo + hi));
        return;
    }
    if coeffs[coeffs.len() - 1] == 0.0 {
        out.push(hi);
    }
    let changes = sign_changes(coeffs);
    if changes == 0 {
        return;
    }
    let first = coeffs[0];
    let last = coeffs[coeffs.len() - 1];
    if changes == 1 && first * last < 0.0 {
        out.push(lo + (hi - lo) * bisect(coeffs));
        return;
    }
    if depth >= 60 || hi - lo < 1e-13 {
        out.push(0.5 * (lo + hi));
        return;
    }
    let mid = 0.5 * (lo + hi);
    let (left, right) = split_half(coeffs);
    isolate(&left, lo, mid, depth + 1, out);
    isolate(&right, mid, hi, depth + 1, out);
}

fn bisect(coeffs: &[f64]) -> f64 {
    let (mut a, mut b) = (0.0f64, 1.0f64);
    let fa_positive = coeffs[0] > 0.0;
    for _ in 0..64 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = scalar_de_casteljau(coeffs, m);
        if fm == 0.0 {
            return m;
        }
        if (fm > 0.0) == fa_positive {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Settings shared by the fitting procedures.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Standard deviation of the zero-mean displacement prior, meters.
    pub prior_std: f64,
    /// Observation noise standard deviation, meters.
    pub obs_noise_std: f64,
    pub tls_max_iter: usize,
    /// Stop when the RMS orthogonal residual changes by less than this, meters.
    pub tls_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            prior_std: 10.0,
            obs_noise_std: 0.15,
            tls_max_iter: 100,
            tls_tol: 1e-9,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.prior_std)
            && positive(self.obs_noise_std)
            && positive(self.tls_tol)
            && self.tls_max_iter > 0)
        {
            return Err(Error::Config(format!("fit settings must be positive: {self:?}")));
        }
        Ok(())
    }
}

fn check_samples(samples: &[(f64, Vec2)], duration: f64) -> Result<()> {
    if !(duration.is_finite() && duration > 0.0) {
        return Err(Error::Domain(format!("duration must be positive, got {duration}")));
    }
    for (t, p) in samples {
        if !t.is_finite() || *t < -TIME_SLACK * duration || *t > duration * (1.0 + TIME_SLACK) {
            return Err(Error::Domain(format!("sample time {t} outside [0, {duration}]")));
        }
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(Error::Domain("non-finite sample".into()));
        }
    }
    Ok(())
}

/// Least-squares control points for fixed normalized parameters.
fn solve_control_points(params: &[f64], points: &[Vec2], degree: usize) -> Result<Vec<Vec2>> {
    let n = params.len();
    let design = DMatrix::from_fn(n, degree + 1, |_, _| 0.0);
    let mut design = design;
    for (r, &u) in params.iter().enumerate() {
        for (c, w) in basis_unchecked(degree, u.clamp(0.0, 1.0)).into_iter().enumerate() {
            design[(r, c)] = w;
        }
    }
    let rhs = DMatrix::from_fn(n, 2, |r, c| points[r][c]);
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * (n.max(degree + 1) as f64);
    if svd.rank(tol) < degree + 1 {
        return Err(Error::Fit(format!(
            "rank-deficient design: {n} samples cannot determine a degree-{degree} curve"
        )));
    }
    let sol = svd.solve(&rhs, tol).map_err(|e| Error::Fit(e.to_string()))?;
    Ok((0..=degree).map(|i| Vec2::new(sol[(i, 0)], sol[(i, 1)])).collect())
}

/// Ordinary least-squares fit of time-stamped samples.
pub fn fit_lsq(samples: &[(f64, Vec2)], degree: usize, duration: f64) -> Result<PolyCurve> {
    check_samples(samples, duration)?;
    if degree == 0 {
        return Err(Error::Shape("degree must be at least 1".into()));
    }
    let mut distinct: Vec<f64> = samples.iter().map(|(t, _)| *t).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < degree + 1 {
        return Err(Error::Fit(format!(
            "{} distinct sample times cannot determine a degree-{degree} curve",
            distinct.len()
        )));
    }
    let params: Vec<f64> = samples.iter().map(|(t, _)| t / duration).collect();
    let points: Vec<Vec2> = samples.iter().map(|(_, p)| *p).collect();
    PolyCurve::new(solve_control_points(&params, &points, degree)?, duration)
}

/// Posterior-mean fit under a Gaussian prior on control-point displacements.
///
/// The curve is parameterized by its start point and the `d` displacements
/// between consecutive control points. Displacements get an isotropic
/// zero-mean prior with standard deviation `prior_std`; the start point gets a
/// flat prior so that any single observation anchors it. Observations carry
/// i.i.d. Gaussian noise with standard deviation `obs_noise_std`.
pub fn fit_bayesian(
    samples: &[(f64, Vec2)],
    degree: usize,
    duration: f64,
    cfg: &FitConfig,
) -> Result<PolyCurve> {
    cfg.validate()?;
    check_samples(samples, duration)?;
    if samples.is_empty() {
        return Err(Error::Fit("no samples".into()));
    }
    if degree == 0 {
        return Err(Error::Shape("degree must be at least 1".into()));
    }
    let n = samples.len();
    let k = degree + 1;
    // Column j >= 1 multiplies displacement j: the tail sum of basis weights.
    let mut design = DMatrix::zeros(n, k);
    for (r, (t, _)) in samples.iter().enumerate() {
        let w = basis_unchecked(degree, (t / duration).clamp(0.0, 1.0));
        let mut tail = 0.0;
        for j in (0..k).rev() {
            tail += w[j];
            design[(r, j)] = if j == 0 { 1.0 } else { tail };
        }
    }
    let ratio = (cfg.obs_noise_std / cfg.prior_std).powi(2);
    let mut normal = design.transpose() * &design;
    for j in 1..k {
        normal[(j, j)] += ratio;
    }
    let rhs = design.transpose() * DMatrix::from_fn(n, 2, |r, c| samples[r].1[c]);
    let sol = match normal.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Fit("singular posterior precision".into()))?,
    };
    let mut pts = Vec::with_capacity(k);
    let mut cur = Vec2::new(sol[(0, 0)], sol[(0, 1)]);
    pts.push(cur);
    for j in 1..k {
        cur += Vec2::new(sol[(j, 0)], sol[(j, 1)]);
        pts.push(cur);
    }
    PolyCurve::new(pts, duration)
}

/// Outcome of the orthogonal-distance fit.
#[derive(Debug, Clone)]
pub struct TlsFit {
    pub curve: PolyCurve,
    pub converged: bool,
    pub iterations: usize,
    /// RMS distance between each point and its foot point on the curve.
    pub rms_residual: f64,
}

/// Newton iterations per foot-point update.
const FOOT_POINT_NEWTON_STEPS: usize = 10;

/// Total-least-squares fit of ordered points without time stamps.
///
/// Parameters start from chord length and a Newton foot-point projection;
/// control points and parameters are then refined jointly by damped
/// Gauss-Newton steps. The returned curve has `duration = 1`.
pub fn fit_tls_borges_pastva(points: &[Vec2], degree: usize, cfg: &FitConfig) -> Result<TlsFit> {
    cfg.validate()?;
    if degree == 0 {
        return Err(Error::Shape("degree must be at least 1".into()));
    }
    if points.len() < degree + 1 {
        return Err(Error::Fit(format!(
            "{} points cannot determine a degree-{degree} curve",
            points.len()
        )));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::Domain("non-finite point".into()));
    }

    let mut cumulative = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cumulative.push(0.0);
    for w in points.windows(2) {
        acc += (w[1] - w[0]).norm();
        cumulative.push(acc);
    }
    if acc <= f64::EPSILON * points.iter().map(|p| p.norm()).fold(1.0, f64::max) {
        let mean = points.iter().sum::<Vec2>() / points.len() as f64;
        let curve = PolyCurve::constant(mean, degree, 1.0)?;
        let rms = rms(points.iter().map(|p| (p - mean).norm()));
        return Ok(TlsFit {
            curve,
            converged: true,
            iterations: 0,
            rms_residual: rms,
        });
    }
    let mut params: Vec<f64> = cumulative.iter().map(|c| c / acc).collect();

    let mut control = solve_control_points(&params, points, degree)?;
    // the end parameters stay at 0 and 1; freeing them would let an affine
    // reparameterization slide along the curve without changing the cost
    let last = points.len() - 1;
    for (u, p) in params[1..last].iter_mut().zip(&points[1..last]) {
        *u = foot_point(&PolyCurve::new(control.clone(), 1.0)?, *p, *u);
    }
    let cost = |control: &[Vec2], params: &[f64]| -> f64 {
        points
            .iter()
            .zip(params)
            .map(|(p, &u)| (de_casteljau(control, u) - p).norm_squared())
            .sum()
    };
    let mut current = cost(&control, &params);
    let mut best = (control.clone(), current);
    let mut converged = current == 0.0;
    let mut iterations = 0;
    let mut damping = 1e-3;
    let m = degree + 1;

    // Levenberg-Marquardt on control points and parameters jointly; the
    // diagonal parameter block is eliminated with a Schur complement.
    while !converged && iterations < cfg.tls_max_iter {
        iterations += 1;
        let tangent_points: Vec<Vec2> = control.windows(2).map(|w| (w[1] - w[0]) * degree as f64).collect();
        let mut a = DMatrix::<f64>::zeros(2 * m, 2 * m);
        let mut g_c = DVector::<f64>::zeros(2 * m);
        let mut cross = DMatrix::<f64>::zeros(2 * m, points.len());
        let mut d = vec![0.0; points.len()];
        let mut g_u = vec![0.0; points.len()];
        for (i, (p, &u)) in points.iter().zip(&params).enumerate() {
            let basis = bernstein_basis(degree, u)?;
            let r = de_casteljau(&control, u) - p;
            let t = de_casteljau(&tangent_points, u);
            for j in 0..m {
                for k in 0..m {
                    let v = basis[j] * basis[k];
                    a[(j, k)] += v;
                    a[(m + j, m + k)] += v;
                }
                g_c[j] += basis[j] * r.x;
                g_c[m + j] += basis[j] * r.y;
                cross[(j, i)] = basis[j] * t.x;
                cross[(m + j, i)] = basis[j] * t.y;
            }
            d[i] = t.norm_squared();
            g_u[i] = t.dot(&r);
        }
        let floor = 1e-12 * (0..2 * m).map(|j| a[(j, j)]).fold(1.0, f64::max);
        let mut accepted = false;
        while !accepted && damping < 1e12 {
            let mut s = a.clone();
            for j in 0..2 * m {
                s[(j, j)] += damping * (a[(j, j)] + floor);
            }
            let d_damped: Vec<f64> = d.iter().map(|v| v * (1.0 + damping) + damping * floor).collect();
            let mut rhs = -g_c.clone();
            for i in 1..last {
                let col = cross.column(i);
                rhs += col * (g_u[i] / d_damped[i]);
                s -= col * col.transpose() / d_damped[i];
            }
            let Some(step_c) = s.lu().solve(&rhs) else {
                damping *= 4.0;
                continue;
            };
            let trial_control: Vec<Vec2> =
                (0..m).map(|j| control[j] + Vec2::new(step_c[j], step_c[m + j])).collect();
            let trial_params: Vec<f64> = (0..points.len())
                .map(|i| {
                    if i == 0 || i == last {
                        return params[i];
                    }
                    let du = -(g_u[i] + cross.column(i).dot(&step_c)) / d_damped[i];
                    (params[i] + du).clamp(0.0, 1.0)
                })
                .collect();
            let next = cost(&trial_control, &trial_params);
            if next.is_finite() && next < current {
                let change = current - next;
                control = trial_control;
                params = trial_params;
                current = next;
                damping = (damping / 10.0).max(1e-15);
                accepted = true;
                if next < best.1 {
                    best = (control.clone(), next);
                }
                let floor = points.len() as f64 * cfg.tls_tol * cfg.tls_tol;
                if change <= floor || current <= floor {
                    converged = true;
                }
            } else {
                damping *= 4.0;
            }
        }
        if !accepted {
            // no descent direction left at this precision
            converged = true;
        }
    }
    let best = (PolyCurve::new(best.0, 1.0)?, (best.1 / points.len() as f64).sqrt());
    let (curve, rms_residual) = best;
    Ok(TlsFit {
        curve,
        converged,
        iterations,
        rms_residual,
    })
}

/// Newton refinement of the curve parameter closest to `p`, starting at `u0`.
fn foot_point(curve: &PolyCurve, p: Vec2, u0: f64) -> f64 {
    let first = curve.derivative_points(1);
    let second = curve.derivative_points(2);
    let dist = |u: f64| (curve.eval_unit(u) - p).norm_squared();
    let mut u = u0;
    let mut current = dist(u);
    for _ in 0..FOOT_POINT_NEWTON_STEPS {
        let r = curve.eval_unit(u) - p;
        // derivatives are taken in time; duration is 1 for these curves
        let d1 = de_casteljau(&first, u);
        let d2 = if second.is_empty() {
            Vec2::zeros()
        } else {
            de_casteljau(&second, u)
        };
        let g = r.dot(&d1);
        let h = d1.dot(&d1) + r.dot(&d2);
        if g == 0.0 || h <= 0.0 {
            break;
        }
        let next = (u - g / h).clamp(0.0, 1.0);
        let value = dist(next);
        if value > current {
            break;
        }
        let step = (next - u).abs();
        u = next;
        current = value;
        if step < 1e-15 {
            break;
        }
    }
    u
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

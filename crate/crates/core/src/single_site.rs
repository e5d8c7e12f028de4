//! The tilted single-site measure.
//!
//! For a potential `V` and target density `rho`, the measure has density
//! `h(x) = exp(-V(x + rho) - lambda x) / Z` in the centered coordinate
//! `x = eta - rho`, where the tilt `lambda(rho)` is the unique value making
//! the mean of `x` vanish. Everything downstream (convolutions, kernels,
//! spectral gaps) consumes these measures, so construction is defensive:
//! the grid is centered at the mode, truncated where the integrand has
//! dropped by `e^-60`, refined until the variance is stable, and the
//! discarded tail mass is certified by a convexity bound.

use crate::grid::QuadratureGrid;
use crate::numerics::{fit_loglog, golden_min};
use crate::potential::Potential;
use crate::{Result, SpinGapError};
use num_complex::Complex64;
use serde::Serialize;

/// Default absolute tolerance on the residual mean.
pub const DEFAULT_MEAN_TOL: f64 = 1e-12;

/// Log-height drop from the mode to the grid boundary.
const BOUNDARY_DROP: f64 = 60.0;
/// Relative tail mass allowed outside the grid.
const TAIL_LIMIT: f64 = 1e-12;
/// Starting grid resolution; doubled until the variance stabilizes.
const BASE_POINTS: usize = 4097;
const MAX_POINTS: usize = 262_145;
/// Relative variance movement required between successive refinements.
const SIGMA2_STABLE: f64 = 1e-9;

/// A solved tilted measure on its quadrature grid.
///
/// `values` holds the normalized density at the nodes, so the weighted sum
/// of `values` is 1 by construction. `z` is the raw partition function and
/// underflows to 0 for strongly tilted measures; `log_z` is always finite.
#[derive(Debug, Clone)]
pub struct TiltedMeasure {
    pub pot: Potential,
    pub rho: f64,
    pub lambda: f64,
    pub z: f64,
    pub log_z: f64,
    pub sigma2: f64,
    /// Raw moments of the centered coordinate; `moments[k-1]` is the k-th,
    /// stored for k = 1..=8.
    pub moments: Vec<f64>,
    pub grid: QuadratureGrid,
    pub values: Vec<f64>,
}

/// Grid-and-density snapshot for one candidate tilt.
struct Profile {
    grid: QuadratureGrid,
    /// `exp(-(W - W_center))` at the nodes, not normalized.
    raw: Vec<f64>,
    w_center: f64,
    mass: f64,
    mean: f64,
}

fn total_energy(pot: &Potential, rho: f64, lambda: f64, x: f64) -> f64 {
    pot.v(x + rho, 0) + lambda * x
}

/// Locate the minimizer of `W(x) = V(x + rho) + lambda x` by an expanding
/// scan followed by golden-section refinement. The scan guards against the
/// shallow extra minima a bounded perturbation can carve into `W`.
fn find_mode(pot: &Potential, rho: f64, lambda: f64) -> Result<f64> {
    let w = |x: f64| total_energy(pot, rho, lambda, x);
    let mut span = 4.0f64;
    let w0 = w(0.0);
    for _ in 0..60 {
        if w(span) - w0 > 100.0 && w(-span) - w0 > 100.0 {
            break;
        }
        span *= 2.0;
        if span > 1e12 {
            return Err(SpinGapError::Underflow(format!(
                "energy profile stays flat out to |x| = {span:.1e} (rho = {rho}, lambda = {lambda})"
            )));
        }
    }
    let n = 1024usize;
    let dx = 2.0 * span / n as f64;
    let mut best = (w0, 0.0);
    for i in 0..=n {
        let x = -span + dx * i as f64;
        let wx = w(x);
        if wx < best.0 {
            best = (wx, x);
        }
    }
    Ok(golden_min(w, best.1 - dx, best.1 + dx, 60))
}

/// Symmetric halfwidth around the mode at which `W` has climbed by
/// `BOUNDARY_DROP` on both sides.
fn find_halfwidth(pot: &Potential, rho: f64, lambda: f64, mode: f64) -> Result<f64> {
    let w = |x: f64| total_energy(pot, rho, lambda, x);
    let w_mode = w(mode);
    let deep = |h: f64| {
        w(mode + h) - w_mode >= BOUNDARY_DROP && w(mode - h) - w_mode >= BOUNDARY_DROP
    };
    // Curvature at the mode seeds the width but can be badly off when the
    // curvature degenerates there, so grow or shrink to the threshold and
    // refine; convexity of phi keeps the overshoot monotone.
    let curv = pot.v(mode + rho, 2).max(1e-8);
    let mut hi = (2.0 * BOUNDARY_DROP / curv).sqrt();
    let mut grew = 0;
    while !deep(hi) {
        hi *= 1.25;
        grew += 1;
        if hi > 1e9 || grew > 200 {
            return Err(SpinGapError::Underflow(format!(
                "could not find a grid halfwidth with sufficient boundary decay (rho = {rho})"
            )));
        }
    }
    let mut lo = 0.5 * hi;
    while deep(lo) && lo > 1e-6 {
        hi = lo;
        lo *= 0.5;
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if deep(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi * 1.05)
}

fn build_profile(pot: &Potential, rho: f64, lambda: f64, points: usize) -> Result<Profile> {
    let mode = find_mode(pot, rho, lambda)?;
    let halfwidth = find_halfwidth(pot, rho, lambda, mode)?;
    let grid = QuadratureGrid::new_uniform(mode, halfwidth, points)?;
    let w_center = total_energy(pot, rho, lambda, mode);
    let raw: Vec<f64> = grid
        .nodes
        .iter()
        .map(|&x| (-(total_energy(pot, rho, lambda, x) - w_center)).exp())
        .collect();
    let mass: f64 = grid
        .nodes
        .iter()
        .zip(&grid.weights)
        .zip(&raw)
        .map(|((_, w), u)| w * u)
        .sum();
    let mean: f64 = grid
        .nodes
        .iter()
        .zip(&grid.weights)
        .zip(&raw)
        .map(|((x, w), u)| w * u * x)
        .sum::<f64>()
        / mass;
    Ok(Profile {
        grid,
        raw,
        w_center,
        mass,
        mean,
    })
}

/// Solve the strictly decreasing `lambda -> mean` equation by bracketed
/// bisection with guarded secant refinement.
fn solve_lambda(pot: &Potential, rho: f64, points: usize, tol: f64) -> Result<(f64, Profile)> {
    let center = -pot.v(rho, 1);
    let mut width = pot.psi_d1_sup + 10.0;
    let (mut lo, mut hi, mut mean_lo, mut mean_hi);
    loop {
        lo = center - width;
        hi = center + width;
        mean_lo = build_profile(pot, rho, lo, points)?.mean;
        mean_hi = build_profile(pot, rho, hi, points)?.mean;
        if mean_lo > 0.0 && mean_hi < 0.0 {
            break;
        }
        width *= 2.0;
        if width > 40.0 {
            return Err(SpinGapError::BracketFailure {
                rho,
                lo,
                hi,
                mean_lo,
                mean_hi,
            });
        }
    }
    // Bisection gets close, then secant steps (clipped to the bracket)
    // finish; the mean is smooth and strictly decreasing in lambda.
    let mut a = lo;
    let mut b = hi;
    let mut fa = mean_lo;
    let mut fb = mean_hi;
    let mut best: Option<(f64, Profile)> = None;
    for iter in 0..220 {
        let coarse = b - a > 1e-2 * (1.0 + center.abs());
        let mut x = if coarse || (fa - fb).abs() < f64::MIN_POSITIVE {
            0.5 * (a + b)
        } else {
            a + fa * (b - a) / (fa - fb)
        };
        if !(x > a && x < b) {
            x = 0.5 * (a + b);
        }
        let prof = build_profile(pot, rho, x, points)?;
        let fx = prof.mean;
        let done = fx.abs() <= tol;
        best = Some((x, prof));
        if done {
            return Ok(best.unwrap());
        }
        if fx > 0.0 {
            a = x;
            fa = fx;
        } else {
            b = x;
            fb = fx;
        }
        if iter > 200 && (b - a) < f64::EPSILON * (1.0 + center.abs()) {
            break;
        }
    }
    let (x, prof) = best.unwrap();
    Err(SpinGapError::SelfCheck {
        what: format!("tilt equation residual mean at rho = {rho}, lambda = {x}"),
        moved: prof.mean.abs(),
        limit: tol,
    })
}

/// Certify that the mass outside the grid is a negligible fraction of the
/// mass on it, using the linear lower envelope of `W` a convex `phi` gives
/// beyond the boundary.
fn certify_tail(pot: &Potential, rho: f64, lambda: f64, prof: &Profile) -> Result<()> {
    let a = prof.grid.nodes[0];
    let b = *prof.grid.nodes.last().unwrap();
    let slope_right = pot.phi(b + rho, 1) + lambda - pot.psi_d1_sup;
    let slope_left = -(pot.phi(a + rho, 1) + lambda) - pot.psi_d1_sup;
    for (slope, edge) in [(slope_right, prof.raw[prof.raw.len() - 1]), (slope_left, prof.raw[0])] {
        if slope <= 1e-3 {
            return Err(SpinGapError::MassCheck {
                tail: f64::INFINITY,
                limit: TAIL_LIMIT,
            });
        }
        let tail = edge / (slope * prof.mass);
        if !(tail <= TAIL_LIMIT) {
            return Err(SpinGapError::MassCheck {
                tail,
                limit: TAIL_LIMIT,
            });
        }
    }
    Ok(())
}

impl TiltedMeasure {
    /// Solve the tilt equation for `(pot, rho)` to absolute mean tolerance
    /// `tol`, refining the grid until the variance is resolution-stable.
    pub fn solve(pot: &Potential, rho: f64, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(SpinGapError::InvalidArgument(format!(
                "mean tolerance must be positive, got {tol}"
            )));
        }
        if !rho.is_finite() {
            return Err(SpinGapError::InvalidArgument(format!(
                "target density must be finite, got {rho}"
            )));
        }
        let mut points = BASE_POINTS;
        let mut state = solve_lambda(pot, rho, points, tol)?;
        let mut sigma2 = second_moment(&state.1);
        loop {
            let next_points = 2 * (points - 1) + 1;
            if next_points > MAX_POINTS {
                return Err(SpinGapError::SelfCheck {
                    what: format!("variance stability under grid refinement at rho = {rho}"),
                    moved: f64::NAN,
                    limit: SIGMA2_STABLE,
                });
            }
            let next = solve_lambda(pot, rho, next_points, tol)?;
            let sigma2_next = second_moment(&next.1);
            let moved = (sigma2_next - sigma2) / sigma2_next;
            points = next_points;
            state = next;
            sigma2 = sigma2_next;
            if moved.abs() < SIGMA2_STABLE {
                break;
            }
        }
        let (lambda, prof) = state;
        certify_tail(pot, rho, lambda, &prof)?;

        let log_z = prof.mass.ln() - prof.w_center;
        let values: Vec<f64> = prof.raw.iter().map(|u| u / prof.mass).collect();
        let moments: Vec<f64> = (1..=8)
            .map(|k| {
                prof.grid
                    .nodes
                    .iter()
                    .zip(&prof.grid.weights)
                    .zip(&values)
                    .map(|((x, w), h)| w * h * x.powi(k))
                    .sum()
            })
            .collect();
        Ok(TiltedMeasure {
            pot: pot.clone(),
            rho,
            lambda,
            z: log_z.exp(),
            log_z,
            sigma2: moments[1],
            moments,
            grid: prof.grid,
            values,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    /// Raw k-th moment of the centered coordinate, k = 1..=8.
    pub fn moment(&self, k: usize) -> f64 {
        self.moments[k - 1]
    }

    /// Exact log-density at any point (not interpolated).
    pub fn log_density(&self, x: f64) -> f64 {
        -self.pot.v(x + self.rho, 0) - self.lambda * x - self.log_z
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// Recompute moments up to `k_max` and check that the top integrand has
    /// died off at the grid boundary.
    pub fn compute_moments(&self, k_max: usize) -> MomentSet {
        let moments: Vec<f64> = (1..=k_max as i32)
            .map(|k| {
                self.grid
                    .nodes
                    .iter()
                    .zip(&self.grid.weights)
                    .zip(&self.values)
                    .map(|((x, w), h)| w * h * x.powi(k))
                    .sum()
            })
            .collect();
        let top: Vec<f64> = self
            .grid
            .nodes
            .iter()
            .zip(&self.values)
            .map(|(x, h)| h * x.abs().powi(k_max as i32))
            .collect();
        let peak = top.iter().cloned().fold(0.0f64, f64::max);
        let edge = top[0].max(top[top.len() - 1]);
        let boundary_ratio = if peak > 0.0 { edge / peak } else { 0.0 };
        MomentSet {
            moments,
            boundary_ratio,
            boundary_negligible: boundary_ratio <= 1e-10,
        }
    }

    /// Mass of `{|x| >= sigma T}` for each `T`, with the smallest `C` such
    /// that every tail is below `C exp(-T / C)`.
    pub fn tail_estimate(&self, t_grid: &[f64]) -> Result<TailReport> {
        if t_grid.iter().any(|t| !(*t >= 0.0)) {
            return Err(SpinGapError::InvalidArgument(
                "tail thresholds must be nonnegative".into(),
            ));
        }
        let sigma = self.sigma();
        let masses: Vec<f64> = t_grid
            .iter()
            .map(|&t| {
                if t == 0.0 {
                    return 1.0;
                }
                let r = sigma * t;
                // Simpson on the exact density over [-r, r]; the tail is the
                // complement, so accuracy rides on the smooth interior.
                let n = 4000usize;
                let dx = 2.0 * r / n as f64;
                let mut s = self.density(-r) + self.density(r);
                for i in 1..n {
                    let x = -r + dx * i as f64;
                    s += self.density(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
                }
                (1.0 - s * dx / 3.0).max(0.0)
            })
            .collect();
        let feasible = |c: f64| {
            t_grid
                .iter()
                .zip(&masses)
                .all(|(&t, &m)| m <= c * (-t / c).exp())
        };
        let mut lo = 1e-8;
        let mut hi = 1e8;
        let smallest_c = if feasible(hi) {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if feasible(mid) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            hi
        } else {
            f64::INFINITY
        };
        let max_t = t_grid.iter().cloned().fold(0.0f64, f64::max);
        Ok(TailReport {
            thresholds: t_grid.to_vec(),
            masses,
            smallest_c,
            exceeds_grid: sigma * max_t > self.grid.halfwidth,
        })
    }

    /// Characteristic function of the normalized coordinate `x / sigma` at
    /// the given frequencies.
    pub fn char_function(&self, zeta_grid: &[f64]) -> Vec<Complex64> {
        let zeta_max = zeta_grid.iter().fold(1.0f64, |m, z| m.max(z.abs()));
        let (x0, dx, h) = self.char_nodes(zeta_max);
        zeta_grid
            .iter()
            .map(|&zeta| char_value(zeta / self.sigma(), x0, dx, &h))
            .collect()
    }

    /// Scan `|zeta| in [eps, zeta_max]` and report the sup of `|v|` there and
    /// the smallest quadratic-decay constant `C` with `|v| <= C / zeta^2`.
    pub fn char_report(&self, eps: f64, zeta_max: f64) -> Result<CharReport> {
        if !(eps > 0.0 && zeta_max > eps) {
            return Err(SpinGapError::InvalidArgument(format!(
                "need 0 < eps < zeta_max, got ({eps}, {zeta_max})"
            )));
        }
        let (x0, dx, h) = self.char_nodes(zeta_max);
        let steps = (((zeta_max - eps) / 0.01).ceil() as usize).clamp(64, 20_000);
        let mut c_eps = 0.0f64;
        let mut c_eps_at = eps;
        let mut decay_c = 0.0f64;
        for i in 0..=steps {
            let zeta = eps + (zeta_max - eps) * i as f64 / steps as f64;
            let m = char_value(zeta / self.sigma(), x0, dx, &h).norm();
            if m > c_eps {
                c_eps = m;
                c_eps_at = zeta;
            }
            decay_c = decay_c.max(m * zeta * zeta);
        }
        Ok(CharReport {
            eps,
            zeta_max,
            c_eps,
            c_eps_at,
            decay_c,
        })
    }

    /// Fine evaluation nodes for oscillatory quadrature: the sampling rate is
    /// set by the largest frequency so that aliasing is far outside the band.
    fn char_nodes(&self, zeta_max: f64) -> (f64, f64, Vec<f64>) {
        let freq_max = zeta_max / self.sigma();
        let dx_osc = 0.1 / freq_max;
        let dx = dx_osc.min(self.grid.step());
        let half = self.grid.halfwidth;
        let n = ((2.0 * half / dx).ceil() as usize + 1).clamp(129, 400_001);
        let dx = 2.0 * half / (n - 1) as f64;
        let x0 = self.grid.center - half;
        let h: Vec<f64> = (0..n).map(|i| self.density(x0 + dx * i as f64)).collect();
        (x0, dx, h)
    }
}

/// Trapezoid transform value at one frequency, using an incrementally
/// rotated phasor instead of per-node trig.
fn char_value(freq: f64, x0: f64, dx: f64, h: &[f64]) -> Complex64 {
    let rot = Complex64::from_polar(1.0, freq * dx);
    let mut phase = Complex64::from_polar(1.0, freq * x0);
    let mut acc = Complex64::new(0.0, 0.0);
    let last = h.len() - 1;
    for (i, &hi) in h.iter().enumerate() {
        let w = if i == 0 || i == last { 0.5 } else { 1.0 };
        acc += phase * (w * hi);
        phase *= rot;
    }
    acc * dx
}

fn second_moment(prof: &Profile) -> f64 {
    prof.grid
        .nodes
        .iter()
        .zip(&prof.grid.weights)
        .zip(&prof.raw)
        .map(|((x, w), u)| w * u * x * x)
        .sum::<f64>()
        / prof.mass
}

/// Moments recomputed on demand, with the boundary-decay diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct MomentSet {
    pub moments: Vec<f64>,
    /// Top-order integrand at the boundary relative to its peak.
    pub boundary_ratio: f64,
    pub boundary_negligible: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TailReport {
    pub thresholds: Vec<f64>,
    pub masses: Vec<f64>,
    pub smallest_c: f64,
    /// True when the largest threshold reaches past the quadrature grid.
    pub exceeds_grid: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CharReport {
    pub eps: f64,
    pub zeta_max: f64,
    /// Sup of the normalized characteristic function modulus on the band.
    pub c_eps: f64,
    pub c_eps_at: f64,
    /// Max of `|v(zeta)| zeta^2` over the band.
    pub decay_c: f64,
}

/// One row of the even-moment growth check.
#[derive(Debug, Clone, Serialize)]
pub struct MomentBoundRow {
    pub rho: f64,
    pub sigma2: f64,
    /// `m_{2n} / sigma^{2n}` for n = 1..=n_max.
    pub ratios: Vec<f64>,
    /// Allowed ceilings `prod_{l=2}^{n} (1 + k l^2)`.
    pub bounds: Vec<f64>,
    pub bounds_ok: bool,
    /// `m_{n+1}^2 <= sigma^2 m_{2n}` chain.
    pub cauchy_schwarz_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentBoundReport {
    pub k_const: f64,
    pub n_max: usize,
    pub rows: Vec<MomentBoundRow>,
    pub all_bounds_ok: bool,
    pub all_cauchy_schwarz_ok: bool,
    /// Largest ratio / ceiling over the sweep (slack when < 1).
    pub max_ratio_over_bound: f64,
}

/// Even moments grow no faster than the product ceiling with
/// `k = 12 exp(6 sup|psi|)`.
pub fn verify_moment_bounds(
    pot: &Potential,
    rho_grid: &[f64],
    n_max: usize,
) -> Result<MomentBoundReport> {
    if rho_grid.is_empty() {
        return Err(SpinGapError::InvalidArgument(
            "moment bound sweep needs a nonempty rho grid".into(),
        ));
    }
    if !(1..=4).contains(&n_max) {
        return Err(SpinGapError::InvalidArgument(format!(
            "moment order n_max must be in 1..=4, got {n_max}"
        )));
    }
    let k_const = 12.0 * (6.0 * pot.psi_sup).exp();
    let mut rows = Vec::with_capacity(rho_grid.len());
    let mut max_ratio_over_bound = 0.0f64;
    for &rho in rho_grid {
        let tm = TiltedMeasure::solve(pot, rho, DEFAULT_MEAN_TOL)?;
        let s2 = tm.sigma2;
        let mut ratios = Vec::new();
        let mut bounds = Vec::new();
        let mut bound = 1.0;
        let mut bounds_ok = true;
        for n in 1..=n_max {
            if n >= 2 {
                bound *= 1.0 + k_const * (n * n) as f64;
            }
            let ratio = tm.moment(2 * n) / s2.powi(n as i32);
            bounds_ok &= ratio <= bound * (1.0 + 1e-12);
            if n >= 2 {
                // n = 1 is the identity m_2 = sigma^2; slack is measured on
                // the substantive orders.
                max_ratio_over_bound = max_ratio_over_bound.max(ratio / bound);
            }
            ratios.push(ratio);
            bounds.push(bound);
        }
        let mut cs_ok = true;
        for n in 1..=n_max.min(3) {
            let lhs = tm.moment(n + 1).powi(2);
            let rhs = s2 * tm.moment(2 * n);
            cs_ok &= lhs <= rhs * (1.0 + 1e-10) + 1e-300;
        }
        rows.push(MomentBoundRow {
            rho,
            sigma2: s2,
            ratios,
            bounds,
            bounds_ok,
            cauchy_schwarz_ok: cs_ok,
        });
    }
    Ok(MomentBoundReport {
        k_const,
        n_max,
        all_bounds_ok: rows.iter().all(|r| r.bounds_ok),
        all_cauchy_schwarz_ok: rows.iter().all(|r| r.cauchy_schwarz_ok),
        max_ratio_over_bound,
        rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaBoundRow {
    pub rho: f64,
    pub sigma2: f64,
    pub lambda: f64,
    /// Curvature of the convex part at the target density.
    pub phi2_at_rho: f64,
    /// Variance of the perturbation-free measure at the same density.
    pub sigma2_stripped: f64,
    /// Expected inverse curvature (upper bound on the stripped variance).
    pub upper: f64,
    /// Inverse expected curvature (lower bound on the stripped variance).
    pub lower: f64,
    pub bracket_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SigmaBoundReport {
    pub rows: Vec<SigmaBoundRow>,
    pub all_brackets_ok: bool,
    /// Max over the sweep of `max(sigma2 phi'', 1 / (sigma2 phi''))` on the
    /// full measure: the observed two-sided comparability constant.
    pub observed_k: f64,
    /// Slope of `log sigma2` against `log rho` (meaningful on positive
    /// sweeps; NaN otherwise).
    pub loglog_slope: f64,
}

/// Variance versus curvature: bracket the perturbation-free variance by the
/// two convexity inequalities and report how comparable `sigma2` and
/// `1 / phi''(rho)` stay over the sweep.
pub fn verify_sigma_bounds(pot: &Potential, rho_grid: &[f64]) -> Result<SigmaBoundReport> {
    if rho_grid.is_empty() {
        return Err(SpinGapError::InvalidArgument(
            "variance bound sweep needs a nonempty rho grid".into(),
        ));
    }
    let stripped = pot.without_perturbation();
    let mut rows = Vec::with_capacity(rho_grid.len());
    let mut observed_k = 0.0f64;
    for &rho in rho_grid {
        let tm = TiltedMeasure::solve(pot, rho, DEFAULT_MEAN_TOL)?;
        let tm_s = if pot.has_perturbation() {
            TiltedMeasure::solve(&stripped, rho, DEFAULT_MEAN_TOL)?
        } else {
            tm.clone()
        };
        let expect = |f: &dyn Fn(f64) -> f64| -> f64 {
            tm_s.grid
                .nodes
                .iter()
                .zip(&tm_s.grid.weights)
                .zip(&tm_s.values)
                .map(|((x, w), h)| w * h * f(*x))
                .sum()
        };
        let upper = expect(&|x| 1.0 / stripped.phi(x + rho, 2));
        let lower = 1.0 / expect(&|x| stripped.phi(x + rho, 2));
        let bracket_ok = tm_s.sigma2 <= upper * (1.0 + 1e-9) && tm_s.sigma2 >= lower * (1.0 - 1e-9);
        let phi2 = pot.phi(rho, 2);
        let prod = tm.sigma2 * phi2;
        observed_k = observed_k.max(prod.max(1.0 / prod));
        rows.push(SigmaBoundRow {
            rho,
            sigma2: tm.sigma2,
            lambda: tm.lambda,
            phi2_at_rho: phi2,
            sigma2_stripped: tm_s.sigma2,
            upper,
            lower,
            bracket_ok,
        });
    }
    let positive: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.rho > 0.0)
        .map(|r| (r.rho, r.sigma2))
        .collect();
    let loglog_slope = if positive.len() >= 2 {
        fit_loglog(&positive).0
    } else {
        f64::NAN
    };
    Ok(SigmaBoundReport {
        all_brackets_ok: rows.iter().all(|r| r.bracket_ok),
        observed_k,
        loglog_slope,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potential::{ConvexPart, Perturbation};

    fn pure_quartic() -> Potential {
        Potential::new(ConvexPart::Quartic { a: 0.0, b: 1.0 }, Perturbation::Zero).unwrap()
    }

    #[test]
    fn gaussian_tilt_is_closed_form() {
        let tm = TiltedMeasure::solve(&Potential::gaussian(), 2.0, 1e-13).unwrap();
        assert!((tm.lambda + 2.0).abs() < 1e-10, "lambda = {}", tm.lambda);
        assert!((tm.sigma2 - 1.0).abs() < 1e-8);
        // exp(-(x+2)^2/2 + 2x) = exp(-x^2/2 - 2), so log Z = log sqrt(2 pi) - 2.
        let expect = 0.5 * (2.0 * std::f64::consts::PI).ln() - 2.0;
        assert!((tm.log_z - expect).abs() < 1e-9, "log_z = {}", tm.log_z);
        assert!(tm.moment(3).abs() < 1e-9);
        assert!((tm.moment(4) - 3.0).abs() < 1e-7);
        assert!((tm.moment(6) - 15.0).abs() < 1e-6);
        assert!((tm.moment(8) - 105.0).abs() < 1e-5);
    }

    #[test]
    fn even_potential_needs_no_tilt_at_zero() {
        let tm =
            TiltedMeasure::solve(&Potential::quartic_cosine_reference(), 0.0, 1e-13).unwrap();
        assert!(tm.lambda.abs() < 1e-10, "lambda = {}", tm.lambda);
    }

    // Independent route to the same tilt: bisection over Simpson quadrature
    // on a fixed wide window, no mode search, no adaptive grid.
    fn simpson_mean(lambda: f64) -> f64 {
        let (a, b, n) = (-6.0f64, 6.0f64, 6000usize);
        let dx = (b - a) / n as f64;
        let f = |x: f64| (-(x + 1.0).powi(4) - lambda * x).exp();
        let (mut z, mut m) = (f(a) + f(b), a * f(a) + b * f(b));
        for i in 1..n {
            let x = a + dx * i as f64;
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            z += w * f(x);
            m += w * x * f(x);
        }
        m / z
    }

    #[test]
    fn pure_quartic_tilt_matches_independent_oracle() {
        let (mut lo, mut hi) = (-9.0f64, -1.0f64);
        assert!(simpson_mean(lo) > 0.0 && simpson_mean(hi) < 0.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if simpson_mean(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let oracle = 0.5 * (lo + hi);
        // Value pinned beforehand with 30-digit quadrature.
        assert!((oracle + 5.013045116922707).abs() < 1e-9, "oracle = {oracle}");

        let tm = TiltedMeasure::solve(&pure_quartic(), 1.0, 1e-13).unwrap();
        assert!((tm.lambda - oracle).abs() < 1e-8, "lambda = {}", tm.lambda);
        assert!((tm.sigma2 - 0.09046363177676840).abs() < 1e-9);
        assert!(tm.moment(1).abs() <= 1e-13);
    }

    #[test]
    fn pure_quartic_centered_variance_hits_gamma_ratio() {
        let tm = TiltedMeasure::solve(&pure_quartic(), 0.0, 1e-13).unwrap();
        // Gamma(3/4) / Gamma(1/4), pinned beforehand.
        assert!((tm.sigma2 - 0.3379891200336424).abs() < 1e-10);
    }

    #[test]
    fn normalization_and_centering_hold() {
        for (pot, rho) in [
            (Potential::quartic_cosine_reference(), 7.0),
            (Potential::quartic_reference(), -11.0),
            (
                Potential::new(
                    ConvexPart::SmoothedPower {
                        alpha: 0.5,
                        eps: 0.5,
                    },
                    Perturbation::Zero,
                )
                .unwrap(),
                120.0,
            ),
        ] {
            let tm = TiltedMeasure::solve(&pot, rho, 1e-12).unwrap();
            let mass: f64 = tm
                .grid
                .weights
                .iter()
                .zip(&tm.values)
                .map(|(w, h)| w * h)
                .sum();
            assert!((mass - 1.0).abs() < 1e-12);
            assert!(tm.moment(1).abs() <= 1e-12);
            assert!(tm.sigma2 > 0.0);
            let set = tm.compute_moments(8);
            assert!(set.boundary_negligible, "ratio = {}", set.boundary_ratio);
            assert!((set.moments[1] - tm.sigma2).abs() < 1e-14);
        }
    }

    #[test]
    fn tilt_decreases_in_density_for_dominated_perturbation() {
        let pot = Potential::quartic_cosine_reference();
        let mut last = f64::INFINITY;
        for i in 0..13 {
            let rho = -3.0 + 0.5 * i as f64;
            let tm = TiltedMeasure::solve(&pot, rho, 1e-12).unwrap();
            assert!(tm.lambda < last, "rho = {rho}");
            last = tm.lambda;
        }
    }

    #[test]
    fn gaussian_tilt_linear_in_density() {
        let pot = Potential::new(ConvexPart::Quadratic { a: 1.7 }, Perturbation::Zero).unwrap();
        for rho in [-2.0, 0.3, 5.0] {
            let tm = TiltedMeasure::solve(&pot, rho, 1e-13).unwrap();
            assert!((tm.lambda + 2.0 * 1.7 * rho).abs() < 1e-9);
            assert!((tm.sigma2 - 1.0 / 3.4).abs() < 1e-9);
        }
    }

    #[test]
    fn moment_bounds_hold_on_reference_families() {
        let rep = verify_moment_bounds(&Potential::gaussian(), &[0.0, 1.3], 2).unwrap();
        assert!(rep.all_bounds_ok && rep.all_cauchy_schwarz_ok);
        assert!((rep.rows[0].ratios[1] - 3.0).abs() < 1e-6, "kurtosis");
        assert!((rep.rows[0].bounds[1] - 49.0).abs() < 1e-12);

        let rep = verify_moment_bounds(
            &Potential::quartic_cosine_reference(),
            &[-20.0, -10.0, 0.0, 10.0, 20.0],
            4,
        )
        .unwrap();
        assert!((rep.k_const - 12.0 * (1.8f64).exp()).abs() < 1e-12);
        assert!(rep.all_bounds_ok && rep.all_cauchy_schwarz_ok);
        assert!(rep.max_ratio_over_bound < 1.0);
    }

    #[test]
    fn variance_brackets_hold_on_quartic_sweep() {
        let grid: Vec<f64> = (-6..=6).map(|i| 5.0 * i as f64).collect();
        let rep = verify_sigma_bounds(&Potential::quartic_reference(), &grid).unwrap();
        assert!(rep.all_brackets_ok);
        assert!(rep.observed_k.is_finite() && rep.observed_k >= 1.0);
    }

    #[test]
    fn gaussian_variance_curvature_product_is_one() {
        let rep = verify_sigma_bounds(&Potential::gaussian(), &[-3.0, 0.5, 9.0]).unwrap();
        assert!((rep.observed_k - 1.0).abs() < 1e-7);
    }

    #[test]
    fn weak_convexity_variance_grows_like_the_curvature_inverse() {
        let pot = Potential::new(
            ConvexPart::SmoothedPower {
                alpha: 0.5,
                eps: 0.5,
            },
            Perturbation::Zero,
        )
        .unwrap();
        let grid: Vec<f64> = (0..7).map(|i| 10.0 * (300.0f64 / 10.0).powf(i as f64 / 6.0)).collect();
        let rep = verify_sigma_bounds(&pot, &grid).unwrap();
        assert!(
            (rep.loglog_slope - 0.5).abs() < 0.15,
            "slope = {}",
            rep.loglog_slope
        );
    }

    #[test]
    fn gaussian_tail_matches_normal_cdf() {
        let tm = TiltedMeasure::solve(&Potential::gaussian(), 0.0, 1e-13).unwrap();
        let rep = tm.tail_estimate(&[0.0, 2.0]).unwrap();
        assert!((rep.masses[0] - 1.0).abs() < 1e-12);
        // Two-sided standard normal tail at 2, pinned beforehand.
        assert!((rep.masses[1] - 0.045500263896358414).abs() < 1e-9);
        assert!(!rep.exceeds_grid);
    }

    #[test]
    fn quartic_tails_decay_and_admit_exponential_envelope() {
        let tm = TiltedMeasure::solve(&Potential::quartic_reference(), 0.0, 1e-12).unwrap();
        let t: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let rep = tm.tail_estimate(&t).unwrap();
        for w in rep.masses.windows(2) {
            // Far tails bottom out at the rounding floor of 1 - inside.
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(rep.smallest_c.is_finite());
        for (t, m) in rep.thresholds.iter().zip(&rep.masses) {
            assert!(*m <= rep.smallest_c * (-t / rep.smallest_c).exp() * (1.0 + 1e-9));
        }
    }

    #[test]
    fn gaussian_char_function_is_gaussian() {
        let tm = TiltedMeasure::solve(&Potential::gaussian(), 1.0, 1e-13).unwrap();
        let zetas = [0.0, 0.5, 1.0, 2.0, 3.0];
        let vals = tm.char_function(&zetas);
        assert!((vals[0] - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        for (z, v) in zetas.iter().zip(&vals) {
            let expect = (-0.5 * z * z).exp();
            assert!((v.norm() - expect).abs() < 1e-8, "zeta = {z}");
        }
    }

    #[test]
    fn char_modulus_stays_below_one_off_the_origin() {
        let tm =
            TiltedMeasure::solve(&Potential::quartic_cosine_reference(), 7.0, 1e-12).unwrap();
        let rep = tm.char_report(0.5, 50.0).unwrap();
        assert!(rep.c_eps < 1.0, "sup = {} at {}", rep.c_eps, rep.c_eps_at);
        assert!(rep.decay_c.is_finite());
    }

    #[test]
    fn solve_validates_inputs() {
        let pot = Potential::gaussian();
        assert!(TiltedMeasure::solve(&pot, 0.0, 0.0).is_err());
        assert!(TiltedMeasure::solve(&pot, f64::NAN, 1e-12).is_err());
        assert!(verify_moment_bounds(&pot, &[], 2).is_err());
        assert!(verify_moment_bounds(&pot, &[0.0], 9).is_err());
    }
}

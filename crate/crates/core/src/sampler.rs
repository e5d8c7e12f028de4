//! Equilibrium sampler for the sum-constrained product measure.
//!
//! Pairwise heat-bath exchanges: pick two sites, hold their sum fixed, and
//! resample one of them from the exact one-dimensional conditional density.
//! Every move preserves the conserved total bit-for-bit because the partner
//! coordinate is written as `s - x`. Chains are deterministic functions of
//! their seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::potential::Potential;
use crate::{Result, SpinGapError};

/// Nodes of the per-step inverse-CDF table.
const CDF_POINTS: usize = 1024;
/// Log-density drop that delimits the slice support, before the
/// perturbation allowance is added.
const SUPPORT_DROP: f64 = 40.0;
/// Steps between exact re-projections onto the constraint plane.
const REPROJECT_EVERY: u64 = 10_000;

/// One Markov chain on the constraint plane `sum eta_i = n rho`.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub eta: Vec<f64>,
    pub target_sum: f64,
    pub rng: ChaCha8Rng,
    pub step_count: u64,
}

/// Starts at the constant configuration, which sits on the constraint
/// plane by construction.
pub fn init_state(n: usize, rho: f64, seed: u64) -> Result<ChainState> {
    if n < 2 {
        return Err(SpinGapError::InvalidArgument(format!(
            "chain needs at least 2 sites, got {n}"
        )));
    }
    Ok(ChainState {
        eta: vec![rho; n],
        target_sum: rho * n as f64,
        rng: ChaCha8Rng::seed_from_u64(seed),
        step_count: 0,
    })
}

/// One heat-bath move: resample a uniformly random pair at fixed pair sum
/// from the conditional density `exp(-V(x) - V(s - x))`.
pub fn pair_heatbath_step(state: &mut ChainState, pot: &Potential) -> Result<()> {
    let n = state.eta.len();
    let i = state.rng.random_range(0..n);
    let mut j = state.rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let s = state.eta[i] + state.eta[j];
    let x = sample_conditional(pot, s, &mut state.rng)?;
    state.eta[i] = x;
    // Exact conservation: the partner is defined by the sum.
    state.eta[j] = s - x;
    state.step_count += 1;
    if state.step_count % REPROJECT_EVERY == 0 {
        reproject(state);
    }
    Ok(())
}

/// Spreads the accumulated floating drift of the total evenly over the
/// coordinates.
fn reproject(state: &mut ChainState) {
    let sum: f64 = state.eta.iter().sum();
    let shift = (sum - state.target_sum) / state.eta.len() as f64;
    for v in &mut state.eta {
        *v -= shift;
    }
}

/// Inverse-CDF draw from `exp(-U)` with `U(x) = V(x) + V(s - x)` on a
/// support determined by a log-density drop from the slice midpoint.
fn sample_conditional(pot: &Potential, s: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let u = |x: f64| pot.v(x, 0) + pot.v(s - x, 0);
    let center = 0.5 * s;
    let u0 = u(center);
    // The midpoint is a stationary point of the convex part; the true
    // minimum sits within the perturbation oscillation of it.
    let drop = SUPPORT_DROP + 4.0 * pot.psi_sup;
    let left = support_edge(&u, center, u0, drop, -1.0);
    let right = support_edge(&u, center, u0, drop, 1.0);

    let draw = rng.random::<f64>();
    match invert_cdf(&u, u0, center - left, center + right, draw) {
        Some(x) => Ok(x),
        None => {
            // Widen once and retry before giving up.
            match invert_cdf(&u, u0, center - 2.0 * left, center + 2.0 * right, draw) {
                Some(x) => Ok(x),
                None => Err(SpinGapError::Underflow(format!(
                    "conditional mass at pair sum {s} vanished on the sampling grid"
                ))),
            }
        }
    }
}

/// Distance from `center` (toward `dir`) at which `U` has risen by `drop`.
fn support_edge(u: &impl Fn(f64) -> f64, center: f64, u0: f64, drop: f64, dir: f64) -> f64 {
    let mut a = 1.0f64;
    while u(center + dir * a) - u0 < drop {
        a *= 1.5;
        if a > 1e8 {
            return a;
        }
    }
    let mut lo = 0.0f64;
    let mut hi = a;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if u(center + dir * mid) - u0 < drop {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi * 1.02
}

/// Tabulates `exp(-(U - U0))` on a uniform grid and inverts the trapezoid
/// CDF; the density is linear within each cell, so the in-cell inverse is
/// a quadratic solve. Returns None when the table mass is not positive.
fn invert_cdf(
    u: &impl Fn(f64) -> f64,
    u0: f64,
    lo: f64,
    hi: f64,
    draw: f64,
) -> Option<f64> {
    let dx = (hi - lo) / (CDF_POINTS - 1) as f64;
    if !(dx > 0.0) {
        return None;
    }
    let mut dens = [0.0f64; CDF_POINTS];
    for (k, d) in dens.iter_mut().enumerate() {
        *d = (-(u(lo + k as f64 * dx) - u0)).exp();
    }
    let mut cum = [0.0f64; CDF_POINTS];
    for k in 1..CDF_POINTS {
        cum[k] = cum[k - 1] + 0.5 * (dens[k - 1] + dens[k]) * dx;
    }
    let total = cum[CDF_POINTS - 1];
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let y = draw * total;
    let cell = match cum.binary_search_by(|c| c.partial_cmp(&y).unwrap()) {
        Ok(k) => k.min(CDF_POINTS - 2),
        Err(k) => k.saturating_sub(1).min(CDF_POINTS - 2),
    };
    let rest = y - cum[cell];
    let p0 = dens[cell];
    let slope = (dens[cell + 1] - dens[cell]) / dx;
    // Solve p0 t + slope t^2 / 2 = rest for t in [0, dx].
    let t = if slope.abs() * dx < 1e-12 * p0.max(1e-300) {
        if p0 > 0.0 {
            rest / p0
        } else {
            0.5 * dx
        }
    } else {
        let disc = (p0 * p0 + 2.0 * slope * rest).max(0.0);
        (disc.sqrt() - p0) / slope
    };
    Some(lo + cell as f64 * dx + t.clamp(0.0, dx))
}

/// Summary a chain leaves behind: marginal moments of the first coordinate
/// with autocorrelation-aware standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct MarginalStats {
    pub n: usize,
    pub rho: f64,
    pub steps: u64,
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub mean_se: f64,
    pub variance_se: f64,
    /// Integrated autocorrelation time of the recorded series, in units of
    /// recorded samples.
    pub tau_int: f64,
}

/// Runs one chain and accumulates the first-coordinate series, recorded
/// every `thin` steps after a tenth of the run is discarded as burn-in.
pub fn run_marginal_stats(
    pot: &Potential,
    n: usize,
    rho: f64,
    steps: u64,
    thin: u64,
    seed: u64,
) -> Result<MarginalStats> {
    if thin == 0 {
        return Err(SpinGapError::InvalidArgument("thin must be positive".into()));
    }
    let mut state = init_state(n, rho, seed)?;
    let burn = steps / 10;
    let mut series = Vec::with_capacity(((steps - burn) / thin) as usize + 1);
    for step in 0..steps {
        pair_heatbath_step(&mut state, pot)?;
        if step >= burn && (step - burn) % thin == 0 {
            series.push(state.eta[0]);
        }
    }
    if series.len() < 16 {
        return Err(SpinGapError::InvalidArgument(
            "too few recorded samples for summary statistics".into(),
        ));
    }
    let m = series.len() as f64;
    let mean = series.iter().sum::<f64>() / m;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &v in &series {
        let d = v - mean;
        m2 += d * d;
        m4 += d * d * d * d;
    }
    m2 /= m;
    m4 /= m;
    let tau = integrated_autocorr_time(&series);
    let eff = (m / (2.0 * tau)).max(2.0);
    let mean_se = (m2 / eff).sqrt();
    let variance_se = ((m4 - m2 * m2).max(0.0) / eff).sqrt();
    Ok(MarginalStats {
        n,
        rho,
        steps,
        samples: series.len(),
        mean,
        variance: m2,
        mean_se,
        variance_se,
        tau_int: tau,
    })
}

/// Self-consistent truncation of the autocorrelation sum: grow the window
/// until it reaches five times the running estimate.
pub fn integrated_autocorr_time(series: &[f64]) -> f64 {
    let m = series.len();
    let mean = series.iter().sum::<f64>() / m as f64;
    let var: f64 = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
    if !(var > 0.0) {
        return 0.5;
    }
    let mut tau = 0.5;
    for t in 1..m / 3 {
        let mut acc = 0.0;
        for k in 0..m - t {
            acc += (series[k] - mean) * (series[k + t] - mean);
        }
        let rho_t = acc / ((m - t) as f64 * var);
        tau += rho_t;
        if t as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(0.5)
}

const SPGS_MAGIC: &[u8; 4] = b"SPGS";
const SPGS_VERSION: u32 = 1;

/// Writes thinned samples as a little-endian columnar binary file:
/// magic "SPGS", version u32, site count u32, sample count u64, then the
/// samples as 64-bit floats.
pub fn write_spgs(path: &Path, n: u32, samples: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SPGS_MAGIC)?;
    w.write_all(&SPGS_VERSION.to_le_bytes())?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&(samples.len() as u64).to_le_bytes())?;
    for v in samples {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by `write_spgs`, validating header and length.
pub fn read_spgs(path: &Path) -> Result<(u32, Vec<f64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SPGS_MAGIC {
        return Err(SpinGapError::InvalidArgument(
            "not a sample file: bad magic".into(),
        ));
    }
    let mut word4 = [0u8; 4];
    r.read_exact(&mut word4)?;
    let version = u32::from_le_bytes(word4);
    if version != SPGS_VERSION {
        return Err(SpinGapError::InvalidArgument(format!(
            "unsupported sample file version {version}"
        )));
    }
    r.read_exact(&mut word4)?;
    let n = u32::from_le_bytes(word4);
    let mut word8 = [0u8; 8];
    r.read_exact(&mut word8)?;
    let count = u64::from_le_bytes(word8);
    let mut samples = Vec::with_capacity(count as usize);
    for _ in 0..count {
        r.read_exact(&mut word8)?;
        samples.push(f64::from_le_bytes(word8));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(SpinGapError::InvalidArgument(
            "sample file longer than its header claims".into(),
        ));
    }
    Ok((n, samples))
}

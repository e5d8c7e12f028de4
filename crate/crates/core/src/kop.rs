//! One-site conditional averaging under the conserved sum.
//!
//! The two-site density from the convolution pipeline induces a Markov
//! operator: average a function of one coordinate over the second one.
//! This module discretizes that operator on the shared node grid, checks
//! the exact eigenvector formed by the centered coordinate itself, and
//! measures how strongly everything orthogonal to it is contracted as the
//! site count grows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::edgeworth::{convolve_density, pair_kernel};
use crate::grid::QuadratureGrid;
use crate::numerics::{fit_loglog, spectral_radius_symmetric};
use crate::single_site::TiltedMeasure;
use crate::{Result, SpinGapError};

/// Rows compared against the independently re-solved conditional density.
const CROSS_ROWS: usize = 10;
/// Absolute density deviation allowed between the two construction routes.
const CROSS_LIMIT: f64 = 1e-6;
/// Dense symmetric eigensolves stay below this matrix size.
pub const MAX_POINTS: usize = 1024;
/// Site counts beyond this are out of scope for the dense operator.
pub const MAX_SITES: usize = 256;

/// Discrete conditional-average operator for one site at fixed total sum.
///
/// Rows are conditional densities: `K_ij` is the probability weight that
/// the partner coordinate sits at node `j` given the first coordinate at
/// node `i`. The matrix is exactly row-stochastic and exactly self-adjoint
/// in the `marginal_weights` pairing because the row mass is the discrete
/// margin of the symmetric joint density itself.
#[derive(Debug, Clone)]
pub struct KOperator {
    pub n: usize,
    pub rho: f64,
    /// Shared node grid in the centered coordinate.
    pub grid: QuadratureGrid,
    /// Discrete one-site margin `m_i = sum_j w_j joint_ij`.
    pub row_mass: Vec<f64>,
    /// Weights `w_i m_i` of the inner product the operator is symmetric in.
    pub marginal_weights: Vec<f64>,
    /// `K_ij = w_j joint_ij / m_i`.
    pub matrix: DMatrix<f64>,
    /// Worst row deviation from the re-solved conditional route.
    pub cross_check_dev: f64,
}

/// Builds the operator from the two-site density and cross-checks sample
/// rows against a second route: re-solving the single-site problem at the
/// shifted mean forced by conditioning on the first coordinate.
pub fn build_k(
    tm: &TiltedMeasure,
    n: usize,
    points: usize,
    resolution: usize,
) -> Result<KOperator> {
    if !(3..=MAX_SITES).contains(&n) {
        return Err(SpinGapError::InvalidArgument(format!(
            "conditional operator supports 3..={MAX_SITES} sites, got {n}"
        )));
    }
    if points > MAX_POINTS {
        return Err(SpinGapError::InvalidArgument(format!(
            "dense operator is capped at {MAX_POINTS} nodes, got {points}"
        )));
    }
    let pk = pair_kernel(tm, n, points, resolution)?;
    let grid = pk.grid_x.clone();
    let m = grid.len();
    let joint = pk.ln_joint.map(|v| v.exp());

    let mut row_mass = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            acc += grid.weights[j] * joint[(i, j)];
        }
        if !(acc > 0.0) {
            return Err(SpinGapError::Underflow(format!(
                "conditional row mass vanished at node {}",
                grid.nodes[i]
            )));
        }
        row_mass[i] = acc;
    }
    let mut matrix = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            matrix[(i, j)] = grid.weights[j] * joint[(i, j)] / row_mass[i];
        }
    }
    let marginal_weights: Vec<f64> = (0..m).map(|i| grid.weights[i] * row_mass[i]).collect();

    let mut op = KOperator {
        n,
        rho: tm.rho,
        grid,
        row_mass,
        marginal_weights,
        matrix,
        cross_check_dev: 0.0,
    };
    op.cross_check_dev = cross_check(tm, &op, resolution)?;
    Ok(op)
}

/// Conditioning on the first coordinate at `u` turns the remaining `n - 1`
/// sites into the same constrained system at mean shifted by `-u/(n-1)`.
/// Rebuilding that system from scratch gives each row density a second,
/// independently solved construction.
fn cross_check(tm: &TiltedMeasure, op: &KOperator, resolution: usize) -> Result<f64> {
    let n = op.n;
    let sigma = tm.sigma();
    let x0 = op.grid.nodes[0];
    let dx = op.grid.step();
    let top = (op.grid.len() - 1) as f64;
    let mut worst = 0.0f64;
    for k in 0..CROSS_ROWS {
        let target = -2.0 * sigma + 4.0 * sigma * k as f64 / (CROSS_ROWS - 1) as f64;
        let i = ((target - x0) / dx).round().clamp(0.0, top) as usize;
        let u = op.grid.nodes[i];
        let shift = u / (n - 1) as f64;
        let tm_x = TiltedMeasure::solve(&tm.pot, tm.rho - shift, 1e-12)?;
        let g_rest = convolve_density(&tm_x, n - 2, resolution)?;
        let g_all = convolve_density(&tm_x, n - 1, resolution)?;
        let z0 = g_all.value_at(0.0);
        if !(z0 > 1e-300) {
            return Err(SpinGapError::Underflow(
                "conditional normalizer vanished".into(),
            ));
        }
        let ln_z0 = z0.ln();
        for j in 0..op.grid.len() {
            // Node j in the original centered coordinate, re-centered at
            // the shifted mean.
            let v = op.grid.nodes[j] + shift;
            let cond = (tm_x.log_density(v) + g_rest.ln_value_at(v) - ln_z0).exp();
            let pair = op.matrix[(i, j)] / op.grid.weights[j];
            worst = worst.max((pair - cond).abs());
        }
    }
    if worst > CROSS_LIMIT {
        return Err(SpinGapError::CrossCheck {
            what: "conditional rows across construction routes".into(),
            dev: worst,
            limit: CROSS_LIMIT,
        });
    }
    Ok(worst)
}

/// Weighted relative residual of the exact identity: averaging the
/// centered coordinate over a row returns `-x_i / (n - 1)`.
pub fn verify_linear_eigen(op: &KOperator) -> f64 {
    let m = op.grid.len();
    let rate = 1.0 / (op.n - 1) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..m {
        let mut acc = 0.0;
        for j in 0..m {
            acc += op.matrix[(i, j)] * op.grid.nodes[j];
        }
        let r = acc + rate * op.grid.nodes[i];
        num += op.marginal_weights[i] * r * r;
        den += op.marginal_weights[i] * op.grid.nodes[i] * op.grid.nodes[i];
    }
    (num / den).sqrt()
}

/// Similarity transform onto the symmetric representative
/// `A_ij = joint_ij sqrt(w_i w_j) / sqrt(m_i m_j)`; same spectrum,
/// amenable to the symmetric eigensolver.
fn symmetrized(op: &KOperator) -> DMatrix<f64> {
    let m = op.grid.len();
    let root: Vec<f64> = op.marginal_weights.iter().map(|v| v.sqrt()).collect();
    let mut a = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = 0.5
                * (op.matrix[(i, j)] * root[i] / root[j]
                    + op.matrix[(j, i)] * root[j] / root[i]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    a
}

/// Full spectrum, descending. The largest value is 1 (constants); the
/// centered coordinate contributes `-1/(n-1)`.
pub fn eigenvalues(op: &KOperator) -> Vec<f64> {
    let eig = SymmetricEigen::new(symmetrized(op));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals
}

/// Signed extreme eigenvalues on the orthogonal complement of the
/// constants and the centered coordinate in the weighted inner product.
/// The two projected-out directions contribute exact zeros.
pub fn projected_extremes(op: &KOperator) -> (f64, f64) {
    let m = op.grid.len();
    let a = symmetrized(op);
    let root: Vec<f64> = op.marginal_weights.iter().map(|v| v.sqrt()).collect();
    let mut q1 = DVector::from_iterator(m, root.iter().copied());
    q1 /= q1.norm();
    let mut q2 = DVector::from_iterator(
        m,
        root.iter().zip(&op.grid.nodes).map(|(r, x)| r * x),
    );
    // Twice, against the numerically near-orthogonal constant direction.
    for _ in 0..2 {
        let c = q1.dot(&q2);
        q2 -= c * &q1;
    }
    q2 /= q2.norm();
    let p = DMatrix::identity(m, m) - &q1 * q1.transpose() - &q2 * q2.transpose();
    let projected = &p * a * &p;
    let eig = SymmetricEigen::new(projected);
    let mut lo = f64::MAX;
    let mut hi = f64::MIN;
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Largest absolute eigenvalue on the orthogonal complement of the
/// constants and the centered coordinate in the weighted inner product.
pub fn projected_confinement(op: &KOperator) -> f64 {
    let (lo, hi) = projected_extremes(op);
    lo.abs().max(hi.abs())
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfinementRow {
    pub n: usize,
    pub rho: f64,
    pub projected_norm: f64,
    pub eig_residual: f64,
    pub max_eig: f64,
    pub min_eig: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfinementReport {
    pub points: usize,
    pub resolution: usize,
    pub rows: Vec<ConfinementRow>,
    /// Log-log slope of the projected norm against the site count.
    pub slope: f64,
    pub intercept: f64,
    /// No projected norm rises by more than five percent step to step.
    pub monotone_within_noise: bool,
}

/// Sweeps the site count, reporting the projected contraction norm and the
/// residual of the exact linear eigenvector, with a log-log fit of the
/// contraction against the site count.
pub fn spectral_confinement(
    tm: &TiltedMeasure,
    n_list: &[usize],
    points: usize,
    resolution: usize,
) -> Result<ConfinementReport> {
    if n_list.len() < 2 {
        return Err(SpinGapError::InvalidArgument(
            "confinement sweep needs at least two site counts".into(),
        ));
    }
    if n_list.iter().any(|&n| n < 4) {
        return Err(SpinGapError::InvalidArgument(
            "confinement sweep needs n >= 4".into(),
        ));
    }
    let mut sorted = n_list.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let rows = sorted
        .par_iter()
        .map(|&n| -> Result<ConfinementRow> {
            let op = build_k(tm, n, points, resolution)?;
            let spectrum = eigenvalues(&op);
            Ok(ConfinementRow {
                n,
                rho: tm.rho,
                projected_norm: projected_confinement(&op),
                eig_residual: verify_linear_eigen(&op),
                max_eig: spectrum[0],
                min_eig: *spectrum.last().unwrap(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.n as f64, r.projected_norm))
        .collect();
    let (slope, intercept) = fit_loglog(&samples);
    let monotone = rows
        .windows(2)
        .all(|w| w[1].projected_norm <= w[0].projected_norm * 1.05);
    Ok(ConfinementReport {
        points,
        resolution,
        rows,
        slope,
        intercept,
        monotone_within_noise: monotone,
    })
}

//! Small numerical utilities shared across modules.

/// Cubic (4-point Lagrange) interpolation on a uniform grid.
///
/// `x0` is the first node, `dx` the spacing. Outside the grid the value is
/// clamped to the nearest admissible stencil, which callers only hit in
/// regions where the interpolated function is negligible.
pub fn cubic_interp_uniform(x0: f64, dx: f64, values: &[f64], x: f64) -> f64 {
    let n = values.len();
    assert!(n >= 4, "cubic interpolation needs at least 4 nodes");
    let t = (x - x0) / dx;
    // Left node of the 4-point stencil, clamped so all indices are valid.
    let mut i0 = t.floor() as isize - 1;
    i0 = i0.clamp(0, n as isize - 4);
    let i0 = i0 as usize;
    let s = t - i0 as f64; // position relative to the stencil, in [..]
    // Lagrange weights for nodes at offsets 0,1,2,3.
    let w0 = -(s - 1.0) * (s - 2.0) * (s - 3.0) / 6.0;
    let w1 = s * (s - 2.0) * (s - 3.0) / 2.0;
    let w2 = -s * (s - 1.0) * (s - 3.0) / 2.0;
    let w3 = s * (s - 1.0) * (s - 2.0) / 6.0;
    w0 * values[i0] + w1 * values[i0 + 1] + w2 * values[i0 + 2] + w3 * values[i0 + 3]
}

/// Least-squares slope and intercept of `ln y` against `ln x`.
///
/// Panics if fewer than two samples are given or any sample is non-positive.
pub fn fit_loglog(samples: &[(f64, f64)]) -> (f64, f64) {
    assert!(samples.len() >= 2, "log-log fit needs at least two samples");
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .map(|&(x, y)| {
            assert!(x > 0.0 && y > 0.0, "log-log fit needs positive samples");
            (x.ln(), y.ln())
        })
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    (slope, intercept)
}

/// Golden-section minimizer for a unimodal-enough function on `[a, b]`.
pub fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    0.5 * (a + b)
}

/// Largest magnitude among eigenvalues of a symmetric matrix.
pub fn spectral_radius_symmetric(m: &nalgebra::DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    eig.eigenvalues.iter().fold(0.0f64, |acc, l| acc.max(l.abs()))
}

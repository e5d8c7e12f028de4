//! Uniform quadrature grids with trapezoidal weights.
//!
//! Every density in this crate lives on one of these grids. Integrands are
//! smooth and decay super-algebraically well inside the grid, so the
//! trapezoidal rule converges spectrally once the truncated tail is
//! negligible; the truncation itself is controlled by the callers.

use crate::{Result, SpinGapError};

#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    pub center: f64,
    pub halfwidth: f64,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Uniform grid of `points` nodes on `[center - halfwidth, center + halfwidth]`
    /// with trapezoidal weights (endpoints carry half a step).
    pub fn new_uniform(center: f64, halfwidth: f64, points: usize) -> Result<Self> {
        if points < 2 {
            return Err(SpinGapError::InvalidArgument(format!(
                "quadrature grid needs at least 2 points, got {points}"
            )));
        }
        if !(halfwidth > 0.0) || !halfwidth.is_finite() || !center.is_finite() {
            return Err(SpinGapError::InvalidArgument(format!(
                "quadrature grid needs finite center and positive halfwidth, got ({center}, {halfwidth})"
            )));
        }
        let step = 2.0 * halfwidth / (points - 1) as f64;
        let nodes: Vec<f64> = (0..points)
            .map(|i| center - halfwidth + step * i as f64)
            .collect();
        let mut weights = vec![step; points];
        weights[0] = 0.5 * step;
        weights[points - 1] = 0.5 * step;
        Ok(Self {
            center,
            halfwidth,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn step(&self) -> f64 {
        2.0 * self.halfwidth / (self.len() - 1) as f64
    }

    /// Weighted sum of sampled values: the trapezoidal integral.
    pub fn integrate(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        self.weights
            .iter()
            .zip(values)
            .map(|(w, v)| w * v)
            .sum()
    }

    /// Weighted sum of `f(node) * value`.
    pub fn integrate_with(&self, values: &[f64], f: impl Fn(f64) -> f64) -> f64 {
        assert_eq!(values.len(), self.len());
        self.nodes
            .iter()
            .zip(self.weights.iter().zip(values))
            .map(|(x, (w, v))| w * v * f(*x))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_width() {
        for points in [2, 3, 17, 4096] {
            let g = QuadratureGrid::new_uniform(1.5, 3.0, points).unwrap();
            let total: f64 = g.weights.iter().sum();
            assert!((total - 6.0).abs() < 1e-12, "points={points}: {total}");
        }
    }

    #[test]
    fn polynomial_integrals_are_exact_for_linear() {
        let g = QuadratureGrid::new_uniform(0.0, 2.0, 101).unwrap();
        let vals: Vec<f64> = g.nodes.iter().map(|x| 3.0 * x + 1.0).collect();
        assert!((g.integrate(&vals) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(QuadratureGrid::new_uniform(0.0, 1.0, 1).is_err());
        assert!(QuadratureGrid::new_uniform(0.0, 0.0, 8).is_err());
        assert!(QuadratureGrid::new_uniform(f64::NAN, 1.0, 8).is_err());
    }
}

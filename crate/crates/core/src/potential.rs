//! Single-site potentials `V = phi + psi`.
//!
//! `phi` is the convex part: twice continuously differentiable with
//! `phi'' >= delta` and polynomial growth of `phi''` at infinity with
//! exponents `beta_plus`, `beta_minus`. `psi` is a bounded C^2 perturbation
//! with bounded first and second derivatives. The declared constants
//! (`delta`, growth exponents, sup norms of `psi` and its derivatives) ride
//! along with the potential so that downstream bounds can be evaluated
//! without re-deriving them.
//!
//! The smoothed power family `|x|^(1+alpha)`, `0 < alpha < 1`, is the
//! deliberate counterexample: its second derivative decays at infinity, so
//! it fails uniform convexity while staying convex and superlinear.

use crate::{Result, SpinGapError};
use serde::Serialize;

/// Convex part of the potential.
#[derive(Debug, Clone, Serialize)]
pub enum ConvexPart {
    /// `a x^2`, `a > 0`.
    Quadratic { a: f64 },
    /// `a x^2 + b x^4`, `a, b >= 0`, not both zero.
    Quartic { a: f64, b: f64 },
    /// `sum_k coeffs[k] x^(2k)`; the leading coefficient must be positive.
    EvenPoly { coeffs: Vec<f64> },
    /// `|x|^(1+alpha)` outside `[-eps, eps]`, matched by the C^1 quadratic
    /// continuation inside.
    SmoothedPower { alpha: f64, eps: f64 },
}

impl ConvexPart {
    /// Value (`order` 0), first (`1`) or second (`2`) derivative at `x`.
    pub fn eval(&self, x: f64, order: u8) -> f64 {
        match self {
            ConvexPart::Quadratic { a } => match order {
                0 => a * x * x,
                1 => 2.0 * a * x,
                _ => 2.0 * a,
            },
            ConvexPart::Quartic { a, b } => {
                let x2 = x * x;
                match order {
                    0 => a * x2 + b * x2 * x2,
                    1 => 2.0 * a * x + 4.0 * b * x2 * x,
                    _ => 2.0 * a + 12.0 * b * x2,
                }
            }
            ConvexPart::EvenPoly { coeffs } => {
                let x2 = x * x;
                match order {
                    0 => {
                        // Horner in x^2.
                        coeffs.iter().rev().fold(0.0, |acc, c| acc * x2 + c)
                    }
                    1 => {
                        let mut acc = 0.0;
                        for (k, c) in coeffs.iter().enumerate().skip(1).rev() {
                            acc = acc * x2 + 2.0 * k as f64 * c;
                        }
                        acc * x
                    }
                    _ => {
                        let mut acc = 0.0;
                        for (k, c) in coeffs.iter().enumerate().skip(1).rev() {
                            let k = k as f64;
                            acc = acc * x2 + 2.0 * k * (2.0 * k - 1.0) * c;
                        }
                        acc
                    }
                }
            }
            ConvexPart::SmoothedPower { alpha, eps } => {
                let (alpha, eps) = (*alpha, *eps);
                let ax = x.abs();
                if ax >= eps {
                    match order {
                        0 => ax.powf(1.0 + alpha),
                        1 => x.signum() * (1.0 + alpha) * ax.powf(alpha),
                        _ => alpha * (1.0 + alpha) * ax.powf(alpha - 1.0),
                    }
                } else {
                    // Quadratic continuation matching value and slope at eps.
                    let a2 = 0.5 * (1.0 + alpha) * eps.powf(alpha - 1.0);
                    match order {
                        0 => a2 * x * x + 0.5 * (1.0 - alpha) * eps.powf(1.0 + alpha),
                        1 => 2.0 * a2 * x,
                        _ => 2.0 * a2,
                    }
                }
            }
        }
    }

    /// Declared uniform lower bound on `phi''` (zero for the smoothed power
    /// family, whose second derivative vanishes at infinity). For the even
    /// polynomial family the bound comes from a deterministic scan.
    fn convexity_bound(&self) -> f64 {
        match self {
            ConvexPart::Quadratic { a } => 2.0 * a,
            ConvexPart::Quartic { a, .. } => 2.0 * a,
            ConvexPart::EvenPoly { .. } => {
                let mut min = f64::INFINITY;
                for i in 0..=20_000 {
                    let x = -100.0 + 0.01 * i as f64;
                    min = min.min(self.eval(x, 2));
                }
                min.max(0.0)
            }
            ConvexPart::SmoothedPower { .. } => 0.0,
        }
    }

    /// Growth exponents of `phi''` at plus/minus infinity. All families here
    /// are even, so the two exponents coincide; the smoothed power family
    /// has decaying `phi''` and reports 0, which `certify` then flags.
    fn growth_exponents(&self) -> (f64, f64) {
        let beta = match self {
            ConvexPart::Quadratic { .. } => 0.0,
            ConvexPart::Quartic { b, .. } => {
                if *b > 0.0 {
                    2.0
                } else {
                    0.0
                }
            }
            ConvexPart::EvenPoly { coeffs } => 2.0 * (coeffs.len() - 1) as f64 - 2.0,
            ConvexPart::SmoothedPower { .. } => 0.0,
        };
        (beta, beta)
    }
}

/// Bounded smooth perturbation of the convex part.
#[derive(Debug, Clone, Serialize)]
pub enum Perturbation {
    Zero,
    /// `amplitude * cos(frequency x)`.
    Cosine { amplitude: f64, frequency: f64 },
    /// `amplitude * exp(1 - 1/(1 - (x/halfwidth)^2))` on `(-halfwidth, halfwidth)`,
    /// zero outside: a compactly supported C^infinity bump with peak `amplitude`.
    Bump { amplitude: f64, halfwidth: f64 },
}

impl Perturbation {
    pub fn eval(&self, x: f64, order: u8) -> f64 {
        match self {
            Perturbation::Zero => 0.0,
            Perturbation::Cosine {
                amplitude,
                frequency,
            } => {
                let (a, w) = (*amplitude, *frequency);
                match order {
                    0 => a * (w * x).cos(),
                    1 => -a * w * (w * x).sin(),
                    _ => -a * w * w * (w * x).cos(),
                }
            }
            Perturbation::Bump {
                amplitude,
                halfwidth,
            } => {
                let (a, w) = (*amplitude, *halfwidth);
                let u = x / w;
                let u2 = u * u;
                if u2 >= 1.0 {
                    return 0.0;
                }
                let g = 1.0 - u2;
                let s = (1.0 - 1.0 / g).exp();
                match order {
                    0 => a * s,
                    1 => {
                        let t = -2.0 * u / (g * g);
                        a * s * t / w
                    }
                    _ => {
                        let t = -2.0 * u / (g * g);
                        let tp = -(2.0 + 6.0 * u2) / (g * g * g);
                        a * s * (t * t + tp) / (w * w)
                    }
                }
            }
        }
    }

    /// Sup norms of `psi`, `psi'`, `psi''` (closed form where available,
    /// deterministic scan for the bump).
    fn sup_norms(&self) -> (f64, f64, f64) {
        match self {
            Perturbation::Zero => (0.0, 0.0, 0.0),
            Perturbation::Cosine {
                amplitude,
                frequency,
            } => {
                let a = amplitude.abs();
                let w = frequency.abs();
                (a, a * w, a * w * w)
            }
            Perturbation::Bump { halfwidth, .. } => {
                let mut sups = [0.0f64; 3];
                let n = 20_000;
                for i in 0..=n {
                    let x = -halfwidth + 2.0 * halfwidth * i as f64 / n as f64;
                    for (order, sup) in sups.iter_mut().enumerate() {
                        *sup = sup.max(self.eval(x, order as u8).abs());
                    }
                }
                (sups[0], sups[1], sups[2])
            }
        }
    }
}

/// A potential `V = phi + psi` together with its declared class constants.
#[derive(Debug, Clone, Serialize)]
pub struct Potential {
    pub convex: ConvexPart,
    pub perturbation: Perturbation,
    /// Declared uniform convexity bound for `phi''` (0 means "not uniformly convex").
    pub delta: f64,
    pub beta_plus: f64,
    pub beta_minus: f64,
    pub psi_sup: f64,
    pub psi_d1_sup: f64,
    pub psi_d2_sup: f64,
}

impl Potential {
    pub fn new(convex: ConvexPart, perturbation: Perturbation) -> Result<Self> {
        match &convex {
            ConvexPart::Quadratic { a } => {
                if !(*a > 0.0) {
                    return Err(SpinGapError::InvalidArgument(format!(
                        "quadratic potential needs a > 0, got {a}"
                    )));
                }
            }
            ConvexPart::Quartic { a, b } => {
                if *a < 0.0 || *b < 0.0 || (*a == 0.0 && *b == 0.0) {
                    return Err(SpinGapError::InvalidArgument(format!(
                        "quartic potential needs a, b >= 0 and a + b > 0, got ({a}, {b})"
                    )));
                }
            }
            ConvexPart::EvenPoly { coeffs } => {
                if coeffs.len() < 2 || !coeffs.last().map(|c| *c > 0.0).unwrap_or(false) {
                    return Err(SpinGapError::InvalidArgument(
                        "even polynomial needs degree >= 2 and positive leading coefficient"
                            .into(),
                    ));
                }
            }
            ConvexPart::SmoothedPower { alpha, eps } => {
                if !(*alpha > 0.0 && *alpha < 1.0) || !(*eps > 0.0) {
                    return Err(SpinGapError::InvalidArgument(format!(
                        "smoothed power needs 0 < alpha < 1 and eps > 0, got ({alpha}, {eps})"
                    )));
                }
            }
        }
        if let Perturbation::Bump { halfwidth, .. } = &perturbation {
            if !(*halfwidth > 0.0) {
                return Err(SpinGapError::InvalidArgument(
                    "bump perturbation needs positive halfwidth".into(),
                ));
            }
        }
        let delta = convex.convexity_bound();
        let (beta_plus, beta_minus) = convex.growth_exponents();
        let (psi_sup, psi_d1_sup, psi_d2_sup) = perturbation.sup_norms();
        Ok(Self {
            convex,
            perturbation,
            delta,
            beta_plus,
            beta_minus,
            psi_sup,
            psi_d1_sup,
            psi_d2_sup,
        })
    }

    /// The standard Gaussian reference case `V = x^2 / 2`.
    pub fn gaussian() -> Self {
        Self::new(ConvexPart::Quadratic { a: 0.5 }, Perturbation::Zero).unwrap()
    }

    /// `x^2/2 + x^4/12`.
    pub fn quartic_reference() -> Self {
        Self::new(
            ConvexPart::Quartic {
                a: 0.5,
                b: 1.0 / 12.0,
            },
            Perturbation::Zero,
        )
        .unwrap()
    }

    /// `x^2/2 + x^4/12 + 0.3 cos(x)`: the standard perturbed test case.
    pub fn quartic_cosine_reference() -> Self {
        Self::new(
            ConvexPart::Quartic {
                a: 0.5,
                b: 1.0 / 12.0,
            },
            Perturbation::Cosine {
                amplitude: 0.3,
                frequency: 1.0,
            },
        )
        .unwrap()
    }

    /// Convex part `phi` only.
    pub fn phi(&self, x: f64, order: u8) -> f64 {
        self.convex.eval(x, order)
    }

    /// Perturbation `psi` only.
    pub fn psi(&self, x: f64, order: u8) -> f64 {
        self.perturbation.eval(x, order)
    }

    /// Full potential `V = phi + psi`.
    pub fn v(&self, x: f64, order: u8) -> f64 {
        self.convex.eval(x, order) + self.perturbation.eval(x, order)
    }

    /// Same convex part with the perturbation stripped.
    pub fn without_perturbation(&self) -> Self {
        Self::new(self.convex.clone(), Perturbation::Zero).expect("convex part already validated")
    }

    pub fn has_perturbation(&self) -> bool {
        !matches!(self.perturbation, Perturbation::Zero)
    }

    /// Scan `[-halfwidth, halfwidth]` and report the observed class constants.
    pub fn certify(&self, halfwidth: f64, points: usize) -> Result<ClassReport> {
        if points < 2 {
            return Err(SpinGapError::InvalidArgument(format!(
                "certification scan needs at least 2 points, got {points}"
            )));
        }
        if !(halfwidth > 0.0) {
            return Err(SpinGapError::InvalidArgument(
                "certification scan needs positive halfwidth".into(),
            ));
        }
        let mut min_phi2 = f64::INFINITY;
        let mut psi_sups = [0.0f64; 3];
        let step = 2.0 * halfwidth / (points - 1) as f64;
        for i in 0..points {
            let x = -halfwidth + step * i as f64;
            min_phi2 = min_phi2.min(self.phi(x, 2));
            for (order, sup) in psi_sups.iter_mut().enumerate() {
                *sup = sup.max(self.psi(x, order as u8).abs());
            }
        }
        let ratio = |x: f64, beta: f64| self.phi(x, 2) / x.abs().powf(beta);
        let growth_ratio_pos = ratio(halfwidth, self.beta_plus);
        let growth_ratio_neg = ratio(-halfwidth, self.beta_minus);
        // Membership in the convex class requires a strictly positive uniform
        // convexity bound and growth ratios bounded away from zero and infinity.
        let ratios_ok = growth_ratio_pos.is_finite()
            && growth_ratio_neg.is_finite()
            && growth_ratio_pos > 1e-10
            && growth_ratio_neg > 1e-10;
        let phi_member = self.delta > 0.0 && min_phi2 >= self.delta * (1.0 - 1e-9) - 1e-12 && ratios_ok;
        let tol = 1e-9;
        let psi_member = psi_sups[0] <= self.psi_sup * (1.0 + tol) + tol
            && psi_sups[1] <= self.psi_d1_sup * (1.0 + tol) + tol
            && psi_sups[2] <= self.psi_d2_sup * (1.0 + tol) + tol;
        Ok(ClassReport {
            halfwidth,
            points,
            min_phi2,
            growth_ratio_pos,
            growth_ratio_neg,
            psi_sup_observed: psi_sups[0],
            psi_d1_sup_observed: psi_sups[1],
            psi_d2_sup_observed: psi_sups[2],
            phi_member,
            psi_member,
        })
    }
}

/// Observed class constants from a certification scan.
#[derive(Debug, Clone, Serialize)]
pub struct ClassReport {
    pub halfwidth: f64,
    pub points: usize,
    pub min_phi2: f64,
    /// `phi''(halfwidth) / halfwidth^beta_plus`.
    pub growth_ratio_pos: f64,
    pub growth_ratio_neg: f64,
    pub psi_sup_observed: f64,
    pub psi_d1_sup_observed: f64,
    pub psi_d2_sup_observed: f64,
    pub phi_member: bool,
    pub psi_member: bool,
}

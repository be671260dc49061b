//! Mean reachable sets and stochastic reachability diagnostics.
//!
//! Under a per-step box input set, the set of reachable mean states after
//! `h` steps is the zonotope
//!
//! ```text
//!   { A^h mu + offset + sum_g lambda_g g : lambda in [-1, 1]^(m h) }
//! ```
//!
//! with one generator per (step, input channel) pair. Zonotopes are exact
//! under the linear output map, so projecting a target barycenter onto
//! the reachable output set reduces to a small box-constrained least
//! squares problem over the generator coefficients, solved with the
//! tracking-QP machinery. The chi-squared confidence ellipsoid around a
//! mean prediction is reported for diagnostics only; control decisions
//! use the mean set.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::{AgentModel, APowers};
use crate::mpc::{self, InputConstraint, QpProblem};

/// Zonotope of reachable mean states after `h` steps.
#[derive(Debug, Clone)]
pub struct MeanReachableSet {
    /// Zero-input propagation `A^h mu`.
    pub center: DVector<f64>,
    /// Contribution of the input-box midpoints.
    pub offset: DVector<f64>,
    /// One generator per (step, channel), scaled by the input half-range;
    /// always `m * h` entries, zero generators included.
    pub generators: Vec<DVector<f64>>,
    pub h: usize,
}

/// Builds the `h`-step mean reachable zonotope for per-step inputs in
/// the box `[u_min, u_max]`.
pub fn mean_reachable_set(
    model: &AgentModel,
    mu: &DVector<f64>,
    h: usize,
    u_min: &DVector<f64>,
    u_max: &DVector<f64>,
) -> Result<MeanReachableSet> {
    let n = model.state_dim();
    let m = model.input_dim();
    if h == 0 {
        return Err(Error::InvalidArgument("horizon h must be >= 1".into()));
    }
    if mu.len() != n || u_min.len() != m || u_max.len() != m {
        return Err(Error::Dimension(
            "mean or input bounds do not match the model".into(),
        ));
    }
    if u_min.iter().zip(u_max.iter()).any(|(lo, hi)| lo > hi) {
        return Err(Error::InvalidArgument(
            "input box requires u_min <= u_max".into(),
        ));
    }
    let mid = (u_min + u_max) * 0.5;
    let half = (u_max - u_min) * 0.5;
    let powers = APowers::new(model.a(), h);
    let center = powers.get(h) * mu;
    let mut offset = DVector::zeros(n);
    let mut generators = Vec::with_capacity(m * h);
    for tau in 0..h {
        let reach = powers.get(h - 1 - tau) * model.b();
        offset += &reach * &mid;
        for j in 0..m {
            generators.push(DVector::from(reach.column(j) * half[j]));
        }
    }
    Ok(MeanReachableSet {
        center,
        offset,
        generators,
        h,
    })
}

impl MeanReachableSet {
    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Euclidean projection of `point` onto the zonotope in state space.
    pub fn project_state(&self, point: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
        let base = &self.center + &self.offset;
        project_onto_zonotope(&base, &self.generators, point)
    }

    /// Membership up to `tol`: minimal distance to the set is within
    /// the tolerance.
    pub fn contains(&self, point: &DVector<f64>, tol: f64) -> Result<bool> {
        let (_, dist) = self.project_state(point)?;
        Ok(dist <= tol)
    }

    /// Projects a target output onto the image zonotope `C * set`,
    /// returning the closest feasible output and its distance. Interior
    /// targets come back unchanged with distance zero.
    pub fn project_output(
        &self,
        q_bar: &DVector<f64>,
        c_matrix: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, f64)> {
        if c_matrix.ncols() != self.dim() {
            return Err(Error::Dimension(format!(
                "output map has {} columns, state dimension is {}",
                c_matrix.ncols(),
                self.dim()
            )));
        }
        let base = c_matrix * (&self.center + &self.offset);
        let generators: Vec<DVector<f64>> =
            self.generators.iter().map(|g| c_matrix * g).collect();
        let (point, dist) = project_onto_zonotope(&base, &generators, q_bar)?;
        if dist <= 1e-9 * (1.0 + q_bar.norm()) {
            return Ok((q_bar.clone(), 0.0));
        }
        Ok((point, dist))
    }
}

/// Projection onto `{ base + G lambda : lambda in [-1,1]^g }` as a box QP
/// over the coefficients. The Gram matrix is only positive semidefinite
/// (more generators than dimensions), so a tiny relative ridge keeps the
/// factorizations alive; it perturbs the projection point well below the
/// solver tolerance.
fn project_onto_zonotope(
    base: &DVector<f64>,
    generators: &[DVector<f64>],
    target: &DVector<f64>,
) -> Result<(DVector<f64>, f64)> {
    if base.len() != target.len() {
        return Err(Error::Dimension(format!(
            "target has length {}, set lives in dimension {}",
            target.len(),
            base.len()
        )));
    }
    let g = generators.len();
    if g == 0 {
        return Ok((base.clone(), (base - target).norm()));
    }
    let dim = base.len();
    let mut gmat = DMatrix::zeros(dim, g);
    for (j, gen) in generators.iter().enumerate() {
        gmat.column_mut(j).copy_from(gen);
    }
    let gram = gmat.transpose() * &gmat;
    let ridge = 1e-10 * (gram.trace() / g as f64).max(1e-6);
    let hmat = &gram + DMatrix::identity(g, g) * ridge;
    let f = gmat.transpose() * (base - target);
    let qp = QpProblem {
        hmat,
        f,
        constraint: InputConstraint::Box {
            u_min: DVector::from_element(1, -1.0),
            u_max: DVector::from_element(1, 1.0),
        },
        horizon: g,
        input_dim: 1,
    };
    let sol = mpc::solve_box_qp(&qp)?;
    let point = base + &gmat * &sol.u;
    let dist = (&point - target).norm();
    Ok((point, dist))
}

/// Chi-squared confidence region for the accumulated process noise after
/// `h` steps. Reported for diagnostics; when the covariance is singular
/// the region degenerates to its range space and `degenerate` is set.
#[derive(Debug, Clone)]
pub struct ConfidenceEllipsoid {
    pub sigma_h: DMatrix<f64>,
    pub level: f64,
    pub alpha: f64,
    pub degenerate: bool,
    inv_eigenvalues: Vec<f64>,
    eigenvectors: DMatrix<f64>,
}

pub fn confidence_ellipsoid(
    model: &AgentModel,
    h: usize,
    alpha: f64,
) -> Result<ConfidenceEllipsoid> {
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::InvalidArgument(
            "confidence level must lie in (0, 1)".into(),
        ));
    }
    let sigma_h = model.noise_covariance(h)?;
    let level = chi2::quantile(model.state_dim(), alpha)?;
    let eig = sigma_h.clone().symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = 1e-12 * max_eig.max(1e-300);
    let mut degenerate = false;
    let inv_eigenvalues: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&l| {
            if l <= cutoff {
                degenerate = true;
                0.0
            } else {
                1.0 / l
            }
        })
        .collect();
    Ok(ConfidenceEllipsoid {
        sigma_h,
        level,
        alpha,
        degenerate,
        inv_eigenvalues,
        eigenvectors: eig.eigenvectors,
    })
}

impl ConfidenceEllipsoid {
    /// Whether a deviation from the mean lies inside the region. In the
    /// degenerate case the deviation must also stay in the covariance
    /// range (component outside the range within `1e-9` of zero).
    pub fn contains(&self, deviation: &DVector<f64>) -> bool {
        let coords = self.eigenvectors.transpose() * deviation;
        let mut quad = 0.0;
        for (i, &inv) in self.inv_eigenvalues.iter().enumerate() {
            if inv == 0.0 {
                if coords[i].abs() > 1e-9 * (1.0 + deviation.norm()) {
                    return false;
                }
            } else {
                quad += coords[i] * coords[i] * inv;
            }
        }
        quad <= self.level
    }
}

/// Chi-squared quantiles without a statistics dependency: bisection on
/// the regularized lower incomplete gamma function, evaluated by series
/// or continued fraction.
pub mod chi2 {
    use crate::error::{Error, Result};

    /// CDF of the chi-squared distribution with `k` degrees of freedom.
    pub fn cdf(x: f64, k: usize) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        lower_regularized_gamma(k as f64 / 2.0, x / 2.0)
    }

    /// Quantile: smallest `x` with `cdf(x, k) >= alpha`, bisected to
    /// 1e-9 relative width.
    pub fn quantile(k: usize, alpha: f64) -> Result<f64> {
        if k == 0 {
            return Err(Error::InvalidArgument("degrees of freedom must be >= 1".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(
                "alpha must lie strictly between 0 and 1".into(),
            ));
        }
        let kf = k as f64;
        let mut hi = kf + 20.0 * (2.0 * kf).sqrt() + 40.0;
        while cdf(hi, k) < alpha {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::Solver("chi-squared quantile bracket failed".into()));
            }
        }
        let mut lo = 0.0;
        while hi - lo > 1e-9 * hi.max(1.0) {
            let mid = 0.5 * (lo + hi);
            if cdf(mid, k) < alpha {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// P(a, x): series expansion below the transition point, continued
    /// fraction above.
    fn lower_regularized_gamma(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x < a + 1.0 {
            gamma_series(a, x)
        } else {
            1.0 - gamma_continued_fraction(a, x)
        }
    }

    fn gamma_series(a: f64, x: f64) -> f64 {
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut denom = a;
        for _ in 0..500 {
            denom += 1.0;
            term *= x / denom;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    }

    /// Q(a, x) by modified Lentz continued fraction.
    fn gamma_continued_fraction(a: f64, x: f64) -> f64 {
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut frac = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            frac *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        frac * (-x + a * x.ln() - ln_gamma(a)).exp()
    }

    /// Lanczos approximation (g = 7, 9 coefficients).
    fn ln_gamma(z: f64) -> f64 {
        const COEFFS: [f64; 8] = [
            676.5203681218851,
            -1259.1392167224028,
            771.32342877765313,
            -176.61502916214059,
            12.507343278686905,
            -0.13857109526572012,
            9.9843695780195716e-6,
            1.5056327351493116e-7,
        ];
        if z < 0.5 {
            // Reflection formula.
            let pi = std::f64::consts::PI;
            return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
        }
        let z = z - 1.0;
        let mut acc = 0.99999999999980993;
        for (i, c) in COEFFS.iter().enumerate() {
            acc += c / (z + i as f64 + 1.0);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
    }
}

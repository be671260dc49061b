//! The strictly convex tracking QP and its solvers.
//!
//! Each agent minimizes, over its stacked input sequence `U`, the expected
//! squared transport cost to its per-step target barycenters plus an input
//! penalty. With `Omega` the per-step weight blocks, `Theta`/`Phi` the
//! prediction matrices, and `R` positive definite:
//!
//! ```text
//!   min_U  U^T Hmat U + 2 f^T U
//!   Hmat = (Omega Theta)^T (Omega Theta) + R
//!   f    = (Omega Theta)^T Omega (Phi mu - Qbar)
//! ```
//!
//! optionally subject to a per-step box or Euclidean-ball input
//! constraint. The box variant is solved by a primal active-set method
//! with an accelerated projected-gradient fallback on active-set cycling;
//! the ball variant is closed form (per-block scaling of the
//! unconstrained minimizer).

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lti::PredictionMatrices;

/// Stationarity tolerance for the unconstrained solve (relative).
pub const GRAD_TOL: f64 = 1e-9;

/// KKT residual tolerance for the box-constrained solve.
pub const KKT_TOL: f64 = 1e-8;

/// Per-step square-root transport weights: block `h` of `Omega` is
/// `s_h * I_d` with `s_h = sqrt(sum_j pi_j)` over the step's plan.
#[derive(Debug, Clone)]
pub struct OmegaWeights {
    scales: Vec<f64>,
}

impl OmegaWeights {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidArgument(
                "omega scales must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { scales })
    }

    /// Builds the weights from per-step plan mass totals.
    pub fn from_step_masses(masses: &[f64]) -> Result<Self> {
        Self::new(masses.iter().map(|m| m.max(0.0).sqrt()).collect())
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn horizon(&self) -> usize {
        self.scales.len()
    }
}

/// Input-constraint variants; exactly one applies per scenario.
#[derive(Debug, Clone)]
pub enum InputConstraint {
    None,
    /// Per-step elementwise bounds, each of length `m`.
    Box {
        u_min: DVector<f64>,
        u_max: DVector<f64>,
    },
    /// Per-step Euclidean-norm bound.
    Ball { radius: f64 },
}

/// The assembled QP in stacked-input coordinates.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hmat: DMatrix<f64>,
    pub f: DVector<f64>,
    pub constraint: InputConstraint,
    pub horizon: usize,
    pub input_dim: usize,
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.horizon * self.input_dim
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.hmat * u)[(0, 0)] + 2.0 * self.f.dot(u)
    }

    /// Stacked per-step lower/upper bounds for the box variant.
    pub fn stacked_bounds(&self) -> Option<(DVector<f64>, DVector<f64>)> {
        match &self.constraint {
            InputConstraint::Box { u_min, u_max } => {
                let m = self.input_dim;
                let mut lo = DVector::zeros(self.dim());
                let mut hi = DVector::zeros(self.dim());
                for h in 0..self.horizon {
                    lo.rows_mut(h * m, m).copy_from(u_min);
                    hi.rows_mut(h * m, m).copy_from(u_max);
                }
                Some((lo, hi))
            }
            _ => None,
        }
    }
}

/// Solution with solver diagnostics. `active_bounds` lists stacked
/// coordinates pinned at a bound: `+(i+1)` for the upper side, `-(i+1)`
/// for the lower side.
#[derive(Debug, Clone)]
pub struct ControlSolution {
    pub u: DVector<f64>,
    pub kkt_residual: f64,
    pub active_bounds: Vec<isize>,
    pub objective: f64,
}

/// Assembles `Hmat` and `f` from prediction matrices, per-step weights,
/// the current state mean, and the stacked target barycenters.
pub fn build_qp(
    pred: &PredictionMatrices,
    omega: &OmegaWeights,
    mu: &DVector<f64>,
    qbar_stack: &DVector<f64>,
    r_mat: &DMatrix<f64>,
    constraint: InputConstraint,
) -> Result<QpProblem> {
    let horizon = pred.horizon;
    let dh = pred.theta.nrows();
    let mh = pred.theta.ncols();
    let d = dh / horizon;
    let m = mh / horizon;
    if omega.horizon() != horizon {
        return Err(Error::Dimension(format!(
            "omega has {} steps, horizon is {horizon}",
            omega.horizon()
        )));
    }
    if qbar_stack.len() != dh {
        return Err(Error::Dimension(format!(
            "target stack has length {}, expected {dh}",
            qbar_stack.len()
        )));
    }
    if mu.len() != pred.phi.ncols() {
        return Err(Error::Dimension(format!(
            "state mean has length {}, expected {}",
            mu.len(),
            pred.phi.ncols()
        )));
    }
    if r_mat.shape() != (mh, mh) {
        return Err(Error::Dimension(format!(
            "R must be {mh}x{mh}, got {}x{}",
            r_mat.nrows(),
            r_mat.ncols()
        )));
    }
    let r_asym = (r_mat - r_mat.transpose()).amax();
    if r_asym > 1e-10 * r_mat.amax().max(1.0) {
        return Err(Error::InvalidArgument("R must be symmetric".into()));
    }
    if r_mat.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("R must be positive definite".into()));
    }
    if let InputConstraint::Box { u_min, u_max } = &constraint {
        if u_min.len() != m || u_max.len() != m {
            return Err(Error::Dimension(format!(
                "box bounds must have per-step length {m}"
            )));
        }
        if u_min.iter().zip(u_max.iter()).any(|(lo, hi)| lo > hi) {
            return Err(Error::InvalidArgument(
                "box bounds require u_min <= u_max".into(),
            ));
        }
    }
    if let InputConstraint::Ball { radius } = &constraint {
        if *radius <= 0.0 {
            return Err(Error::InvalidArgument("ball radius must be > 0".into()));
        }
    }

    // Omega Theta scales row-block h of Theta by s_h; f applies Omega
    // twice, so the residual picks up s_h^2.
    let mut omega_theta = pred.theta.clone();
    let mut weighted_residual = &pred.phi * mu - qbar_stack;
    for h in 0..horizon {
        let s = omega.scales()[h];
        omega_theta.rows_mut(h * d, d).scale_mut(s);
        weighted_residual.rows_mut(h * d, d).scale_mut(s * s);
    }
    let hmat_raw = omega_theta.transpose() * &omega_theta + r_mat;
    let hmat = (&hmat_raw + hmat_raw.transpose()) * 0.5;
    let f = pred.theta.transpose() * weighted_residual;

    Ok(QpProblem {
        hmat,
        f,
        constraint,
        horizon,
        input_dim: m,
    })
}

/// Cholesky solve for `Hmat u = -f` with one iterative-refinement pass;
/// no stationarity check, so ill-conditioned Hessians (ridged Gram
/// matrices from zonotope projections) can still obtain a starting point.
fn unchecked_minimizer(qp: &QpProblem) -> Result<DVector<f64>> {
    let chol = qp
        .hmat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Solver("Hmat is not positive definite".into()))?;
    let mut u = chol.solve(&(-&qp.f));
    let residual = &qp.hmat * &u + &qp.f;
    u -= chol.solve(&residual);
    Ok(u)
}

/// The unconstrained minimizer `U = -Hmat^{-1} f` by Cholesky, with one
/// iterative-refinement pass.
pub fn solve_unconstrained(qp: &QpProblem) -> Result<ControlSolution> {
    let u = unchecked_minimizer(qp)?;
    let grad = (&qp.hmat * &u + &qp.f) * 2.0;
    let tol = GRAD_TOL * (1.0 + qp.f.norm());
    if grad.norm() > tol {
        return Err(Error::Solver(format!(
            "unconstrained stationarity {:.3e} exceeds {:.3e}",
            grad.norm(),
            tol
        )));
    }
    Ok(ControlSolution {
        kkt_residual: grad.norm(),
        objective: qp.objective(&u),
        active_bounds: Vec::new(),
        u,
    })
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum Side {
    Lower,
    Upper,
}

/// Solves the box-constrained QP by a primal active-set method.
///
/// Starts from the clamped unconstrained minimizer; each iteration solves
/// the equality-constrained subproblem on the free coordinates (fresh
/// Cholesky of the free block; problems are small), takes the longest
/// feasible step, and updates the working set. A repeated working-set
/// signature triggers the accelerated projected-gradient fallback.
pub fn solve_box_qp(qp: &QpProblem) -> Result<ControlSolution> {
    let (lo, hi) = qp
        .stacked_bounds()
        .ok_or_else(|| Error::InvalidArgument("box bounds required".into()))?;
    let n = qp.dim();
    let mut u = unchecked_minimizer(qp)?;
    for i in 0..n {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }

    let scale = (1.0 + qp.f.norm()).max(qp.hmat.amax());
    let mult_tol = 1e-12 * scale;
    let bound_tol = 1e-12 * (1.0 + lo.amax().max(hi.amax()));

    let mut active: Vec<Option<Side>> = (0..n)
        .map(|i| {
            if (u[i] - lo[i]).abs() <= bound_tol {
                Some(Side::Lower)
            } else if (u[i] - hi[i]).abs() <= bound_tol {
                Some(Side::Upper)
            } else {
                None
            }
        })
        .collect();

    let mut seen_sets: HashSet<Vec<(usize, Side)>> = HashSet::new();
    let max_iters = 50 * n + 100;
    let mut cycled = false;

    for _ in 0..max_iters {
        let signature: Vec<(usize, Side)> = active
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.map(|side| (i, side)))
            .collect();
        if !seen_sets.insert(signature) {
            cycled = true;
            break;
        }

        let free: Vec<usize> = (0..n).filter(|&i| active[i].is_none()).collect();
        let target = if free.is_empty() {
            u.clone()
        } else {
            // Solve H_ff t = -(f_f + H_fa u_a) on the free coordinates.
            let nf = free.len();
            let mut hff = DMatrix::zeros(nf, nf);
            let mut rhs = DVector::zeros(nf);
            for (a, &i) in free.iter().enumerate() {
                rhs[a] = -qp.f[i];
                for (b, &j) in free.iter().enumerate() {
                    hff[(a, b)] = qp.hmat[(i, j)];
                }
                for j in 0..n {
                    if active[j].is_some() {
                        rhs[a] -= qp.hmat[(i, j)] * u[j];
                    }
                }
            }
            let chol = hff
                .cholesky()
                .ok_or_else(|| Error::Solver("free block lost positive definiteness".into()))?;
            let t_free = chol.solve(&rhs);
            let mut t = u.clone();
            for (a, &i) in free.iter().enumerate() {
                t[i] = t_free[a];
            }
            t
        };

        let step = &target - &u;
        if step.amax() <= 1e-13 * (1.0 + u.amax()) {
            // Stationary on the working set: inspect multipliers.
            let grad = &qp.hmat * &u + &qp.f;
            let mut worst: Option<(usize, f64)> = None;
            for i in 0..n {
                let multiplier = match active[i] {
                    Some(Side::Upper) => -grad[i],
                    Some(Side::Lower) => grad[i],
                    None => continue,
                };
                if multiplier < -mult_tol && worst.is_none_or(|(_, w)| multiplier < w) {
                    worst = Some((i, multiplier));
                }
            }
            match worst {
                None => break, // KKT satisfied
                Some((i, _)) => {
                    active[i] = None;
                    continue;
                }
            }
        }

        // Longest feasible step toward the subproblem target.
        let mut alpha = 1.0f64;
        let mut blocking: Option<(usize, Side)> = None;
        for i in 0..n {
            if active[i].is_some() {
                continue;
            }
            if step[i] > 0.0 && u[i] + step[i] > hi[i] {
                let a = (hi[i] - u[i]) / step[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Side::Upper));
                }
            } else if step[i] < 0.0 && u[i] + step[i] < lo[i] {
                let a = (lo[i] - u[i]) / step[i];
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Side::Lower));
                }
            }
        }
        u += step * alpha.max(0.0);
        if let Some((i, side)) = blocking {
            u[i] = match side {
                Side::Lower => lo[i],
                Side::Upper => hi[i],
            };
            active[i] = Some(side);
        }
    }

    if cycled || box_kkt_residual(qp, &u, &lo, &hi).0 > KKT_TOL * scale {
        u = projected_gradient_box(qp, &lo, &hi, &u, KKT_TOL * scale);
    }

    let (residual, active_bounds) = box_kkt_residual(qp, &u, &lo, &hi);
    if residual > KKT_TOL * scale {
        return Err(Error::Solver(format!(
            "box QP KKT residual {residual:.3e} exceeds tolerance"
        )));
    }
    Ok(ControlSolution {
        kkt_residual: residual,
        objective: qp.objective(&u),
        active_bounds,
        u,
    })
}

/// KKT residual for the box QP: primal feasibility, stationarity with
/// multipliers read off the gradient at active bounds, and complementary
/// slackness, folded into one max-norm number. Also returns the signed
/// active-bound list.
pub fn box_kkt_residual(
    qp: &QpProblem,
    u: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> (f64, Vec<isize>) {
    let n = u.len();
    let grad = &qp.hmat * u + &qp.f;
    let bound_tol = 1e-9 * (1.0 + lo.amax().max(hi.amax()));
    let mut residual = 0.0f64;
    let mut active = Vec::new();
    for i in 0..n {
        let at_hi = (u[i] - hi[i]).abs() <= bound_tol;
        let at_lo = (u[i] - lo[i]).abs() <= bound_tol;
        residual = residual.max(u[i] - hi[i]).max(lo[i] - u[i]);
        let lambda_hi = if at_hi { (-grad[i]).max(0.0) } else { 0.0 };
        let lambda_lo = if at_lo { grad[i].max(0.0) } else { 0.0 };
        if at_hi && !at_lo {
            active.push((i + 1) as isize);
        } else if at_lo && !at_hi {
            active.push(-((i + 1) as isize));
        }
        residual = residual.max((grad[i] + lambda_hi - lambda_lo).abs());
        residual = residual.max((lambda_hi * (u[i] - hi[i])).abs());
        residual = residual.max((lambda_lo * (lo[i] - u[i])).abs());
    }
    (residual, active)
}

/// Accelerated projected gradient (FISTA with objective restart) on the
/// box. Fallback path for the active-set method and the workhorse for
/// merely positive semidefinite Hessians (zonotope projections).
pub(crate) fn projected_gradient_box(
    qp: &QpProblem,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    start: &DVector<f64>,
    tol: f64,
) -> DVector<f64> {
    let n = start.len();
    let clamp = |v: &mut DVector<f64>| {
        for i in 0..n {
            v[i] = v[i].clamp(lo[i], hi[i]);
        }
    };
    let lipschitz = gradient_lipschitz_bound(&qp.hmat).max(1e-12);
    let step = 1.0 / lipschitz;
    let mut x = start.clone();
    clamp(&mut x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut best = x.clone();
    let mut best_obj = qp.objective(&x);
    for iter in 0..400_000usize {
        let grad = (&qp.hmat * &y + &qp.f) * 2.0;
        let mut x_next = &y - grad * step;
        clamp(&mut x_next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_next;
        y = &x_next + (&x_next - &x) * momentum;
        let moved = (&x_next - &x).amax();
        x = x_next;
        t = t_next;
        let obj = qp.objective(&x);
        if obj < best_obj {
            best_obj = obj;
            best = x.clone();
        } else if obj > best_obj {
            // Momentum overshoot: restart from the incumbent.
            y = best.clone();
            x = best.clone();
            t = 1.0;
        }
        if iter % 64 == 0 || moved == 0.0 {
            let (res, _) = box_kkt_residual(qp, &best, lo, hi);
            if res <= tol {
                return best;
            }
            if moved == 0.0 {
                break;
            }
        }
    }
    best
}

/// Lipschitz bound for the objective gradient `2(Hmat u + f)` from the
/// max absolute row sum of the symmetric Hessian.
fn gradient_lipschitz_bound(h: &DMatrix<f64>) -> f64 {
    let n = h.nrows();
    let mut bound = 0.0f64;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += h[(i, j)].abs();
        }
        bound = bound.max(row);
    }
    2.0 * bound
}

/// Per-step Euclidean-ball projection of a stacked input sequence: each
/// `m`-block is scaled by `min(1, radius / |block|)`.
pub fn project_ball_per_step(
    u_stacked: &DVector<f64>,
    input_dim: usize,
    radius: f64,
) -> Result<DVector<f64>> {
    if radius <= 0.0 {
        return Err(Error::InvalidArgument("ball radius must be > 0".into()));
    }
    if input_dim == 0 || u_stacked.len() % input_dim != 0 {
        return Err(Error::Dimension(format!(
            "stacked length {} is not a multiple of input dimension {input_dim}",
            u_stacked.len()
        )));
    }
    let mut out = u_stacked.clone();
    for h in 0..(u_stacked.len() / input_dim) {
        let mut block = out.rows_mut(h * input_dim, input_dim);
        let norm = block.norm();
        if norm > radius {
            block *= radius / norm;
        }
    }
    Ok(out)
}

/// One receding-horizon step: solve the configured variant and return the
/// first input block along with the full solution.
pub fn mpc_step(qp: &QpProblem) -> Result<(DVector<f64>, ControlSolution)> {
    let solution = match &qp.constraint {
        InputConstraint::None => solve_unconstrained(qp)?,
        InputConstraint::Box { .. } => solve_box_qp(qp)?,
        InputConstraint::Ball { radius } => {
            let unconstrained = solve_unconstrained(qp)?;
            let projected = project_ball_per_step(&unconstrained.u, qp.input_dim, *radius)?;
            let objective = qp.objective(&projected);
            ControlSolution {
                u: projected,
                kkt_residual: unconstrained.kkt_residual,
                active_bounds: Vec::new(),
                objective,
            }
        }
    };
    let first = DVector::from(solution.u.rows(0, qp.input_dim).clone_owned());
    Ok((first, solution))
}

/// The cost terms constant in `U` that the QP drops: the weighted
/// residual quadratic of the zero-input prediction, the output-noise
/// trace over the window, and the per-step plan spread around its
/// barycenter. QP objective plus this constant equals the expected
/// tracking cost.
pub fn expected_cost_constant(
    pred: &PredictionMatrices,
    omega: &OmegaWeights,
    mu: &DVector<f64>,
    qbar_stack: &DVector<f64>,
    output_noise_trace_per_step: f64,
    plan_spread: f64,
) -> f64 {
    let d = pred.theta.nrows() / pred.horizon;
    let residual = &pred.phi * mu - qbar_stack;
    let mut quad = 0.0;
    let mut trace = 0.0;
    for h in 0..pred.horizon {
        let s2 = omega.scales()[h] * omega.scales()[h];
        quad += s2 * residual.rows(h * d, d).norm_squared();
        trace += s2 * output_noise_trace_per_step;
    }
    quad + trace + plan_spread
}

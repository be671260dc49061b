//! Discrete-time stochastic LTI agent models.
//!
//! An agent evolves as `x+ = A x + B u + w`, `y = C x + v` with zero-mean
//! Gaussian process and measurement noise. This module validates models,
//! computes the output relative degree, builds the stacked prediction
//! matrices used by the tracking QP, propagates means, accumulates process
//! noise over a horizon, and simulates noisy steps from a seeded RNG.

use nalgebra::{Complex, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative threshold for numerical rank decisions (singular values).
pub const RANK_TOL: f64 = 1e-10;

/// Modulus slack when testing eigenvalues against the closed unit disk.
pub const STABILITY_TOL: f64 = 1e-9;

/// A stochastic LTI agent: dynamics, output map, and noise covariances.
///
/// Construction checks dimensions and that both covariances are symmetric
/// positive semidefinite; controllability and stability are reported by
/// [`AgentModel::check_assumptions`] rather than enforced, so degenerate
/// models can still be built and inspected.
#[derive(Debug, Clone)]
pub struct AgentModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    sigma_w: DMatrix<f64>,
    sigma_v: DMatrix<f64>,
    process_factor: GaussianFactor,
    measurement_factor: GaussianFactor,
}

impl AgentModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        sigma_w: DMatrix<f64>,
        sigma_v: DMatrix<f64>,
    ) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n {
            return Err(Error::Dimension(format!(
                "B has {} rows, state dimension is {n}",
                b.nrows()
            )));
        }
        if c.ncols() != n {
            return Err(Error::Dimension(format!(
                "C has {} columns, state dimension is {n}",
                c.ncols()
            )));
        }
        let d = c.nrows();
        if sigma_w.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "process covariance must be {n}x{n}, got {}x{}",
                sigma_w.nrows(),
                sigma_w.ncols()
            )));
        }
        if sigma_v.shape() != (d, d) {
            return Err(Error::Dimension(format!(
                "measurement covariance must be {d}x{d}, got {}x{}",
                sigma_v.nrows(),
                sigma_v.ncols()
            )));
        }
        let process_factor = GaussianFactor::new(&sigma_w, "process covariance")?;
        let measurement_factor = GaussianFactor::new(&sigma_v, "measurement covariance")?;
        Ok(Self {
            a,
            b,
            c,
            sigma_w,
            sigma_v,
            process_factor,
            measurement_factor,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    pub fn sigma_v(&self) -> &DMatrix<f64> {
        &self.sigma_v
    }

    /// Smallest `r >= 1` with `C A^(r-1) B != 0`; `None` if every such
    /// product up to the Cayley-Hamilton bound `r = n` vanishes.
    ///
    /// A product counts as nonzero when some entry exceeds
    /// `1e-10 * max(1, scale)` where the scale bounds the product's
    /// magnitude from the factors, so the test is invariant under output
    /// scaling.
    pub fn relative_degree(&self) -> Option<usize> {
        let n = self.state_dim();
        let c_amax = self.c.amax();
        let b_amax = self.b.amax();
        let mut a_pow = DMatrix::identity(n, n);
        for r in 1..=n {
            let product = &self.c * &a_pow * &self.b;
            let scale = (c_amax * a_pow.amax() * b_amax).max(1.0);
            if product.amax() > RANK_TOL * scale {
                return Some(r);
            }
            a_pow = &a_pow * &self.a;
        }
        None
    }

    /// Reports controllability (Assumption: `(A, B)` completely
    /// controllable) and marginal stability (Assumption: eigenvalues in
    /// the closed unit disk).
    ///
    /// `marginally_stable` is the modulus test alone. Defective
    /// unit-modulus eigenvalues (Jordan blocks on the unit circle, e.g.
    /// integrator chains) are common in the models this crate targets, so
    /// they are surfaced separately via `unit_eigs_nondefective` and a
    /// warning in `details` instead of failing the flag.
    pub fn check_assumptions(&self) -> AssumptionReport {
        let n = self.state_dim();
        let mut details = Vec::new();

        // Controllability: rank of [B, AB, ..., A^(n-1)B].
        let m = self.input_dim();
        let mut ctrb = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for k in 0..n {
            ctrb.view_mut((0, k * m), (n, m)).copy_from(&block);
            block = &self.a * &block;
        }
        let rank = numerical_rank(&ctrb);
        let controllable = rank == n;
        if !controllable {
            details.push(format!(
                "controllability matrix rank {rank} < state dimension {n}"
            ));
        }

        let eigs = self.a.complex_eigenvalues();
        let mut marginally_stable = true;
        for lambda in eigs.iter() {
            if lambda.norm() > 1.0 + STABILITY_TOL {
                marginally_stable = false;
                details.push(format!(
                    "eigenvalue {:.6}{:+.6}i has modulus {:.6} > 1",
                    lambda.re,
                    lambda.im,
                    lambda.norm()
                ));
            }
        }

        // Non-defectiveness of unit-modulus eigenvalues: cluster them and
        // compare algebraic multiplicity with n - rank(A - lambda I).
        let mut unit_eigs_nondefective = true;
        let unit: Vec<Complex<f64>> = eigs
            .iter()
            .copied()
            .filter(|l| (l.norm() - 1.0).abs() <= 1e-7)
            .collect();
        let mut visited = vec![false; unit.len()];
        for i in 0..unit.len() {
            if visited[i] {
                continue;
            }
            let rep = unit[i];
            let mut algebraic = 0usize;
            for (j, l) in unit.iter().enumerate() {
                if (l - rep).norm() <= 1e-6 {
                    visited[j] = true;
                    algebraic += 1;
                }
            }
            let shifted = self.a.map(|x| Complex::new(x, 0.0))
                - DMatrix::<Complex<f64>>::identity(n, n) * rep;
            let geometric = n - complex_rank(&shifted);
            if geometric < algebraic {
                unit_eigs_nondefective = false;
                details.push(format!(
                    "unit-modulus eigenvalue {:.6}{:+.6}i is defective \
                     (geometric {geometric} < algebraic {algebraic}); \
                     expect polynomial noise growth",
                    rep.re, rep.im
                ));
            }
        }

        AssumptionReport {
            controllable,
            marginally_stable,
            unit_eigs_nondefective,
            details,
        }
    }

    /// Stacked prediction matrices over horizon `H` starting at the
    /// relative degree: expected outputs satisfy
    /// `Y[k+r .. k+H+r-1] = Theta U + Phi mu`.
    pub fn build_prediction_matrices(&self, horizon: usize) -> Result<PredictionMatrices> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        let r = self
            .relative_degree()
            .ok_or(Error::RelativeDegreeUndefined {
                n: self.state_dim(),
            })?;
        let (n, m, d) = (self.state_dim(), self.input_dim(), self.output_dim());

        // Powers of A up to r + H - 1.
        let powers = APowers::new(&self.a, r + horizon);

        // Markov parameters C A^(r-1+j) B for j = 0..H-1 fill the lower
        // block-Toeplitz diagonals of Theta.
        let mut markov = Vec::with_capacity(horizon);
        for j in 0..horizon {
            markov.push(&self.c * powers.get(r - 1 + j) * &self.b);
        }
        let mut theta = DMatrix::zeros(d * horizon, m * horizon);
        for p in 0..horizon {
            for s in 0..=p {
                theta
                    .view_mut((p * d, s * m), (d, m))
                    .copy_from(&markov[p - s]);
            }
        }

        let mut phi = DMatrix::zeros(d * horizon, n);
        for h in 0..horizon {
            phi.view_mut((h * d, 0), (d, n))
                .copy_from(&(&self.c * powers.get(r + h)));
        }

        Ok(PredictionMatrices {
            theta,
            phi,
            relative_degree: r,
            horizon,
        })
    }

    /// Mean state after `inputs.len()` noise-free steps:
    /// `A^h mu + sum_tau A^(h-1-tau) B u_tau`.
    pub fn propagate_mean(&self, mu: &DVector<f64>, inputs: &[DVector<f64>]) -> Result<DVector<f64>> {
        if mu.len() != self.state_dim() {
            return Err(Error::Dimension(format!(
                "mean has length {}, state dimension is {}",
                mu.len(),
                self.state_dim()
            )));
        }
        let mut state = mu.clone();
        for u in inputs {
            if u.len() != self.input_dim() {
                return Err(Error::Dimension(format!(
                    "input has length {}, input dimension is {}",
                    u.len(),
                    self.input_dim()
                )));
            }
            state = &self.a * state + &self.b * u;
        }
        Ok(state)
    }

    /// Process-noise covariance accumulated over `h` steps:
    /// `sum_{l=0}^{h-1} A^(h-1-l) Sigma_w (A^(h-1-l))^T`.
    pub fn noise_covariance(&self, h: usize) -> Result<DMatrix<f64>> {
        if h == 0 {
            return Err(Error::InvalidArgument("horizon h must be >= 1".into()));
        }
        let n = self.state_dim();
        let mut acc = DMatrix::zeros(n, n);
        let mut a_pow = DMatrix::identity(n, n);
        for _ in 0..h {
            acc += &a_pow * &self.sigma_w * a_pow.transpose();
            a_pow = &self.a * a_pow;
        }
        // Accumulation of symmetric terms; re-symmetrize to kill roundoff.
        let sym = (&acc + acc.transpose()) * 0.5;
        Ok(sym)
    }

    /// One noisy step: `x+ = A x + B u + w`, `y = C x+ + v` with noise
    /// drawn from the model covariances through `rng`. Deterministic for a
    /// fixed seed and draw order.
    pub fn simulate_step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        rng: &mut impl Rng,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        if x.len() != self.state_dim() || u.len() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "simulate_step expects x of length {} and u of length {}",
                self.state_dim(),
                self.input_dim()
            )));
        }
        let w = self.process_factor.sample(rng);
        let v = self.measurement_factor.sample(rng);
        let x_next = &self.a * x + &self.b * u + w;
        let y = &self.c * &x_next + v;
        Ok((x_next, y))
    }
}

/// Controllability / stability report; degenerate models yield failing
/// flags rather than errors.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub controllable: bool,
    pub marginally_stable: bool,
    pub unit_eigs_nondefective: bool,
    pub details: Vec<String>,
}

impl AssumptionReport {
    pub fn satisfied(&self) -> bool {
        self.controllable && self.marginally_stable
    }
}

/// True state, controller mean estimate, and step counter for one agent.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub x: DVector<f64>,
    pub mu: DVector<f64>,
    pub k: usize,
}

impl AgentState {
    pub fn new(x: DVector<f64>, mu: DVector<f64>) -> Self {
        Self { x, mu, k: 0 }
    }
}

/// Stacked prediction matrices `Theta` (inputs to outputs) and `Phi`
/// (initial mean to outputs) over the window `k+r .. k+H+r-1`.
#[derive(Debug, Clone)]
pub struct PredictionMatrices {
    pub theta: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub relative_degree: usize,
    pub horizon: usize,
}

/// Cached powers `A^0 .. A^max` computed by repeated multiplication.
#[derive(Debug, Clone)]
pub struct APowers {
    powers: Vec<DMatrix<f64>>,
}

impl APowers {
    pub fn new(a: &DMatrix<f64>, max_exponent: usize) -> Self {
        let n = a.nrows();
        let mut powers = Vec::with_capacity(max_exponent + 1);
        powers.push(DMatrix::identity(n, n));
        for k in 1..=max_exponent {
            let next = &powers[k - 1] * a;
            powers.push(next);
        }
        Self { powers }
    }

    pub fn get(&self, k: usize) -> &DMatrix<f64> {
        &self.powers[k]
    }
}

/// Sampling factor `L` with `L L^T = Sigma`, built by symmetric
/// eigendecomposition with negative eigenvalues clamped at zero so
/// covariances at the numerical PSD boundary stay usable.
#[derive(Debug, Clone)]
pub struct GaussianFactor {
    factor: DMatrix<f64>,
}

impl GaussianFactor {
    pub fn new(sigma: &DMatrix<f64>, what: &str) -> Result<Self> {
        let n = sigma.nrows();
        if sigma.ncols() != n {
            return Err(Error::Dimension(format!("{what} must be square")));
        }
        let scale = sigma.amax().max(1.0);
        let asym = (sigma - sigma.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::NotPsd(format!(
                "{what} asymmetry {asym:.3e} exceeds 1e-12 relative"
            )));
        }
        let sym = (sigma + sigma.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let lambda_max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let clamp_floor = -1e-10 * lambda_max.max(1.0);
        let mut factor = eig.eigenvectors.clone();
        for (j, lambda) in eig.eigenvalues.iter().enumerate() {
            if *lambda < clamp_floor {
                return Err(Error::NotPsd(format!(
                    "{what} has eigenvalue {lambda:.3e} below the PSD tolerance"
                )));
            }
            let s = lambda.max(0.0).sqrt();
            for i in 0..n {
                factor[(i, j)] *= s;
            }
        }
        Ok(Self { factor })
    }

    /// Draws one sample `L z` with `z` standard normal.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let n = self.factor.nrows();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.factor * z
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }
}

/// Steady-state Kalman one-step predictor built from the discrete
/// algebraic Riccati equation by fixed-point iteration.
///
/// Used by the "kalman" estimator mode; the default "oracle mean" mode
/// bypasses estimation entirely.
#[derive(Debug, Clone)]
pub struct SteadyStateKalman {
    gain: DMatrix<f64>,
}

impl SteadyStateKalman {
    pub fn design(model: &AgentModel) -> Result<Self> {
        let n = model.state_dim();
        let mut p = model.sigma_w().clone() + DMatrix::identity(n, n);
        let mut converged = false;
        for _ in 0..20_000 {
            let next = riccati_step(model, &p)?;
            let diff = (&next - &p).amax();
            let scale = next.amax().max(1.0);
            p = next;
            if diff <= 1e-12 * scale {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::Solver(
                "Riccati iteration did not converge; check detectability".into(),
            ));
        }
        let cpct = model.c() * &p * model.c().transpose() + model.sigma_v();
        let gain = solve_spd_system(&cpct, &(model.c() * &p))?.transpose();
        Ok(Self { gain })
    }

    /// Predict with the applied input, then correct with the measurement:
    /// `mu+ = A mu + B u + K (y - C (A mu + B u))`.
    pub fn update(
        &self,
        model: &AgentModel,
        mu: &DVector<f64>,
        u: &DVector<f64>,
        y: &DVector<f64>,
    ) -> DVector<f64> {
        let predicted = model.a() * mu + model.b() * u;
        let innovation = y - model.c() * &predicted;
        &predicted + &self.gain * innovation
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }
}

fn riccati_step(model: &AgentModel, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cpct = model.c() * p * model.c().transpose() + model.sigma_v();
    // X = (C P C^T + Sigma_v)^{-1} C P A^T
    let x = solve_spd_system(&cpct, &(model.c() * p * model.a().transpose()))?;
    let next = model.a() * p * model.a().transpose()
        - model.a() * p * model.c().transpose() * x
        + model.sigma_w();
    Ok((&next + next.transpose()) * 0.5)
}

/// Solves `M X = RHS` for symmetric positive semidefinite `M`, with a tiny
/// ridge retry when the Cholesky factorization fails.
fn solve_spd_system(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    if let Some(chol) = sym.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    let ridge = 1e-12 * sym.amax().max(1.0);
    let ridged = &sym + DMatrix::identity(sym.nrows(), sym.ncols()) * ridge;
    ridged
        .cholesky()
        .map(|ch| ch.solve(rhs))
        .ok_or_else(|| Error::Solver("innovation covariance is singular".into()))
}

/// Numerical rank from singular values with relative threshold [`RANK_TOL`].
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|s| **s > RANK_TOL * smax)
        .count()
}

fn complex_rank(m: &DMatrix<Complex<f64>>) -> usize {
    let svd = m.clone().svd(false, false);
    let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|s| **s > RANK_TOL * smax)
        .count()
}

//! Discrete optimal transport between weighted point clouds.
//!
//! Provides the exact 2-Wasserstein distance (transportation LP solved by
//! network simplex), single-source greedy transport plans with capacity
//! limits, transport-weighted barycenters, and the time-averaged empirical
//! output distribution of a swarm.

pub mod samplers;
mod simplex;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Tolerance on total mass for probability measures.
pub const MASS_TOL: f64 = 1e-9;

/// A finitely supported measure: points with nonnegative masses summing
/// to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<DVector<f64>>,
    masses: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<DVector<f64>>, masses: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        if points.len() != masses.len() {
            return Err(Error::InvalidMeasure(format!(
                "{} points but {} masses",
                points.len(),
                masses.len()
            )));
        }
        let dim = points[0].len();
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidMeasure("inconsistent point dimensions".into()));
        }
        if masses.iter().any(|&m| m < 0.0) {
            return Err(Error::InvalidMeasure("negative mass".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidMeasure(format!(
                "masses sum to {total}, expected 1"
            )));
        }
        Ok(Self { points, masses })
    }

    /// Uniform measure over the given points.
    pub fn uniform(points: Vec<DVector<f64>>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidMeasure("empty support".into()));
        }
        let masses = vec![1.0 / n as f64; n];
        Self::new(points, masses)
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Sparse nonnegative mass assignment between source and target supports.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub entries: Vec<PlanEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanEntry {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.mass).sum()
    }

    pub fn source_sums(&self, n_sources: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n_sources];
        for e in &self.entries {
            sums[e.source] += e.mass;
        }
        sums
    }

    pub fn target_sums(&self, n_targets: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n_targets];
        for e in &self.entries {
            sums[e.target] += e.mass;
        }
        sums
    }
}

fn dist2(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

/// Exact 2-Wasserstein distance between two measures of equal dimension.
pub fn wasserstein2(rho: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<f64> {
    wasserstein2_with_plan(rho, nu).map(|(w, _)| w)
}

/// Exact 2-Wasserstein distance plus an optimal transport plan.
pub fn wasserstein2_with_plan(
    rho: &DiscreteMeasure,
    nu: &DiscreteMeasure,
) -> Result<(f64, TransportPlan)> {
    if rho.dim() != nu.dim() {
        return Err(Error::Dimension(format!(
            "measures have dimensions {} and {}",
            rho.dim(),
            nu.dim()
        )));
    }
    let ns = rho.len();
    let nt = nu.len();
    let mut cost = vec![0.0f64; ns * nt];
    for (i, p) in rho.points().iter().enumerate() {
        let row = &mut cost[i * nt..(i + 1) * nt];
        for (j, q) in nu.points().iter().enumerate() {
            row[j] = dist2(p, q);
        }
    }
    let sol = simplex::solve_transportation(rho.masses(), nu.masses(), &cost)?;
    let entries = sol
        .flows
        .into_iter()
        .map(|f| PlanEntry {
            source: f.source,
            target: f.target,
            mass: f.amount,
        })
        .collect();
    Ok((sol.cost.max(0.0).sqrt(), TransportPlan { entries }))
}

/// Greedy single-source plan: fills samples in order of squared distance
/// to `source` (ties by ascending index), each up to its capacity, until
/// `mass` has been shipped. Greedy attains the transportation-LP optimum
/// when there is a single source row.
///
/// Entries all carry strictly positive mass and `source == 0`.
pub fn local_transport_plan(
    source: &DVector<f64>,
    samples: &[DVector<f64>],
    capacities: &[f64],
    mass: f64,
) -> Result<TransportPlan> {
    if samples.is_empty() {
        return Err(Error::InvalidMeasure("empty sample field".into()));
    }
    if samples.len() != capacities.len() {
        return Err(Error::Dimension(format!(
            "{} samples but {} capacities",
            samples.len(),
            capacities.len()
        )));
    }
    let available: f64 = capacities.iter().map(|c| c.max(0.0)).sum();
    if mass > available + 1e-12 * mass.max(1.0) {
        return Err(Error::InsufficientCapacity {
            requested: mass,
            remaining: available,
        });
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        dist2(source, &samples[a])
            .total_cmp(&dist2(source, &samples[b]))
            .then(a.cmp(&b))
    });
    let mut entries = Vec::new();
    let mut remaining = mass;
    for j in order {
        if remaining <= 1e-15 * mass.max(1.0) {
            break;
        }
        let cap = capacities[j].max(0.0);
        if cap <= 0.0 {
            continue;
        }
        let take = cap.min(remaining);
        entries.push(PlanEntry {
            source: 0,
            target: j,
            mass: take,
        });
        remaining -= take;
    }
    Ok(TransportPlan { entries })
}

/// Transport-weighted barycenter of the plan's targets:
/// `sum_j pi_j q_j / sum_j pi_j`.
pub fn weighted_barycenter(plan: &TransportPlan, points: &[DVector<f64>]) -> Result<DVector<f64>> {
    let total = plan.total_mass();
    if total <= 0.0 {
        return Err(Error::InvalidMeasure("plan has zero total mass".into()));
    }
    let dim = points
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::InvalidMeasure("no target points".into()))?;
    let mut acc = DVector::zeros(dim);
    for e in &plan.entries {
        acc += &points[e.target] * e.mass;
    }
    Ok(acc / total)
}

/// Time-averaged empirical output distribution: the uniform measure over
/// every agent output recorded so far. After `k` updates of `n_agents`
/// outputs each, the support holds `(k+1) * n_agents` points.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    points: Vec<DVector<f64>>,
    n_agents: usize,
    steps: usize,
}

impl EmpiricalDistribution {
    /// Starts the accumulation from the agents' initial outputs (step 0).
    pub fn new(initial_outputs: Vec<DVector<f64>>) -> Result<Self> {
        if initial_outputs.is_empty() {
            return Err(Error::InvalidMeasure("no agents".into()));
        }
        let n_agents = initial_outputs.len();
        Ok(Self {
            points: initial_outputs,
            n_agents,
            steps: 0,
        })
    }

    /// Appends one output per agent; as a measure this is the convex
    /// combination `(k+1)/(k+2) * old + 1/(k+2) * uniform(new)`.
    pub fn update(&mut self, outputs: &[DVector<f64>]) -> Result<()> {
        if outputs.len() != self.n_agents {
            return Err(Error::Dimension(format!(
                "expected {} outputs, got {}",
                self.n_agents,
                outputs.len()
            )));
        }
        self.points.extend_from_slice(outputs);
        self.steps += 1;
        Ok(())
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    /// Number of completed updates `k`; the support size is
    /// `(k + 1) * n_agents`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    /// The full uniform measure over all recorded outputs.
    pub fn as_measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::uniform(self.points.clone())
    }

    /// Uniform measure over a seeded subsample of at most `cap` points;
    /// returns the measure and the support size actually used. Exact
    /// (no subsampling) whenever the support fits the cap.
    pub fn subsampled_measure(&self, cap: usize, seed: u64) -> Result<(DiscreteMeasure, usize)> {
        if cap == 0 {
            return Err(Error::InvalidArgument("subsample cap must be >= 1".into()));
        }
        if self.points.len() <= cap {
            return Ok((self.as_measure()?, self.points.len()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut indices: Vec<usize> = (0..self.points.len()).collect();
        // Partial Fisher-Yates: the first `cap` entries become the sample.
        for i in 0..cap {
            let j = i + rand::Rng::random_range(&mut rng, 0..(indices.len() - i));
            indices.swap(i, j);
        }
        let sample: Vec<DVector<f64>> =
            indices[..cap].iter().map(|&i| self.points[i].clone()).collect();
        Ok((DiscreteMeasure::uniform(sample)?, cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v1(x: f64) -> DVector<f64> {
        DVector::from_vec(vec![x])
    }

    fn v2(x: f64, y: f64) -> DVector<f64> {
        DVector::from_vec(vec![x, y])
    }

    fn random_measure(rng: &mut ChaCha8Rng, max_points: usize, dim: usize) -> DiscreteMeasure {
        let n = rng.random_range(1..=max_points);
        let points: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-5.0..5.0)))
            .collect();
        let mut masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = masses.iter().sum();
        masses.iter_mut().for_each(|m| *m /= total);
        DiscreteMeasure::new(points, masses).unwrap()
    }

    #[test]
    fn identical_measures_distance_zero() {
        let m = DiscreteMeasure::uniform(vec![v2(1.0, 2.0), v2(-1.0, 0.5)]).unwrap();
        assert_abs_diff_eq!(wasserstein2(&m, &m).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn unit_diracs_distance_is_euclidean() {
        let a = DiscreteMeasure::uniform(vec![v1(0.0)]).unwrap();
        let b = DiscreteMeasure::uniform(vec![v1(3.0)]).unwrap();
        assert_abs_diff_eq!(wasserstein2(&a, &b).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn two_point_merge_distance() {
        let a = DiscreteMeasure::uniform(vec![v1(0.0), v1(1.0)]).unwrap();
        let b = DiscreteMeasure::uniform(vec![v1(0.5)]).unwrap();
        assert_abs_diff_eq!(wasserstein2(&a, &b).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..40 {
            let rho = random_measure(&mut rng, 4, 2);
            let nu = random_measure(&mut rng, 4, 2);
            let (w, plan) = wasserstein2_with_plan(&rho, &nu).unwrap();
            let nt = nu.len();
            let mut cost = vec![0.0; rho.len() * nt];
            for (i, p) in rho.points().iter().enumerate() {
                for (j, q) in nu.points().iter().enumerate() {
                    cost[i * nt + j] = dist2(p, q);
                }
            }
            let oracle = simplex::tests::brute_force(rho.masses(), nu.masses(), &cost);
            assert_abs_diff_eq!(w * w, oracle, epsilon = 1e-8);

            let src = plan.source_sums(rho.len());
            let tgt = plan.target_sums(nu.len());
            for (s, m) in src.iter().zip(rho.masses()) {
                assert_abs_diff_eq!(s, m, epsilon = 1e-9);
            }
            for (t, m) in tgt.iter().zip(nu.masses()) {
                assert_abs_diff_eq!(t, m, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let a = DiscreteMeasure::uniform(vec![v1(0.0)]).unwrap();
        let b = DiscreteMeasure::uniform(vec![v2(0.0, 0.0)]).unwrap();
        assert!(wasserstein2(&a, &b).is_err());
    }

    #[test]
    fn greedy_single_target_takes_all() {
        let plan = local_transport_plan(&v1(0.0), &[v1(2.0)], &[1.0], 0.3).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_abs_diff_eq!(plan.entries[0].mass, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn greedy_fill_order_forced_by_distance() {
        let samples = vec![v1(1.0), v1(2.0)];
        let plan = local_transport_plan(&v1(0.0), &samples, &[0.6, 0.6], 1.0).unwrap();
        assert_eq!(plan.entries.len(), 2);
        assert_eq!(plan.entries[0].target, 0);
        assert_abs_diff_eq!(plan.entries[0].mass, 0.6, epsilon = 1e-15);
        assert_eq!(plan.entries[1].target, 1);
        assert_abs_diff_eq!(plan.entries[1].mass, 0.4, epsilon = 1e-15);
    }

    #[test]
    fn greedy_ties_break_by_index() {
        let samples = vec![v1(1.0), v1(-1.0)];
        let plan = local_transport_plan(&v1(0.0), &samples, &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(plan.entries.len(), 1);
        assert_eq!(plan.entries[0].target, 0);
    }

    #[test]
    fn greedy_insufficient_capacity_errors() {
        let err = local_transport_plan(&v1(0.0), &[v1(1.0)], &[0.1], 0.5).unwrap_err();
        assert!(matches!(err, Error::InsufficientCapacity { .. }));
    }

    /// Capacity-respecting enumeration oracle for the single-source LP:
    /// at an optimum at most one sample is partially filled, so enumerate
    /// every (saturated subset, fractional index) combination.
    fn single_source_oracle(
        source: &DVector<f64>,
        samples: &[DVector<f64>],
        capacities: &[f64],
        mass: f64,
    ) -> f64 {
        let n = samples.len();
        let d: Vec<f64> = samples.iter().map(|q| dist2(source, q)).collect();
        let mut best = f64::INFINITY;
        for subset in 0u32..(1 << n) {
            let sat_mass: f64 = (0..n)
                .filter(|&j| subset & (1 << j) != 0)
                .map(|j| capacities[j])
                .sum();
            let sat_cost: f64 = (0..n)
                .filter(|&j| subset & (1 << j) != 0)
                .map(|j| capacities[j] * d[j])
                .sum();
            let rest = mass - sat_mass;
            if rest.abs() <= 1e-12 {
                best = best.min(sat_cost);
                continue;
            }
            if rest < 0.0 {
                continue;
            }
            for j in 0..n {
                if subset & (1 << j) != 0 {
                    continue;
                }
                if rest <= capacities[j] + 1e-12 {
                    best = best.min(sat_cost + rest * d[j]);
                }
            }
        }
        best
    }

    #[test]
    fn greedy_matches_lp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = 5;
            let samples: Vec<DVector<f64>> =
                (0..n).map(|_| v2(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect();
            let capacities: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.4)).collect();
            let source = v2(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mass = 1.0 / 12.0;
            let plan = local_transport_plan(&source, &samples, &capacities, mass).unwrap();
            let cost: f64 = plan
                .entries
                .iter()
                .map(|e| e.mass * dist2(&source, &samples[e.target]))
                .sum();
            let oracle = single_source_oracle(&source, &samples, &capacities, mass);
            assert_abs_diff_eq!(cost, oracle, epsilon = 1e-10);
            assert_abs_diff_eq!(plan.total_mass(), mass, epsilon = 1e-12);
        }
    }

    #[test]
    fn greedy_cost_monotone_in_capacity() {
        let samples = vec![v1(1.0), v1(2.0), v1(3.0)];
        let source = v1(0.0);
        let mass = 0.5;
        let base = local_transport_plan(&source, &samples, &[0.2, 0.2, 0.2], mass).unwrap();
        let more = local_transport_plan(&source, &samples, &[0.5, 0.2, 0.2], mass).unwrap();
        let cost = |p: &TransportPlan| -> f64 {
            p.entries.iter().map(|e| e.mass * dist2(&source, &samples[e.target])).sum()
        };
        assert!(cost(&more) <= cost(&base) + 1e-12);
    }

    #[test]
    fn barycenter_examples() {
        let points = vec![v2(0.0, 0.0), v2(2.0, 0.0)];
        let plan = TransportPlan {
            entries: vec![
                PlanEntry { source: 0, target: 0, mass: 0.5 },
                PlanEntry { source: 0, target: 1, mass: 0.5 },
            ],
        };
        assert_abs_diff_eq!(
            weighted_barycenter(&plan, &points).unwrap(),
            v2(1.0, 0.0),
            epsilon = 1e-12
        );

        let points1 = vec![v1(0.0), v1(4.0)];
        let plan1 = TransportPlan {
            entries: vec![
                PlanEntry { source: 0, target: 0, mass: 0.75 },
                PlanEntry { source: 0, target: 1, mass: 0.25 },
            ],
        };
        assert_abs_diff_eq!(
            weighted_barycenter(&plan1, &points1).unwrap()[0],
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn barycenter_zero_mass_errors() {
        let plan = TransportPlan { entries: vec![] };
        assert!(weighted_barycenter(&plan, &[v1(0.0)]).is_err());
    }

    #[test]
    fn empirical_bookkeeping() {
        let mut emp = EmpiricalDistribution::new(vec![v1(0.0), v1(1.0)]).unwrap();
        assert_eq!(emp.len(), 2);
        let measure = emp.as_measure().unwrap();
        assert_abs_diff_eq!(measure.masses()[0], 0.5, epsilon = 1e-15);

        emp.update(&[v1(2.0), v1(3.0)]).unwrap();
        assert_eq!(emp.steps(), 1);
        assert_eq!(emp.len(), (emp.steps() + 1) * emp.n_agents());
        let m2 = emp.as_measure().unwrap();
        for mass in m2.masses() {
            assert_abs_diff_eq!(*mass, 1.0 / 4.0, epsilon = 1e-15);
        }
        assert!(emp.update(&[v1(0.0)]).is_err());
    }

    #[test]
    fn empirical_update_w2_shift_bound() {
        // Coupling bound: one update moves W2^2 by at most
        // (2/(k+2)) * (diam^2 + W2^2_old) on bounded domains.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut emp = EmpiricalDistribution::new(vec![
                v1(rng.random_range(-1.0..1.0)),
                v1(rng.random_range(-1.0..1.0)),
                v1(rng.random_range(-1.0..1.0)),
            ])
            .unwrap();
            let nu = DiscreteMeasure::uniform(vec![v1(-0.5), v1(0.0), v1(0.5)]).unwrap();
            for _ in 0..3 {
                let w_old = wasserstein2(&emp.as_measure().unwrap(), &nu).unwrap();
                let k = emp.steps();
                emp.update(&[
                    v1(rng.random_range(-1.0..1.0)),
                    v1(rng.random_range(-1.0..1.0)),
                    v1(rng.random_range(-1.0..1.0)),
                ])
                .unwrap();
                let w_new = wasserstein2(&emp.as_measure().unwrap(), &nu).unwrap();
                let diam2 = 4.0; // domain is [-1, 1]
                let bound = 2.0 / (k as f64 + 2.0) * (diam2 + w_old * w_old);
                assert!(
                    (w_new * w_new - w_old * w_old).abs() <= bound + 1e-9,
                    "shift {} exceeds bound {}",
                    (w_new * w_new - w_old * w_old).abs(),
                    bound
                );
            }
        }
    }

    #[test]
    fn subsample_is_deterministic_and_capped() {
        let mut emp = EmpiricalDistribution::new(vec![v1(0.0), v1(1.0)]).unwrap();
        for k in 0..20 {
            emp.update(&[v1(k as f64), v1(-(k as f64))]).unwrap();
        }
        let (a, used_a) = emp.subsampled_measure(10, 77).unwrap();
        let (b, used_b) = emp.subsampled_measure(10, 77).unwrap();
        assert_eq!(used_a, 10);
        assert_eq!(used_a, used_b);
        assert_eq!(a, b);
        let (full, used_full) = emp.subsampled_measure(10_000, 77).unwrap();
        assert_eq!(used_full, emp.len());
        assert_eq!(full.len(), emp.len());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        // Metric axioms on small random triples.
        #[test]
        fn wasserstein_symmetry_and_triangle(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_measure(&mut rng, 5, 2);
            let b = random_measure(&mut rng, 5, 2);
            let c = random_measure(&mut rng, 5, 2);
            let ab = wasserstein2(&a, &b).unwrap();
            let ba = wasserstein2(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() <= 1e-8);
            let ac = wasserstein2(&a, &c).unwrap();
            let cb = wasserstein2(&c, &b).unwrap();
            prop_assert!(ab <= ac + cb + 1e-8);
        }

        // Shifting both measures leaves the distance unchanged.
        #[test]
        fn wasserstein_translation_invariance(
            seed in 0u64..5000,
            sx in -10.0f64..10.0,
            sy in -10.0f64..10.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_measure(&mut rng, 5, 2);
            let b = random_measure(&mut rng, 5, 2);
            let shift = v2(sx, sy);
            let shift_measure = |m: &DiscreteMeasure| {
                DiscreteMeasure::new(
                    m.points().iter().map(|p| p + &shift).collect(),
                    m.masses().to_vec(),
                )
                .unwrap()
            };
            let w = wasserstein2(&a, &b).unwrap();
            let ws = wasserstein2(&shift_measure(&a), &shift_measure(&b)).unwrap();
            prop_assert!((w - ws).abs() <= 1e-10 * (1.0 + w));
        }

        // Zero distance iff equal as measures (same support and masses,
        // up to permutation).
        #[test]
        fn wasserstein_zero_iff_equal(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_measure(&mut rng, 4, 2);
            // Permuted copy of a.
            let mut idx: Vec<usize> = (0..a.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let permuted = DiscreteMeasure::new(
                idx.iter().map(|&i| a.points()[i].clone()).collect(),
                idx.iter().map(|&i| a.masses()[i]).collect(),
            )
            .unwrap();
            // Equal measures: squared cost is zero up to mass roundoff
            // (~1e-16 mass times squared diameter), so W2 <= 1e-6.
            prop_assert!(wasserstein2(&a, &permuted).unwrap() <= 1e-6);

            // A genuinely different measure is at positive distance.
            let shifted = DiscreteMeasure::new(
                a.points().iter().map(|p| p + &v2(1.0, 0.0)).collect(),
                a.masses().to_vec(),
            )
            .unwrap();
            prop_assert!(wasserstein2(&a, &shifted).unwrap() > 1e-4);
        }

        // The exact identity behind the barycenter reformulation:
        // sum_j pi_j |y - q_j|^2
        //   = (sum_j pi_j) |y - qbar|^2 + sum_j pi_j |q_j - qbar|^2.
        #[test]
        fn barycenter_decomposition_identity(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = rng.random_range(1..=3usize);
            let n = rng.random_range(1..=6usize);
            let points: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-4.0..4.0)))
                .collect();
            let masses: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let y = DVector::from_fn(dim, |_, _| rng.random_range(-4.0..4.0));
            let plan = TransportPlan {
                entries: (0..n)
                    .map(|j| PlanEntry { source: 0, target: j, mass: masses[j] })
                    .collect(),
            };
            let qbar = weighted_barycenter(&plan, &points).unwrap();
            let lhs: f64 = (0..n).map(|j| masses[j] * dist2(&y, &points[j])).sum();
            let total: f64 = masses.iter().sum();
            let rhs = total * dist2(&y, &qbar)
                + (0..n).map(|j| masses[j] * dist2(&points[j], &qbar)).sum::<f64>();
            let scale = lhs.abs().max(1.0);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
        }
    }
}

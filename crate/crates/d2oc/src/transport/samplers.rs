//! Deterministic target-field generators. Every sampler is a pure
//! function of its parameters and seed, so scenarios reproduce exactly.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Points on a planar annulus centered at `center`: radius uniform in
/// `[radius - width/2, radius + width/2]`, angle uniform.
pub fn ring_2d(count: usize, center: [f64; 2], radius: f64, width: f64, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let r = radius + width * (rng.random_range(0.0..1.0) - 0.5);
            DVector::from_vec(vec![
                center[0] + r * theta.cos(),
                center[1] + r * theta.sin(),
            ])
        })
        .collect()
}

/// Points uniform on a torus surface (major radius around the z-axis,
/// minor radius around the tube). Rejection on the tube angle corrects
/// for the surface-area factor `major + minor cos(phi)`.
pub fn torus_3d(
    count: usize,
    center: [f64; 3],
    major: f64,
    minor: f64,
    seed: u64,
) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    while points.len() < count {
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let accept: f64 = rng.random_range(0.0..1.0);
        if accept * (major + minor) > major + minor * phi.cos() {
            continue;
        }
        let ring = major + minor * phi.cos();
        points.push(DVector::from_vec(vec![
            center[0] + ring * theta.cos(),
            center[1] + ring * theta.sin(),
            center[2] + minor * phi.sin(),
        ]));
    }
    points
}

/// Regular lattice over the rectangle `[min, max]`, endpoints included.
pub fn grid_2d(nx: usize, ny: usize, min: [f64; 2], max: [f64; 2]) -> Vec<DVector<f64>> {
    let step = |lo: f64, hi: f64, n: usize, k: usize| {
        if n <= 1 {
            (lo + hi) / 2.0
        } else {
            lo + (hi - lo) * k as f64 / (n - 1) as f64
        }
    };
    let mut points = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            points.push(DVector::from_vec(vec![
                step(min[0], max[0], nx, ix),
                step(min[1], max[1], ny, iy),
            ]));
        }
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_is_deterministic_and_on_annulus() {
        let a = ring_2d(100, [1.0, -2.0], 5.0, 0.5, 3);
        let b = ring_2d(100, [1.0, -2.0], 5.0, 0.5, 3);
        assert_eq!(a, b);
        for p in &a {
            let r = ((p[0] - 1.0).powi(2) + (p[1] + 2.0).powi(2)).sqrt();
            assert!(r >= 4.75 - 1e-12 && r <= 5.25 + 1e-12);
        }
    }

    #[test]
    fn torus_points_lie_on_surface() {
        let pts = torus_3d(200, [0.0, 0.0, 10.0], 5.0, 1.5, 9);
        assert_eq!(pts.len(), 200);
        for p in &pts {
            let ring = (p[0].powi(2) + p[1].powi(2)).sqrt();
            let tube = ((ring - 5.0).powi(2) + (p[2] - 10.0).powi(2)).sqrt();
            assert!((tube - 1.5).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_covers_rectangle() {
        let pts = grid_2d(3, 2, [0.0, 0.0], [2.0, 1.0]);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], DVector::from_vec(vec![0.0, 0.0]));
        assert_eq!(pts[5], DVector::from_vec(vec![2.0, 1.0]));
    }
}

//! Shared helpers for unit tests: seeded sampling and finite-difference oracles.

use nalgebra::{Dim, Matrix, RawStorage, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{exp_so3, Quat};
use crate::motion::{rk4_step, GravityModel, ImuSample, NavMatrix, NavState, NavVector};

pub struct TestRng(ChaCha8Rng);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0.random_range(lo..hi)
    }

    pub fn vec3(&mut self, scale: f64) -> Vector3<f64> {
        Vector3::new(
            self.uniform(-scale, scale),
            self.uniform(-scale, scale),
            self.uniform(-scale, scale),
        )
    }

    pub fn quat(&mut self) -> Quat {
        exp_so3(&self.vec3(3.0))
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }
}

pub fn max_abs_diff<R: Dim, C: Dim, S1, S2>(a: &Matrix<f64, R, C, S1>, b: &Matrix<f64, R, C, S2>) -> f64
where
    S1: RawStorage<f64, R, C>,
    S2: RawStorage<f64, R, C>,
{
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a - b‖_F / max(‖b‖_F, 1e-12)`.
pub fn rel_frobenius<R: Dim, C: Dim, S1, S2>(a: &Matrix<f64, R, C, S1>, b: &Matrix<f64, R, C, S2>) -> f64
where
    S1: RawStorage<f64, R, C>,
    S2: RawStorage<f64, R, C>,
{
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|x| x * x).sum();
    diff.sqrt() / norm.sqrt().max(1e-12)
}

/// Finite-difference estimate of the continuous error-state Jacobian of the
/// nav dynamics: `(Φ(h) - Φ(-h)) / 2h`, with each `Φ(±h)` itself built from
/// central differences of the RK4 step through the nav retraction.
pub fn fd_nav_rate(nav: &NavState, imu: &ImuSample, gravity: &GravityModel) -> NavMatrix {
    let eps = 1e-5;
    let h = 1e-4;
    let transition = |dt: f64| {
        let mut phi = NavMatrix::zeros();
        for i in 0..9 {
            let mut dx = NavVector::zeros();
            dx[i] = eps;
            let plus = rk4_step(&nav.boxplus(&dx), imu, dt, gravity).0;
            let minus = rk4_step(&nav.boxplus(&(-dx)), imu, dt, gravity).0;
            phi.set_column(i, &(plus.boxminus(&minus) / (2.0 * eps)));
        }
        phi
    };
    (transition(h) - transition(-h)) / (2.0 * h)
}

//! Shared oracles for the integration tests: numerical ODE integration
//! that is entirely independent of the matrix-exponential discretization
//! under test.

use flycap::{AffineMap, ModeDynamics};
use nalgebra::{DMatrix, DVector};

/// One adaptive Dormand-Prince (RK45) step attempt; returns the fifth-order
/// solution and the embedded error estimate.
fn dopri_step(dynamics: &ModeDynamics, x: &DVector<f64>, h: f64) -> (DVector<f64>, f64) {
    let f = |y: &DVector<f64>| dynamics.derivative(y);
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (h / 5.0)));
    let k3 = f(&(x + &k1 * (3.0 * h / 40.0) + &k2 * (9.0 * h / 40.0)));
    let k4 = f(&(x + &k1 * (44.0 * h / 45.0) - &k2 * (56.0 * h / 15.0) + &k3 * (32.0 * h / 9.0)));
    let k5 = f(&(x
        + &k1 * (19372.0 * h / 6561.0)
        - &k2 * (25360.0 * h / 2187.0)
        + &k3 * (64448.0 * h / 6561.0)
        - &k4 * (212.0 * h / 729.0)));
    let k6 = f(&(x
        + &k1 * (9017.0 * h / 3168.0)
        - &k2 * (355.0 * h / 33.0)
        + &k3 * (46732.0 * h / 5247.0)
        + &k4 * (49.0 * h / 176.0)
        - &k5 * (5103.0 * h / 18656.0)));
    let fifth = x
        + &k1 * (35.0 * h / 384.0)
        + &k3 * (500.0 * h / 1113.0)
        + &k4 * (125.0 * h / 192.0)
        - &k5 * (2187.0 * h / 6784.0)
        + &k6 * (11.0 * h / 84.0);
    let k7 = f(&fifth);
    let fourth = x
        + &k1 * (5179.0 * h / 57600.0)
        + &k3 * (7571.0 * h / 16695.0)
        + &k4 * (393.0 * h / 640.0)
        - &k5 * (92097.0 * h / 339200.0)
        + &k6 * (187.0 * h / 2100.0)
        + &k7 * (h / 40.0);
    let err = (&fifth - &fourth).norm();
    (fifth, err)
}

/// Integrates dx/dt = A x + b from `x0` over `[0, t]` with adaptive step
/// control tight enough to serve as a 1e-9-accurate oracle.
pub fn integrate(dynamics: &ModeDynamics, x0: &DVector<f64>, t: f64) -> DVector<f64> {
    let tol = 1e-12;
    let mut x = x0.clone();
    let mut remaining = t;
    let mut h = t / 16.0;
    while remaining > 0.0 {
        h = h.min(remaining);
        let (candidate, err) = dopri_step(dynamics, &x, h);
        let scale = tol * x.norm().max(1.0);
        if err <= scale || h < t * 1e-12 {
            x = candidate;
            remaining -= h;
            if err > 0.0 {
                h *= (0.9 * (scale / err).powf(0.2)).clamp(0.2, 5.0);
            } else {
                h *= 5.0;
            }
        } else {
            h *= (0.9 * (scale / err).powf(0.25)).max(0.1);
        }
    }
    x
}

/// Recovers the exact-step affine map x -> C x + d by integrating the flow
/// from the origin and from each basis point: d = flow(0), C e_i =
/// flow(e_i) - d.
pub fn integrated_map(dynamics: &ModeDynamics, t: f64) -> AffineMap {
    let n = dynamics.dim();
    let d = integrate(dynamics, &DVector::zeros(n), t);
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        let column = integrate(dynamics, &e, t) - &d;
        c.set_column(i, &column);
    }
    AffineMap::new(c, d).unwrap()
}

/// Relative difference between two vectors, scaled by the larger norm.
pub fn relative_error(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1.0)
}

//! Scattering-free transport: exponential attenuation along straight rays,
//! used as the comparison baseline for the pencil-beam approximation.

use crate::geom::UnitVector;
use crate::measure::PhaseSpaceMeasure;
use crate::medium::ScalarField;
use crate::quad;

/// Attenuation exponent is truncated once it exceeds this value
/// (transmission below 1e-14).
const ATTENUATION_CUTOFF: f64 = 32.3;

/// Solution of theta.grad v + lambda v = f at a single phase-space point:
/// v(x, theta) = int_0^inf exp(-int_0^t lambda(x - s theta) ds) f(x - t theta, theta) dt.
pub fn ballistic_solve<F>(
    f: F,
    lambda: &ScalarField,
    lambda0: f64,
    x: &[f64],
    theta: &UnitVector,
) -> f64
where
    F: Fn(&[f64], &UnitVector) -> f64,
{
    assert!(lambda0 > 0.0);
    let d = x.len();
    let mut back = theta.components().to_vec();
    for c in &mut back {
        *c = -*c;
    }
    let back = UnitVector::normalized(back).unwrap();
    let att = lambda.along_ray(x, &back);
    let t_max = ATTENUATION_CUTOFF / lambda0;
    let integrand = |t: f64| {
        let mut pos = vec![0.0; d];
        for i in 0..d {
            pos[i] = x[i] - t * theta.components()[i];
        }
        (-att.integral(0.0, t)).exp() * f(&pos, theta)
    };
    // mean-free-path scaled pre-splits, then geometric
    let splits: Vec<f64> = (1..=10)
        .map(|k| 0.1 * k as f64 / lambda0)
        .chain((0..6).map(|k| 2f64.powi(k) / lambda0))
        .collect();
    quad::adaptive_split(&integrand, 0.0, t_max, &splits, 1e-12)
}

/// Distributional pairing of the unit point-source ballistic solution with a
/// test function: int_0^inf exp(-int_0^t lambda(x0 + s theta0) ds)
/// psi(x0 + t theta0, theta0) dt.
pub fn ballistic_point_pairing<P>(
    psi: P,
    lambda: &ScalarField,
    lambda0: f64,
    x0: &[f64],
    theta0: &UnitVector,
) -> f64
where
    P: Fn(&[f64], &UnitVector) -> f64,
{
    assert!(lambda0 > 0.0);
    let d = x0.len();
    let att = lambda.along_ray(x0, theta0);
    let t_max = ATTENUATION_CUTOFF / lambda0;
    let integrand = |t: f64| {
        let mut pos = vec![0.0; d];
        for i in 0..d {
            pos[i] = x0[i] + t * theta0.components()[i];
        }
        (-att.integral(0.0, t)).exp() * psi(&pos, theta0)
    };
    let splits: Vec<f64> = (1..=10)
        .map(|k| 0.1 * k as f64 / lambda0)
        .chain((0..6).map(|k| 2f64.powi(k) / lambda0))
        .collect();
    quad::adaptive_split(&integrand, 0.0, t_max, &splits, 1e-12)
}

/// Discretizes the unit point-source ballistic solution as ray atoms at the
/// given depths with the matching quadrature weights: atom k carries
/// exp(-int_0^{t_k} lambda) * w_k at position x0 + t_k theta0.
pub fn ballistic_ray_measure(
    lambda: &ScalarField,
    x0: &[f64],
    theta0: &UnitVector,
    depths: &[f64],
    weights: &[f64],
) -> PhaseSpaceMeasure {
    assert_eq!(depths.len(), weights.len());
    let d = x0.len();
    let att = lambda.along_ray(x0, theta0);
    let mut out = PhaseSpaceMeasure::new(d);
    let mut pos = vec![0.0; d];
    for (t, w) in depths.iter().zip(weights) {
        for i in 0..d {
            pos[i] = x0[i] + t * theta0.components()[i];
        }
        out.push(&pos, theta0.components(), w * (-att.integral(0.0, *t)).exp());
    }
    out
}

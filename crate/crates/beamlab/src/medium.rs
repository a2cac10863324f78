//! Medium coefficients: evaluable scalar fields for absorption, diffusion
//! strength, and scattering amplitude, plus their restrictions to a beam axis.

use crate::geom::UnitVector;
use crate::quad;
use serde::{Deserialize, Serialize};

/// A scalar coefficient field on R^d. Tabulated fields vary along the depth
/// (last) coordinate only, matching the layered media used in the studies.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarField {
    Constant { value: f64 },
    Linear { base: f64, grad: Vec<f64> },
    TabulatedDepth { depths: Vec<f64>, values: Vec<f64> },
}

impl ScalarField {
    pub fn constant(value: f64) -> Self {
        ScalarField::Constant { value }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ScalarField::Constant { value } => *value,
            ScalarField::Linear { base, grad } => {
                base + grad.iter().zip(x).map(|(g, xi)| g * xi).sum::<f64>()
            }
            ScalarField::TabulatedDepth { depths, values } => {
                interp1(depths, values, x[x.len() - 1])
            }
        }
    }

    /// A Lipschitz constant of the field (exact for constant/linear,
    /// max slope for tabulated).
    pub fn lipschitz(&self) -> f64 {
        match self {
            ScalarField::Constant { .. } => 0.0,
            ScalarField::Linear { grad, .. } => grad.iter().map(|g| g * g).sum::<f64>().sqrt(),
            ScalarField::TabulatedDepth { depths, values } => {
                let mut worst = 0.0f64;
                for k in 1..depths.len() {
                    let dt = depths[k] - depths[k - 1];
                    if dt > 0.0 {
                        worst = worst.max(((values[k] - values[k - 1]) / dt).abs());
                    }
                }
                worst
            }
        }
    }

    /// Restriction t -> field(y + t * eta) as a depth profile.
    pub fn along_ray(&self, y: &[f64], eta: &UnitVector) -> DepthProfile {
        match self {
            ScalarField::Constant { value } => DepthProfile::Constant { value: *value },
            ScalarField::Linear { base, grad } => {
                let b0 = base + grad.iter().zip(y).map(|(g, yi)| g * yi).sum::<f64>();
                let slope = grad
                    .iter()
                    .zip(eta.components())
                    .map(|(g, e)| g * e)
                    .sum::<f64>();
                DepthProfile::Linear { base: b0, slope }
            }
            ScalarField::TabulatedDepth { depths, .. } => {
                // Resample along the ray onto the same depth knots.
                let values = depths
                    .iter()
                    .map(|t| {
                        let x: Vec<f64> = y
                            .iter()
                            .zip(eta.components())
                            .map(|(yi, e)| yi + t * e)
                            .collect();
                        self.eval(&x)
                    })
                    .collect();
                DepthProfile::Tabulated {
                    depths: depths.clone(),
                    values,
                }
            }
        }
    }
}

fn interp1(ts: &[f64], vs: &[f64], t: f64) -> f64 {
    if t <= ts[0] {
        return vs[0];
    }
    if t >= ts[ts.len() - 1] {
        return vs[vs.len() - 1];
    }
    let idx = ts.partition_point(|u| *u <= t).min(ts.len() - 1);
    let (t0, t1) = (ts[idx - 1], ts[idx]);
    let w = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
    vs[idx - 1] * (1.0 - w) + vs[idx] * w
}

/// A coefficient as a function of beam depth, with exact integrals where the
/// shape allows and adaptive quadrature otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DepthProfile {
    Constant { value: f64 },
    Linear { base: f64, slope: f64 },
    Tabulated { depths: Vec<f64>, values: Vec<f64> },
}

impl DepthProfile {
    pub fn constant(value: f64) -> Self {
        DepthProfile::Constant { value }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            DepthProfile::Constant { value } => *value,
            DepthProfile::Linear { base, slope } => base + slope * t,
            DepthProfile::Tabulated { depths, values } => interp1(depths, values, t),
        }
    }

    /// Integral over [a, b]; closed form for constant/linear shapes,
    /// adaptive quadrature to 1e-12 relative scale otherwise.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        match self {
            DepthProfile::Constant { value } => value * (b - a),
            DepthProfile::Linear { base, slope } => {
                base * (b - a) + 0.5 * slope * (b * b - a * a)
            }
            DepthProfile::Tabulated { depths, .. } => {
                let scale = (b - a).abs().max(1.0);
                quad::adaptive_split(&|t| self.eval(t), a, b, depths, 1e-12 * scale)
            }
        }
    }

    pub fn is_constant(&self) -> Option<f64> {
        match self {
            DepthProfile::Constant { value } => Some(*value),
            DepthProfile::Linear { base, slope } if *slope == 0.0 => Some(*base),
            _ => None,
        }
    }
}

/// The coefficient triple (lambda, sigma, b) with its declared bounds.
/// sigma is the diffusion-strength field of the forward-peaked limit and b
/// the scattering amplitude; they differ by a dimension-dependent constant
/// (see `kernels::sigma_from_b`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MediumProfile {
    pub lambda: ScalarField,
    pub sigma: ScalarField,
    pub b: ScalarField,
    pub lambda0: f64,
    pub sigma0: f64,
}

impl MediumProfile {
    /// Validates the declared two-sided bounds on a sample box (corners plus
    /// midpoints along depth). Fields are layered, so this is exact for the
    /// shapes supported here.
    pub fn validate_on_box(&self, lo: &[f64], hi: &[f64]) -> Result<(), String> {
        let checks: [(&ScalarField, f64, &str); 2] = [
            (&self.lambda, self.lambda0, "lambda"),
            (&self.sigma, self.sigma0, "sigma"),
        ];
        for (field, bound, name) in checks {
            if bound <= 0.0 {
                return Err(format!("{name}0 must be positive"));
            }
            for t in 0..=16 {
                let w = t as f64 / 16.0;
                let x: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| l + w * (h - l)).collect();
                let v = field.eval(&x);
                if v < bound - 1e-12 || v > 1.0 / bound + 1e-12 {
                    return Err(format!(
                        "{name}(x) = {v} outside [{}, {}] on the declared box",
                        bound,
                        1.0 / bound
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_profile_integral_exact() {
        let p = DepthProfile::Linear {
            base: 1.0,
            slope: 1.0,
        };
        assert!((p.integral(0.0, 1.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn tabulated_interp_and_integral() {
        let p = DepthProfile::Tabulated {
            depths: vec![0.0, 1.0, 2.0],
            values: vec![1.0, 2.0, 1.0],
        };
        assert!((p.eval(0.5) - 1.5).abs() < 1e-15);
        assert!((p.integral(0.0, 2.0) - 3.0).abs() < 1e-10);
    }

    #[test]
    fn field_restriction_along_tilted_ray() {
        let f = ScalarField::Linear {
            base: 2.0,
            grad: vec![0.5, 0.0, 1.0],
        };
        let eta = UnitVector::normalized(vec![1.0, 0.0, 1.0]).unwrap();
        let prof = f.along_ray(&[1.0, 0.0, 0.0], &eta);
        let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
        assert!((prof.eval(2.0) - (2.5 + 2.0 * (0.5 + 1.0) * inv_sqrt2)).abs() < 1e-12);
    }
}

//! Sphere/plane coordinate machinery: stereographic projection about the
//! north pole, its surface-measure weight, the chord identity, the
//! gnomonic-chart gap function `h`, and the affine beam frame maps.

use thiserror::Error;

/// South-pole exclusion threshold: the projection blows up quadratically as
/// 1 + theta_d -> 0 and beam-centric workloads stay near the north pole.
pub const SOUTH_POLE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("direction within {0:e} of the south pole; stereographic chart undefined")]
    SouthPole(f64),
    #[error("dimension must be >= 2, got {0}")]
    BadDimension(usize),
    #[error("vector norm {0} too far from 1 for a unit direction")]
    NotUnit(f64),
}

/// A direction on the unit sphere S^(d-1), stored as d direction cosines.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector {
    components: Vec<f64>,
}

impl UnitVector {
    /// Builds a unit vector, checking the norm to 1e-12.
    pub fn new(components: Vec<f64>) -> Result<Self, GeomError> {
        if components.len() < 2 {
            return Err(GeomError::BadDimension(components.len()));
        }
        let n = norm(&components);
        if (n - 1.0).abs() > 1e-12 {
            return Err(GeomError::NotUnit(n));
        }
        Ok(Self { components })
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn normalized(mut components: Vec<f64>) -> Result<Self, GeomError> {
        if components.len() < 2 {
            return Err(GeomError::BadDimension(components.len()));
        }
        let n = norm(&components);
        if n == 0.0 || !n.is_finite() {
            return Err(GeomError::NotUnit(n));
        }
        for c in &mut components {
            *c /= n;
        }
        Ok(Self { components })
    }

    /// North pole N = (0, ..., 0, 1) in dimension d.
    pub fn north(d: usize) -> Self {
        let mut c = vec![0.0; d];
        c[d - 1] = 1.0;
        Self { components: c }
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.components
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.components, &other.components)
    }

    /// Geodesic (great-circle) angle to another direction.
    pub fn geodesic(&self, other: &UnitVector) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// Euclidean chord length to another direction.
    pub fn chord(&self, other: &UnitVector) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.components.iter().zip(&other.components) {
            s += (a - b) * (a - b);
        }
        s.sqrt()
    }
}

/// Stereographic image of a direction: v in R^(d-1) with the cached
/// bracket <v> = (1 + |v|^2)^(1/2).
#[derive(Debug, Clone, PartialEq)]
pub struct StereoPoint {
    v: Vec<f64>,
    bracket: f64,
}

impl StereoPoint {
    pub fn new(v: Vec<f64>) -> Self {
        let bracket = (1.0 + dot(&v, &v)).sqrt();
        Self { v, bracket }
    }

    pub fn coords(&self) -> &[f64] {
        &self.v
    }

    /// The bracket <v> = (1 + |v|^2)^(1/2); always >= 1.
    pub fn bracket(&self) -> f64 {
        self.bracket
    }

    pub fn norm(&self) -> f64 {
        norm(&self.v)
    }
}

/// Stereographic projection about the north pole: v = theta' / (1 + theta_d).
pub fn stereo_project(theta: &UnitVector) -> Result<StereoPoint, GeomError> {
    let d = theta.dim();
    let denom = 1.0 + theta.components[d - 1];
    if denom <= SOUTH_POLE_EPS {
        return Err(GeomError::SouthPole(denom));
    }
    let v = theta.components[..d - 1].iter().map(|c| c / denom).collect();
    Ok(StereoPoint::new(v))
}

/// Inverse stereographic map: theta = (2v / <v>^2, (1 - |v|^2) / <v>^2).
pub fn stereo_inverse(v: &StereoPoint) -> UnitVector {
    let b2 = v.bracket * v.bracket;
    let mut c: Vec<f64> = v.v.iter().map(|x| 2.0 * x / b2).collect();
    c.push((2.0 - b2) / b2); // 1 - |v|^2 = 2 - <v>^2
    // The construction is exactly unit up to roundoff.
    UnitVector { components: c }
}

/// Surface-measure weight of the chart: d(theta) = 2^(d-1) <v>^(-2(d-1)) dv.
pub fn surface_weight(v: &StereoPoint, d: usize) -> f64 {
    let n = (d - 1) as i32;
    2f64.powi(n) / v.bracket.powi(2 * n)
}

/// Chord identity: 1 - theta.theta' = 2 |v - v'|^2 / (<v>^2 <v'>^2).
pub fn chord_gap(v: &StereoPoint, vp: &StereoPoint) -> f64 {
    let mut d2 = 0.0;
    for (a, b) in v.v.iter().zip(&vp.v) {
        d2 += (a - b) * (a - b);
    }
    2.0 * d2 / (v.bracket * v.bracket * vp.bracket * vp.bracket)
}

/// Gap function of the gnomonic (beam) chart: h(v, v') = <v><v'> - v.v' - 1.
///
/// Identity: h = |v - v'|^2 / 2 - (<v> - <v'>)^2 / 2, hence
/// 0 <= h <= |v - v'|^2 / 2 with equality on the left iff v = v'.
pub fn beam_h(v: &StereoPoint, vp: &StereoPoint) -> f64 {
    let mut d2 = 0.0;
    for (a, b) in v.v.iter().zip(&vp.v) {
        d2 += (a - b) * (a - b);
    }
    let db = v.bracket - vp.bracket;
    0.5 * (d2 - db * db)
}

/// Closed-form coefficient for the lower quadratic bound on `beam_h`:
/// beta = 1 - (1 - (1/sqrt(2)) ln(1 + sqrt(2)))^2 / 2.
///
/// The bound (beta/2)|v - v'|^2 <= h(v, v') requires the gradient of <.>
/// to stay below c = sqrt(1 - beta) along [v, v'], which holds on the ball
/// of radius `beam_h_bound_radius(beta)` and fails far from the pole.
pub fn beam_h_beta() -> f64 {
    let c = 1.0 - std::f64::consts::FRAC_1_SQRT_2 * (1.0 + std::f64::consts::SQRT_2).ln();
    1.0 - 0.5 * c * c
}

/// Radius of the ball |v| <= r on which the two-sided bound with
/// coefficient `beta` is guaranteed: r = c / sqrt(1 - c^2), c = sqrt(1 - beta).
pub fn beam_h_bound_radius(beta: f64) -> f64 {
    let c2 = 1.0 - beta;
    (c2 / (1.0 - c2)).sqrt()
}

/// Sharp lower-bound coefficient on the ball |v|, |v'| <= r: beta_r = 1 / (1 + r^2).
pub fn beam_h_beta_on_ball(r: f64) -> f64 {
    1.0 / (1.0 + r * r)
}

/// Affine beam frame: rotates the axis `eta` to the north pole, recenters at
/// `y`, and applies the stretched-coordinate scaling of a beam of width eps.
#[derive(Debug, Clone)]
pub struct FrameMap {
    base: Vec<f64>,
    axis: UnitVector,
    eps: f64,
    /// Row-major d x d rotation with R * axis = N.
    rot: Vec<f64>,
}

impl FrameMap {
    /// Builds the frame at base point `y` with beam axis `eta` and scale `eps > 0`.
    ///
    /// The rotation is the unique in-plane rotation of span{eta, N} (identity
    /// when eta = N), with a two-reflection fallback near eta = -N where the
    /// in-plane construction degenerates.
    pub fn new(y: Vec<f64>, eta: UnitVector, eps: f64) -> Self {
        assert!(eps > 0.0, "frame scale must be positive");
        assert_eq!(y.len(), eta.dim());
        let d = eta.dim();
        let c = eta.components[d - 1]; // eta . N
        let rot = if c > -1.0 + 1e-9 {
            rotation_to_north_inplane(&eta)
        } else {
            rotation_to_north_reflections(&eta)
        };
        Self {
            base: y,
            axis: eta,
            eps,
            rot,
        }
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn axis(&self) -> &UnitVector {
        &self.axis
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    fn dim(&self) -> usize {
        self.base.len()
    }

    fn rotate(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.rot[i * d + j] * x[j];
            }
            out[i] = s;
        }
        out
    }

    fn rotate_t(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let mut s = 0.0;
            for j in 0..d {
                s += self.rot[j * d + i] * x[j];
            }
            out[i] = s;
        }
        out
    }

    /// Maps (x, theta) to stretched beam coordinates (X, V):
    /// X' = (2 eps)^(-1) [R(x - y)]_perp, X^d = eta.(x - y), V = eps^(-1) S(R theta).
    pub fn apply(&self, x: &[f64], theta: &UnitVector) -> Result<(Vec<f64>, Vec<f64>), GeomError> {
        let d = self.dim();
        let rel: Vec<f64> = x.iter().zip(&self.base).map(|(a, b)| a - b).collect();
        let rx = self.rotate(&rel);
        let rtheta = UnitVector {
            components: self.rotate(theta.components()),
        };
        let v = stereo_project(&rtheta)?;
        let mut bx = Vec::with_capacity(d);
        for item in rx.iter().take(d - 1) {
            bx.push(item / (2.0 * self.eps));
        }
        bx.push(rx[d - 1]);
        let bv = v.coords().iter().map(|c| c / self.eps).collect();
        Ok((bx, bv))
    }

    /// Inverse of `apply`.
    pub fn invert(&self, bx: &[f64], bv: &[f64]) -> (Vec<f64>, UnitVector) {
        let d = self.dim();
        let mut rx = Vec::with_capacity(d);
        for item in bx.iter().take(d - 1) {
            rx.push(item * 2.0 * self.eps);
        }
        rx.push(bx[d - 1]);
        let x: Vec<f64> = self
            .rotate_t(&rx)
            .iter()
            .zip(&self.base)
            .map(|(a, b)| a + b)
            .collect();
        let v = StereoPoint::new(bv.iter().map(|c| c * self.eps).collect());
        let theta = UnitVector {
            components: self.rotate_t(stereo_inverse(&v).components()),
        };
        (x, theta)
    }

    /// Orthogonality defect max |R^T R - I| of the rotation, for diagnostics.
    pub fn orthogonality_defect(&self) -> f64 {
        let d = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let mut s = 0.0;
                for k in 0..d {
                    s += self.rot[k * d + i] * self.rot[k * d + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((s - target).abs());
            }
        }
        worst
    }
}

/// R = I + (c - 1)(N N^T + w w^T) + s (N w^T - w N^T) rotating eta -> N in
/// the plane span{eta, N}; w is the unit part of eta orthogonal to N.
fn rotation_to_north_inplane(eta: &UnitVector) -> Vec<f64> {
    let d = eta.dim();
    let c = eta.components[d - 1];
    let mut w: Vec<f64> = eta.components[..d - 1].to_vec();
    let wn = norm(&w);
    let mut rot = vec![0.0; d * d];
    for i in 0..d {
        rot[i * d + i] = 1.0;
    }
    if wn < 1e-15 {
        return rot; // eta = N (or numerically indistinguishable)
    }
    for x in &mut w {
        *x /= wn;
    }
    let s = wn; // sin of the rotation angle, cos = c
    for i in 0..d {
        for j in 0..d {
            let ni = if i == d - 1 { 1.0 } else { 0.0 };
            let nj = if j == d - 1 { 1.0 } else { 0.0 };
            let wi = if i < d - 1 { w[i] } else { 0.0 };
            let wj = if j < d - 1 { w[j] } else { 0.0 };
            rot[i * d + j] += (c - 1.0) * (ni * nj + wi * wj) + s * (ni * wj - wi * nj);
        }
    }
    rot
}

/// Fallback near eta = -N: compose the reflection across (eta - N)/|eta - N|
/// (which maps eta to N) with a reflection fixing N to restore det = +1.
fn rotation_to_north_reflections(eta: &UnitVector) -> Vec<f64> {
    let d = eta.dim();
    let mut u: Vec<f64> = eta.components.clone();
    u[d - 1] -= 1.0;
    let un = norm(&u);
    for x in &mut u {
        *x /= un;
    }
    // H_u = I - 2 u u^T maps eta to N; compose with H_e1 (fixes N).
    let mut rot = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut h = if i == j { 1.0 } else { 0.0 };
            h -= 2.0 * u[i] * u[j];
            // apply H_e1 on the left: negate row 0
            if i == 0 {
                h = -h;
            }
            rot[i * d + j] = h;
        }
    }
    rot
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Draws a uniformly distributed direction on S^(d-1).
pub fn random_unit<R: rand::Rng>(d: usize, rng: &mut R) -> UnitVector {
    use rand::distributions::Distribution;
    let normal = rand_distr_standard_normal();
    loop {
        let c: Vec<f64> = (0..d).map(|_| normal.sample(rng)).collect();
        if let Ok(u) = UnitVector::normalized(c) {
            return u;
        }
    }
}

// rand 0.8 ships StandardNormal through rand_distr; a Box-Muller pair keeps
// the dependency surface small since only this helper needs Gaussians here.
struct BoxMuller;

impl rand::distributions::Distribution<f64> for BoxMuller {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

fn rand_distr_standard_normal() -> BoxMuller {
    BoxMuller
}

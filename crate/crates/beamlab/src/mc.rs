//! Monte Carlo solver for the stationary radiative transfer equation with
//! the generalized Henyey-Greenstein kernel. Collision-density walk with
//! Woodcock delta tracking against a scattering-rate majorant, continuous
//! weight attenuation for absorption, Russian roulette, and track-length
//! tallies onto a phase-space histogram (tensor spatial bins times
//! stereographic angular bins carrying the exact surface weight).
//!
//! Batches own counter-seeded RNG streams and partial tallies are merged in
//! batch order, so results are bit-identical for a given (seed, n) whatever
//! the worker count.

use crate::geom::{stereo_inverse, StereoPoint};
use crate::kernels::{CosineSampler, ScatteringParams};
use crate::measure::{PhaseSpaceMeasure, Window};
use crate::medium::{MediumProfile, ScalarField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum McError {
    #[error("non-positive interaction rate: {0}")]
    NonPositiveRate(f64),
    #[error("tally window must be a box")]
    WindowNotBox,
    #[error("kernel error: {0}")]
    Kernel(#[from] crate::kernels::KernelError),
    #[error("dimension {0} not supported by the walker (d = 2 or 3)")]
    BadDimension(usize),
}

const ROULETTE_THRESHOLD: f64 = 1e-6;
const ROULETTE_SURVIVAL: f64 = 10.0;
const MAX_EVENTS: usize = 200_000;

/// Particle source.
#[derive(Debug, Clone)]
pub enum SourceSpec {
    /// Unit point source at (x0, theta0) scaled by `mass`.
    Point {
        x: Vec<f64>,
        theta: Vec<f64>,
        mass: f64,
    },
    /// Uniform density over a spatial box times a polar cap of half-angle
    /// `cap` around `theta`; bounded phase-space density.
    BoxCap {
        lo: Vec<f64>,
        hi: Vec<f64>,
        theta: Vec<f64>,
        cap: f64,
        mass: f64,
    },
}

impl SourceSpec {
    pub fn mass(&self) -> f64 {
        match self {
            SourceSpec::Point { mass, .. } | SourceSpec::BoxCap { mass, .. } => *mass,
        }
    }

    /// Sup norm of the phase-space density (infinite for a point source).
    pub fn sup_norm(&self, d: usize) -> f64 {
        match self {
            SourceSpec::Point { .. } => f64::INFINITY,
            SourceSpec::BoxCap { lo, hi, cap, mass, .. } => {
                let vol: f64 = lo.iter().zip(hi).map(|(l, h)| h - l).product();
                let solid = cap_area(d, *cap);
                mass / (vol * solid)
            }
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng, d: usize) -> ([f64; 3], [f64; 3]) {
        match self {
            SourceSpec::Point { x, theta, .. } => {
                let mut p = [0.0; 3];
                let mut t = [0.0; 3];
                p[..d].copy_from_slice(&x[..d]);
                t[..d].copy_from_slice(&theta[..d]);
                (p, t)
            }
            SourceSpec::BoxCap {
                lo, hi, theta, cap, ..
            } => {
                let mut p = [0.0; 3];
                for i in 0..d {
                    p[i] = rng.gen_range(lo[i]..hi[i]);
                }
                let mut axis = [0.0; 3];
                axis[..d].copy_from_slice(&theta[..d]);
                let mu = if d == 3 {
                    1.0 - rng.gen::<f64>() * (1.0 - cap.cos())
                } else {
                    (rng.gen::<f64>() * 2.0 - 1.0) * cap
                };
                let t = if d == 3 {
                    let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                    rotate_about(&axis, mu, phi)
                } else {
                    rotate2(&axis, mu)
                };
                (p, t)
            }
        }
    }
}

/// Area of the polar cap of half-angle `cap` on S^(d-1).
fn cap_area(d: usize, cap: f64) -> f64 {
    match d {
        2 => 2.0 * cap,
        3 => std::f64::consts::TAU * (1.0 - cap.cos()),
        _ => unreachable!("walker supports d = 2, 3"),
    }
}

/// Tally layout: tensor bins over a spatial box times a uniform grid in the
/// stereographic chart, plus a south-cap overflow cell per spatial bin.
#[derive(Debug, Clone)]
pub struct TallySpec {
    pub window: Window,
    /// Spatial bins per axis.
    pub nx: usize,
    /// Angular chart half-extent (bins cover |v_i| <= v_max).
    pub v_max: f64,
    /// Angular bins per chart axis.
    pub nv: usize,
}

/// Histogram result with per-batch partials for bootstrap errors.
pub struct McResult {
    pub d: usize,
    pub tally: TallySpec,
    /// Dense bin masses, layout: spatial bins (row-major) x angular bins
    /// (row-major, last index fastest), with one extra overflow angular cell.
    pub bins: Vec<f64>,
    /// Per-batch copies of `bins` (for bootstrap resampling).
    pub batch_bins: Vec<Vec<f64>>,
    /// Estimate of the absorbed mass int lambda u (all space).
    pub absorbed: f64,
    /// Standard error of `absorbed` over batches.
    pub absorbed_err: f64,
    /// Mass that crossed the roulette threshold and was killed.
    pub killed_mass: f64,
    pub n_particles: u64,
}

impl McResult {
    fn angular_cells(&self) -> usize {
        let n = self.d - 1;
        self.tally.nv.pow(n as u32) + 1
    }

    /// Bin-center atoms; the overflow cell maps to the south pole.
    pub fn to_measure(&self) -> PhaseSpaceMeasure {
        let d = self.d;
        let n = d - 1;
        let (lo, hi) = match &self.tally.window {
            Window::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => unreachable!(),
        };
        let nx = self.tally.nx;
        let nv = self.tally.nv;
        let n_ang = self.angular_cells();
        let mut out = PhaseSpaceMeasure::new(d);
        let mut south = vec![0.0; d];
        south[d - 1] = -1.0;
        for (flat, &mass) in self.bins.iter().enumerate() {
            if mass <= 0.0 {
                continue;
            }
            let ix = flat / n_ang;
            let ia = flat % n_ang;
            let mut x = vec![0.0; d];
            let mut rem = ix;
            for a in (0..d).rev() {
                let i = rem % nx;
                rem /= nx;
                x[a] = lo[a] + (i as f64 + 0.5) * (hi[a] - lo[a]) / nx as f64;
            }
            if ia + 1 == n_ang {
                out.push(&x, &south, mass);
                continue;
            }
            let mut v = vec![0.0; n];
            let mut rem = ia;
            let dv = 2.0 * self.tally.v_max / nv as f64;
            for a in (0..n).rev() {
                let i = rem % nv;
                rem /= nv;
                v[a] = -self.tally.v_max + (i as f64 + 0.5) * dv;
            }
            let theta = stereo_inverse(&StereoPoint::new(v));
            out.push(&x, theta.components(), mass);
        }
        out
    }

    /// Smoothed sup of the phase-space density (mass / bin phase volume),
    /// averaged over a cube of neighboring spatial bins, together with its
    /// batch standard error. Overflow cells are excluded.
    pub fn smoothed_density_sup(&self) -> (f64, f64) {
        let d = self.d;
        let n = d - 1;
        let (lo, hi) = match &self.tally.window {
            Window::Box { lo, hi } => (lo.clone(), hi.clone()),
            _ => unreachable!(),
        };
        let nx = self.tally.nx;
        let nv = self.tally.nv;
        let n_ang = nv.pow(n as u32) + 1;
        let n_sp = nx.pow(d as u32);
        let xvol: f64 = (0..d)
            .map(|a| (hi[a] - lo[a]) / nx as f64)
            .product();
        let dv = 2.0 * self.tally.v_max / nv as f64;
        // solid angle of each angular cell from the exact chart weight
        // (midpoint rule on a 3x3 subgrid)
        let mut omega = vec![0.0; nv.pow(n as u32)];
        let mut vcell = vec![0usize; n];
        for (cell, om) in omega.iter_mut().enumerate() {
            let mut rem = cell;
            for a in (0..n).rev() {
                vcell[a] = rem % nv;
                rem /= nv;
            }
            let mut acc = 0.0;
            let sub = 3usize;
            let mut subidx = vec![0usize; n];
            for s in 0..sub.pow(n as u32) {
                let mut rem = s;
                let mut v2 = 0.0;
                for a in (0..n).rev() {
                    subidx[a] = rem % sub;
                    rem /= sub;
                    let vv = -self.tally.v_max
                        + (vcell[a] as f64 + (subidx[a] as f64 + 0.5) / sub as f64) * dv;
                    v2 += vv * vv;
                }
                acc += 2f64.powi(n as i32) / (1.0 + v2).powi(n as i32)
                    * (dv / sub as f64).powi(n as i32);
            }
            *om = acc;
        }
        let smooth_radius = 1isize;
        let mut best = (0.0f64, 0.0f64);
        for ix in 0..n_sp {
            // neighbor spatial bins within the cube
            let mut centre = vec![0isize; d];
            let mut rem = ix;
            for a in (0..d).rev() {
                centre[a] = (rem % nx) as isize;
                rem /= nx;
            }
            for cell in 0..omega.len() {
                let mut mass = 0.0;
                let mut batch_masses = vec![0.0; self.batch_bins.len()];
                let mut vol = 0.0;
                let mut stack = vec![centre.clone()];
                let mut neigh = Vec::new();
                // enumerate the cube of spatial neighbors
                neigh.push(centre.clone());
                let _ = stack.pop();
                for a in 0..d {
                    let mut next = Vec::new();
                    for pos in &neigh {
                        for off in -smooth_radius..=smooth_radius {
                            let mut q = pos.clone();
                            q[a] = pos[a] + off;
                            if q[a] >= 0 && q[a] < nx as isize {
                                next.push(q);
                            }
                        }
                    }
                    neigh = next;
                    neigh.dedup();
                }
                for q in &neigh {
                    let mut flat_sp = 0usize;
                    for a in 0..d {
                        flat_sp = flat_sp * nx + q[a] as usize;
                    }
                    let flat = flat_sp * n_ang + cell;
                    mass += self.bins[flat];
                    for (bi, bb) in self.batch_bins.iter().enumerate() {
                        batch_masses[bi] += bb[flat];
                    }
                    vol += xvol * omega[cell];
                }
                if vol <= 0.0 {
                    continue;
                }
                let dens = mass / vol;
                let nb = self.batch_bins.len().max(1) as f64;
                let mean = batch_masses.iter().sum::<f64>() / nb;
                let var_batch = batch_masses
                    .iter()
                    .map(|m| (m - mean) * (m - mean))
                    .sum::<f64>()
                    / (nb - 1.0).max(1.0);
                let se = (nb * var_batch).sqrt() / vol; // se of the total
                if dens > best.0 {
                    best = (dens, se);
                }
            }
        }
        best
    }

    /// Chi-square p-value for uniformity of the angular marginal over
    /// equal-probability chart cells (weighted by exact solid angle).
    pub fn angular_uniformity_pvalue(&self) -> f64 {
        let d = self.d;
        let n = d - 1;
        let nv = self.tally.nv;
        let n_ang = nv.pow(n as u32) + 1;
        let dv = 2.0 * self.tally.v_max / nv as f64;
        let mut marg = vec![0.0; n_ang];
        for (flat, m) in self.bins.iter().enumerate() {
            marg[flat % n_ang] += m;
        }
        // expected proportional to solid angle (including the overflow cap)
        let mut omega = vec![0.0; n_ang];
        let mut vcell = vec![0usize; n];
        let mut chart_total = 0.0;
        for (cell, om) in omega.iter_mut().enumerate().take(n_ang - 1) {
            let mut rem = cell;
            let mut v2 = 0.0;
            for a in (0..n).rev() {
                vcell[a] = rem % nv;
                rem /= nv;
                let vv = -self.tally.v_max + (vcell[a] as f64 + 0.5) * dv;
                v2 += vv * vv;
            }
            *om = 2f64.powi(n as i32) / (1.0 + v2).powi(n as i32) * dv.powi(n as i32);
            chart_total += *om;
        }
        omega[n_ang - 1] = (crate::kernels::sphere_surface(d) - chart_total).max(1e-12);
        let total_mass: f64 = marg.iter().sum();
        let total_omega: f64 = omega.iter().sum();
        // chi-square with effective counts from batch scatter
        let nb = self.batch_bins.len().max(2) as f64;
        let mut chi2 = 0.0;
        let mut dof = 0.0f64;
        for cell in 0..n_ang {
            let expect = total_mass * omega[cell] / total_omega;
            if expect <= 0.0 {
                continue;
            }
            let mut bsum = 0.0;
            let mut bsq = 0.0;
            for bb in &self.batch_bins {
                let mut s = 0.0;
                for ix in 0..self.bins.len() / n_ang {
                    s += bb[ix * n_ang + cell];
                }
                bsum += s;
                bsq += s * s;
            }
            let mean = bsum / nb;
            let var_batch = ((bsq - nb * mean * mean) / (nb - 1.0)).max(1e-300);
            let var_total = nb * var_batch;
            chi2 += (marg[cell] - expect) * (marg[cell] - expect) / var_total;
            dof += 1.0;
        }
        let dof = (dof - 1.0).max(1.0);
        let dist = statrs::distribution::ChiSquared::new(dof).unwrap();
        1.0 - statrs::distribution::ContinuousCDF::cdf(&dist, chi2)
    }
}

/// Runs the walk. Deterministic for a fixed (seed, n_particles).
pub fn simulate(
    source: &SourceSpec,
    medium: &MediumProfile,
    params: &ScatteringParams,
    n_particles: u64,
    tally: &TallySpec,
    seed: u64,
    keep_batches: bool,
) -> Result<McResult, McError> {
    let d = params.d;
    if d != 2 && d != 3 {
        return Err(McError::BadDimension(d));
    }
    let (lo, hi) = match &tally.window {
        Window::Box { lo, hi } => (lo.clone(), hi.clone()),
        _ => return Err(McError::WindowNotBox),
    };
    // the angular factor of the rate is position independent; hoist it so the
    // per-event rate is just b(x) * shape / delta
    let shape_over_delta = crate::kernels::hg_rate_shape(params)? / params.delta;
    let rate_at = move |x: &[f64]| medium.b.eval(x) * shape_over_delta;
    // scattering-rate majorant over an enlarged domain box
    let mut rate_max: f64 = 0.0;
    for corner in 0..(1 << d) {
        let x: Vec<f64> = (0..d)
            .map(|a| {
                let pad = 2.0 * (hi[a] - lo[a]);
                if corner >> a & 1 == 1 {
                    hi[a] + pad
                } else {
                    lo[a] - pad
                }
            })
            .collect();
        rate_max = rate_max.max(rate_at(&x));
    }
    rate_max = rate_max.max(rate_at(&vec![0.0; d])) * 1.000001;
    if !(rate_max > 0.0) {
        // pure absorber: treat as a tiny scattering rate so flights terminate
        rate_max = 1e-12;
    }
    let sampler = CosineSampler::new(params.g, params.s, d)?;

    let n = d - 1;
    let n_ang = tally.nv.pow(n as u32) + 1;
    let n_bins = tally.nx.pow(d as u32) * n_ang;
    // enough batches for stable bootstrap statistics
    let batch_size = (n_particles / 64).clamp(1024, 16_384).min(n_particles.max(1));
    let n_batches = n_particles.div_ceil(batch_size);

    struct Partial {
        bins: Vec<f64>,
        absorbed: f64,
        killed: f64,
    }

    let partials: Vec<Partial> = (0..n_batches)
        .into_par_iter()
        .map(|batch| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(batch + 1);
            let in_batch = batch_size.min(n_particles - batch * batch_size);
            let w0 = source.mass() / n_particles as f64;
            let mut bins = vec![0.0f64; n_bins];
            let mut absorbed = 0.0;
            let mut killed = 0.0;
            let mut scratch = Vec::with_capacity(64);
            for _ in 0..in_batch {
                let (mut pos, mut dir) = source.sample(&mut rng, d);
                let mut weight = w0;
                for _event in 0..MAX_EVENTS {
                    let flight = -(1.0 - rng.gen::<f64>()).ln() / rate_max;
                    // track-length tally + attenuation along the segment
                    let w_end = tally_segment(
                        &mut bins, &lo, &hi, tally, d, &pos, &dir, flight, weight, medium,
                        &mut scratch,
                    );
                    absorbed += weight - w_end;
                    weight = w_end;
                    for a in 0..d {
                        pos[a] += flight * dir[a];
                    }
                    if weight < ROULETTE_THRESHOLD * w0 {
                        if rng.gen::<f64>() < 1.0 / ROULETTE_SURVIVAL {
                            weight *= ROULETTE_SURVIVAL;
                        } else {
                            killed += weight;
                            break;
                        }
                    }
                    // Woodcock acceptance: real scattering event?
                    let local = rate_at(&pos[..d]);
                    if rng.gen::<f64>() * rate_max < local {
                        let mu = sampler.sample(rng.gen::<f64>());
                        dir = if d == 3 {
                            let phi = rng.gen::<f64>() * std::f64::consts::TAU;
                            rotate_about(&dir, mu, phi)
                        } else {
                            let sgn = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                            rotate2(&dir, sgn * mu.acos())
                        };
                    }
                }
            }
            Partial {
                bins,
                absorbed,
                killed,
            }
        })
        .collect();

    // merge in batch order for determinism
    let mut bins = vec![0.0f64; n_bins];
    let mut batch_bins = Vec::new();
    let mut absorbed = 0.0;
    let mut killed = 0.0;
    let mut batch_absorbed = Vec::with_capacity(partials.len());
    for p in &partials {
        for (b, v) in bins.iter_mut().zip(&p.bins) {
            *b += v;
        }
        absorbed += p.absorbed;
        killed += p.killed;
        batch_absorbed.push(p.absorbed);
        if keep_batches {
            batch_bins.push(p.bins.clone());
        }
    }
    let nb = partials.len() as f64;
    let mean = absorbed / nb;
    // absorbed is a sum over batches: Var(total) = nb * Var(batch)
    let var_batch = batch_absorbed
        .iter()
        .map(|a| (a - mean) * (a - mean))
        .sum::<f64>()
        / (nb - 1.0).max(1.0);
    Ok(McResult {
        d,
        tally: tally.clone(),
        bins,
        batch_bins,
        absorbed,
        absorbed_err: (nb * var_batch).sqrt(),
        killed_mass: killed,
        n_particles,
    })
}

/// Tallies one flight segment into the histogram with exact per-cell
/// attenuation for constant absorption (2-point panel otherwise); returns
/// the attenuated weight at the segment end.
#[allow(clippy::too_many_arguments)]
fn tally_segment(
    bins: &mut [f64],
    lo: &[f64],
    hi: &[f64],
    tally: &TallySpec,
    d: usize,
    pos: &[f64; 3],
    dir: &[f64; 3],
    length: f64,
    weight: f64,
    medium: &MediumProfile,
    scratch: &mut Vec<f64>,
) -> f64 {
    let n = d - 1;
    let nv = tally.nv;
    let n_ang = nv.pow(n as u32) + 1;
    // angular cell fixed along the segment
    let denom = 1.0 + dir[d - 1];
    let acell = if denom <= 1e-12 {
        n_ang - 1
    } else {
        let dv = 2.0 * tally.v_max / nv as f64;
        let mut cell = 0usize;
        let mut inside = true;
        for a in 0..n {
            let v = dir[a] / denom;
            if v.abs() >= tally.v_max {
                inside = false;
                break;
            }
            let i = ((v + tally.v_max) / dv) as usize;
            cell = cell * nv + i.min(nv - 1);
        }
        if inside {
            cell
        } else {
            n_ang - 1
        }
    };

    // breakpoints where the ray crosses spatial bin planes or the box
    let ts = scratch;
    ts.clear();
    ts.push(0.0);
    ts.push(length);
    for a in 0..d {
        if dir[a].abs() < 1e-14 {
            continue;
        }
        let step = (hi[a] - lo[a]) / tally.nx as f64;
        for i in 0..=tally.nx {
            let plane = lo[a] + i as f64 * step;
            let t = (plane - pos[a]) / dir[a];
            if t > 0.0 && t < length {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    ts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let line_lambda = |t: f64| {
        let mut x = [0.0f64; 3];
        for a in 0..d {
            x[a] = pos[a] + t * dir[a];
        }
        medium.lambda.eval(&x[..d])
    };
    let mut w = weight;
    let mut att_total = 0.0;
    for k in 0..ts.len() - 1 {
        let (ta, tb) = (ts[k], ts[k + 1]);
        if tb <= ta {
            continue;
        }
        // attenuation integral over the sub-segment (2-point panel exact for
        // linear lambda along the ray)
        let h = tb - ta;
        let la = line_lambda(ta + h * 0.2113248654051871);
        let lb = line_lambda(ta + h * 0.7886751345948129);
        let a_seg = 0.5 * h * (la + lb);
        // cell of the midpoint
        let tm = 0.5 * (ta + tb);
        let mut flat_sp = 0usize;
        let mut inside = true;
        for a in 0..d {
            let x = pos[a] + tm * dir[a];
            if x < lo[a] || x >= hi[a] {
                inside = false;
                break;
            }
            let i = ((x - lo[a]) / (hi[a] - lo[a]) * tally.nx as f64) as usize;
            flat_sp = flat_sp * tally.nx + i.min(tally.nx - 1);
        }
        if inside {
            // int_ta^tb w(t) dt with w(t) = w exp(-int lambda)
            let lbar = a_seg / h;
            let track = if lbar * h > 1e-8 {
                w * -((-a_seg).exp_m1()) / lbar
            } else {
                w * h * (1.0 - 0.5 * a_seg)
            };
            bins[flat_sp * n_ang + acell] += track;
        }
        w *= (-a_seg).exp();
        att_total += a_seg;
        let _ = att_total;
    }
    w
}

/// Rotates `dir` (unit, 3-D) to a new direction with polar cosine `mu` and
/// azimuth `phi` about it.
fn rotate_about(dir: &[f64; 3], mu: f64, phi: f64) -> [f64; 3] {
    let sin_t = (1.0 - mu * mu).max(0.0).sqrt();
    // orthonormal basis around dir: e1 = dir x (least-aligned axis), e2 = dir x e1
    let helper = if dir[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let mut e1 = cross(dir, &helper);
    let n1 = (e1[0] * e1[0] + e1[1] * e1[1] + e1[2] * e1[2]).sqrt();
    for c in &mut e1 {
        *c /= n1;
    }
    let e2 = cross(dir, &e1);
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = mu * dir[a] + sin_t * (phi.cos() * e1[a] + phi.sin() * e2[a]);
    }
    let norm = (out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).sqrt();
    [out[0] / norm, out[1] / norm, out[2] / norm]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// 2-D rotation by `angle`.
fn rotate2(dir: &[f64; 3], angle: f64) -> [f64; 3] {
    let (s, c) = angle.sin_cos();
    [c * dir[0] - s * dir[1], s * dir[0] + c * dir[1], 0.0]
}

/// One ladder entry: the anisotropy with its narrow-beam mean free path.
pub struct LadderPoint {
    pub g: f64,
    pub params: ScatteringParams,
    pub result: McResult,
}

/// Runs the walk for each anisotropy in `gs`, pairing each g with its
/// narrow-beam mean free path at fixed (s, m, eps); identical tally windows,
/// per-g seed streams split from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn g_ladder_study(
    source: &SourceSpec,
    medium: &MediumProfile,
    s: f64,
    m: f64,
    eps: f64,
    gs: &[f64],
    d: usize,
    n_particles: u64,
    tally: &TallySpec,
    seed: u64,
) -> Result<Vec<LadderPoint>, McError> {
    let mut out = Vec::new();
    for (k, &g) in gs.iter().enumerate() {
        let params = ScatteringParams::narrow_beam_from_eps(g, s, m, eps, d)?;
        let result = simulate(
            source,
            medium,
            &params,
            n_particles,
            tally,
            seed.wrapping_add((k as u64 + 1) << 32),
            true,
        )?;
        out.push(LadderPoint { g, params, result });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ballistic;
    use crate::geom::UnitVector;

    fn basic_medium(lambda: f64, b: f64, d: usize, s: f64, m: f64) -> MediumProfile {
        MediumProfile {
            lambda: ScalarField::constant(lambda),
            sigma: crate::kernels::sigma_field_from_b(&ScalarField::constant(b), d, s, m),
            b: ScalarField::constant(b),
            lambda0: lambda,
            sigma0: 0.1,
        }
    }

    fn beam_tally() -> TallySpec {
        TallySpec {
            window: Window::Box {
                lo: vec![-2.0, -2.0, -0.5],
                hi: vec![2.0, 2.0, 3.5],
            },
            nx: 8,
            v_max: 3.0,
            nv: 8,
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let source = SourceSpec::Point {
            x: vec![0.0; 3],
            theta: vec![0.0, 0.0, 1.0],
            mass: 1.0,
        };
        let medium = basic_medium(1.0, 0.5, 3, 0.5, 1.0);
        let params = ScatteringParams::narrow_beam_from_delta(0.9, 0.5, 1.0, 0.2, 3).unwrap();
        let t = beam_tally();
        let a = simulate(&source, &medium, &params, 5_000, &t, 42, false).unwrap();
        let b = simulate(&source, &medium, &params, 5_000, &t, 42, false).unwrap();
        assert_eq!(a.bins.len(), b.bins.len());
        for (x, y) in a.bins.iter().zip(&b.bins) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.absorbed.to_bits(), b.absorbed.to_bits());
    }

    #[test]
    fn mass_balance_absorbed_equals_source() {
        let source = SourceSpec::Point {
            x: vec![0.0; 3],
            theta: vec![0.0, 0.0, 1.0],
            mass: 1.0,
        };
        let medium = basic_medium(1.0, 1.0, 3, 0.5, 1.0);
        let params = ScatteringParams::narrow_beam_from_delta(0.9, 0.5, 1.0, 0.5, 3).unwrap();
        let r = simulate(&source, &medium, &params, 100_000, &beam_tally(), 7, false).unwrap();
        // absorbed + rouletted = 1 exactly per walk; absorbed alone within 3 se
        assert!(
            (r.absorbed - 1.0).abs() < 3.0 * r.absorbed_err + r.killed_mass + 1e-9,
            "absorbed {} err {} killed {}",
            r.absorbed,
            r.absorbed_err,
            r.killed_mass
        );
    }

    #[test]
    fn zero_scattering_matches_ballistic_pairing() {
        let lam0 = 1.0;
        let source = SourceSpec::Point {
            x: vec![0.0; 3],
            theta: vec![0.0, 0.0, 1.0],
            mass: 1.0,
        };
        let mut medium = basic_medium(lam0, 0.0, 3, 0.5, 1.0);
        medium.b = ScalarField::constant(0.0);
        let params = ScatteringParams {
            g: 0.5,
            s: 0.5,
            m: 1.0,
            delta: 1.0,
            eps: 1.0,
            d: 3,
        };
        let tally = TallySpec {
            window: Window::Box {
                lo: vec![-1.0, -1.0, -0.5],
                hi: vec![1.0, 1.0, 6.0],
            },
            nx: 16,
            v_max: 2.0,
            nv: 6,
        };
        let r = simulate(&source, &medium, &params, 200_000, &tally, 3, true).unwrap();
        let m = r.to_measure();
        // psi smooth in depth; non-scattered walk lies on the axis so spatial
        // binning is exact in x', and psi depends on x^d only
        let psi = |x: &[f64], _: &[f64]| (-0.5 * (x[2] - 1.5).powi(2)).exp();
        let got = m.pair(psi);
        let expect = ballistic::ballistic_point_pairing(
            |x, _| {
                if x[2] < 6.0 {
                    (-0.5 * (x[2] - 1.5) * (x[2] - 1.5)).exp()
                } else {
                    0.0
                }
            },
            &ScalarField::constant(lam0),
            lam0,
            &[0.0; 3],
            &UnitVector::north(3),
        );
        // binning bias in depth ~ (dz/2)^2 * psi''; allow 3 MC errors + 1%
        let se = r.absorbed_err.max(1e-4);
        assert!(
            (got - expect).abs() < 3.0 * se + 0.01 * expect,
            "pairing {got} vs ballistic {expect}"
        );
    }

    #[test]
    fn sup_norm_bounded_by_source() {
        // bounded source: density sup <= ||f||_inf / lambda0
        let lam0 = 1.0;
        let source = SourceSpec::BoxCap {
            lo: vec![-0.5, -0.5, -0.5],
            hi: vec![0.5, 0.5, 0.5],
            theta: vec![0.0, 0.0, 1.0],
            cap: 0.6,
            mass: 1.0,
        };
        let medium = basic_medium(lam0, 0.8, 3, 0.5, 1.0);
        let params = ScatteringParams::narrow_beam_from_delta(0.8, 0.5, 1.0, 0.5, 3).unwrap();
        let tally = TallySpec {
            window: Window::Box {
                lo: vec![-1.5, -1.5, -1.0],
                hi: vec![1.5, 1.5, 2.0],
            },
            nx: 6,
            v_max: 2.5,
            nv: 6,
        };
        let r = simulate(&source, &medium, &params, 150_000, &tally, 11, true).unwrap();
        let (sup, se) = r.smoothed_density_sup();
        let bound = source.sup_norm(3) / lam0;
        assert!(
            sup <= bound * 1.0 + 3.0 * se + 0.05 * bound,
            "sup {sup} vs bound {bound} (se {se})"
        );
    }

    #[test]
    fn isotropic_scattering_relaxes_angular_marginal() {
        // g = 0, weak absorption: with the tally window several mean free
        // paths away from the source only collided (hence isotropic) flux is
        // seen and the angular marginal is uniform on the sphere
        let source = SourceSpec::Point {
            x: vec![0.0, 0.0, -6.0],
            theta: vec![0.0, 0.0, 1.0],
            mass: 1.0,
        };
        let mut medium = basic_medium(0.3, 1.0, 3, 0.5, 1.0);
        medium.lambda0 = 0.3;
        let params = ScatteringParams {
            g: 0.0,
            s: 0.5,
            m: 1.0,
            delta: 0.5,
            eps: 1.0,
            d: 3,
        };
        let tally = TallySpec {
            window: Window::Box {
                lo: vec![-4.0; 3],
                hi: vec![4.0; 3],
            },
            nx: 4,
            v_max: 2.0,
            nv: 4,
        };
        let r = simulate(&source, &medium, &params, 40_000, &tally, 5, true).unwrap();
        let p = r.angular_uniformity_pvalue();
        assert!(p > 0.001, "anisotropy detected: p = {p}");
    }

    #[test]
    fn error_scaling_with_particle_count() {
        let source = SourceSpec::Point {
            x: vec![0.0; 3],
            theta: vec![0.0, 0.0, 1.0],
            mass: 1.0,
        };
        let medium = basic_medium(1.0, 0.6, 3, 0.5, 1.0);
        let params = ScatteringParams::narrow_beam_from_delta(0.9, 0.5, 1.0, 0.5, 3).unwrap();
        let t = beam_tally();
        let a = simulate(&source, &medium, &params, 65_536, &t, 1, false).unwrap();
        let b = simulate(&source, &medium, &params, 131_072, &t, 1, false).unwrap();
        let ratio = a.absorbed_err / b.absorbed_err;
        assert!(
            (ratio - std::f64::consts::SQRT_2).abs() < 0.2 * std::f64::consts::SQRT_2,
            "error ratio {ratio}"
        );
    }
}

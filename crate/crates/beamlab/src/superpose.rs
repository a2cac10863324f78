//! Broad-source approximation by superposition of frame-mapped pencil beams:
//! continuous quadrature superposition over a source density and discrete
//! superposition over weighted atoms, plus the simple-function source
//! splitter that feeds the discrete construction.

use crate::beam::{trapezoid_weights, AxisProfiles, BeamError, BeamField, BeamGrid, BeamSolver};
use crate::geom::{stereo_inverse, FrameMap, StereoPoint, UnitVector};
use crate::measure::PhaseSpaceMeasure;
use crate::medium::MediumProfile;
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SuperposeError {
    #[error("cell budget exceeded: {required} cells needed, cap {cap}")]
    BudgetInfeasible { required: usize, cap: usize },
    #[error(transparent)]
    Beam(#[from] BeamError),
}

/// One pencil beam of a superposition: weight, center, and its frame.
pub struct BeamAtom {
    pub weight: f64,
    pub x: Vec<f64>,
    pub theta: UnitVector,
}

/// Discretization parameters shared by every beam of an engine.
#[derive(Debug, Clone)]
pub struct BeamResolution {
    pub t_min: f64,
    pub t_max: f64,
    pub n_slices: usize,
    pub nx: usize,
    pub nv: usize,
}

impl BeamResolution {
    pub fn depths(&self) -> Vec<f64> {
        (0..self.n_slices)
            .map(|k| {
                self.t_min
                    + (self.t_max - self.t_min) * k as f64 / (self.n_slices - 1).max(1) as f64
            })
            .collect()
    }
}

struct EngineBeam {
    atom: BeamAtom,
    frame: FrameMap,
    field: Arc<BeamField>,
    depth_weights: Vec<f64>,
}

/// A pairing engine for a weighted superposition of pencil beams mapped into
/// physical phase space.
pub struct SuperpositionEngine {
    pub d: usize,
    pub eps: f64,
    beams: Vec<EngineBeam>,
}

impl SuperpositionEngine {
    /// Number of beams in the superposition.
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    /// < engine, psi > streamed over every beam's grid.
    pub fn pair<F>(&self, psi: F) -> f64
    where
        F: Fn(&[f64], &[f64]) -> f64 + Sync,
    {
        self.beams
            .par_iter()
            .map(|b| b.atom.weight * beam_pair(b, self.eps, &psi))
            .sum()
    }

    /// Total mass of the engine measure.
    pub fn mass(&self) -> f64 {
        self.pair(|_, _| 1.0)
    }

    /// Per-beam unit pairing (mass of a single unit-weight beam).
    pub fn single_beam_masses(&self) -> Vec<f64> {
        self.beams
            .iter()
            .map(|b| beam_pair(b, self.eps, &|_: &[f64], _: &[f64]| 1.0))
            .collect()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.beams.iter().map(|b| b.atom.weight).collect()
    }
}

fn beam_pair<F>(beam: &EngineBeam, eps: f64, psi: &F) -> f64
where
    F: Fn(&[f64], &[f64]) -> f64,
{
    let field = &beam.field;
    let d = field.d;
    let n = d - 1;
    let vol = field.grid.grid.cell_volume();
    let mut coords = vec![0.0f64; 2 * n];
    let mut bx = vec![0.0f64; d];
    let mut acc = 0.0;
    for (slice, wt) in field.slices.iter().zip(&beam.depth_weights) {
        for (flat, u) in slice.values.iter().enumerate() {
            if *u == 0.0 {
                continue;
            }
            field.grid.grid.coords_of(flat, &mut coords);
            let (xp, v) = coords.split_at(n);
            let ev2: f64 = 1.0 + v.iter().map(|c| eps * eps * c * c).sum::<f64>();
            bx[..n].copy_from_slice(xp);
            bx[n] = slice.t;
            let (x, theta) = beam.frame.invert(&bx, v);
            acc += u * wt * vol * ev2.powi(-(d as i32 - 1)) * psi(&x, theta.components());
        }
    }
    acc
}

/// Builds the engine for explicit beam atoms (discrete superposition).
pub fn discrete_superposition(
    atoms: Vec<BeamAtom>,
    eps: f64,
    medium: &MediumProfile,
    s: f64,
    res: &BeamResolution,
) -> Result<SuperpositionEngine, SuperposeError> {
    let d = atoms.first().map(|a| a.x.len()).unwrap_or(3);
    let depths = res.depths();
    let weights = trapezoid_weights(&depths);
    // constant media share one field across beams
    let shared: Option<Arc<BeamField>> = if medium.sigma.lipschitz() == 0.0
        && medium.lambda.lipschitz() == 0.0
    {
        let profiles = AxisProfiles {
            sigma: medium.sigma.along_ray(&vec![0.0; d], &UnitVector::north(d)),
            lambda: medium.lambda.along_ray(&vec![0.0; d], &UnitVector::north(d)),
        };
        let solver = BeamSolver::new(d, s, profiles);
        let grid = BeamGrid::auto(d, s, medium.sigma0, res.t_min, res.nx, res.nv);
        Some(Arc::new(solver.fundamental_field(&grid, &depths, 0.0)?))
    } else {
        None
    };
    let beams = atoms
        .into_iter()
        .map(|atom| {
            let frame = FrameMap::new(atom.x.clone(), atom.theta.clone(), eps);
            let field = match &shared {
                Some(f) => f.clone(),
                None => {
                    let profiles = AxisProfiles {
                        sigma: medium.sigma.along_ray(&atom.x, &atom.theta),
                        lambda: medium.lambda.along_ray(&atom.x, &atom.theta),
                    };
                    let solver = BeamSolver::new(d, s, profiles);
                    let grid = BeamGrid::auto(d, s, medium.sigma0, res.t_min, res.nx, res.nv);
                    Arc::new(solver.fundamental_field(&grid, &depths, 0.0)?)
                }
            };
            Ok(EngineBeam {
                atom,
                frame,
                field,
                depth_weights: weights.clone(),
            })
        })
        .collect::<Result<Vec<_>, SuperposeError>>()?;
    Ok(SuperpositionEngine { d, eps, beams })
}

/// Quadrature nodes for a continuous superposition: tensor trapezoid over the
/// spatial box times equal-area sphere points, keeping nodes where f > 0.
#[allow(clippy::too_many_arguments)]
pub fn continuous_superposition<F>(
    f: F,
    lo: &[f64],
    hi: &[f64],
    nodes_per_axis: usize,
    sphere_nodes: usize,
    eps: f64,
    medium: &MediumProfile,
    s: f64,
    res: &BeamResolution,
) -> Result<SuperpositionEngine, SuperposeError>
where
    F: Fn(&[f64], &UnitVector) -> f64,
{
    let d = lo.len();
    let dirs = equal_area_directions(d, sphere_nodes);
    let dir_weight = crate::kernels::sphere_surface(d) / dirs.len() as f64;
    let mut grids: Vec<Vec<f64>> = Vec::new();
    let mut wgrids: Vec<Vec<f64>> = Vec::new();
    for a in 0..d {
        let n = nodes_per_axis.max(2);
        let h = (hi[a] - lo[a]) / (n - 1) as f64;
        grids.push((0..n).map(|i| lo[a] + i as f64 * h).collect());
        wgrids.push(
            (0..n)
                .map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h })
                .collect(),
        );
    }
    let mut atoms = Vec::new();
    let counts: Vec<usize> = grids.iter().map(|g| g.len()).collect();
    let total: usize = counts.iter().product();
    for flat in 0..total {
        let mut rem = flat;
        let mut x = vec![0.0; d];
        let mut w = 1.0;
        for a in (0..d).rev() {
            let i = rem % counts[a];
            rem /= counts[a];
            x[a] = grids[a][i];
            w *= wgrids[a][i];
        }
        for dir in &dirs {
            let fv = f(&x, dir);
            if fv > 0.0 {
                atoms.push(BeamAtom {
                    weight: fv * w * dir_weight,
                    x: x.clone(),
                    theta: dir.clone(),
                });
            }
        }
    }
    discrete_superposition(atoms, eps, medium, s, res)
}

/// Equal-area direction set: golden-spiral lattice on S^2, uniform angles on
/// S^1.
pub fn equal_area_directions(d: usize, n: usize) -> Vec<UnitVector> {
    match d {
        2 => (0..n)
            .map(|k| {
                let phi = std::f64::consts::TAU * (k as f64 + 0.5) / n as f64;
                UnitVector::new(vec![phi.sin(), phi.cos()]).unwrap()
            })
            .collect(),
        3 => {
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|k| {
                    let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
                    let r = (1.0 - z * z).max(0.0).sqrt();
                    let phi = golden * k as f64;
                    UnitVector::normalized(vec![r * phi.cos(), r * phi.sin(), z]).unwrap()
                })
                .collect()
        }
        _ => panic!("equal-area directions implemented for d = 2, 3"),
    }
}

/// Solid angle of an axis-aligned cell of the stereographic chart, by
/// midpoint subsampling of the exact chart weight.
pub fn chart_cell_solid_angle(lo: &[f64], hi: &[f64], d: usize) -> f64 {
    let n = d - 1;
    let sub = 4usize;
    let mut acc = 0.0;
    let total = sub.pow(n as u32);
    for flat in 0..total {
        let mut rem = flat;
        let mut v2 = 0.0;
        let mut cell = 1.0;
        for a in (0..n).rev() {
            let i = rem % sub;
            rem /= sub;
            let h = (hi[a] - lo[a]) / sub as f64;
            let v = lo[a] + (i as f64 + 0.5) * h;
            v2 += v * v;
            cell *= h;
        }
        acc += 2f64.powi(n as i32) / (1.0 + v2).powi(n as i32) * cell;
    }
    acc
}

/// A simple-function source split: phase-space cells of diameter <= eps^2
/// with averaged amplitudes, and the matching delta atoms.
pub struct SimpleApprox {
    /// (amplitude a_i, cell measure, atom) per cell; atom weight = a_i * meas.
    pub atoms: Vec<BeamAtom>,
    pub cell_count: usize,
    /// Estimated L1 error int |f - g|.
    pub l1_error: f64,
    /// Constant C with W(f, f~) <= C eps^2 kappa from the construction.
    pub bound_constant: f64,
    pub eps: f64,
    pub kappa: f64,
}

impl SimpleApprox {
    /// The atoms as a phase-space measure.
    pub fn measure(&self, d: usize) -> PhaseSpaceMeasure {
        let mut m = PhaseSpaceMeasure::new(d);
        for a in &self.atoms {
            m.push(&a.x, a.theta.components(), a.weight);
        }
        m
    }
}

/// Splits a nonnegative compactly supported density into a simple function
/// on cells of diameter <= scale * eps^2 (scale = 1 by default) and returns
/// the delta atoms at cell centers. The spatial support is the box
/// [lo, hi], the angular support the chart square |v_i| <= v_cap.
#[allow(clippy::too_many_arguments)]
pub fn simple_approx<F>(
    f: F,
    lo: &[f64],
    hi: &[f64],
    v_cap: f64,
    eps: f64,
    kappa: f64,
    scale: f64,
    cell_cap: usize,
) -> Result<SimpleApprox, SuperposeError>
where
    F: Fn(&[f64], &UnitVector) -> f64,
{
    let d = lo.len();
    let n = d - 1;
    let diam = scale * eps * eps;
    // split the l1 ground diameter: half spatial, half angular; the chart
    // map is 2-Lipschitz onto chords and small cells are near-flat
    let a_x = diam / (2.0 * (d as f64).sqrt());
    let a_v = diam / (4.2 * (n as f64).sqrt());
    let counts_x: Vec<usize> = (0..d)
        .map(|a| ((hi[a] - lo[a]) / a_x).ceil() as usize)
        .collect();
    let count_v = (2.0 * v_cap / a_v).ceil() as usize;
    let required: usize = counts_x.iter().product::<usize>() * count_v.pow(n as u32);
    if required > cell_cap {
        return Err(SuperposeError::BudgetInfeasible {
            required,
            cap: cell_cap,
        });
    }
    let mut atoms = Vec::new();
    let mut l1 = 0.0;
    let mut sum_atoms = 0.0;
    let total_x: usize = counts_x.iter().product();
    let total_v: usize = count_v.pow(n as u32);
    for fx in 0..total_x {
        let mut rem = fx;
        let mut xlo = vec![0.0; d];
        for a in (0..d).rev() {
            let i = rem % counts_x[a];
            rem /= counts_x[a];
            xlo[a] = lo[a] + i as f64 * (hi[a] - lo[a]) / counts_x[a] as f64;
        }
        let xside: Vec<f64> = (0..d)
            .map(|a| (hi[a] - lo[a]) / counts_x[a] as f64)
            .collect();
        let xc: Vec<f64> = (0..d).map(|a| xlo[a] + 0.5 * xside[a]).collect();
        for fv in 0..total_v {
            let mut rem = fv;
            let mut vlo = vec![0.0; n];
            for a in (0..n).rev() {
                let i = rem % count_v;
                rem /= count_v;
                vlo[a] = -v_cap + i as f64 * 2.0 * v_cap / count_v as f64;
            }
            let vside = 2.0 * v_cap / count_v as f64;
            let vc: Vec<f64> = (0..n).map(|a| vlo[a] + 0.5 * vside).collect();
            let vhi: Vec<f64> = (0..n).map(|a| vlo[a] + vside).collect();
            let theta_c = stereo_inverse(&StereoPoint::new(vc.clone()));
            // cell average and L1 defect by 3^dim subsampling
            let mut avg = 0.0;
            let sub = 3usize;
            let n_sub = sub.pow((d + n) as u32);
            let mut samples = Vec::with_capacity(n_sub);
            for sflat in 0..n_sub {
                let mut rem = sflat;
                let mut xs = vec![0.0; d];
                for a in (0..d).rev() {
                    let i = rem % sub;
                    rem /= sub;
                    xs[a] = xlo[a] + (i as f64 + 0.5) / sub as f64 * xside[a];
                }
                let mut vs = vec![0.0; n];
                for a in (0..n).rev() {
                    let i = rem % sub;
                    rem /= sub;
                    vs[a] = vlo[a] + (i as f64 + 0.5) / sub as f64 * vside;
                }
                let theta = stereo_inverse(&StereoPoint::new(vs));
                let val = f(&xs, &theta);
                avg += val;
                samples.push(val);
            }
            avg /= n_sub as f64;
            if avg <= 0.0 {
                continue;
            }
            let meas = xside.iter().product::<f64>() * chart_cell_solid_angle(&vlo, &vhi, d);
            l1 += samples.iter().map(|v| (v - avg).abs()).sum::<f64>() / n_sub as f64 * meas;
            sum_atoms += avg * meas;
            atoms.push(BeamAtom {
                weight: avg * meas,
                x: xc.clone(),
                theta: theta_c.clone(),
            });
        }
    }
    // W(f, f~) <= ||psi||_inf * l1 + sum a_i meas(R_i) |R_i| kappa
    let bound_constant = l1 / (eps * eps * kappa) + sum_atoms * diam / (eps * eps);
    Ok(SimpleApprox {
        atoms,
        cell_count: required,
        l1_error: l1,
        bound_constant,
        eps,
        kappa,
    })
}

/// Histogram of a phase-space density on the same box-times-chart layout at
/// an arbitrary resolution (for comparing against the simple atoms).
pub fn phase_histogram<F>(
    f: F,
    lo: &[f64],
    hi: &[f64],
    v_cap: f64,
    nx: usize,
    nv: usize,
) -> PhaseSpaceMeasure
where
    F: Fn(&[f64], &UnitVector) -> f64,
{
    let d = lo.len();
    let n = d - 1;
    let mut out = PhaseSpaceMeasure::new(d);
    let total_x = nx.pow(d as u32);
    let total_v = nv.pow(n as u32);
    for fx in 0..total_x {
        let mut rem = fx;
        let mut xc = vec![0.0; d];
        let mut xvol = 1.0;
        for a in (0..d).rev() {
            let i = rem % nx;
            rem /= nx;
            let h = (hi[a] - lo[a]) / nx as f64;
            xc[a] = lo[a] + (i as f64 + 0.5) * h;
            xvol *= h;
        }
        for fv in 0..total_v {
            let mut rem = fv;
            let mut vlo = vec![0.0; n];
            let mut vc = vec![0.0; n];
            for a in (0..n).rev() {
                let i = rem % nv;
                rem /= nv;
                let h = 2.0 * v_cap / nv as f64;
                vlo[a] = -v_cap + i as f64 * h;
                vc[a] = vlo[a] + 0.5 * h;
            }
            let vhi: Vec<f64> = (0..n).map(|a| vlo[a] + 2.0 * v_cap / nv as f64).collect();
            let theta = stereo_inverse(&StereoPoint::new(vc));
            let val = f(&xc, &theta);
            if val > 0.0 {
                let meas = xvol * chart_cell_solid_angle(&vlo, &vhi, d);
                out.push(&xc, theta.components(), val * meas);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::medium::ScalarField;
    use crate::w1::{w1_kappa, MetricSpec};

    fn const_medium(sigma: f64, lambda: f64) -> MediumProfile {
        MediumProfile {
            lambda: ScalarField::constant(lambda),
            sigma: ScalarField::constant(sigma),
            b: ScalarField::constant(sigma),
            lambda0: lambda,
            sigma0: sigma,
        }
    }

    fn small_res() -> BeamResolution {
        BeamResolution {
            t_min: 0.5,
            t_max: 2.0,
            n_slices: 4,
            nx: 12,
            nv: 12,
        }
    }

    #[test]
    fn single_atom_engine_masses() {
        let medium = const_medium(1.0, 0.5);
        let atoms = vec![BeamAtom {
            weight: 1.0,
            x: vec![0.0; 3],
            theta: UnitVector::north(3),
        }];
        let engine = discrete_superposition(atoms, 0.2, &medium, 0.75, &small_res()).unwrap();
        let mass = engine.mass();
        // depth-integrated attenuated mass, reduced by the <eps V> weight
        let upper: f64 = {
            let depths = small_res().depths();
            let w = trapezoid_weights(&depths);
            depths
                .iter()
                .zip(&w)
                .map(|(t, wt)| wt * (-0.5 * t).exp())
                .sum()
        };
        assert!(mass > 0.8 * upper && mass <= upper * 1.0001, "mass {mass} vs {upper}");
        // weights scale pairings linearly
        let atoms2 = vec![BeamAtom {
            weight: 2.5,
            x: vec![0.0; 3],
            theta: UnitVector::north(3),
        }];
        let engine2 = discrete_superposition(atoms2, 0.2, &medium, 0.75, &small_res()).unwrap();
        assert!((engine2.mass() - 2.5 * mass).abs() < 1e-12 * mass);
    }

    #[test]
    fn mass_additivity_over_beams() {
        let medium = const_medium(1.0, 0.4);
        let atoms = vec![
            BeamAtom {
                weight: 0.7,
                x: vec![0.1, 0.0, 0.0],
                theta: UnitVector::north(3),
            },
            BeamAtom {
                weight: 0.3,
                x: vec![-0.2, 0.1, 0.0],
                theta: UnitVector::normalized(vec![0.2, 0.0, 1.0]).unwrap(),
            },
        ];
        let engine = discrete_superposition(atoms, 0.15, &medium, 0.6, &small_res()).unwrap();
        let singles = engine.single_beam_masses();
        let weights = engine.weights();
        let total: f64 = singles.iter().zip(&weights).map(|(m, w)| m * w).sum();
        assert!((engine.mass() - total).abs() < 1e-10 * total);
    }

    #[test]
    fn continuous_matches_discrete_on_same_nodes() {
        let medium = const_medium(1.0, 0.5);
        let res = small_res();
        let eps = 0.2;
        let s = 0.7;
        let f = |x: &[f64], th: &UnitVector| {
            let r2: f64 = x.iter().map(|c| c * c).sum();
            if th.components()[2] > 0.9 {
                (1.0 - r2).max(0.0)
            } else {
                0.0
            }
        };
        let cont =
            continuous_superposition(f, &[-0.5; 3], &[0.5; 3], 3, 24, eps, &medium, s, &res)
                .unwrap();
        // rebuild atoms identically
        let dirs = equal_area_directions(3, 24);
        let dw = crate::kernels::sphere_surface(3) / 24.0;
        let mut atoms = Vec::new();
        let h = 0.5;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let x = [-0.5 + h * i as f64, -0.5 + h * j as f64, -0.5 + h * k as f64];
                    let mut w = 1.0;
                    for idx in [i, j, k] {
                        w *= if idx == 0 || idx == 2 { 0.5 * h } else { h };
                    }
                    for dir in &dirs {
                        let fv = f(&x, dir);
                        if fv > 0.0 {
                            atoms.push(BeamAtom {
                                weight: fv * w * dw,
                                x: x.to_vec(),
                                theta: dir.clone(),
                            });
                        }
                    }
                }
            }
        }
        let disc = discrete_superposition(atoms, eps, &medium, s, &res).unwrap();
        let psi = |x: &[f64], th: &[f64]| (x[2] + th[2]).cos();
        let a = cont.pair(psi);
        let b = disc.pair(psi);
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        let am = cont.mass();
        let bm = disc.mass();
        assert!((am - bm).abs() <= 1e-12 * am.abs());
    }

    #[test]
    fn positivity_of_pairings() {
        let medium = const_medium(1.0, 0.5);
        let atoms = vec![BeamAtom {
            weight: 1.0,
            x: vec![0.0; 3],
            theta: UnitVector::north(3),
        }];
        let engine = discrete_superposition(atoms, 0.2, &medium, 0.6, &small_res()).unwrap();
        let p = engine.pair(|x, _| (-(x[0] * x[0] + x[1] * x[1])).exp());
        assert!(p > -1e-10 * engine.mass());
    }

    #[test]
    fn frame_covariance_under_rotation() {
        // rotating (source atoms, psi) jointly leaves pairings invariant for
        // a rotation-invariant medium
        let medium = const_medium(1.0, 0.5);
        let res = small_res();
        let eps = 0.15;
        let s = 0.7;
        let theta0 = UnitVector::normalized(vec![0.3, 0.1, 0.95]).unwrap();
        let x0 = vec![0.2, -0.1, 0.05];
        let engine = discrete_superposition(
            vec![BeamAtom {
                weight: 1.0,
                x: x0.clone(),
                theta: theta0.clone(),
            }],
            eps,
            &medium,
            s,
            &res,
        )
        .unwrap();
        // rotation about z by 40 degrees
        let ang = 40f64.to_radians();
        let rot = move |p: &[f64]| {
            vec![
                ang.cos() * p[0] - ang.sin() * p[1],
                ang.sin() * p[0] + ang.cos() * p[1],
                p[2],
            ]
        };
        let engine_rot = discrete_superposition(
            vec![BeamAtom {
                weight: 1.0,
                x: rot(&x0),
                theta: UnitVector::normalized(rot(theta0.components())).unwrap(),
            }],
            eps,
            &medium,
            s,
            &res,
        )
        .unwrap();
        let psi = |x: &[f64], th: &[f64]| ((x[0] + 0.3 * x[2]).sin() + th[2]).cos();
        let inv_ang = -ang;
        let psi_rot = move |x: &[f64], th: &[f64]| {
            let xr = [
                inv_ang.cos() * x[0] - inv_ang.sin() * x[1],
                inv_ang.sin() * x[0] + inv_ang.cos() * x[1],
                x[2],
            ];
            let tr = [
                inv_ang.cos() * th[0] - inv_ang.sin() * th[1],
                inv_ang.sin() * th[0] + inv_ang.cos() * th[1],
                th[2],
            ];
            ((xr[0] + 0.3 * xr[2]).sin() + tr[2]).cos()
        };
        let a = engine.pair(psi);
        let b = engine_rot.pair(psi_rot);
        assert!(
            (a - b).abs() < 1e-8 * a.abs().max(0.1),
            "rotation broke pairing: {a} vs {b}"
        );
    }

    #[test]
    fn quadrature_refinement_ratio_near_trapezoid_order() {
        let medium = const_medium(1.0, 0.6);
        let res = BeamResolution {
            t_min: 0.5,
            t_max: 1.5,
            n_slices: 3,
            nx: 8,
            nv: 8,
        };
        let eps = 0.25;
        let s = 0.75;
        // nonzero boundary values keep the trapezoid error at genuine O(h^2)
        let f = |x: &[f64], th: &UnitVector| {
            let r2: f64 = x.iter().map(|c| c * c).sum();
            (-r2).exp() * (1.0 + th.components()[2]).powi(2)
        };
        let psi = |x: &[f64], _: &[f64]| (-0.3 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2])).exp();
        let pairing_at = |nodes: usize| {
            continuous_superposition(
                f,
                &[-1.0; 3],
                &[1.0; 3],
                nodes,
                16,
                eps,
                &medium,
                s,
                &res,
            )
            .unwrap()
            .pair(psi)
        };
        let (p1, p2, p3) = (pairing_at(5), pairing_at(9), pairing_at(17));
        let ratio = (p1 - p2) / (p2 - p3);
        assert!(
            (ratio - 4.0).abs() < 1.5,
            "refinement ratio {ratio} (p: {p1} {p2} {p3})"
        );
    }

    #[test]
    fn simple_approx_single_cell_indicator() {
        // an indicator of one small cell becomes a single atom of exact mass
        let eps = 0.8;
        let diam = eps * eps;
        let a_x = diam / (2.0 * 3f64.sqrt());
        let f = move |x: &[f64], th: &UnitVector| {
            if x.iter().all(|c| c.abs() < a_x * 0.49) && th.components()[2] > 0.999 {
                2.0
            } else {
                0.0
            }
        };
        let approx = simple_approx(
            f,
            &[-a_x * 0.5; 3],
            &[a_x * 0.5; 3],
            0.01,
            eps,
            1.0,
            1.0,
            1_000_000,
        )
        .unwrap();
        let active: Vec<_> = approx.atoms.iter().filter(|a| a.weight > 0.0).collect();
        assert_eq!(active.len(), 1);
        let meas = a_x.powi(3) * chart_cell_solid_angle(&[-0.01, -0.01], &[0.01, 0.01], 3);
        assert!((active[0].weight - 2.0 * meas).abs() < 1e-12 * meas);
    }

    #[test]
    fn simple_approx_budget_guard() {
        let f = |_: &[f64], _: &UnitVector| 1.0;
        let err = simple_approx(f, &[-1.0; 3], &[1.0; 3], 0.5, 0.1, 1.0, 1.0, 1000);
        assert!(matches!(
            err,
            Err(SuperposeError::BudgetInfeasible { .. })
        ));
    }

    #[test]
    fn simple_approx_bound_holds_and_tightens() {
        // smooth compactly supported density: the computed distance between
        // the fine histogram and the atoms obeys the constructive bound, and
        // refining cells by 2 at least halves the reported bound
        let (eps, kappa) = (0.75, 1.0);
        let f = |x: &[f64], th: &UnitVector| {
            let r2: f64 = x.iter().map(|c| c * c).sum::<f64>() / 0.09;
            let polar = th.components()[2];
            if r2 < 1.0 && polar > 0.9 {
                (1.0 - r2) * (polar - 0.9) / 0.1
            } else {
                0.0
            }
        };
        let approx = simple_approx(
            f,
            &[-0.3; 3],
            &[0.3; 3],
            0.23, // chart radius of the polar cap
            eps,
            kappa,
            1.0,
            4_000_000,
        )
        .unwrap();
        let fine = phase_histogram(f, &[-0.3; 3], &[0.3; 3], 0.23, 7, 4);
        let spec = MetricSpec::new(kappa);
        let w = w1_kappa(&fine, &approx.measure(3), &spec).unwrap().value;
        let bound = approx.bound_constant * eps * eps * kappa;
        assert!(
            w <= bound,
            "computed distance {w} exceeds constructive bound {bound}"
        );
        let refined = simple_approx(
            f,
            &[-0.3; 3],
            &[0.3; 3],
            0.23,
            eps,
            kappa,
            0.5,
            8_000_000,
        )
        .unwrap();
        assert!(
            refined.bound_constant * 2.0 <= approx.bound_constant * 1.05,
            "refinement did not tighten: {} vs {}",
            refined.bound_constant,
            approx.bound_constant
        );
    }
}

//! Centered n-dimensional discrete Fourier transforms on uniform grids.
//!
//! Conventions: continuous transform fhat(xi) = integral f(x) exp(-i xi.x) dx,
//! inverse f(x) = (2 pi)^-n integral fhat exp(i xi.x) dxi. Grids are centered:
//! axis coordinates are (j - N/2) * step for j = 0..N-1 with N even, and the
//! dual grid is (k - N/2) * (2 pi / (N * step)). Data is row-major with the
//! last axis fastest.

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use std::sync::Arc;

/// A uniform centered grid: per-axis point counts (even) and spacings.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredGrid {
    dims: Vec<usize>,
    step: Vec<f64>,
}

impl CenteredGrid {
    pub fn new(dims: Vec<usize>, step: Vec<f64>) -> Self {
        assert_eq!(dims.len(), step.len());
        assert!(
            dims.iter().all(|n| *n >= 2 && n % 2 == 0),
            "axes must be even"
        );
        assert!(step.iter().all(|h| *h > 0.0));
        Self { dims, step }
    }

    /// Square grid: `axes` axes of `n` points with half-extent `l` (coordinates
    /// span [-l, l - step]).
    pub fn square(axes: usize, n: usize, l: f64) -> Self {
        let step = 2.0 * l / n as f64;
        Self::new(vec![n; axes], vec![step; axes])
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn step(&self) -> &[f64] {
        &self.step
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spatial coordinate of index `i` along `axis`.
    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        (i as f64 - self.dims[axis] as f64 / 2.0) * self.step[axis]
    }

    /// Frequency step along `axis`: 2 pi / (N * step).
    pub fn freq_step(&self, axis: usize) -> f64 {
        2.0 * std::f64::consts::PI / (self.dims[axis] as f64 * self.step[axis])
    }

    /// The dual grid (frequency space) of this grid.
    pub fn dual(&self) -> CenteredGrid {
        let step = (0..self.rank()).map(|a| self.freq_step(a)).collect();
        CenteredGrid::new(self.dims.clone(), step)
    }

    /// Cell volume step[0] * ... * step[n-1].
    pub fn cell_volume(&self) -> f64 {
        self.step.iter().product()
    }

    /// Half-extent along `axis` (coordinates reach [-l, l - step]).
    pub fn half_extent(&self, axis: usize) -> f64 {
        self.dims[axis] as f64 * self.step[axis] / 2.0
    }

    /// Decomposes a flat index into per-axis indices.
    pub fn unflatten(&self, mut flat: usize, out: &mut [usize]) {
        for a in (0..self.rank()).rev() {
            out[a] = flat % self.dims[a];
            flat /= self.dims[a];
        }
    }

    /// Fills `out` with the spatial coordinates of flat index `flat`.
    pub fn coords_of(&self, flat: usize, out: &mut [f64]) {
        let mut idx = [0usize; 8];
        self.unflatten(flat, &mut idx[..self.rank()]);
        for a in 0..self.rank() {
            out[a] = self.coord(a, idx[a]);
        }
    }
}

/// Direction of a centered transform.
#[derive(Clone, Copy, PartialEq)]
enum Dir {
    Forward,
    Inverse,
}

/// In-place centered forward transform: samples of f on `grid` become samples
/// of fhat on `grid.dual()` (Riemann-sum approximation of the integral).
pub fn forward(grid: &CenteredGrid, data: &mut [Complex64]) {
    transform(grid, data, Dir::Forward);
    let scale = grid.cell_volume();
    data.iter_mut().for_each(|z| *z *= scale);
}

/// In-place centered inverse transform: samples of fhat on the dual grid of
/// `grid` become samples of f on `grid` (with the (2 pi)^-n normalization).
pub fn inverse(grid: &CenteredGrid, data: &mut [Complex64]) {
    transform(grid, data, Dir::Inverse);
    let n = grid.rank() as i32;
    let scale = grid.dual().cell_volume() * (2.0 * std::f64::consts::PI).powi(-n);
    data.iter_mut().for_each(|z| *z *= scale);
}

fn transform(grid: &CenteredGrid, data: &mut [Complex64], dir: Dir) {
    assert_eq!(data.len(), grid.len());
    let mut planner = FftPlanner::<f64>::new();
    for axis in 0..grid.rank() {
        let n = grid.dims[axis];
        let plan: Arc<dyn rustfft::Fft<f64>> = match dir {
            Dir::Forward => planner.plan_fft_forward(n),
            Dir::Inverse => planner.plan_fft_inverse(n),
        };
        apply_axis(grid, data, axis, plan);
    }
}

/// Applies a centered 1-D transform along `axis` to every line of the array.
///
/// The centered variant of an even-length DFT is sign modulation before and
/// after the plain FFT plus a global (-1)^(N/2) factor.
fn apply_axis(
    grid: &CenteredGrid,
    data: &mut [Complex64],
    axis: usize,
    plan: Arc<dyn rustfft::Fft<f64>>,
) {
    let n = grid.dims[axis];
    let stride: usize = grid.dims[axis + 1..].iter().product();
    let n_lines = data.len() / n;
    let sign_global = if (n / 2) % 2 == 0 { 1.0 } else { -1.0 };

    let data_ptr = SendPtr(data.as_mut_ptr());
    (0..n_lines).into_par_iter().for_each_init(
        || {
            (
                vec![Complex64::default(); n],
                vec![Complex64::default(); plan.get_inplace_scratch_len()],
            )
        },
        |(buf, scratch), l| {
            let block = l / stride;
            let offset = l % stride;
            let base = block * n * stride + offset;
            let data = data_ptr;
            unsafe {
                for (i, b) in buf.iter_mut().enumerate() {
                    let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                    *b = *data.0.add(base + i * stride) * sign;
                }
            }
            plan.process_with_scratch(buf, scratch);
            unsafe {
                for (i, b) in buf.iter().enumerate() {
                    let sign = if i % 2 == 0 { sign_global } else { -sign_global };
                    *data.0.add(base + i * stride) = *b * sign;
                }
            }
        },
    );
}

/// Raw pointer wrapper for disjoint parallel line access.
#[derive(Clone, Copy)]
struct SendPtr(*mut Complex64);
unsafe impl Send for SendPtr {}
unsafe impl Sync for SendPtr {}

//! Weighted point measures on phase space R^d x S^(d-1): the common currency
//! exchanged between the Monte Carlo solver, the pencil-beam pipeline, and
//! the Wasserstein engine.

use crate::geom::UnitVector;
use serde::{Deserialize, Serialize};

/// A compact spatial window; directions are never restricted.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Window {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Window {
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Window::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(xi, (l, h))| *xi >= *l && *xi <= *h),
            Window::Ball { center, radius } => {
                let d2: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(xi, c)| (xi - c) * (xi - c))
                    .sum();
                d2 <= radius * radius
            }
        }
    }
}

/// Nonnegative weighted atoms (x_i, theta_i, w_i), stored flat.
#[derive(Debug, Clone, Default)]
pub struct PhaseSpaceMeasure {
    d: usize,
    xs: Vec<f64>,
    thetas: Vec<f64>,
    weights: Vec<f64>,
    /// Window this measure was restricted to, when any.
    pub window: Option<Window>,
    /// Mass discarded by window restrictions.
    pub dropped_mass: f64,
}

impl PhaseSpaceMeasure {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn push(&mut self, x: &[f64], theta: &[f64], w: f64) {
        debug_assert_eq!(x.len(), self.d);
        debug_assert_eq!(theta.len(), self.d);
        debug_assert!(w >= 0.0);
        self.xs.extend_from_slice(x);
        self.thetas.extend_from_slice(theta);
        self.weights.push(w);
    }

    pub fn push_unit(&mut self, x: &[f64], theta: &UnitVector, w: f64) {
        self.push(x, theta.components(), w);
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }

    pub fn theta(&self, i: usize) -> &[f64] {
        &self.thetas[i * self.d..(i + 1) * self.d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Pairing < measure, psi > for an evaluable test function.
    pub fn pair<F: Fn(&[f64], &[f64]) -> f64>(&self, psi: F) -> f64 {
        (0..self.len())
            .map(|i| self.weights[i] * psi(self.x(i), self.theta(i)))
            .sum()
    }

    /// Drops atoms with spatial position outside the window, recording the
    /// dropped mass; directions are untouched.
    pub fn restrict_to_window(&self, window: &Window) -> PhaseSpaceMeasure {
        let mut out = PhaseSpaceMeasure::new(self.d);
        out.window = Some(window.clone());
        out.dropped_mass = self.dropped_mass;
        for i in 0..self.len() {
            if window.contains(self.x(i)) {
                out.push(self.x(i), self.theta(i), self.weights[i]);
            } else {
                out.dropped_mass += self.weights[i];
            }
        }
        out
    }

    /// Merges another measure of the same dimension into this one.
    pub fn extend(&mut self, other: &PhaseSpaceMeasure) {
        assert_eq!(self.d, other.d);
        self.xs.extend_from_slice(&other.xs);
        self.thetas.extend_from_slice(&other.thetas);
        self.weights.extend_from_slice(&other.weights);
        self.dropped_mass += other.dropped_mass;
    }

    /// Scales every weight by a nonnegative factor.
    pub fn scale(&mut self, c: f64) {
        assert!(c >= 0.0);
        for w in &mut self.weights {
            *w *= c;
        }
        self.dropped_mass *= c;
    }

    /// Removes atoms of negligible weight (below `floor` times total mass).
    pub fn prune(&mut self, floor: f64) {
        let cutoff = floor * self.total_mass();
        let mut out = PhaseSpaceMeasure::new(self.d);
        for i in 0..self.len() {
            if self.weights[i] > cutoff {
                out.push(self.x(i), self.theta(i), self.weights[i]);
            } else {
                out.dropped_mass += self.weights[i];
            }
        }
        out.window = self.window.clone();
        out.dropped_mass += self.dropped_mass;
        *self = out;
    }
}

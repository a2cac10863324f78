//! Numerical laboratory for forward-peaked particle transport.
//!
//! The crate pairs a closed-form spectral solver for the fractional Fermi
//! pencil-beam equation with a Monte Carlo solver for the stationary
//! radiative transfer equation at finite anisotropy, a ballistic
//! (scattering-free) solver, and superposition machinery for broad sources.
//! Approximation quality between the resulting phase-space measures is
//! quantified with a kappa-scaled bounded-Lipschitz 1-Wasserstein distance
//! solved as an exact unbalanced-transport LP.

pub mod ballistic;
pub mod beam;
pub mod fftnd;
pub mod geom;
pub mod harness;
pub mod kernels;
pub mod mc;
pub mod measure;
pub mod medium;
pub mod pbg;
pub mod quad;
pub mod superpose;
pub mod w1;

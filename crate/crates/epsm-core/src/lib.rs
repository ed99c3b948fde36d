//! Linear response of insulating crystals in a plane-wave Bloch basis.
//!
//! The crate computes, for a periodic one-body model -1/2 Laplacian + V_per:
//!
//! * Bloch band structures on a fixed plane-wave ball (`bloch`)
//! * the static independent-particle response and its Coulomb-dressed
//!   operator, sum-over-states and contour-integral routes (`response`)
//! * microscopic dielectric matrices and the macroscopic dielectric
//!   tensor by two independent routes (`dielectric`)
//! * self-consistent screening of a small charged defect in a supercell
//!   (`defect`)
//! * the homogenized effective potential of a spread-out defect and its
//!   convergence to the macroscopic dielectric limit (`homogenization`)
//!
//! Units are Hartree atomic units everywhere. Spin is left out; "N
//! electrons per cell" means N occupied bands.

pub mod error;
pub mod vec3;

pub mod bloch;
pub mod defect;
pub mod dielectric;
pub mod homogenization;
pub mod lattice;
pub mod response;
pub mod selftest;

pub use error::{Error, Result};

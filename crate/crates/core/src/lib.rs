//! Deformations of Minkowski norms.
//!
//! A base norm F on R^n is deformed through linearly independent 1-forms
//! beta_1..beta_p and a positive profile phi of p variables into
//! Fbar = F * phi(beta_1/F, ..., beta_p/F). The crate provides exact
//! derivative tensors of both norms via truncated jets, closed-form
//! transformed tensors, validity checking of the deformed norm, algebra on
//! deformations (composition, inversion, iteration), torsion-based
//! classification and indicatrix geometry with exporters.

pub mod analysis;
pub mod deform;
pub mod error;
pub mod geometry;
pub mod jets;
pub mod norms;
pub mod phi;
pub mod sampling;
pub mod tensors;

pub use deform::{
    cartan_bar_formula, compose, difference_norm, gbar_formula, gbar_rank_form, half_f2_partials,
    invert, invert_eval, invert_phi, iterate, psi_sequence, rho_functions, validity_check,
    DeformationSpec, DifferenceNorm, IterationResult, RhoValues, ValidityReport,
};
pub use error::{Error, Result};
pub use jets::Jet;
pub use norms::{Minkowski, Norm, OneForm};
pub use phi::{builtin, parse, PhiExpr};
pub use tensors::{SymTensor2, SymTensor3};

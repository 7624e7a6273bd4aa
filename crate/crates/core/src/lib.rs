//! Expanding self-coverings of mapping tori.
//!
//! Builds the fiber-expanding covering `p_k`, the base-expanding covering
//! `q_m` and their composite `f = q_m ∘ p_k` on the mapping torus of a torus
//! diffeomorphism isotopic to the identity, then measures the constants that
//! make `f` expanding: vertical expansion, the horizontal coupling bound, a
//! cone-type Finsler norm and an adapted Riemannian metric.

pub mod cli;
pub mod coverings;
pub mod error;
pub mod expansion;
pub mod fields;
pub mod lifting;
pub mod linalg;
pub mod manifolds;
pub mod torus_maps;

pub use error::{Error, Result};

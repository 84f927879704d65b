//! Two-scale flow toolkit for doubly perforated porous media.
//!
//! The crate builds periodic cell geometries with solid obstacles at two
//! scales, provides a staggered-grid calculus and unfolding operators,
//! solves the fine-scale Bingham/Stokes variational problems, extracts
//! effective Darcy laws from coupled cell problems and solves the
//! homogenized macroscopic problem.

pub mod cell;
pub mod darcy;
pub mod error;
pub mod fields;
pub mod fine;
pub mod geometry;
pub mod io;
pub mod saddle;
pub mod study;
pub mod unfolding;

pub use error::Error;
